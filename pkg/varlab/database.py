"""SQLAlchemy engine and sessions for the job table and the ground-truth cache."""
from __future__ import annotations

import os
from typing import Iterator

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./varlab.db")

# sessions are opened from the FastAPI threadpool and from eager tasks
engine = create_engine(
    DATABASE_URL,
    connect_args={"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {},
)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


def create_schema() -> None:
    """Create the ``jobs`` and ``truth_cache`` tables if they are missing."""
    from . import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=engine)


def get_session() -> Iterator[Session]:
    session = SessionLocal()
    try:
        yield session
    finally:
        session.close()
