"""SQLAlchemy ORM models."""
from __future__ import annotations

from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint

from .database import Base


class Job(Base):
    __tablename__ = "jobs"

    id = Column(String, primary_key=True, index=True)
    preset = Column(String, nullable=False)
    config = Column(Text, nullable=False)
    status = Column(String, nullable=False, default="queued")
    result_path = Column(String, nullable=True)
    report_directory = Column(String, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)
    started_at = Column(DateTime, nullable=True)
    completed_at = Column(DateTime, nullable=True)
    summary = Column(Text, nullable=True)


class TruthRecord(Base):
    __tablename__ = "truth_cache"
    __table_args__ = (UniqueConstraint("mdp_name", "mode", "method", "fingerprint", name="uq_truth_key"),)

    id = Column(Integer, primary_key=True, index=True)
    mdp_name = Column(String, nullable=False)
    mode = Column(String, nullable=False)
    method = Column(String, nullable=False)
    fingerprint = Column(String(64), nullable=False)
    payload = Column(Text, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)
