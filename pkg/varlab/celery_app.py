"""Celery application that runs presets off the request path."""
from __future__ import annotations

import os

from celery import Celery

CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", "redis://localhost:6379/0")
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", CELERY_BROKER_URL)


def _flag(name: str) -> bool:
    return os.getenv(name, "false").lower() in {"1", "true", "yes"}


celery_app = Celery("varlab", broker=CELERY_BROKER_URL, backend=CELERY_RESULT_BACKEND, include=["varlab.tasks"])
celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    # one preset per worker process at a time, acked once it finishes
    worker_prefetch_multiplier=1,
    task_acks_late=True,
    task_track_started=True,
    task_always_eager=_flag("CELERY_TASK_ALWAYS_EAGER"),
)
