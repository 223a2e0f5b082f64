"""Shared pytest configuration: isolated database, eager Celery and the slow marker."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

os.environ.setdefault("DATABASE_URL", f"sqlite:///{Path(tempfile.mkdtemp(prefix='varlab-tests-')) / 'varlab.db'}")
os.environ.setdefault("CELERY_TASK_ALWAYS_EAGER", "1")

import hypothesis
import pytest

hypothesis.settings.register_profile("varlab", deadline=None, max_examples=40)
hypothesis.settings.load_profile("varlab")

RUN_SLOW_ENV = "VARLAB_RUN_SLOW"


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: full-length acceptance reproductions (set VARLAB_RUN_SLOW=1)")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if os.getenv(RUN_SLOW_ENV, "").lower() in {"1", "true", "yes"}:
        return
    skip_slow = pytest.mark.skip(reason=f"set {RUN_SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolate_matplotlib_cache(tmp_path_factory: pytest.TempPathFactory, monkeypatch: pytest.MonkeyPatch) -> None:
    """Force matplotlib to use a writable cache directory during tests."""
    cache_dir = tmp_path_factory.mktemp("mpl-cache")
    monkeypatch.setenv("MPLCONFIGDIR", str(cache_dir))


@pytest.fixture()
def data_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    from varlab.pipeline import DATA_ROOT_ENV

    root = tmp_path / "data"
    monkeypatch.setenv(DATA_ROOT_ENV, str(root))
    return root
