"""Run presets into results directories and archives, with a cached ground-truth store."""
from __future__ import annotations

import json
import logging
import os
import zipfile
from datetime import datetime, timezone
from pathlib import Path
from typing import TypedDict

import numpy as np
from sqlalchemy.orm import Session

from .estimators import WeightingMode
from .experiments import ExperimentConfig, run_experiment
from .mdp import Policy, TabularMdp, builtin
from .models import TruthRecord
from .oracles import GroundTruth, TruthMethod, brute_force_variance, exact_truth, exact_value, monte_carlo_moments
from .reporting import ReportSummary, truth_from_document, truth_to_document, write_report
from .schemas import mdp_fingerprint

DATA_ROOT_ENV = "VARLAB_DATA_ROOT"
DEFAULT_DATA_ROOT = Path("data")
MONTE_CARLO_STEPS = 1_000_000
BRUTE_FORCE_DEPTH = 12


class PipelineResult(TypedDict):
    report_directory: str
    archive_path: str
    summary: ReportSummary


def get_data_root() -> Path:
    """Return the base directory that stores results and archives."""
    root = Path(os.getenv(DATA_ROOT_ENV, DEFAULT_DATA_ROOT))
    if not root.is_absolute():
        root = Path.cwd() / root
    root.mkdir(parents=True, exist_ok=True)
    return root


def reports_root() -> Path:
    path = get_data_root() / "reports"
    path.mkdir(parents=True, exist_ok=True)
    return path


def archives_root() -> Path:
    path = get_data_root() / "archives"
    path.mkdir(parents=True, exist_ok=True)
    return path


def archive_folder(folder: Path, archive_path: Path) -> Path:
    archive_path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(archive_path, "w", zipfile.ZIP_DEFLATED) as archive:
        for path in sorted(folder.rglob("*")):
            if path.is_file():
                archive.write(path, path.relative_to(folder))
    return archive_path


def process_preset(*, job_id: str, config: ExperimentConfig, workers: int | None = None) -> PipelineResult:
    """Run ``config`` and persist its report folder and zip archive under the data root."""
    reports_dir = reports_root() / job_id
    started_at = datetime.now(timezone.utc)
    result = run_experiment(config, workers=workers)
    summary = write_report(result, reports_dir, started_at=started_at, finished_at=datetime.now(timezone.utc))
    archive_path = archive_folder(reports_dir, archives_root() / f"{job_id}.zip")
    return PipelineResult(
        report_directory=str(reports_dir),
        archive_path=str(archive_path),
        summary=summary,
    )


def compute_truth(
    mdp: TabularMdp,
    mu: Policy,
    pi: Policy,
    mode: WeightingMode,
    method: TruthMethod,
    *,
    seed: int = 0,
    steps: int = MONTE_CARLO_STEPS,
    depth: int = BRUTE_FORCE_DEPTH,
) -> GroundTruth:
    """Ground truth for ``(mdp, mu, pi)`` under ``mode`` by the requested method."""
    target = mu if mode is WeightingMode.ON_POLICY else pi
    logging.info("Ground truth for %s (%s) via %s", mdp.name, mode.value, method.value)
    if method is TruthMethod.LINEAR_SOLVE:
        return exact_truth(mdp, mu, pi, mode)
    j = exact_value(mdp, target)
    if method is TruthMethod.MONTE_CARLO:
        return monte_carlo_moments(mdp, mu, pi, j, mode, steps, seed)
    if mode is WeightingMode.OFF_POLICY_RETURN_VARIANCE:
        raise ValueError("brute force enumerates target-policy paths only; use linear-solve or monte-carlo")
    enumerated = brute_force_variance(mdp, target, j, depth)
    return GroundTruth(
        j=enumerated.mean,
        v=enumerated.variance,
        method=TruthMethod.BRUTE_FORCE,
        second_moment=enumerated.second_moment,
        extras={"tail_mass": enumerated.tail_mass},
    )


def load_or_compute_truth(session: Session, mdp_name: str, mode: WeightingMode, method: TruthMethod = TruthMethod.LINEAR_SOLVE) -> GroundTruth:
    """Cached :func:`compute_truth`, keyed by the MDP document fingerprint."""
    mdp, mu, pi = builtin(mdp_name)
    fingerprint = mdp_fingerprint(mdp, mu, pi)
    record = (
        session.query(TruthRecord)
        .filter_by(mdp_name=mdp_name, mode=mode.value, method=method.value, fingerprint=fingerprint)
        .first()
    )
    if record is not None:
        return truth_from_document(json.loads(record.payload))
    truth = compute_truth(mdp, mu, pi, mode, method)
    session.add(
        TruthRecord(
            mdp_name=mdp_name,
            mode=mode.value,
            method=method.value,
            fingerprint=fingerprint,
            payload=json.dumps(truth_to_document(truth)),
        )
    )
    session.commit()
    return truth


def truth_payload(truth: GroundTruth) -> dict:
    payload = truth_to_document(truth)
    for key, values in truth.extras.items():
        payload[key] = [None if not np.isfinite(x) else float(x) for x in np.asarray(values, dtype=float)]
    return payload
