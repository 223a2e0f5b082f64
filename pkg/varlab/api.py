"""FastAPI application exposing preset runs and ground truth."""
from __future__ import annotations

import json
import logging
import mimetypes
import shutil
import uuid
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from fastapi import Depends, FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field
from sqlalchemy.orm import Session

from .database import create_schema, get_session
from .estimators import WeightingMode
from .experiments import ConfigurationError
from .mdp import BUILTIN_MDPS
from .models import Job
from .oracles import TruthMethod
from .pipeline import load_or_compute_truth, truth_payload
from .scenarios import config_to_document, preset, scenario_catalog
from .tasks import run_preset_task

app = FastAPI(title="VarLab API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

ALLOWED_ASSET_EXTENSIONS = {".svg", ".csv", ".json"}


class RunRequest(BaseModel):
    preset: str = Field(min_length=1)
    seed: Optional[int] = None
    runs: Optional[int] = Field(default=None, ge=1)
    run_length: Optional[int] = Field(default=None, ge=1)


def _serialize_job(job: Job) -> Dict[str, Any]:
    """Convert a job ORM instance to a JSON-serialisable dict."""
    return {
        "job_id": job.id,
        "preset": job.preset,
        "status": job.status,
        "config": json.loads(job.config) if job.config else None,
        "created_at": job.created_at.isoformat() if job.created_at else None,
        "updated_at": job.updated_at.isoformat() if job.updated_at else None,
        "started_at": job.started_at.isoformat() if job.started_at else None,
        "completed_at": job.completed_at.isoformat() if job.completed_at else None,
        "result_path": job.result_path,
        "report_directory": job.report_directory,
        "error": job.error,
        "summary": json.loads(job.summary) if job.summary else None,
    }


def _get_job(session: Session, job_id: str) -> Job:
    job = session.query(Job).filter(Job.id == job_id).first()
    if job is None:
        raise HTTPException(status_code=404, detail="Job not found")
    return job


def _completed_report_dir(job: Job) -> Path:
    if job.status != "completed" or not job.report_directory:
        raise HTTPException(status_code=400, detail="Job not completed")
    report_dir = Path(job.report_directory)
    if not report_dir.exists():
        raise HTTPException(status_code=404, detail="Report directory missing")
    return report_dir


def _safe_remove(paths: Iterable[Optional[Path]]) -> None:
    for path in paths:
        try:
            if not path or not path.exists():
                continue
            if path.is_dir():
                shutil.rmtree(path)
            else:
                path.unlink()
        except Exception as exc:  # noqa: BLE001
            logging.warning("Failed to remove %s: %s", path, exc)


@app.on_event("startup")
def _create_schema() -> None:
    create_schema()


@app.get("/presets")
def list_presets() -> Dict[str, Any]:
    return {"presets": {name: config_to_document(cfg) for name, cfg in scenario_catalog().items()}}


@app.post("/runs", status_code=202)
def submit_run(payload: RunRequest, session: Session = Depends(get_session)):
    try:
        config = preset(payload.preset)
        overrides: Dict[str, Any] = {}
        if payload.seed is not None:
            overrides["base_seed"] = payload.seed
        if payload.runs is not None:
            overrides["num_runs"] = payload.runs
        if payload.run_length is not None:
            overrides["run_length"] = payload.run_length
            overrides["steady_state_window"] = min(config.steady_state_window, payload.run_length)
        config = config.replace(**overrides)
        config.validate()
    except ConfigurationError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc

    job_id = uuid.uuid4().hex
    job = Job(id=job_id, preset=payload.preset, config=json.dumps(config_to_document(config)), status="queued")
    session.add(job)
    session.commit()

    run_preset_task.delay(job_id)
    return {"job_id": job_id, "status": "queued", "detail_path": f"/runs/{job_id}"}


@app.get("/runs", response_model=List[Dict[str, Any]])
def list_jobs(limit: int = 25, session: Session = Depends(get_session)):
    jobs = session.query(Job).order_by(Job.created_at.desc()).limit(limit).all()
    return [_serialize_job(job) for job in jobs]


@app.get("/runs/{job_id}")
def get_job_status(job_id: str, session: Session = Depends(get_session)):
    return _serialize_job(_get_job(session, job_id))


@app.get("/runs/{job_id}/result")
def download_result(job_id: str, session: Session = Depends(get_session)):
    job = _get_job(session, job_id)
    if job.status != "completed" or not job.result_path:
        raise HTTPException(status_code=400, detail="Job not completed")
    archive_path = Path(job.result_path)
    if not archive_path.exists():
        raise HTTPException(status_code=404, detail="Result missing")
    return FileResponse(archive_path, media_type="application/zip", filename=archive_path.name)


@app.get("/runs/{job_id}/assets")
def list_job_assets(job_id: str, session: Session = Depends(get_session)):
    report_dir = _completed_report_dir(_get_job(session, job_id))
    assets: List[Dict[str, Any]] = []
    for path in report_dir.rglob("*"):
        if not path.is_file() or path.suffix.lower() not in ALLOWED_ASSET_EXTENSIONS:
            continue
        assets.append(
            {
                "name": path.relative_to(report_dir).as_posix(),
                "size": path.stat().st_size,
                "content_type": mimetypes.guess_type(path.name)[0] or "application/octet-stream",
            }
        )
    assets.sort(key=lambda item: item["name"])
    return {"assets": assets}


@app.get("/runs/{job_id}/asset")
def get_job_asset(job_id: str, name: str = Query(..., min_length=1), session: Session = Depends(get_session)):
    report_dir = _completed_report_dir(_get_job(session, job_id))

    requested = Path(name)
    if requested.is_absolute() or any(part == ".." for part in requested.parts):
        raise HTTPException(status_code=400, detail="Invalid asset path")

    file_path = (report_dir / requested).resolve()
    if report_dir.resolve() not in file_path.parents:
        raise HTTPException(status_code=400, detail="Invalid asset path")
    if not file_path.exists() or not file_path.is_file():
        raise HTTPException(status_code=404, detail="Asset not found")
    if file_path.suffix.lower() not in ALLOWED_ASSET_EXTENSIONS:
        raise HTTPException(status_code=400, detail="Unsupported asset type")

    media_type = mimetypes.guess_type(file_path.name)[0] or "application/octet-stream"
    return FileResponse(file_path, media_type=media_type, filename=file_path.name)


@app.delete("/runs/{job_id}")
def delete_job(job_id: str, session: Session = Depends(get_session)):
    job = _get_job(session, job_id)
    report_dir = Path(job.report_directory) if job.report_directory else None
    archive_path = Path(job.result_path) if job.result_path else None

    session.delete(job)
    session.commit()

    _safe_remove((report_dir, archive_path))
    return {"job_id": job_id, "status": "deleted"}


@app.get("/truth/{mdp_name}")
def get_truth(
    mdp_name: str,
    mode: WeightingMode = WeightingMode.ON_POLICY,
    session: Session = Depends(get_session),
):
    if mdp_name not in BUILTIN_MDPS:
        raise HTTPException(status_code=404, detail="Unknown MDP")
    truth = load_or_compute_truth(session, mdp_name, mode, TruthMethod.LINEAR_SOLVE)
    return {"mdp_name": mdp_name, "mode": mode.value, "truth": truth_payload(truth)}
