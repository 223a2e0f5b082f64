"""Results documents, CSV curves and SVG learning-curve figures."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from cycler import cycler

from . import __version__
from .experiments import RunResult, mse, steady_state_points, update_magnitude
from .oracles import GroundTruth, TruthMethod
from .scenarios import config_to_document
from .schemas import SCHEMA_VERSION, canonical_hash

plt.style.use("seaborn-v0_8-darkgrid")
plt.rcParams.update(
    {
        "figure.facecolor": "#0f172a",
        "axes.facecolor": "#091125",
        "axes.edgecolor": "#1e293b",
        "axes.grid": True,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "grid.color": "#1e293b",
        "grid.alpha": 0.55,
        "text.color": "#e2e8f0",
        "axes.labelcolor": "#cbd5f5",
        "xtick.color": "#cbd5f5",
        "ytick.color": "#cbd5f5",
        "font.size": 11,
        "svg.hashsalt": "varlab",
        "svg.fonttype": "path",
        "axes.prop_cycle": cycler(color=["#38bdf8", "#a855f7", "#22c55e", "#f97316", "#facc15"]),
    }
)

ESTIMATOR_STYLE = {
    "direct": ("Direct", "#38bdf8"),
    "vtd": ("VTD", "#a855f7"),
    "value": ("Value", "#22c55e"),
    "second_moment": ("Second moment", "#f97316"),
}
TRUTH_COLOR = "#facc15"
CSV_COLUMNS = ["time", "state", "estimator", "mean", "std", "truth"]
CSV_FLOAT_FORMAT = "%.17g"


@dataclass
class ReportSummary:
    preset: str
    mdp_name: str
    mode: str
    num_runs: int
    run_length: int
    summed_mse: dict[str, float]
    update_magnitudes: dict[str, float]
    files: list[str] = field(default_factory=list)


def _clean(value: object) -> object:
    """NaN/inf become null so documents stay strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _clean(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(item) for item in value]
    return value


def _array(values: np.ndarray | None) -> list | None:
    if values is None:
        return None
    return _clean(np.asarray(values, dtype=float).tolist())  # type: ignore[return-value]


def truth_to_document(truth: GroundTruth) -> dict:
    return {
        "method": truth.method.value,
        "j": _array(truth.j),
        "v": _array(truth.v),
        "std_err": _array(truth.std_err),
        "second_moment": _array(truth.second_moment),
        "missing": [bool(flag) for flag in np.asarray(truth.missing)],
    }


def truth_from_document(payload: dict) -> GroundTruth:
    def floats(key: str) -> np.ndarray | None:
        values = payload.get(key)
        if values is None:
            return None
        return np.array([np.nan if item is None else item for item in values], dtype=float)

    return GroundTruth(
        j=floats("j"),
        v=floats("v"),
        method=TruthMethod(payload.get("method", TruthMethod.LINEAR_SOLVE.value)),
        std_err=floats("std_err"),
        second_moment=floats("second_moment"),
        missing=np.array(payload["missing"], dtype=bool) if payload.get("missing") is not None else None,
    )


def build_results_document(result: RunResult, started_at: datetime | None = None, finished_at: datetime | None = None) -> dict:
    """Everything the CSV and SVG emitters render, plus the config and its hash."""
    config = config_to_document(result.config)
    finished_at = finished_at or datetime.now(timezone.utc)
    started_at = started_at or finished_at
    report = mse(result)
    document = {
        "schema_version": SCHEMA_VERSION,
        "metadata": {
            "artifact_version": __version__,
            "config_hash": canonical_hash(config),
            "base_seed": result.config.base_seed,
            "started_at": started_at.isoformat(),
            "finished_at": finished_at.isoformat(),
        },
        "config": config,
        "truth": truth_to_document(result.truth),
        "curves": {
            name: {
                "times": result.times.tolist(),
                "mean": _array(result.mean[name]),
                "std": _array(result.std[name]),
                "truth": _array(result.truth_for(name)),
            }
            for name in sorted(result.estimates)
        },
        "final_tables": {name: _array(values[:, -1, :]) for name, values in sorted(result.estimates.items())},
        "mse": {
            "window": steady_state_points(result.config, result.times.size),
            "per_state": {name: _array(values) for name, values in report.per_state.items()},
            "summed": _clean(report.summed),
        },
        "update_magnitudes": _clean(update_magnitude(result)),
    }
    if result.step_sizes:
        document["step_sizes"] = {
            "times": result.times[1:].tolist(),
            "mean": {name: _array(values.mean(axis=0)) for name, values in sorted(result.step_sizes.items())},
        }
    return document


def verify_results_document(document: dict) -> list[str]:
    """Problems with a results document; empty when the hash and curve shapes check out."""
    problems: list[str] = []
    expected = canonical_hash(document["config"])
    if document["metadata"].get("config_hash") != expected:
        problems.append("config hash does not match the embedded config")
    num_states = len(document["truth"]["v"])
    for name, curve in document["curves"].items():
        for row in curve["mean"]:
            if len(row) > num_states:
                problems.append(f"curve {name} references states beyond {num_states}")
                break
    return problems


def write_results_document(path: Path, document: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, allow_nan=False)
    return path


def load_results_document(path: Path) -> dict:
    with path.open("r", encoding="utf-8") as handle:
        document = json.load(handle)
    problems = verify_results_document(document)
    if problems:
        raise ValueError(f"{path}: " + "; ".join(problems))
    return document


def curve_frame(result: RunResult, estimators: Iterable[str] | None = None) -> pd.DataFrame:
    """Long-form aggregate curves ordered by time, then state, then estimator name."""
    names = sorted(estimators if estimators is not None else result.estimates)
    frames = []
    for name in names:
        mean = result.mean[name]
        points, states = mean.shape
        frames.append(
            pd.DataFrame(
                {
                    "time": np.repeat(result.times, states),
                    "state": np.tile(np.arange(states), points),
                    "estimator": name,
                    "mean": mean.ravel(),
                    "std": result.std[name].ravel(),
                    "truth": np.tile(result.truth_for(name), points),
                }
            )
        )
    frame = pd.concat(frames, ignore_index=True)
    return frame.sort_values(["time", "state", "estimator"], kind="stable").reset_index(drop=True)[CSV_COLUMNS]


def emit_csv(result: RunResult, path: Path, estimators: Iterable[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(result, estimators).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def read_csv_curves(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(mean, std) arrays of shape (times, states) for every estimator in a curves CSV."""
    frame = pd.read_csv(path, float_precision="round_trip")
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, group in frame.groupby("estimator", sort=True):
        mean = group.pivot(index="time", columns="state", values="mean").to_numpy()
        std = group.pivot(index="time", columns="state", values="std").to_numpy()
        curves[str(name)] = (mean, std)
    return curves


def emit_svg_curves(result: RunResult, truth: GroundTruth, prefix: Path) -> list[Path]:
    """One SVG per state: mean ± std band for each variance estimator and the dashed truth line."""
    names = result.variance_estimators
    if not names or result.times.size == 0:
        raise ValueError("no variance curves to plot")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for state in range(result.num_states):
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for name in names:
            label, color = ESTIMATOR_STYLE[name]
            mean = result.mean[name][:, state]
            std = result.std[name][:, state]
            ax.fill_between(result.times, mean - std, mean + std, color=color, alpha=0.25, linewidth=0)
            ax.plot(result.times, mean, color=color, linewidth=1.6, label=label, marker="o", markevery=[mean.size - 1])
        ax.axhline(truth.v[state], color=TRUTH_COLOR, linestyle="--", linewidth=1.2, label="True variance")
        ax.set_title(f"{result.config.name}: state {state}", fontsize=14, color="#f8fafc", pad=14)
        ax.set_xlabel("Episodes" if result.episodic else "Timesteps")
        ax.set_ylabel("Variance estimate")
        ax.legend(loc="best", frameon=False)
        ax.set_axisbelow(True)
        fig.tight_layout()
        path = prefix.parent / f"{prefix.name}state{state}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def emit_step_size_svg(result: RunResult, path: Path) -> Path | None:
    """Average effective ADADELTA step size per logged interval, one line per estimator."""
    if not result.step_sizes:
        return None
    fig, ax = plt.subplots(figsize=(9.5, 4.5))
    for name, values in sorted(result.step_sizes.items()):
        label, color = ESTIMATOR_STYLE[name]
        ax.plot(result.times[1:], values.mean(axis=0), color=color, linewidth=1.6, label=label)
    ax.set_yscale("log")
    ax.set_title("Average step size", fontsize=14, color="#f8fafc", pad=14)
    ax.set_xlabel("Episodes" if result.episodic else "Timesteps")
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_report(
    result: RunResult,
    output_folder: Path,
    *,
    started_at: datetime | None = None,
    finished_at: datetime | None = None,
) -> ReportSummary:
    """Write results.json, one CSV per estimator and one SVG per state into ``output_folder``."""
    output_folder.mkdir(parents=True, exist_ok=True)
    document = build_results_document(result, started_at, finished_at)
    files = [write_results_document(output_folder / "results.json", document)]
    for name in sorted(result.estimates):
        files.append(emit_csv(result, output_folder / f"curves_{name}.csv", [name]))
    if result.variance_estimators and result.times.size:
        files.extend(emit_svg_curves(result, result.truth, output_folder / "variance_"))
    step_plot = emit_step_size_svg(result, output_folder / "step_sizes.svg")
    if step_plot is not None:
        files.append(step_plot)
    logging.info("Wrote %d report files to %s", len(files), output_folder)
    return ReportSummary(
        preset=result.config.name,
        mdp_name=result.config.mdp_name,
        mode=result.config.mode.value,
        num_runs=result.num_runs,
        run_length=result.config.run_length,
        summed_mse=document["mse"]["summed"],
        update_magnitudes=document["update_magnitudes"],
        files=[path.name for path in files],
    )


def summary_payload(summary: ReportSummary) -> dict:
    return asdict(summary)
