"""Experiment configuration, lockstep run orchestration and the metrics computed from runs."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from multiprocessing import Pool
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd

from .estimators import (
    AdadeltaState,
    ConstantStep,
    DirectVar,
    StepSize,
    ValueTd,
    VtdEstimator,
    WeightingMode,
    direct_step,
    td_error,
    value_step,
    vtd_step,
    vtd_variance,
)
from .mdp import LockstepSampler, MdpError, Policy, TabularMdp, run_streams, validate_mdp
from .oracles import GroundTruth, exact_truth
from .schemas import resolve_mdp

WORKERS_ENV = "VARLAB_WORKERS"
MAGNITUDE_COLUMNS = {"value": "Value", "second_moment": "Snd Mmnt", "vtd": "VTD", "direct": "Direct"}


class ConfigurationError(ValueError):
    """An experiment configuration that cannot be run."""


class Estimators(str, Enum):
    DIRECT = "direct"
    VTD = "vtd"
    BOTH = "both"

    @property
    def direct(self) -> bool:
        return self in (Estimators.DIRECT, Estimators.BOTH)

    @property
    def vtd(self) -> bool:
        return self in (Estimators.VTD, Estimators.BOTH)


class ValueInit(str, Enum):
    ZERO = "zero"
    TRUTH = "truth"
    TRUTH_PLUS_ERROR = "truth_plus_error"


class VarianceInit(str, Enum):
    ZERO = "zero"
    TRUTH = "truth"


@dataclass(frozen=True)
class AdadeltaSpec:
    decay: float = 0.99
    epsilon: float = 1e-6


StepSpec = Union[float, AdadeltaSpec]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; identical configs give bit-identical results.

    ``run_length`` and ``steady_state_window`` count episodes on episodic MDPs
    and timesteps on continuing ones; ``log_every`` uses the same unit.
    """

    name: str = "custom"
    mdp_name: str = "chain"
    mode: WeightingMode = WeightingMode.ON_POLICY
    alpha: StepSpec = 0.001
    alpha_bar: StepSpec = 0.001
    kappa: float = 0.0
    kappa_bar: float = 0.0
    estimators: Estimators = Estimators.BOTH
    num_runs: int = 30
    run_length: int = 20_000
    base_seed: int = 0
    value_init: ValueInit = ValueInit.ZERO
    err_ratio: float = 0.0
    variance_init: VarianceInit = VarianceInit.ZERO
    value_frozen: bool = False
    log_every: int = 1
    steady_state_window: int = 1000
    description: str = ""

    def validate(self) -> None:
        if self.num_runs < 1:
            raise ConfigurationError(f"{self.name}: num_runs must be at least 1")
        if self.run_length < 0:
            raise ConfigurationError(f"{self.name}: run_length must be non-negative")
        if self.log_every < 1:
            raise ConfigurationError(f"{self.name}: log_every must be at least 1")
        if self.err_ratio < 0:
            raise ConfigurationError(f"{self.name}: err_ratio must be non-negative")
        if self.steady_state_window < 1 or self.steady_state_window > max(self.run_length, 1):
            raise ConfigurationError(
                f"{self.name}: steady_state_window {self.steady_state_window} exceeds run_length {self.run_length}"
            )
        for label, spec in (("alpha", self.alpha), ("alpha_bar", self.alpha_bar)):
            if not isinstance(spec, AdadeltaSpec) and not 0.0 <= float(spec) <= 1.0:
                raise ConfigurationError(f"{self.name}: {label} must lie in [0, 1]")
        if not (0.0 <= self.kappa <= 1.0 and 0.0 <= self.kappa_bar <= 1.0):
            raise ConfigurationError(f"{self.name}: kappa and kappa_bar must lie in [0, 1]")

    def replace(self, **changes: object) -> "ExperimentConfig":
        return replace(self, **changes)

    @property
    def uses_adadelta(self) -> bool:
        return isinstance(self.alpha, AdadeltaSpec) or isinstance(self.alpha_bar, AdadeltaSpec)


def load_problem(cfg: ExperimentConfig) -> tuple[TabularMdp, Policy, Policy]:
    """Resolve and validate the MDP of ``cfg``; returns ``(mdp, mu, evaluated policy)``.

    On-policy runs evaluate the behavior policy itself.
    """
    try:
        mdp, mu, pi = resolve_mdp(cfg.mdp_name)
    except (MdpError, OSError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    problems = validate_mdp(mdp, pi, mu)
    if problems:
        raise ConfigurationError(f"{cfg.mdp_name}: " + "; ".join(problems))
    target = mu if cfg.mode is WeightingMode.ON_POLICY else pi
    return mdp, mu, target


def experiment_truth(cfg: ExperimentConfig) -> GroundTruth:
    mdp, mu, pi = resolve_mdp(cfg.mdp_name)
    logging.info("Ground truth for %s (%s) via %s", cfg.mdp_name, cfg.mode.value, "linear solve")
    return exact_truth(mdp, mu, pi, cfg.mode)


def inject_value_error(j: np.ndarray, err_ratio: float, v_truth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """J(s) = j(s) + u(s), u ~ Uniform[−ζ, ζ] with ζ = max|v|·err_ratio."""
    if err_ratio < 0:
        raise ConfigurationError("err_ratio must be non-negative")
    zeta = float(np.max(np.abs(v_truth))) * err_ratio
    j = np.asarray(j, dtype=float)
    if zeta == 0.0:
        return j.copy()
    return j + rng.uniform(-zeta, zeta, size=j.shape)


def _step_size(spec: StepSpec, runs: int, num_states: int) -> StepSize:
    if isinstance(spec, AdadeltaSpec):
        return AdadeltaState.zeros(runs, num_states, spec.decay, spec.epsilon)
    return ConstantStep(float(spec))


@dataclass
class RunResult:
    """Per-run logs of every estimator plus their cross-run aggregates.

    ``estimates[name]`` is (runs, logged_times, states) for ``value`` (J),
    ``second_moment`` (M), ``direct`` (V) and ``vtd`` (M − J²). Aggregates use
    the population standard deviation over runs.
    """

    config: ExperimentConfig
    truth: GroundTruth
    times: np.ndarray
    estimates: dict[str, np.ndarray]
    update_rates: dict[str, np.ndarray]
    step_sizes: dict[str, np.ndarray] = field(default_factory=dict)
    episodic: bool = False
    mean: dict[str, np.ndarray] = field(init=False)
    std: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self) -> None:
        self.mean = {name: values.mean(axis=0) for name, values in self.estimates.items()}
        self.std = {name: values.std(axis=0) for name, values in self.estimates.items()}

    @property
    def num_runs(self) -> int:
        return next(iter(self.estimates.values())).shape[0]

    @property
    def num_states(self) -> int:
        return next(iter(self.estimates.values())).shape[2]

    @property
    def variance_estimators(self) -> list[str]:
        return [name for name in ("direct", "vtd") if name in self.estimates]

    def truth_for(self, name: str) -> np.ndarray:
        """The ground truth an estimator's table targets."""
        if name == "value":
            return self.truth.j
        if name == "second_moment":
            return self.truth.second_moment
        return self.truth.v


@dataclass
class _RunChunk:
    estimates: dict[str, np.ndarray]
    update_rates: dict[str, np.ndarray]
    step_sizes: dict[str, np.ndarray]


def _initial_tables(cfg: ExperimentConfig, truth: GroundTruth, init_streams: Sequence[np.random.Generator], num_states: int):
    runs = len(init_streams)
    if cfg.value_init is ValueInit.ZERO:
        J = np.zeros((runs, num_states))
    elif cfg.value_init is ValueInit.TRUTH:
        J = np.tile(truth.j, (runs, 1))
    else:
        J = np.stack([inject_value_error(truth.j, cfg.err_ratio, truth.v, rng) for rng in init_streams])
    if cfg.variance_init is VarianceInit.TRUTH:
        V = np.tile(truth.v, (runs, 1))
        M = np.tile(truth.v + truth.j**2, (runs, 1))
    else:
        V = np.zeros((runs, num_states))
        M = np.zeros((runs, num_states))
    return J, V, M


def _simulate_runs(cfg: ExperimentConfig, truth: GroundTruth, run_ids: Sequence[int]) -> _RunChunk:
    """Advance the runs ``run_ids`` in lockstep; each run only reads its own streams."""
    mdp, mu, target = load_problem(cfg)
    S = mdp.num_states
    B = len(run_ids)
    rows = np.arange(B)
    streams = [run_streams(cfg.base_seed, run) for run in run_ids]
    sampler = LockstepSampler(mdp, mu, target, [dynamics for dynamics, _ in streams])
    J0, V0, M0 = _initial_tables(cfg, truth, [init for _, init in streams], S)

    value_alpha = ConstantStep(0.0) if cfg.value_frozen else _step_size(cfg.alpha, B, S)
    value = ValueTd.create(S, B, cfg.kappa, value_alpha, J0)
    direct = DirectVar.create(S, B, cfg.kappa_bar, _step_size(cfg.alpha_bar, B, S), V0) if cfg.estimators.direct else None
    vtd = VtdEstimator.create(S, B, cfg.kappa_bar, _step_size(cfg.alpha_bar, B, S), M0) if cfg.estimators.vtd else None
    learners = {"value": value, "direct": direct, "vtd": vtd}
    active_learners = {name: learner for name, learner in learners.items() if learner is not None}

    points = cfg.run_length // cfg.log_every + 1
    names = ["value"] + (["direct"] if direct else []) + (["second_moment", "vtd"] if vtd else [])
    logs = {name: np.empty((B, points, S)) for name in names}
    rate_logs = {name: np.zeros((B, points - 1)) for name in active_learners}
    rate_sums = {name: np.zeros(B) for name in active_learners}
    rate_counts = np.zeros(B)
    totals = {name: np.zeros(B) for name in names}

    def snapshot() -> dict[str, np.ndarray]:
        tables = {"value": value.J}
        if direct is not None:
            tables["direct"] = direct.V
        if vtd is not None:
            tables["second_moment"] = vtd.M
            tables["vtd"] = vtd_variance(vtd, value.J)
        return tables

    def log(index: int, mask: np.ndarray) -> None:
        for name, table in snapshot().items():
            logs[name][mask, index] = table[mask]
        if index > 0:
            counts = np.where(rate_counts[mask] > 0, rate_counts[mask], 1.0)
            for name in active_learners:
                rate_logs[name][mask, index - 1] = rate_sums[name][mask] / counts
                rate_sums[name][mask] = 0.0
            rate_counts[mask] = 0.0

    log(0, np.ones(B, dtype=bool))
    units = np.zeros(B)
    active = np.ones(B, dtype=bool)
    episodes = np.zeros(B, dtype=np.int64)
    steps = 0
    s = sampler.start() if cfg.run_length > 0 else None
    episodic = mdp.episodic
    while cfg.run_length > 0 and active.any():
        before = {name: table.copy() for name, table in snapshot().items()}
        t, following = sampler.step(s)
        if cfg.value_frozen:
            delta = td_error(value.J, t)
        else:
            delta = value_step(value, t, cfg.mode)
        if direct is not None:
            direct_step(direct, t, delta, value.J[rows, t.s], cfg.mode)
        if vtd is not None:
            vtd_step(vtd, t, value.J, cfg.mode)

        for name, table in snapshot().items():
            totals[name] += np.where(active, np.abs(table - before[name]).sum(axis=1), 0.0)
        for name, learner in active_learners.items():
            rate_sums[name] += np.where(active, learner.last_rate, 0.0)
        rate_counts += active

        steps += 1
        if episodic:
            ended = t.episode_boundary & active
            if t.episode_boundary.any():
                for learner in active_learners.values():
                    learner.reset_traces(t.episode_boundary)
            if ended.any():
                episodes[ended] += 1
                units[ended] += 1
                due = ended & (episodes % cfg.log_every == 0)
                for index in np.unique(episodes[due] // cfg.log_every):
                    log(int(index), due & (episodes // cfg.log_every == index))
                active &= episodes < cfg.run_length
        else:
            units += 1
            if steps % cfg.log_every == 0:
                log(steps // cfg.log_every, np.ones(B, dtype=bool))
            if steps >= cfg.run_length:
                active[:] = False
        s = following
        if steps % 10_000 == 0:
            logging.debug("%s: %d lockstep steps, %d runs active", cfg.name, steps, int(active.sum()))

    with np.errstate(invalid="ignore", divide="ignore"):
        rates = {name: np.where(units > 0, total / np.where(units > 0, units, 1.0), 0.0) for name, total in totals.items()}
    return _RunChunk(estimates=logs, update_rates=rates, step_sizes=rate_logs)


def _worker_count(workers: int | None) -> int:
    if workers is None:
        workers = int(os.getenv(WORKERS_ENV, "1"))
    return max(1, workers)


def run_experiment(cfg: ExperimentConfig, truth: GroundTruth | None = None, workers: int | None = None) -> RunResult:
    """Run ``cfg.num_runs`` independent runs (seeds base_seed + r) and aggregate them."""
    cfg.validate()
    mdp, _, _ = load_problem(cfg)
    if truth is None:
        truth = experiment_truth(cfg)
    workers = min(_worker_count(workers), cfg.num_runs)
    logging.info("Running preset %s: %d runs", cfg.name, cfg.num_runs)
    chunks = [list(chunk) for chunk in np.array_split(np.arange(cfg.num_runs), workers) if chunk.size]
    if workers > 1:
        with Pool(workers) as pool:
            parts = pool.starmap(_simulate_runs, [(cfg, truth, chunk) for chunk in chunks])
    else:
        parts = [_simulate_runs(cfg, truth, chunk) for chunk in chunks]

    estimates = {name: np.concatenate([part.estimates[name] for part in parts]) for name in parts[0].estimates}
    rates = {name: np.concatenate([part.update_rates[name] for part in parts]) for name in parts[0].update_rates}
    step_sizes: dict[str, np.ndarray] = {}
    if cfg.uses_adadelta:
        step_sizes = {name: np.concatenate([part.step_sizes[name] for part in parts]) for name in parts[0].step_sizes}
    times = np.arange(cfg.run_length // cfg.log_every + 1) * cfg.log_every
    return RunResult(
        config=cfg,
        truth=truth,
        times=times,
        estimates=estimates,
        update_rates=rates,
        step_sizes=step_sizes,
        episodic=mdp.episodic,
    )


@dataclass
class MseReport:
    per_state: dict[str, np.ndarray]
    summed: dict[str, float]


def mse(result: RunResult, truth: GroundTruth | None = None, window: int | None = None) -> MseReport:
    """Mean over runs and the last ``window`` logged points of (estimate − v)²."""
    truth = truth or result.truth
    points = result.times.size
    if window is None:
        window = steady_state_points(result.config, points)
    if not 1 <= window <= points:
        raise ConfigurationError(f"window {window} must lie in [1, {points}]")
    per_state: dict[str, np.ndarray] = {}
    for name in result.variance_estimators:
        tail = result.estimates[name][:, -window:, :]
        per_state[name] = np.mean((tail - truth.v[None, None, :]) ** 2, axis=(0, 1))
    return MseReport(per_state=per_state, summed={name: float(values.sum()) for name, values in per_state.items()})


def steady_state_points(cfg: ExperimentConfig, points: int) -> int:
    return int(min(points, max(1, cfg.steady_state_window // cfg.log_every)))


def update_magnitude(result: RunResult) -> dict[str, float]:
    """Average total absolute update per episode (or timestep), averaged over runs then units."""
    return {name: float(np.mean(result.update_rates[name])) if name in result.update_rates else float("nan") for name in MAGNITUDE_COLUMNS}


def update_magnitude_table(results: dict[str, RunResult]) -> pd.DataFrame:
    rows = []
    for name, result in results.items():
        row = {"experiment": name}
        row.update({label: update_magnitude(result)[key] for key, label in MAGNITUDE_COLUMNS.items()})
        rows.append(row)
    return pd.DataFrame(rows, columns=["experiment", *MAGNITUDE_COLUMNS.values()]).set_index("experiment")


@dataclass
class SweepResult:
    """Steady-state MSE over an α × ᾱ grid for each variance estimator."""

    alphas: list[float]
    alpha_bars: list[float]
    summed: dict[str, np.ndarray]
    per_state: dict[str, np.ndarray]
    final_mean: dict[str, np.ndarray]
    final_std: dict[str, np.ndarray]

    def _smallest_first(self, values: np.ndarray, steps: Sequence[float] | None = None) -> int:
        order = np.argsort(np.asarray(self.alpha_bars if steps is None else steps), kind="stable")
        return int(order[int(np.argmin(values[order]))])

    def best_cell(self, name: str) -> tuple[int, int]:
        """(α index, ᾱ index) of the lowest summed MSE.

        Ties go to the smaller α first, then to the smaller ᾱ within that row.
        """
        grid = self.summed[name]
        best_alpha = self._smallest_first(grid.min(axis=1), self.alphas)
        return best_alpha, self._smallest_first(grid[best_alpha])

    def best_alpha_bar_per_state(self, name: str, alpha_index: int = 0) -> np.ndarray:
        grid = self.per_state[name][alpha_index]
        return np.array([self._smallest_first(grid[:, s]) for s in range(grid.shape[1])])


def sweep_step_sizes(
    base_cfg: ExperimentConfig,
    alphas: Sequence[float],
    alpha_bars: Sequence[float],
    truth: GroundTruth | None = None,
    workers: int | None = None,
) -> SweepResult:
    """One :func:`run_experiment` per grid cell; α = 0 freezes the value estimate.

    See :meth:`SweepResult.best_cell` for how ties between cells are broken.
    """
    if not alphas or not alpha_bars:
        raise ConfigurationError("step-size grids must be non-empty")
    if truth is None:
        truth = experiment_truth(base_cfg)
    names = [name for name, on in (("direct", base_cfg.estimators.direct), ("vtd", base_cfg.estimators.vtd)) if on]
    S = truth.v.size
    shape = (len(alphas), len(alpha_bars))
    summed = {name: np.zeros(shape) for name in names}
    per_state = {name: np.zeros((*shape, S)) for name in names}
    final_mean = {name: np.zeros((*shape, S)) for name in names}
    final_std = {name: np.zeros((*shape, S)) for name in names}
    for i, alpha in enumerate(alphas):
        for k, alpha_bar in enumerate(alpha_bars):
            cfg = base_cfg.replace(
                name=f"{base_cfg.name}[alpha={alpha},alpha_bar={alpha_bar}]",
                alpha=float(alpha),
                alpha_bar=float(alpha_bar),
                value_frozen=base_cfg.value_frozen or float(alpha) == 0.0,
            )
            result = run_experiment(cfg, truth, workers)
            report = mse(result, truth)
            window = steady_state_points(cfg, result.times.size)
            for name in names:
                summed[name][i, k] = report.summed[name]
                per_state[name][i, k] = report.per_state[name]
                settled = result.estimates[name][:, -window:, :].mean(axis=1)
                final_mean[name][i, k] = settled.mean(axis=0)
                final_std[name][i, k] = settled.std(axis=0)
    return SweepResult(list(alphas), list(alpha_bars), summed, per_state, final_mean, final_std)


@dataclass
class BestStep:
    err_ratio: float
    state: int
    alpha_bar: float
    mse: float
    mean: float
    std: float


def best_step_per_state(sweeps: dict[float, SweepResult], name: str, alpha_index: int = 0) -> list[BestStep]:
    """Per error ratio and state, the ᾱ with the lowest per-state MSE and the estimates it produced."""
    rows: list[BestStep] = []
    for err_ratio, sweep in sorted(sweeps.items()):
        choice = sweep.best_alpha_bar_per_state(name, alpha_index)
        for state, k in enumerate(choice):
            rows.append(
                BestStep(
                    err_ratio=err_ratio,
                    state=state,
                    alpha_bar=sweep.alpha_bars[k],
                    mse=float(sweep.per_state[name][alpha_index, k, state]),
                    mean=float(sweep.final_mean[name][alpha_index, k, state]),
                    std=float(sweep.final_std[name][alpha_index, k, state]),
                )
            )
    return rows


def error_injection_study(
    base_cfg: ExperimentConfig,
    err_ratios: Iterable[float],
    alpha_bars: Sequence[float],
    truth: GroundTruth | None = None,
    workers: int | None = None,
) -> dict[float, SweepResult]:
    """Frozen, error-injected value estimate; an ᾱ sweep for every error ratio."""
    if truth is None:
        truth = experiment_truth(base_cfg)
    studies: dict[float, SweepResult] = {}
    for err_ratio in err_ratios:
        cfg = base_cfg.replace(value_init=ValueInit.TRUTH_PLUS_ERROR, err_ratio=float(err_ratio), value_frozen=True, alpha=0.0)
        logging.info("Error injection %s: err_ratio=%s", base_cfg.name, err_ratio)
        studies[float(err_ratio)] = sweep_step_sizes(cfg, [0.0], alpha_bars, truth, workers)
    return studies
