"""Ground truth for the λ-return: exact Bellman solves, Monte Carlo and brute-force enumeration."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .estimators import WeightingMode
from .mdp import Policy, TabularMdp, importance_ratios, make_generator, sample_start

RESIDUAL_TOLERANCE = 1e-9
DEFAULT_HORIZON_CUTOFF = 1e-8
DEFAULT_PATH_BUDGET = 1_000_000
DEFAULT_BATCHES = 50


class SingularSystemError(ArithmeticError):
    """A Bellman system cannot be solved (singular, or spectral radius ≥ 1)."""


class PathBudgetExceeded(RuntimeError):
    """Brute-force enumeration would visit more paths than allowed."""


class TruthMethod(str, Enum):
    LINEAR_SOLVE = "linear-solve"
    MONTE_CARLO = "monte-carlo"
    BRUTE_FORCE = "brute-force"


@dataclass
class GroundTruth:
    """Per-state value ``j`` and λ-return variance ``v`` plus how they were obtained.

    Monte Carlo truth also carries standard errors, the second moment and a
    ``missing`` mask for states the simulation never visited (their entries are NaN).
    """

    j: np.ndarray
    v: np.ndarray
    method: TruthMethod = TruthMethod.LINEAR_SOLVE
    std_err: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    missing: np.ndarray | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.j = np.asarray(self.j, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.std_err is None:
            self.std_err = np.zeros_like(self.v)
        if self.second_moment is None:
            self.second_moment = self.v + self.j**2
        if self.missing is None:
            self.missing = np.zeros(self.v.shape, dtype=bool)


def _solve_bellman(operator: np.ndarray, reward: np.ndarray, label: str) -> np.ndarray:
    """Solve x = reward + operator @ x by LU with partial pivoting."""
    radius = float(np.max(np.abs(np.linalg.eigvals(operator)))) if operator.size else 0.0
    if radius >= 1.0 - 1e-12:
        raise SingularSystemError(f"{label} operator has spectral radius {radius:.6g} >= 1")
    system = np.eye(operator.shape[0]) - operator
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            factors = scipy.linalg.lu_factor(system, check_finite=True)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
            raise SingularSystemError(f"{label} system is singular: {exc}") from exc
    solution = scipy.linalg.lu_solve(factors, reward)
    residual = reward + operator @ solution - solution
    if np.max(np.abs(residual), initial=0.0) > RESIDUAL_TOLERANCE:
        solution = solution + scipy.linalg.lu_solve(factors, residual)
        residual = reward + operator @ solution - solution
    worst = float(np.max(np.abs(residual), initial=0.0))
    if worst > RESIDUAL_TOLERANCE:
        raise SingularSystemError(f"{label} solve residual {worst:.3g} exceeds tolerance")
    return solution


def exact_value(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Expected λ-return j solving j = r̄ + P_γ j."""
    weighted = pi.probs[:, :, None] * mdp.transition
    mean_reward = (weighted * mdp.reward_mean).sum(axis=(1, 2))
    operator = weighted.sum(axis=1) * mdp.gamma[None, :]
    return _solve_bellman(operator, mean_reward, "value")


def _variance_system(
    mdp: TabularMdp,
    behavior: Policy,
    rho: np.ndarray,
    j: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Meta-reward d and operator for the variance Bellman equation with η = ρ.

    With ρ ≡ 1 this is the on-policy equation, evaluated through the same
    arithmetic so the two coincide exactly.
    """
    j = np.asarray(j, dtype=float)
    weighted = behavior.probs[:, :, None] * mdp.transition
    eta = rho[:, :, None]
    shifted = eta * (mdp.reward_mean + mdp.gamma[None, None, :] * j[None, None, :] - j[:, None, None]) + (eta - 1.0) * j[:, None, None]
    meta_reward = (weighted * (shifted**2 + eta**2 * mdp.reward_variance)).sum(axis=(1, 2))
    meta_discount = (mdp.gamma * mdp.lam) ** 2
    operator = (weighted * eta**2).sum(axis=1) * meta_discount[None, :]
    return meta_reward, operator


def expected_sq_td_error(mdp: TabularMdp, pi: Policy, j: np.ndarray) -> np.ndarray:
    """E[δ² | S=s] with the reward variance integrated analytically."""
    meta_reward, _ = _variance_system(mdp, pi, np.ones_like(pi.probs), j)
    return meta_reward


def exact_variance(mdp: TabularMdp, pi: Policy, j: np.ndarray) -> np.ndarray:
    """Variance of the on-policy λ-return: v = E[δ²] + P_{γ²λ²} v."""
    meta_reward, operator = _variance_system(mdp, pi, np.ones_like(pi.probs), j)
    return _solve_bellman(operator, meta_reward, "variance")


def exact_variance_offpolicy(mdp: TabularMdp, mu: Policy, pi: Policy, j: np.ndarray) -> np.ndarray:
    """Variance of the off-policy λ-return (η = ρ), expectation under the behavior policy."""
    meta_reward, operator = _variance_system(mdp, mu, importance_ratios(mu, pi), j)
    return _solve_bellman(operator, meta_reward, "off-policy variance")


def exact_truth(mdp: TabularMdp, mu: Policy, pi: Policy, mode: WeightingMode) -> GroundTruth:
    """Exact (j, v) for what an estimator running in ``mode`` converges to.

    On-policy runs evaluate the behavior policy; the target-variance mode
    evaluates π; the return-variance mode targets the off-policy return.
    """
    if mode is WeightingMode.ON_POLICY:
        j = exact_value(mdp, mu)
        return GroundTruth(j=j, v=exact_variance(mdp, mu, j))
    j = exact_value(mdp, pi)
    if mode is WeightingMode.OFF_POLICY_TARGET_VARIANCE:
        return GroundTruth(j=j, v=exact_variance(mdp, pi, j))
    return GroundTruth(j=j, v=exact_variance_offpolicy(mdp, mu, pi, j))


@dataclass
class SimulatedStream:
    """One long behavior-policy trajectory flattened into per-step columns."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    rho: np.ndarray
    restarted: np.ndarray


def simulate_stream(mdp: TabularMdp, mu: Policy, pi: Policy, total_steps: int, rng: np.random.Generator) -> SimulatedStream:
    """Simulate ``total_steps`` transitions under μ, restarting episodic MDPs at terminals."""
    uniforms = rng.random((total_steps, 3))
    normals = rng.standard_normal(total_steps)
    # Python-level lists keep the sequential loop fast for tiny tables.
    action_cdf = mu.cdf.tolist()
    next_cdf = mdp.transition_cdf.tolist()
    mean = mdp.reward_mean.tolist()
    std = mdp.reward_std.tolist()
    ratios = importance_ratios(mu, pi)
    episodic = mdp.episodic
    terminal = mdp.terminal.tolist()
    starts = sample_start(mdp, uniforms[:, 2]).tolist()

    s_col = np.empty(total_steps, dtype=np.intp)
    a_col = np.empty(total_steps, dtype=np.intp)
    next_col = np.empty(total_steps, dtype=np.intp)
    restarted = np.zeros(total_steps, dtype=bool)
    r_col = np.empty(total_steps)
    s = int(sample_start(mdp, rng.random()))
    u_list = uniforms.tolist()
    z_list = normals.tolist()
    for t in range(total_steps):
        u_action, u_next, _ = u_list[t]
        a = _bisect(action_cdf[s], u_action)
        s_next = _bisect(next_cdf[s][a], u_next)
        s_col[t], a_col[t], next_col[t] = s, a, s_next
        r_col[t] = mean[s][a][s_next] + std[s][a][s_next] * z_list[t]
        if episodic and terminal[s_next]:
            s = starts[t]
            restarted[t] = True
        else:
            s = s_next
    return SimulatedStream(
        s=s_col,
        a=a_col,
        r=r_col,
        s_next=next_col,
        rho=ratios[s_col, a_col],
        restarted=restarted,
    )


def _bisect(cdf_row: list[float], u: float) -> int:
    index = 0
    for edge in cdf_row:
        if edge <= u:
            index += 1
        else:
            break
    return index


def lambda_return_samples(
    mdp: TabularMdp,
    stream: SimulatedStream,
    j: np.ndarray,
    mode: WeightingMode,
    horizon_cutoff: float = DEFAULT_HORIZON_CUTOFF,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """λ-return sample per timestep as ``(returns, weights, valid)``.

    Each return is accumulated forward until the running continuation
    coefficient drops below ``horizon_cutoff``; the tail is bootstrapped on
    ``j``. Samples that run off the end of the stream are marked invalid.
    In the return-variance mode each step is scaled by ρ; in the
    target-variance mode the sample carries the product of ρ over the steps
    it consumed as an importance weight.
    """
    j = np.asarray(j, dtype=float)
    gamma_next = mdp.gamma[stream.s_next]
    lam_next = mdp.lam[stream.s_next]
    increments = (stream.r + gamma_next * (1.0 - lam_next) * j[stream.s_next]).tolist()
    continuation = (gamma_next * lam_next).tolist()
    bootstrap = j[stream.s_next].tolist()
    rho = stream.rho.tolist()
    scale_by_rho = mode is WeightingMode.OFF_POLICY_RETURN_VARIANCE
    weight_by_rho = mode is WeightingMode.OFF_POLICY_TARGET_VARIANCE

    n = len(increments)
    returns = np.zeros(n)
    weights = np.ones(n)
    valid = np.zeros(n, dtype=bool)
    for t in range(n):
        total = 0.0
        coef = 1.0
        weight = 1.0
        k = t
        while k < n:
            step = rho[k] if scale_by_rho else 1.0
            if weight_by_rho:
                weight *= rho[k]
            total += coef * step * increments[k]
            coef *= step * continuation[k]
            if abs(coef) < horizon_cutoff:
                total += coef * bootstrap[k]
                break
            k += 1
        else:
            continue
        returns[t] = total
        weights[t] = weight
        valid[t] = True
    return returns, weights, valid


def _state_moments(
    states: np.ndarray,
    returns: np.ndarray,
    weights: np.ndarray,
    num_states: int,
    weighted: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    counts = np.bincount(states, minlength=num_states).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if weighted:
            first = np.bincount(states, weights=weights * returns, minlength=num_states) / counts
            second = np.bincount(states, weights=weights * returns**2, minlength=num_states) / counts
            variance = second - first**2
        else:
            first = np.bincount(states, weights=returns, minlength=num_states) / counts
            second = np.bincount(states, weights=returns**2, minlength=num_states) / counts
            centred = returns - first[states]
            variance = np.bincount(states, weights=centred**2, minlength=num_states) / counts
    return first, variance, second, counts


def monte_carlo_moments(
    mdp: TabularMdp,
    mu: Policy,
    pi: Policy,
    j: np.ndarray,
    mode: WeightingMode,
    total_steps: int,
    rng: np.random.Generator | int,
    horizon_cutoff: float = DEFAULT_HORIZON_CUTOFF,
    batches: int = DEFAULT_BATCHES,
) -> GroundTruth:
    """Per-state λ-return mean, variance and second moment from one simulated stream.

    Standard errors come from batch means over ``batches`` contiguous
    segments. States never visited are NaN and flagged in ``missing``.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0.0 < horizon_cutoff < 1.0:
        raise ValueError("horizon_cutoff must lie in (0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = make_generator(rng)
    target = mu if mode is WeightingMode.ON_POLICY else pi
    logging.info("Monte Carlo moments for %s (%s): %d steps", mdp.name, mode.value, total_steps)
    stream = simulate_stream(mdp, mu, target, total_steps, rng)
    returns, weights, valid = lambda_return_samples(mdp, stream, j, mode, horizon_cutoff)
    weighted = mode is WeightingMode.OFF_POLICY_TARGET_VARIANCE
    states = stream.s[valid]
    returns = returns[valid]
    weights = weights[valid]
    S = mdp.num_states
    mean, variance, second, counts = _state_moments(states, returns, weights, S, weighted)
    missing = counts == 0

    segments = np.array_split(np.arange(states.size), max(2, min(batches, states.size))) if states.size else []
    batch_stats = []
    for segment in segments:
        if segment.size == 0:
            continue
        batch_stats.append(_state_moments(states[segment], returns[segment], weights[segment], S, weighted))
    std_err = np.full(S, np.nan)
    second_err = np.full(S, np.nan)
    mean_err = np.full(S, np.nan)
    if batch_stats:
        batch_mean = np.array([stat[0] for stat in batch_stats])
        batch_var = np.array([stat[1] for stat in batch_stats])
        batch_second = np.array([stat[2] for stat in batch_stats])
        for s in range(S):
            for target_err, column in ((mean_err, batch_mean), (std_err, batch_var), (second_err, batch_second)):
                values = column[:, s]
                values = values[np.isfinite(values)]
                if values.size >= 2:
                    target_err[s] = np.std(values, ddof=1) / np.sqrt(values.size)
    mean[missing] = np.nan
    variance[missing] = np.nan
    second[missing] = np.nan
    return GroundTruth(
        j=mean,
        v=variance,
        method=TruthMethod.MONTE_CARLO,
        std_err=std_err,
        second_moment=second,
        missing=missing,
        extras={"mean_std_err": mean_err, "second_moment_std_err": second_err, "visits": counts},
    )


@dataclass
class LemmaResidual:
    """Sample mean and standard error of b_t·(G^λ_{t+1} − j(S_{t+1})) for one choice of b_t."""

    mean: float
    std_err: float
    samples: int


def lemma1_residuals(
    mdp: TabularMdp,
    pi: Policy,
    j: np.ndarray,
    total_steps: int,
    rng: np.random.Generator | int,
    horizon_cutoff: float = DEFAULT_HORIZON_CUTOFF,
    batches: int = DEFAULT_BATCHES,
) -> dict[str, LemmaResidual]:
    """Empirical check that future λ-return errors are uncorrelated with present quantities.

    Keys are ``"one"``, ``"delta"`` and ``"discounted_delta"`` (γλδ). Transitions
    into an episode boundary are skipped since their successor sample belongs
    to the next episode.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_generator(rng)
    j = np.asarray(j, dtype=float)
    stream = simulate_stream(mdp, pi, pi, total_steps, rng)
    returns, _, valid = lambda_return_samples(mdp, stream, j, WeightingMode.ON_POLICY, horizon_cutoff)
    gamma_next = mdp.gamma[stream.s_next]
    delta = stream.r + gamma_next * j[stream.s_next] - j[stream.s]
    follow_error = np.empty_like(returns)
    follow_error[:-1] = returns[1:] - j[stream.s_next[:-1]]
    usable = np.zeros_like(valid)
    usable[:-1] = valid[1:] & ~stream.restarted[:-1]
    multipliers = {
        "one": np.ones_like(delta),
        "delta": delta,
        "discounted_delta": gamma_next * mdp.lam[stream.s_next] * delta,
    }
    report: dict[str, LemmaResidual] = {}
    for name, factor in multipliers.items():
        sample = (factor * follow_error)[usable]
        parts = [chunk.mean() for chunk in np.array_split(sample, batches) if chunk.size]
        std_err = float(np.std(parts, ddof=1) / np.sqrt(len(parts))) if len(parts) >= 2 else float("nan")
        report[name] = LemmaResidual(mean=float(sample.mean()) if sample.size else float("nan"), std_err=std_err, samples=int(sample.size))
    return report


@dataclass
class BruteForceResult:
    """Exact moments of the depth-truncated λ-return.

    ``tail_weights[s, x]`` is Σ P(path)·c² over paths from s still open at
    depth ``max_depth`` and ending in x; with the true j the truncation error
    of the variance equals ``tail_weights @ v``.
    """

    mean: np.ndarray
    second_moment: np.ndarray
    variance: np.ndarray
    tail_weights: np.ndarray
    paths: int

    @property
    def tail_mass(self) -> np.ndarray:
        return self.tail_weights.sum(axis=1)

    def error_bound(self, variance_cap: float) -> np.ndarray:
        """Upper bound on truncation error given an upper bound on the variance."""
        return self.tail_mass * float(variance_cap)


def brute_force_variance(
    mdp: TabularMdp,
    pi: Policy,
    j: np.ndarray,
    max_depth: int,
    path_budget: int = DEFAULT_PATH_BUDGET,
) -> BruteForceResult:
    """Enumerate every trajectory prefix under π up to ``max_depth`` steps.

    A prefix stops expanding once its continuation coefficient is exactly
    zero; prefixes still open at ``max_depth`` bootstrap their tail on ``j``.
    Reward noise is integrated analytically per path.
    """
    j = np.asarray(j, dtype=float)
    S = mdp.num_states
    weighted = pi.probs[:, :, None] * mdp.transition
    continuation = mdp.gamma * mdp.lam
    step_increment = mdp.reward_mean + (mdp.gamma * (1.0 - mdp.lam) * j)[None, None, :]

    mean = np.zeros(S)
    second = np.zeros(S)
    tail_weights = np.zeros((S, S))
    paths = 0
    for origin in range(S):
        state = np.array([origin], dtype=np.intp)
        prob = np.array([1.0])
        coef = np.array([1.0])
        path_mean = np.array([0.0])
        path_var = np.array([0.0])
        for _ in range(max_depth):
            if state.size == 0:
                break
            branch_prob = prob[:, None, None] * weighted[state]
            frontier, action, successor = np.nonzero(branch_prob > 0)
            paths += frontier.size
            if paths > path_budget:
                raise PathBudgetExceeded(f"brute force from state {origin} exceeded {path_budget} paths at depth <= {max_depth}")
            c = coef[frontier]
            parent = state[frontier]
            prob = branch_prob[frontier, action, successor]
            path_mean = path_mean[frontier] + c * step_increment[parent, action, successor]
            path_var = path_var[frontier] + c**2 * mdp.reward_variance[parent, action, successor]
            coef = c * continuation[successor]
            state = successor
            closed = coef == 0.0
            if closed.any():
                mean[origin] += np.sum(prob[closed] * path_mean[closed])
                second[origin] += np.sum(prob[closed] * (path_mean[closed] ** 2 + path_var[closed]))
                keep = ~closed
                state, prob, coef, path_mean, path_var = state[keep], prob[keep], coef[keep], path_mean[keep], path_var[keep]
        if state.size:
            final = path_mean + coef * j[state]
            mean[origin] += np.sum(prob * final)
            second[origin] += np.sum(prob * (final**2 + path_var))
            np.add.at(tail_weights[origin], state, prob * coef**2)
    logging.debug("Brute force enumerated %d paths for %s", paths, mdp.name)
    return BruteForceResult(
        mean=mean,
        second_moment=second,
        variance=second - mean**2,
        tail_weights=tail_weights,
        paths=paths,
    )


@dataclass
class BoundReport:
    """Per-state outcome of the value-error bound check (|lhs − rhs| ≤ 3ε)."""

    passed: np.ndarray
    premises_hold: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    epsilon: np.ndarray
    slack: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def bound_premises(mdp: TabularMdp, pi: Policy, j_approx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(J − j)² and |E[γ'λ'δ_J (j(S') − J(S'))]| per state, both exact."""
    j_true = exact_value(mdp, pi)
    j_approx = np.asarray(j_approx, dtype=float)
    weighted = pi.probs[:, :, None] * mdp.transition
    td = mdp.reward_mean + mdp.gamma[None, None, :] * j_approx[None, None, :] - j_approx[:, None, None]
    factor = (mdp.gamma * mdp.lam * (j_true - j_approx))[None, None, :]
    covariance = np.abs((weighted * td * factor).sum(axis=(1, 2)))
    return (j_approx - j_true) ** 2, covariance


def verify_theorem1_bound(
    mdp: TabularMdp,
    pi: Policy,
    j_approx: np.ndarray,
    epsilon: np.ndarray | None = None,
    max_depth: int = 64,
    tolerance: float = 1e-9,
) -> BoundReport:
    """Check that the one-step variance recursion holds to 3ε when J is only ε-accurate.

    The left side is the brute-force variance of the λ-return bootstrapped on
    ``j_approx``; the right side is E[δ_J² + γ²λ² V(S')]. ε defaults to the
    smallest value satisfying both premises, computed exactly.
    """
    j_approx = np.asarray(j_approx, dtype=float)
    value_gap, covariance = bound_premises(mdp, pi, j_approx)
    if epsilon is None:
        epsilon = np.maximum(value_gap, covariance)
    epsilon = np.broadcast_to(np.asarray(epsilon, dtype=float), value_gap.shape)
    premises_hold = (value_gap <= epsilon + tolerance) & (covariance <= epsilon + tolerance)

    enumerated = brute_force_variance(mdp, pi, j_approx, max_depth)
    lhs = enumerated.variance
    meta_reward, operator = _variance_system(mdp, pi, np.ones_like(pi.probs), j_approx)
    rhs = meta_reward + operator @ lhs
    slack = 3.0 * epsilon - np.abs(lhs - rhs)
    return BoundReport(
        passed=slack >= -tolerance,
        premises_hold=premises_hold,
        lhs=lhs,
        rhs=rhs,
        epsilon=np.array(epsilon),
        slack=slack,
    )
