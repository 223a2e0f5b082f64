"""Incremental TD learners for the λ-return: value, direct variance and VTD second moment.

Every table is shaped (runs, states) so that many independent runs advance in
lockstep; a single run is simply ``runs == 1``. Transition fields may be
scalars or (runs,) arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from .mdp import TransitionSample

ADADELTA_DECAY = 0.99
ADADELTA_EPSILON = 1e-6


class WeightingMode(str, Enum):
    """Which quantity the learners estimate when data come from the behavior policy."""

    ON_POLICY = "on-policy"
    OFF_POLICY_TARGET_VARIANCE = "off-policy-target-variance"
    OFF_POLICY_RETURN_VARIANCE = "off-policy-return-variance"

    def eta(self, rho: np.ndarray) -> np.ndarray:
        if self is WeightingMode.OFF_POLICY_RETURN_VARIANCE:
            return rho
        return np.ones_like(rho)

    def rho_bar(self, rho: np.ndarray) -> np.ndarray:
        if self is WeightingMode.OFF_POLICY_TARGET_VARIANCE:
            return rho
        return np.ones_like(rho)

    def value_trace_weight(self, rho: np.ndarray) -> np.ndarray:
        if self is WeightingMode.ON_POLICY:
            return np.ones_like(rho)
        return rho


class StepSize(Protocol):
    def rate(self, rows: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray: ...

    def record(self, rows: np.ndarray, s: np.ndarray, applied: np.ndarray) -> None: ...


@dataclass
class ConstantStep:
    """Fixed step size; ``ConstantStep(0.0)`` freezes an estimator."""

    alpha: float

    def rate(self, rows: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
        return np.full(rows.shape, self.alpha)

    def record(self, rows: np.ndarray, s: np.ndarray, applied: np.ndarray) -> None:
        return None


@dataclass
class AdadeltaState:
    """Per-state ADADELTA accumulators for one estimator."""

    acc_g2: np.ndarray
    acc_dx2: np.ndarray
    decay: float = ADADELTA_DECAY
    epsilon: float = ADADELTA_EPSILON

    @classmethod
    def zeros(cls, runs: int, num_states: int, decay: float = ADADELTA_DECAY, epsilon: float = ADADELTA_EPSILON) -> "AdadeltaState":
        return cls(np.zeros((runs, num_states)), np.zeros((runs, num_states)), decay, epsilon)

    def rate(self, rows: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
        return adadelta_step(self, rows, s, g)

    def record(self, rows: np.ndarray, s: np.ndarray, applied: np.ndarray) -> None:
        adadelta_accumulate(self, rows, s, applied)


def adadelta_step(ad: AdadeltaState, rows: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Fold g² into the gradient accumulator and return the effective step size at ``s``."""
    ad.acc_g2[rows, s] = ad.decay * ad.acc_g2[rows, s] + (1.0 - ad.decay) * np.square(g)
    return np.sqrt(ad.acc_dx2[rows, s] + ad.epsilon) / np.sqrt(ad.acc_g2[rows, s] + ad.epsilon)


def adadelta_accumulate(ad: AdadeltaState, rows: np.ndarray, s: np.ndarray, applied: np.ndarray) -> None:
    ad.acc_dx2[rows, s] = ad.decay * ad.acc_dx2[rows, s] + (1.0 - ad.decay) * np.square(applied)


def _per_state(value: float | np.ndarray, num_states: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (num_states,)).copy()


@dataclass
class _TraceLearner:
    table: np.ndarray
    trace: np.ndarray
    decay: np.ndarray
    step: StepSize
    # discount of the current state S_t, carried over from the previous transition
    carry: np.ndarray = field(default=None)  # type: ignore[assignment]
    last_rate: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        runs = self.table.shape[0]
        if self.carry is None:
            self.carry = np.zeros(runs)
        if self.last_rate is None:
            self.last_rate = np.zeros(runs)

    @property
    def runs(self) -> int:
        return self.table.shape[0]

    def reset_traces(self, mask: np.ndarray | None = None) -> None:
        """Zero the traces (of the runs in ``mask``), as at an episode boundary."""
        if mask is None:
            self.trace[:] = 0.0
            self.carry[:] = 0.0
        else:
            self.trace[mask] = 0.0
            self.carry[mask] = 0.0

    def _update(self, s: np.ndarray, weight: np.ndarray, error: np.ndarray) -> None:
        rows = np.arange(self.runs)
        self.trace *= (weight * self.carry * self.decay[s])[:, None]
        self.trace[rows, s] += weight
        rate = self.step.rate(rows, s, error)
        applied = rate * error
        self.table += applied[:, None] * self.trace
        self.step.record(rows, s, applied)
        self.last_rate = rate


def _columns(t: TransitionSample, runs: int) -> tuple[np.ndarray, ...]:
    shape = (runs,)
    return (
        np.broadcast_to(np.asarray(t.s, dtype=np.intp), shape),
        np.broadcast_to(np.asarray(t.r, dtype=float), shape),
        np.broadcast_to(np.asarray(t.s_next, dtype=np.intp), shape),
        np.broadcast_to(np.asarray(t.rho, dtype=float), shape),
        np.broadcast_to(np.asarray(t.gamma_next, dtype=float), shape),
        np.broadcast_to(np.asarray(t.lam_next, dtype=float), shape),
    )


class ValueTd(_TraceLearner):
    """TD(κ) estimate J of the expected λ-return, accumulating traces."""

    @classmethod
    def create(
        cls,
        num_states: int,
        runs: int = 1,
        kappa: float | np.ndarray = 0.0,
        alpha: StepSize | float = 0.01,
        initial: np.ndarray | None = None,
    ) -> "ValueTd":
        step = ConstantStep(float(alpha)) if isinstance(alpha, (int, float)) else alpha
        table = np.zeros((runs, num_states)) if initial is None else np.array(np.broadcast_to(initial, (runs, num_states)), dtype=float)
        return cls(table, np.zeros((runs, num_states)), _per_state(kappa, num_states), step)

    @property
    def J(self) -> np.ndarray:
        return self.table

    @property
    def E(self) -> np.ndarray:
        return self.trace


class DirectVar(_TraceLearner):
    """Direct variance estimate V: meta-reward δ², meta-discount γ²λ²."""

    @classmethod
    def create(
        cls,
        num_states: int,
        runs: int = 1,
        kappa_bar: float | np.ndarray = 0.0,
        alpha_bar: StepSize | float = 0.01,
        initial: np.ndarray | None = None,
    ) -> "DirectVar":
        step = ConstantStep(float(alpha_bar)) if isinstance(alpha_bar, (int, float)) else alpha_bar
        table = np.zeros((runs, num_states)) if initial is None else np.array(np.broadcast_to(initial, (runs, num_states)), dtype=float)
        return cls(table, np.zeros((runs, num_states)), _per_state(kappa_bar, num_states), step)

    @property
    def V(self) -> np.ndarray:
        return self.table

    @property
    def Ebar(self) -> np.ndarray:
        return self.trace


class VtdEstimator(_TraceLearner):
    """Second-moment estimate M of the λ-return; the variance is read out as M − J²."""

    @classmethod
    def create(
        cls,
        num_states: int,
        runs: int = 1,
        kappa_bar: float | np.ndarray = 0.0,
        alpha_bar: StepSize | float = 0.01,
        initial: np.ndarray | None = None,
    ) -> "VtdEstimator":
        step = ConstantStep(float(alpha_bar)) if isinstance(alpha_bar, (int, float)) else alpha_bar
        table = np.zeros((runs, num_states)) if initial is None else np.array(np.broadcast_to(initial, (runs, num_states)), dtype=float)
        return cls(table, np.zeros((runs, num_states)), _per_state(kappa_bar, num_states), step)

    @property
    def M(self) -> np.ndarray:
        return self.table

    @property
    def Ebar(self) -> np.ndarray:
        return self.trace


def td_error(J: np.ndarray, t: TransitionSample) -> np.ndarray:
    """δ = r + γ(s')J(s') − J(s) for every run, from the given table."""
    s, r, s_next, _, gamma_next, _ = _columns(t, J.shape[0])
    rows = np.arange(J.shape[0])
    return r + gamma_next * J[rows, s_next] - J[rows, s]


def value_step(est: ValueTd, t: TransitionSample, mode: WeightingMode) -> np.ndarray:
    """One TD(κ) update; returns δ computed from the pre-update table."""
    s, _, _, rho, gamma_next, _ = _columns(t, est.runs)
    delta = td_error(est.J, t)
    est._update(s, mode.value_trace_weight(rho), delta)
    est.carry = np.array(gamma_next, dtype=float)
    return delta


def direct_meta_reward(delta: np.ndarray, J_s_post: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return (eta * delta + (eta - 1.0) * J_s_post) ** 2


def direct_step(est: DirectVar, t: TransitionSample, delta: np.ndarray, J_s_post: np.ndarray, mode: WeightingMode) -> np.ndarray:
    """One direct-variance update from the value learner's δ and post-update J(s)."""
    s, _, s_next, rho, gamma_next, lam_next = _columns(t, est.runs)
    rows = np.arange(est.runs)
    eta = mode.eta(rho)
    meta_reward = direct_meta_reward(delta, J_s_post, eta)
    meta_gamma = gamma_next**2 * lam_next**2 * eta**2
    meta_delta = meta_reward + meta_gamma * est.V[rows, s_next] - est.V[rows, s]
    est._update(s, mode.rho_bar(rho), meta_delta)
    est.carry = meta_gamma
    return meta_delta


def vtd_meta_reward(r: np.ndarray, gamma_next: np.ndarray, lam_next: np.ndarray, J_next: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """η²Ḡ² + 2η²γλḠJ(s') with Ḡ = r + γ(1−λ)J(s')."""
    g_bar = r + gamma_next * (1.0 - lam_next) * J_next
    return eta**2 * g_bar**2 + 2.0 * eta**2 * gamma_next * lam_next * g_bar * J_next


def vtd_step(est: VtdEstimator, t: TransitionSample, J_post: np.ndarray, mode: WeightingMode) -> np.ndarray:
    """One second-moment update bootstrapping on the post-update value table."""
    s, r, s_next, rho, gamma_next, lam_next = _columns(t, est.runs)
    rows = np.arange(est.runs)
    eta = mode.eta(rho)
    meta_reward = vtd_meta_reward(r, gamma_next, lam_next, J_post[rows, s_next], eta)
    meta_gamma = eta**2 * gamma_next**2 * lam_next**2
    meta_delta = meta_reward + meta_gamma * est.M[rows, s_next] - est.M[rows, s]
    est._update(s, mode.rho_bar(rho), meta_delta)
    est.carry = meta_gamma
    return meta_delta


def vtd_variance(est: VtdEstimator, J: np.ndarray) -> np.ndarray:
    """M − J², unclipped."""
    return est.M - np.square(J)


def predicted_vtd_change(
    alpha_bar: float,
    delta: np.ndarray,
    meta_gamma: np.ndarray,
    V_s: np.ndarray,
    V_next: np.ndarray,
    J_next: np.ndarray,
    subtracted: np.ndarray,
) -> np.ndarray:
    """Closed-form one-step change of VTD's M − J² at the visited state.

    Holds when α = ᾱ, κ = κ̄ = 0 and s ≠ s'. ``subtracted`` is the coefficient
    of J(s')² removed from the squared one-step target in the meta-reward; the
    VTD update removes exactly γ̄J(s')², which makes the middle term vanish.
    """
    return alpha_bar * (np.square(delta) + meta_gamma * V_next - V_s) + alpha_bar * np.square(J_next) * (meta_gamma - subtracted) - np.square(alpha_bar * delta)
