"""Tabular MDP model, policies, trajectory sampling and the built-in benchmarks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

PROB_TOLERANCE = 1e-12


class MdpError(ValueError):
    """Raised for meaningless requests against an MDP (e.g. stepping a terminal state)."""


@dataclass(frozen=True)
class Constant:
    value: float

    @property
    def mean(self) -> float:
        return float(self.value)

    @property
    def variance(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Normal:
    mean: float
    variance: float


Reward = Constant | Normal


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def categorical_cdf(probs: np.ndarray) -> np.ndarray:
    """Row-wise cumulative distribution, pinned to exactly 1.0 from the last positive entry on.

    Sampling with ``(cdf <= u).sum(-1)`` then never lands on a zero-probability
    index, even when the floating point cumsum ends slightly below one.
    """
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    width = probs.shape[-1]
    positive = probs > 0
    last = np.where(positive.any(axis=-1), width - 1 - np.argmax(positive[..., ::-1], axis=-1), width - 1)
    cdf[np.arange(width) >= last[..., None]] = 1.0
    return cdf


def categorical_index(cdf_rows: np.ndarray, u: np.ndarray | float) -> np.ndarray:
    """Inverse-CDF draw: ``cdf_rows`` (..., K) against uniforms ``u`` in [0, 1)."""
    u = np.asarray(u, dtype=float)
    return (cdf_rows <= u[..., None]).sum(axis=-1)


@dataclass(frozen=True)
class Policy:
    """Action probabilities ``probs[s, a]``; actions a state does not offer carry zero mass."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", _frozen(self.probs))

    @classmethod
    def from_table(cls, table: Mapping[int, Mapping[int, float]], num_states: int, num_actions: int) -> "Policy":
        probs = np.zeros((num_states, num_actions))
        for state, row in table.items():
            for action, prob in row.items():
                probs[int(state), int(action)] = float(prob)
        return cls(probs)

    @cached_property
    def cdf(self) -> np.ndarray:
        return categorical_cdf(self.probs)

    def support(self) -> np.ndarray:
        return self.probs > 0


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with per-state discount ``gamma`` and trace-decay ``lam``.

    ``transition[s, a, s']`` is the next-state distribution; ``rewards`` maps
    ``(s, a, s')`` to a :class:`Constant` or :class:`Normal` reward. Missing
    reward entries are ``Constant(0)``.
    """

    num_states: int
    actions_per_state: tuple[tuple[int, ...], ...]
    transition: np.ndarray
    rewards: Mapping[tuple[int, int, int], Reward]
    gamma: np.ndarray
    lam: np.ndarray
    start_distribution: np.ndarray
    name: str = "mdp"
    reward_mean: np.ndarray = field(init=False, repr=False)
    reward_variance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        transition = _frozen(self.transition)
        if transition.ndim != 3 or transition.shape[0] != self.num_states or transition.shape[2] != self.num_states:
            raise MdpError(f"transition must have shape (S, A, S); got {transition.shape}")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "gamma", _frozen(self.gamma))
        object.__setattr__(self, "lam", _frozen(self.lam))
        object.__setattr__(self, "start_distribution", _frozen(self.start_distribution))
        object.__setattr__(self, "actions_per_state", tuple(tuple(int(a) for a in row) for row in self.actions_per_state))
        object.__setattr__(self, "rewards", dict(self.rewards))
        mean = np.zeros(transition.shape)
        variance = np.zeros(transition.shape)
        for (s, a, s_next), reward in self.rewards.items():
            mean[s, a, s_next] = reward.mean
            variance[s, a, s_next] = reward.variance
        object.__setattr__(self, "reward_mean", _frozen(mean))
        object.__setattr__(self, "reward_variance", _frozen(variance))

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return categorical_cdf(self.transition)

    @cached_property
    def start_cdf(self) -> np.ndarray:
        return categorical_cdf(self.start_distribution)

    @cached_property
    def reward_std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.reward_variance, 0.0))

    @cached_property
    def terminal(self) -> np.ndarray:
        return self.gamma == 0.0

    @cached_property
    def episodic(self) -> bool:
        """True when every γ=0 state is absorbing, so the harness restarts episodes there."""
        terminals = np.flatnonzero(self.terminal)
        if terminals.size == 0:
            return False
        for s in terminals:
            for a in self.actions_per_state[s]:
                if self.transition[s, a, s] < 1.0:
                    return False
        return True

    def state_matrix(self, policy: Policy) -> np.ndarray:
        """P_π(s, s') = Σ_a π(a|s) p(s'|s, a)."""
        return np.einsum("sa,sap->sp", policy.probs, self.transition)


@dataclass(frozen=True)
class TransitionSample:
    """One transition; fields are scalars for a single stream or (runs,) arrays in lockstep mode."""

    s: int | np.ndarray
    a: int | np.ndarray
    r: float | np.ndarray
    s_next: int | np.ndarray
    rho: float | np.ndarray
    gamma_next: float | np.ndarray
    lam_next: float | np.ndarray
    episode_boundary: bool | np.ndarray


def importance_ratios(mu: Policy, pi: Policy) -> np.ndarray:
    """ρ(s, a) = π(a|s)/μ(a|s), zero wherever μ gives no mass."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(mu.probs > 0, pi.probs / np.where(mu.probs > 0, mu.probs, 1.0), 0.0)
    return ratios


def validate_mdp(mdp: TabularMdp, pi: Policy, mu: Policy) -> list[str]:
    """Return every violated model invariant; an empty list means the triple is usable."""
    problems: list[str] = []
    S = mdp.num_states
    if mdp.gamma.shape != (S,) or mdp.lam.shape != (S,):
        problems.append("gamma and lam must have one entry per state")
        return problems
    if np.any((mdp.gamma < 0) | (mdp.gamma > 1)):
        problems.append(f"gamma outside [0, 1] in states {np.flatnonzero((mdp.gamma < 0) | (mdp.gamma > 1)).tolist()}")
    if np.any((mdp.lam < 0) | (mdp.lam > 1)):
        problems.append(f"lam outside [0, 1] in states {np.flatnonzero((mdp.lam < 0) | (mdp.lam > 1)).tolist()}")
    if np.any((mdp.transition < 0) | (mdp.transition > 1)):
        problems.append("transition probabilities outside [0, 1]")
    if len(mdp.actions_per_state) != S:
        problems.append("actions_per_state must list actions for every state")
        return problems
    for s, actions in enumerate(mdp.actions_per_state):
        if not actions:
            problems.append(f"state {s} has no actions")
        for a in actions:
            total = mdp.transition[s, a].sum()
            if abs(total - 1.0) > PROB_TOLERANCE:
                problems.append(f"transition row ({s}, {a}) sums to {total:.12g}, not 1")
    if np.any(mdp.reward_variance < 0):
        problems.append("negative reward variance")
    start_total = mdp.start_distribution.sum()
    if abs(start_total - 1.0) > PROB_TOLERANCE or np.any(mdp.start_distribution < 0):
        problems.append(f"start distribution sums to {start_total:.12g}, not 1")

    for label, policy in (("target", pi), ("behavior", mu)):
        if policy.probs.shape != (S, mdp.num_actions):
            problems.append(f"{label} policy shape {policy.probs.shape} does not match MDP")
            return problems
        if np.any((policy.probs < 0) | (policy.probs > 1)):
            problems.append(f"{label} policy probabilities outside [0, 1]")
        for s, actions in enumerate(mdp.actions_per_state):
            total = policy.probs[s].sum()
            if abs(total - 1.0) > PROB_TOLERANCE:
                problems.append(f"{label} policy row {s} sums to {total:.12g}, not 1")
            offered = np.zeros(mdp.num_actions, dtype=bool)
            offered[list(actions)] = True
            if np.any(policy.probs[s][~offered] > 0):
                problems.append(f"{label} policy puts mass on actions state {s} does not offer")
    uncovered = pi.support() & ~mu.support()
    if np.any(uncovered):
        states = sorted({int(s) for s in np.argwhere(uncovered)[:, 0]})
        problems.append(f"target policy support not covered by behavior policy in states {states}")

    unreached = _states_missing_discount(mdp, pi)
    if unreached:
        problems.append(f"termination violated: no state with gamma < 1 reachable from states {unreached}")
    return problems


def _states_missing_discount(mdp: TabularMdp, pi: Policy) -> list[int]:
    """States from which no γ<1 state is reachable under the target policy."""
    adjacency = mdp.state_matrix(pi) > 0
    reach = mdp.gamma < 1.0
    while True:
        grown = reach | (adjacency & reach[None, :]).any(axis=1)
        if np.array_equal(grown, reach):
            break
        reach = grown
    return np.flatnonzero(~reach).tolist()


def make_generator(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based Philox stream; the only generator the laboratory uses."""
    return np.random.Generator(np.random.Philox(seed))


def run_streams(base_seed: int, run: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(dynamics, initialization) generators for run ``run`` of an experiment."""
    dynamics, init = np.random.SeedSequence(base_seed + run).spawn(2)
    return make_generator(dynamics), make_generator(init)


def step_batch(
    mdp: TabularMdp,
    mu: Policy,
    pi: Policy,
    s: np.ndarray,
    u_action: np.ndarray,
    u_next: np.ndarray,
    z: np.ndarray,
    rho_table: np.ndarray | None = None,
) -> TransitionSample:
    """Advance a batch of states one step from pre-drawn uniforms and standard normals."""
    s = np.asarray(s, dtype=np.intp)
    a = categorical_index(mu.cdf[s], u_action)
    s_next = categorical_index(mdp.transition_cdf[s, a], u_next)
    r = mdp.reward_mean[s, a, s_next] + mdp.reward_std[s, a, s_next] * z
    ratios = importance_ratios(mu, pi) if rho_table is None else rho_table
    gamma_next = mdp.gamma[s_next]
    boundary = (gamma_next == 0.0) & mdp.episodic
    return TransitionSample(
        s=s,
        a=a,
        r=r,
        s_next=s_next,
        rho=ratios[s, a],
        gamma_next=gamma_next,
        lam_next=mdp.lam[s_next],
        episode_boundary=boundary,
    )


def sample_start(mdp: TabularMdp, u: np.ndarray | float) -> np.ndarray:
    return categorical_index(mdp.start_cdf, u)


def sample_step(
    mdp: TabularMdp,
    mu: Policy,
    pi: Policy,
    s: int,
    rng: np.random.Generator,
    *,
    restart: bool = False,
) -> TransitionSample:
    """Draw a ~ μ(·|s), s' and r, returning the transition with its importance ratio.

    With ``restart`` the state is first redrawn from the start distribution.
    Stepping out of an absorbing terminal of an episodic MDP is an error.
    """
    if restart:
        s = int(sample_start(mdp, rng.random()))
    elif mdp.terminal[s] and mdp.episodic:
        raise MdpError(f"state {s} is terminal (gamma = 0); request a restart instead of stepping from it")
    u_action, u_next, z = rng.random(), rng.random(), rng.standard_normal()
    batch = step_batch(mdp, mu, pi, np.array([s]), np.array([u_action]), np.array([u_next]), np.array([z]))
    return TransitionSample(
        s=int(batch.s[0]),
        a=int(batch.a[0]),
        r=float(batch.r[0]),
        s_next=int(batch.s_next[0]),
        rho=float(batch.rho[0]),
        gamma_next=float(batch.gamma_next[0]),
        lam_next=float(batch.lam_next[0]),
        episode_boundary=bool(batch.episode_boundary[0]),
    )


class LockstepSampler:
    """Advances one state per run; run ``r`` reads only its own dynamics stream.

    Draws are taken in blocks of ``chunk`` steps, so a run's trajectory is the
    same whether it is simulated alone or next to other runs.
    """

    def __init__(
        self,
        mdp: TabularMdp,
        mu: Policy,
        pi: Policy,
        generators: Sequence[np.random.Generator],
        chunk: int = 2048,
    ) -> None:
        self.mdp = mdp
        self.mu = mu
        self.pi = pi
        self.generators = list(generators)
        self.chunk = chunk
        self.rho_table = importance_ratios(mu, pi)
        self._cursor = chunk
        self._uniforms = np.empty((len(self.generators), chunk, 3))
        self._normals = np.empty((len(self.generators), chunk))

    def _refill(self) -> None:
        for row, gen in enumerate(self.generators):
            self._uniforms[row] = gen.random((self.chunk, 3))
            self._normals[row] = gen.standard_normal(self.chunk)
        self._cursor = 0

    def start(self) -> np.ndarray:
        self._advance()
        return sample_start(self.mdp, self._uniforms[:, self._cursor - 1, 2])

    def _advance(self) -> None:
        if self._cursor >= self.chunk:
            self._refill()
        self._cursor += 1

    def step(self, s: np.ndarray) -> tuple[TransitionSample, np.ndarray]:
        """Return the batch transition and the successor states (restarted where episodes end)."""
        self._advance()
        k = self._cursor - 1
        u = self._uniforms[:, k]
        t = step_batch(self.mdp, self.mu, self.pi, s, u[:, 0], u[:, 1], self._normals[:, k], self.rho_table)
        following = t.s_next
        if self.mdp.episodic and t.episode_boundary.any():
            following = np.where(t.episode_boundary, sample_start(self.mdp, u[:, 2]), t.s_next)
        return t, following


def builtin_chain(lam: float = 0.9, reward_variance: float = 1.0) -> tuple[TabularMdp, Policy, Policy]:
    """Four-state deterministic chain ending in an absorbing terminal state 4.

    Every non-terminal transition pays Normal(1, ``reward_variance``) (a
    Constant(1) when the variance is zero); γ=1 until the γ=0 terminal.
    """
    num_states = 5
    transition = np.zeros((num_states, 1, num_states))
    rewards: dict[tuple[int, int, int], Reward] = {}
    for s in range(4):
        transition[s, 0, s + 1] = 1.0
        rewards[(s, 0, s + 1)] = Normal(1.0, reward_variance) if reward_variance > 0 else Constant(1.0)
    transition[4, 0, 4] = 1.0
    rewards[(4, 0, 4)] = Constant(0.0)
    start = np.zeros(num_states)
    start[0] = 1.0
    mdp = TabularMdp(
        num_states=num_states,
        actions_per_state=((0,),) * num_states,
        transition=transition,
        rewards=rewards,
        gamma=np.array([1.0, 1.0, 1.0, 1.0, 0.0]),
        lam=np.full(num_states, float(lam)),
        start_distribution=start,
        name="chain",
    )
    policy = Policy(np.ones((num_states, 1)))
    return mdp, policy, policy


# complex4: four continuing states, two actions each. State 3 (γ=0) is a soft
# terminal that keeps transitioning. Its ground truth always comes from the oracles.
COMPLEX4_GAMMA = (1.0, 0.9, 0.6, 0.0)
COMPLEX4_LAM = (1.0, 0.9, 0.5, 0.3)
COMPLEX4_TRANSITIONS: dict[tuple[int, int], dict[int, float]] = {
    (0, 0): {1: 0.8, 3: 0.2},
    (0, 1): {2: 0.6, 3: 0.4},
    (1, 0): {0: 0.3, 2: 0.7},
    (1, 1): {3: 0.5, 0: 0.5},
    (2, 0): {0: 0.5, 3: 0.5},
    (2, 1): {1: 0.6, 3: 0.4},
    (3, 0): {0: 1.0},
    (3, 1): {1: 0.5, 2: 0.5},
}
COMPLEX4_REWARDS: dict[tuple[int, int, int], Reward] = {
    (0, 0, 1): Normal(1.0, 0.5),
    (0, 0, 3): Constant(2.0),
    (0, 1, 2): Normal(0.5, 1.0),
    (0, 1, 3): Constant(-1.0),
    (1, 0, 0): Normal(-0.5, 0.25),
    (1, 0, 2): Constant(1.0),
    (1, 1, 3): Normal(2.0, 2.0),
    (1, 1, 0): Constant(0.0),
    (2, 0, 0): Constant(1.5),
    (2, 0, 3): Normal(0.0, 1.0),
    (2, 1, 1): Normal(1.0, 0.5),
    (2, 1, 3): Constant(0.5),
    (3, 0, 0): Constant(0.0),
    (3, 1, 1): Normal(1.0, 1.0),
    (3, 1, 2): Constant(-0.5),
}
COMPLEX4_BEHAVIOR = ((0.5, 0.5), (0.6, 0.4), (0.5, 0.5), (0.3, 0.7))
COMPLEX4_TARGET = ((0.7, 0.3), (0.3, 0.7), (0.2, 0.8), (0.6, 0.4))


def builtin_complex4() -> tuple[TabularMdp, Policy, Policy]:
    """Continuing four-state MDP with state-dependent γ/λ and distinct μ and π."""
    num_states = 4
    transition = np.zeros((num_states, 2, num_states))
    for (s, a), row in COMPLEX4_TRANSITIONS.items():
        for s_next, prob in row.items():
            transition[s, a, s_next] = prob
    start = np.zeros(num_states)
    start[0] = 1.0
    mdp = TabularMdp(
        num_states=num_states,
        actions_per_state=((0, 1),) * num_states,
        transition=transition,
        rewards=COMPLEX4_REWARDS,
        gamma=np.array(COMPLEX4_GAMMA),
        lam=np.array(COMPLEX4_LAM),
        start_distribution=start,
        name="complex4",
    )
    return mdp, Policy(np.array(COMPLEX4_BEHAVIOR)), Policy(np.array(COMPLEX4_TARGET))


BUILTIN_MDPS = {
    "chain": builtin_chain,
    "complex4": builtin_complex4,
}


def builtin(name: str) -> tuple[TabularMdp, Policy, Policy]:
    """Return ``(mdp, mu, pi)`` for a built-in benchmark."""
    try:
        factory = BUILTIN_MDPS[name]
    except KeyError:
        raise MdpError(f"unknown built-in MDP {name!r}; choose from {sorted(BUILTIN_MDPS)}") from None
    logging.debug("Building MDP %s", name)
    return factory()
