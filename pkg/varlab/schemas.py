"""Versioned JSON document schemas (pydantic) for MDPs and experiment configurations."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .mdp import BUILTIN_MDPS, Constant, MdpError, Normal, Policy, Reward, TabularMdp, builtin

SCHEMA_VERSION = 1


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransitionEntry(_Document):
    state: int = Field(ge=0)
    action: int = Field(ge=0)
    next: int = Field(ge=0)
    prob: float = Field(ge=0.0, le=1.0)


class RewardEntry(_Document):
    state: int = Field(ge=0)
    action: int = Field(ge=0)
    next: int = Field(ge=0)
    kind: Literal["constant", "normal"]
    mean: float
    variance: float = Field(default=0.0, ge=0.0)


class MdpDocument(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "mdp"
    num_states: int = Field(ge=1)
    gamma: list[float]
    lam: list[float]
    start: list[float]
    actions: list[list[int]]
    transitions: list[TransitionEntry]
    rewards: list[RewardEntry] = Field(default_factory=list)
    behavior: dict[int, dict[int, float]]
    target: dict[int, dict[int, float]]

    @field_validator("gamma", "lam", "start")
    @classmethod
    def _per_state_vector(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("per-state vectors must not be empty")
        return value


class AdadeltaParameters(_Document):
    decay: float = Field(default=0.99, gt=0.0, lt=1.0)
    epsilon: float = Field(default=1e-6, gt=0.0)


class AdadeltaDocument(_Document):
    adadelta: AdadeltaParameters = Field(default_factory=AdadeltaParameters)


class TruthPlusErrorDocument(_Document):
    truth_plus_error: float = Field(ge=0.0)


class ExperimentConfigDocument(_Document):
    """On-disk form of an experiment configuration; unknown keys are rejected."""

    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "custom"
    description: str = ""
    mdp_name: str = "chain"
    mode: Literal["on-policy", "off-policy-target-variance", "off-policy-return-variance"] = "on-policy"
    alpha: Union[float, AdadeltaDocument] = 0.001
    alpha_bar: Union[float, AdadeltaDocument] = 0.001
    kappa: float = Field(default=0.0, ge=0.0, le=1.0)
    kappa_bar: float = Field(default=0.0, ge=0.0, le=1.0)
    estimators: Literal["direct", "vtd", "both"] = "both"
    num_runs: int = Field(default=30, ge=1)
    run_length: int = Field(default=20_000, ge=0)
    base_seed: int = 0
    value_init: Union[Literal["zero", "truth"], TruthPlusErrorDocument] = "zero"
    variance_init: Literal["zero", "truth"] = "zero"
    value_frozen: bool = False
    log_every: int = Field(default=1, ge=1)
    steady_state_window: int = Field(default=1000, ge=1)


def mdp_to_document(mdp: TabularMdp, mu: Policy, pi: Policy) -> dict:
    transitions = [
        {"state": int(s), "action": int(a), "next": int(n), "prob": float(mdp.transition[s, a, n])}
        for s, a, n in zip(*np.nonzero(mdp.transition))
    ]
    rewards = []
    for (s, a, n), reward in sorted(mdp.rewards.items()):
        if isinstance(reward, Normal):
            rewards.append({"state": s, "action": a, "next": n, "kind": "normal", "mean": reward.mean, "variance": reward.variance})
        else:
            rewards.append({"state": s, "action": a, "next": n, "kind": "constant", "mean": reward.mean, "variance": 0.0})

    def table(policy: Policy) -> dict[int, dict[int, float]]:
        return {
            s: {int(a): float(policy.probs[s, a]) for a in mdp.actions_per_state[s] if policy.probs[s, a] > 0}
            for s in range(mdp.num_states)
        }

    document = MdpDocument(
        name=mdp.name,
        num_states=mdp.num_states,
        gamma=mdp.gamma.tolist(),
        lam=mdp.lam.tolist(),
        start=mdp.start_distribution.tolist(),
        actions=[list(row) for row in mdp.actions_per_state],
        transitions=transitions,
        rewards=rewards,
        behavior=table(mu),
        target=table(pi),
    )
    return document.model_dump(mode="json")


def mdp_from_document(payload: dict | MdpDocument) -> tuple[TabularMdp, Policy, Policy]:
    """Build ``(mdp, mu, pi)`` from a validated MDP document."""
    document = payload if isinstance(payload, MdpDocument) else MdpDocument.model_validate(payload)
    S = document.num_states
    if len(document.gamma) != S or len(document.lam) != S or len(document.start) != S or len(document.actions) != S:
        raise MdpError("gamma, lam, start and actions need one entry per state")
    num_actions = 1 + max((a for row in document.actions for a in row), default=0)
    transition = np.zeros((S, num_actions, S))
    for entry in document.transitions:
        if entry.state >= S or entry.next >= S or entry.action >= num_actions:
            raise MdpError(f"transition {entry.state}->{entry.next} via {entry.action} is out of range")
        transition[entry.state, entry.action, entry.next] += entry.prob
    rewards: dict[tuple[int, int, int], Reward] = {}
    for entry in document.rewards:
        key = (entry.state, entry.action, entry.next)
        rewards[key] = Normal(entry.mean, entry.variance) if entry.kind == "normal" else Constant(entry.mean)
    mdp = TabularMdp(
        num_states=S,
        actions_per_state=tuple(tuple(row) for row in document.actions),
        transition=transition,
        rewards=rewards,
        gamma=np.array(document.gamma),
        lam=np.array(document.lam),
        start_distribution=np.array(document.start),
        name=document.name,
    )
    return mdp, Policy.from_table(document.behavior, S, num_actions), Policy.from_table(document.target, S, num_actions)


def load_mdp_file(path: str | Path) -> tuple[TabularMdp, Policy, Policy]:
    with Path(path).open("r", encoding="utf-8") as handle:
        payload = json.load(handle)
    return mdp_from_document(payload)


def resolve_mdp(name: str) -> tuple[TabularMdp, Policy, Policy]:
    """A built-in benchmark by name, or an MDP document by path."""
    if name in BUILTIN_MDPS:
        return builtin(name)
    path = Path(name)
    if path.suffix.lower() == ".json" and path.exists():
        return load_mdp_file(path)
    raise MdpError(f"unknown MDP {name!r}: not a built-in ({', '.join(sorted(BUILTIN_MDPS))}) and not an existing .json file")


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def canonical_hash(payload: dict) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON text."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def mdp_fingerprint(mdp: TabularMdp, mu: Policy, pi: Policy) -> str:
    return canonical_hash(mdp_to_document(mdp, mu, pi))
