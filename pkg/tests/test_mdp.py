"""Tests for the MDP model, validation and trajectory sampling."""
from __future__ import annotations

import numpy as np
import pytest

from varlab.mdp import (
    Constant,
    LockstepSampler,
    MdpError,
    Normal,
    Policy,
    TabularMdp,
    builtin,
    builtin_chain,
    builtin_complex4,
    categorical_cdf,
    categorical_index,
    importance_ratios,
    make_generator,
    run_streams,
    sample_step,
    step_batch,
    validate_mdp,
)


def _looping_mdp(gamma: float) -> tuple[TabularMdp, Policy]:
    """Two states that swap forever with discount ``gamma`` everywhere."""
    transition = np.zeros((2, 1, 2))
    transition[0, 0, 1] = 1.0
    transition[1, 0, 0] = 1.0
    mdp = TabularMdp(
        num_states=2,
        actions_per_state=((0,), (0,)),
        transition=transition,
        rewards={(0, 0, 1): Constant(1.0), (1, 0, 0): Constant(0.0)},
        gamma=np.full(2, gamma),
        lam=np.full(2, 0.5),
        start_distribution=np.array([1.0, 0.0]),
        name="loop",
    )
    return mdp, Policy(np.ones((2, 1)))


@pytest.mark.parametrize("name", ["chain", "complex4"])
def test_builtins_are_valid(name: str) -> None:
    mdp, mu, pi = builtin(name)
    assert validate_mdp(mdp, pi, mu) == []
    assert mdp.name == name


def test_unknown_builtin_is_rejected() -> None:
    with pytest.raises(MdpError, match="unknown built-in"):
        builtin("gridworld")


def test_episodic_flag() -> None:
    assert builtin_chain()[0].episodic
    assert not builtin_complex4()[0].episodic


def test_chain_rewards_follow_variance() -> None:
    noisy, _, _ = builtin_chain(reward_variance=1.0)
    quiet, _, _ = builtin_chain(reward_variance=0.0)
    assert noisy.rewards[(0, 0, 1)] == Normal(1.0, 1.0)
    assert quiet.rewards[(0, 0, 1)] == Constant(1.0)
    assert quiet.reward_variance.sum() == 0.0
    assert noisy.reward_mean[3, 0, 4] == 1.0


def test_validate_reports_bad_rows_and_support() -> None:
    mdp, mu, pi = builtin_complex4()
    broken = np.array(mdp.transition)
    broken[0, 0, 1] = 0.5
    bad = TabularMdp(
        num_states=mdp.num_states,
        actions_per_state=mdp.actions_per_state,
        transition=broken,
        rewards=mdp.rewards,
        gamma=mdp.gamma,
        lam=mdp.lam,
        start_distribution=mdp.start_distribution,
    )
    narrow_mu = Policy(np.array([[1.0, 0.0], [0.6, 0.4], [0.5, 0.5], [0.3, 0.7]]))
    problems = validate_mdp(bad, pi, narrow_mu)
    assert any("(0, 0)" in problem for problem in problems)
    assert any("not covered" in problem for problem in problems)


def test_validate_reports_missing_discount() -> None:
    mdp, policy = _looping_mdp(gamma=1.0)
    problems = validate_mdp(mdp, policy, policy)
    assert len(problems) == 1
    assert "termination violated" in problems[0]
    assert validate_mdp(_looping_mdp(0.9)[0], policy, policy) == []


def test_categorical_cdf_never_selects_zero_mass() -> None:
    cdf = categorical_cdf(np.array([[0.3, 0.7 - 1e-17, 0.0]]))
    assert cdf[0].tolist() == [0.3, 1.0, 1.0]
    picks = categorical_index(cdf, np.array([[0.0], [0.29], [0.3], [0.999999999]]))
    assert picks.ravel().tolist() == [0, 0, 1, 1]


def test_importance_ratios_zero_outside_behavior_support() -> None:
    mu = Policy(np.array([[1.0, 0.0], [0.25, 0.75]]))
    pi = Policy(np.array([[0.5, 0.5], [0.5, 0.5]]))
    ratios = importance_ratios(mu, pi)
    assert ratios.tolist() == [[0.5, 0.0], [2.0, 2.0 / 3.0]]


def test_policy_arrays_are_read_only() -> None:
    _, mu, _ = builtin_complex4()
    with pytest.raises(ValueError):
        mu.probs[0, 0] = 1.0


def test_sample_step_from_terminal_needs_restart() -> None:
    mdp, mu, pi = builtin_chain()
    rng = make_generator(3)
    with pytest.raises(MdpError, match="terminal"):
        sample_step(mdp, mu, pi, 4, rng)
    t = sample_step(mdp, mu, pi, 4, rng, restart=True)
    assert (t.s, t.s_next) == (0, 1)


def test_sample_step_into_terminal_marks_boundary() -> None:
    mdp, mu, pi = builtin_chain()
    t = sample_step(mdp, mu, pi, 3, make_generator(0))
    assert t.s_next == 4
    assert t.episode_boundary is True
    assert t.gamma_next == 0.0


def test_soft_terminal_keeps_transitioning() -> None:
    mdp, mu, pi = builtin_complex4()
    t = sample_step(mdp, mu, pi, 3, make_generator(1))
    assert t.s == 3
    assert t.episode_boundary is False
    assert t.rho == pytest.approx(pi.probs[3, t.a] / mu.probs[3, t.a])


def test_step_batch_frequencies_match_model() -> None:
    mdp, mu, pi = builtin_complex4()
    rng = make_generator(11)
    n = 200_000
    s = np.zeros(n, dtype=np.intp)
    t = step_batch(mdp, mu, pi, s, rng.random(n), rng.random(n), rng.standard_normal(n))
    assert np.mean(t.a == 0) == pytest.approx(mu.probs[0, 0], abs=0.01)
    expected_next = mdp.state_matrix(mu)[0]
    observed_next = np.bincount(t.s_next, minlength=mdp.num_states) / n
    assert observed_next == pytest.approx(expected_next, abs=0.01)
    taken = (t.a == 0) & (t.s_next == 1)
    assert np.mean(t.r[taken]) == pytest.approx(1.0, abs=0.02)
    assert np.var(t.r[taken]) == pytest.approx(0.5, abs=0.03)


def test_run_streams_are_distinct_and_repeatable() -> None:
    dynamics, init = run_streams(7, 2)
    again, _ = run_streams(7, 2)
    first = dynamics.random(5)
    assert np.array_equal(first, again.random(5))
    assert not np.array_equal(first, init.random(5))


def test_lockstep_run_matches_solo_run() -> None:
    mdp, mu, pi = builtin_complex4()
    batch = LockstepSampler(mdp, mu, pi, [run_streams(0, run)[0] for run in range(3)], chunk=64)
    solo = LockstepSampler(mdp, mu, pi, [run_streams(0, 2)[0]], chunk=64)
    s_batch, s_solo = batch.start(), solo.start()
    for _ in range(300):
        t_batch, s_batch = batch.step(s_batch)
        t_solo, s_solo = solo.step(s_solo)
        assert t_batch.s[2] == t_solo.s[0]
        assert t_batch.r[2] == t_solo.r[0]
        assert s_batch[2] == s_solo[0]


def test_lockstep_restarts_episodes() -> None:
    mdp, mu, pi = builtin_chain()
    sampler = LockstepSampler(mdp, mu, pi, [make_generator(5)])
    s = sampler.start()
    seen = []
    for _ in range(12):
        t, s = sampler.step(s)
        seen.append((int(t.s[0]), bool(t.episode_boundary[0])))
    assert [state for state, _ in seen] == [0, 1, 2, 3] * 3
    assert [boundary for _, boundary in seen] == [False, False, False, True] * 3
