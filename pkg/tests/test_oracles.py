"""Tests for the ground-truth oracles: exact solves, Monte Carlo, brute force and the bound check."""
from __future__ import annotations

import numpy as np
import pytest

from varlab.estimators import WeightingMode
from varlab.mdp import Constant, Policy, TabularMdp, builtin_chain, builtin_complex4
from varlab.oracles import (
    PathBudgetExceeded,
    SingularSystemError,
    TruthMethod,
    brute_force_variance,
    exact_truth,
    exact_value,
    exact_variance,
    exact_variance_offpolicy,
    expected_sq_td_error,
    lemma1_residuals,
    monte_carlo_moments,
    verify_theorem1_bound,
)

CHAIN_J = [4.0, 3.0, 2.0, 1.0, 0.0]
CHAIN_V = [2.997541, 2.4661, 1.81, 1.0, 0.0]


def _one_state(gamma: float, lam: float, mu_row: tuple[float, float], pi_row: tuple[float, float]) -> tuple[TabularMdp, Policy, Policy]:
    transition = np.ones((1, 2, 1))
    mdp = TabularMdp(
        num_states=1,
        actions_per_state=((0, 1),),
        transition=transition,
        rewards={(0, 0, 0): Constant(1.0), (0, 1, 0): Constant(0.0)},
        gamma=np.array([gamma]),
        lam=np.array([lam]),
        start_distribution=np.array([1.0]),
        name="one-state",
    )
    return mdp, Policy(np.array([mu_row])), Policy(np.array([pi_row]))


@pytest.fixture(scope="module")
def chain() -> tuple[TabularMdp, Policy, Policy]:
    return builtin_chain(lam=0.9)


@pytest.fixture(scope="module")
def complex4() -> tuple[TabularMdp, Policy, Policy]:
    return builtin_complex4()


def test_chain_value_and_variance(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    j = exact_value(mdp, pi)
    assert j.tolist() == pytest.approx(CHAIN_J, abs=1e-12)
    assert exact_variance(mdp, pi, j).tolist() == pytest.approx(CHAIN_V, abs=1e-9)


def test_chain_variance_without_bootstrapping() -> None:
    mdp, _, pi = builtin_chain(lam=1.0)
    v = exact_variance(mdp, pi, exact_value(mdp, pi))
    assert v.tolist() == pytest.approx(CHAIN_J, abs=1e-9)


def test_variance_with_zero_lambda_is_squared_td_error() -> None:
    mdp, _, pi = builtin_chain(lam=0.0)
    j = exact_value(mdp, pi)
    assert exact_variance(mdp, pi, j) == pytest.approx(expected_sq_td_error(mdp, pi, j), abs=1e-12)


def test_expected_sq_td_error_with_perturbed_value(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    j = np.array(CHAIN_J)
    assert expected_sq_td_error(mdp, pi, j).tolist() == pytest.approx([1.0, 1.0, 1.0, 1.0, 0.0])
    j[2] += 1.0
    perturbed = expected_sq_td_error(mdp, pi, j)
    assert perturbed[1] == pytest.approx(2.0)
    assert perturbed[2] == pytest.approx(2.0)


def test_zero_rewards_give_zero_value(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, _ = complex4
    silent = TabularMdp(
        num_states=mdp.num_states,
        actions_per_state=mdp.actions_per_state,
        transition=mdp.transition,
        rewards={},
        gamma=mdp.gamma,
        lam=mdp.lam,
        start_distribution=mdp.start_distribution,
    )
    assert not exact_value(silent, mu).any()


def test_missing_discount_is_singular() -> None:
    mdp, mu, _ = _one_state(gamma=1.0, lam=0.5, mu_row=(0.5, 0.5), pi_row=(0.5, 0.5))
    with pytest.raises(SingularSystemError, match="value"):
        exact_value(mdp, mu)


def test_divergent_off_policy_variance_is_reported() -> None:
    mdp, mu, pi = _one_state(gamma=0.9, lam=0.9, mu_row=(0.5, 0.5), pi_row=(1.0, 0.0))
    j = exact_value(mdp, pi)
    assert j[0] == pytest.approx(10.0)
    with pytest.raises(SingularSystemError, match="off-policy variance"):
        exact_variance_offpolicy(mdp, mu, pi, j)


def test_off_policy_variance_reduces_on_policy(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, _ = complex4
    j = exact_value(mdp, mu)
    assert np.array_equal(exact_variance_offpolicy(mdp, mu, mu, j), exact_variance(mdp, mu, j))


def test_exact_truth_per_mode(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, pi = complex4
    on = exact_truth(mdp, mu, pi, WeightingMode.ON_POLICY)
    target = exact_truth(mdp, mu, pi, WeightingMode.OFF_POLICY_TARGET_VARIANCE)
    ret = exact_truth(mdp, mu, pi, WeightingMode.OFF_POLICY_RETURN_VARIANCE)
    assert np.array_equal(on.j, exact_value(mdp, mu))
    assert np.array_equal(target.j, ret.j)
    assert np.all(target.v >= -1e-9)
    assert np.all(ret.v >= -1e-9)
    assert not np.allclose(target.v, ret.v)
    assert on.method is TruthMethod.LINEAR_SOLVE
    assert on.second_moment == pytest.approx(on.v + on.j**2)


def test_brute_force_matches_chain_exactly(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    result = brute_force_variance(mdp, pi, np.array(CHAIN_J), max_depth=4)
    assert result.variance.tolist() == pytest.approx(CHAIN_V, abs=1e-12)
    assert result.mean.tolist() == pytest.approx(CHAIN_J, abs=1e-12)
    assert not result.tail_weights.any()


def test_brute_force_with_zero_lambda(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = complex4
    flat = TabularMdp(
        num_states=mdp.num_states,
        actions_per_state=mdp.actions_per_state,
        transition=mdp.transition,
        rewards=mdp.rewards,
        gamma=mdp.gamma,
        lam=np.zeros(mdp.num_states),
        start_distribution=mdp.start_distribution,
    )
    j = exact_value(flat, pi)
    result = brute_force_variance(flat, pi, j, max_depth=3)
    assert result.variance == pytest.approx(expected_sq_td_error(flat, pi, j), abs=1e-12)


def test_brute_force_truncation_error_is_tail_weighted(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = complex4
    j = exact_value(mdp, pi)
    v = exact_variance(mdp, pi, j)
    result = brute_force_variance(mdp, pi, j, max_depth=8)
    assert v - result.variance == pytest.approx(result.tail_weights @ v, abs=1e-10)
    assert np.all(np.abs(v - result.variance) <= result.error_bound(v.max()) + 1e-12)
    assert result.mean == pytest.approx(j, abs=1e-10)


def test_brute_force_budget(complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = complex4
    with pytest.raises(PathBudgetExceeded):
        brute_force_variance(mdp, pi, exact_value(mdp, pi), max_depth=30, path_budget=1000)


def _within(estimate: np.ndarray, truth: np.ndarray, std_err: np.ndarray, sigmas: float) -> bool:
    return bool(np.all(np.abs(estimate - truth) <= sigmas * std_err + 1e-9))


def test_monte_carlo_chain_smoke(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, pi = chain
    mc = monte_carlo_moments(mdp, mu, pi, np.array(CHAIN_J), WeightingMode.ON_POLICY, 200_000, rng=1)
    assert mc.method is TruthMethod.MONTE_CARLO
    assert mc.missing.tolist() == [False, False, False, False, True]
    assert np.isnan(mc.v[4])
    assert _within(mc.v[:4], np.array(CHAIN_V[:4]), mc.std_err[:4], 4.0)
    assert _within(mc.j[:4], np.array(CHAIN_J[:4]), mc.extras["mean_std_err"][:4], 4.0)
    second = np.array(CHAIN_V[:4]) + np.array(CHAIN_J[:4]) ** 2
    assert _within(mc.second_moment[:4], second, mc.extras["second_moment_std_err"][:4], 4.0)


def test_monte_carlo_deterministic_rewards_have_no_variance() -> None:
    mdp, mu, pi = builtin_chain(lam=0.9, reward_variance=0.0)
    mc = monte_carlo_moments(mdp, mu, pi, np.array(CHAIN_J), WeightingMode.ON_POLICY, 5_000, rng=0)
    assert mc.v[:4] == pytest.approx(np.zeros(4), abs=1e-12)


def test_monte_carlo_rejects_bad_arguments(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, pi = chain
    with pytest.raises(ValueError):
        monte_carlo_moments(mdp, mu, pi, np.zeros(5), WeightingMode.ON_POLICY, 0, rng=0)
    with pytest.raises(ValueError):
        monte_carlo_moments(mdp, mu, pi, np.zeros(5), WeightingMode.ON_POLICY, 10, rng=0, horizon_cutoff=1.0)


@pytest.mark.parametrize(
    "mode",
    [WeightingMode.ON_POLICY, WeightingMode.OFF_POLICY_TARGET_VARIANCE, WeightingMode.OFF_POLICY_RETURN_VARIANCE],
)
def test_monte_carlo_matches_exact_on_complex4(complex4: tuple[TabularMdp, Policy, Policy], mode: WeightingMode) -> None:
    mdp, mu, pi = complex4
    truth = exact_truth(mdp, mu, pi, mode)
    mc = monte_carlo_moments(mdp, mu, pi, truth.j, mode, 300_000, rng=7)
    assert not mc.missing.any()
    assert _within(mc.v, truth.v, mc.std_err, 4.0)


@pytest.mark.slow
def test_oracle_triangle_at_full_length(chain: tuple[TabularMdp, Policy, Policy], complex4: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, mu, pi = chain
    j = exact_value(mdp, pi)
    exact = exact_variance(mdp, pi, j)
    assert brute_force_variance(mdp, pi, j, max_depth=4).variance == pytest.approx(exact, abs=1e-12)
    mc = monte_carlo_moments(mdp, mu, pi, j, WeightingMode.ON_POLICY, 1_000_000, rng=123)
    assert _within(mc.v[:4], exact[:4], mc.std_err[:4], 3.0)

    mdp, mu, pi = complex4
    for mode in WeightingMode:
        truth = exact_truth(mdp, mu, pi, mode)
        mc = monte_carlo_moments(mdp, mu, pi, truth.j, mode, 1_000_000, rng=321)
        assert _within(mc.v, truth.v, mc.std_err, 3.0)


def test_lemma1_residuals_smoke(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    report = lemma1_residuals(mdp, pi, np.array(CHAIN_J), 200_000, rng=5)
    assert set(report) == {"one", "delta", "discounted_delta"}
    for residual in report.values():
        assert residual.samples > 100_000
        assert abs(residual.mean) <= 4.0 * residual.std_err


@pytest.mark.slow
def test_lemma1_residuals_full_length(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    report = lemma1_residuals(mdp, pi, np.array(CHAIN_J), 1_000_000, rng=99)
    assert abs(report["discounted_delta"].mean) <= 3.0 * report["discounted_delta"].std_err


def test_bound_with_exact_value_is_tight(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    report = verify_theorem1_bound(mdp, pi, np.array(CHAIN_J), epsilon=np.zeros(5))
    assert report.all_passed
    assert report.premises_hold.all()
    assert report.lhs == pytest.approx(report.rhs, abs=1e-9)


def test_bound_with_single_perturbed_state(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    j_approx = np.array(CHAIN_J)
    j_approx[1] += 0.5
    report = verify_theorem1_bound(mdp, pi, j_approx)
    assert report.all_passed
    assert report.premises_hold.all()
    assert report.epsilon[1] == pytest.approx(0.25)


def test_bound_over_random_perturbations(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    rng = np.random.default_rng(17)
    for _ in range(100):
        j_approx = np.array(CHAIN_J) + rng.uniform(-0.5, 0.5, size=5)
        report = verify_theorem1_bound(mdp, pi, j_approx)
        assert report.all_passed, report.slack


def test_bound_reports_failed_premises(chain: tuple[TabularMdp, Policy, Policy]) -> None:
    mdp, _, pi = chain
    report = verify_theorem1_bound(mdp, pi, np.array(CHAIN_J) + 1.0, epsilon=np.zeros(5))
    assert not report.premises_hold.any()


@pytest.mark.parametrize("problem", [builtin_chain, builtin_complex4])
def test_linear_solves_meet_absolute_residual(problem) -> None:
    mdp, mu, pi = problem()
    weighted = pi.probs[:, :, None] * mdp.transition
    value_operator = weighted.sum(axis=1) * mdp.gamma[None, :]
    j = exact_value(mdp, pi)
    mean_reward = (weighted * mdp.reward_mean).sum(axis=(1, 2))
    assert np.max(np.abs(mean_reward + value_operator @ j - j)) <= 1e-9

    v = exact_variance(mdp, pi, j)
    variance_operator = weighted.sum(axis=1) * ((mdp.gamma * mdp.lam) ** 2)[None, :]
    assert np.max(np.abs(expected_sq_td_error(mdp, pi, j) + variance_operator @ v - v)) <= 1e-9


def test_oversized_residual_is_rejected(monkeypatch: pytest.MonkeyPatch) -> None:
    from varlab import oracles

    mdp, _, pi = builtin_chain()
    monkeypatch.setattr(oracles, "RESIDUAL_TOLERANCE", -1.0)
    with pytest.raises(SingularSystemError, match="residual"):
        exact_value(mdp, pi)
