"""Tests for experiment configs, the lockstep harness and run metrics."""
from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from varlab.estimators import WeightingMode
from varlab.experiments import (
    AdadeltaSpec,
    ConfigurationError,
    Estimators,
    ExperimentConfig,
    SweepResult,
    ValueInit,
    _simulate_runs,
    best_step_per_state,
    error_injection_study,
    experiment_truth,
    inject_value_error,
    load_problem,
    mse,
    run_experiment,
    sweep_step_sizes,
    update_magnitude,
    update_magnitude_table,
)
from varlab.mdp import make_generator
from varlab.scenarios import ERROR_STUDY_ALPHA_BARS, RATIO_GRID, SWEEPS, preset

CHAIN_V = np.array([2.997541, 2.4661, 1.81, 1.0])


def _small_chain(**overrides: object) -> ExperimentConfig:
    settings: dict[str, object] = dict(
        name="small", mdp_name="chain", alpha=0.05, alpha_bar=0.05, num_runs=3, run_length=15, log_every=5, steady_state_window=5
    )
    settings.update(overrides)
    return ExperimentConfig(**settings)  # type: ignore[arg-type]


@pytest.mark.parametrize(
    "changes",
    [
        {"num_runs": 0},
        {"run_length": -1},
        {"log_every": 0},
        {"err_ratio": -0.5},
        {"steady_state_window": 100},
        {"alpha": 1.5},
        {"alpha_bar": -0.1},
        {"kappa_bar": 1.2},
    ],
)
def test_validate_rejects(changes: dict) -> None:
    with pytest.raises(ConfigurationError):
        _small_chain(**changes).validate()


def test_adadelta_specs_skip_range_check() -> None:
    cfg = _small_chain(alpha=AdadeltaSpec(), alpha_bar=AdadeltaSpec())
    cfg.validate()
    assert cfg.uses_adadelta


def test_load_problem_unknown_mdp() -> None:
    with pytest.raises(ConfigurationError, match="unknown MDP"):
        load_problem(_small_chain(mdp_name="gridworld"))


def test_load_problem_picks_evaluated_policy() -> None:
    on = load_problem(preset("fig10"))
    off = load_problem(preset("offpolicy_target"))
    assert on[2] is on[1]
    assert not np.array_equal(off[2].probs, off[1].probs)


def test_inject_value_error_is_uniform() -> None:
    j = np.zeros(4000)
    v = np.array([2.0, -1.0])
    noisy = inject_value_error(j, 0.5, v, make_generator(17))
    assert np.abs(noisy).max() <= 1.0
    assert stats.kstest(noisy, "uniform", args=(-1.0, 2.0)).pvalue > 1e-3


def test_inject_value_error_without_error_copies() -> None:
    j = np.array([1.0, 2.0])
    out = inject_value_error(j, 0.0, np.ones(2), make_generator(0))
    assert out.tolist() == [1.0, 2.0]
    assert out is not j
    with pytest.raises(ConfigurationError):
        inject_value_error(j, -1.0, np.ones(2), make_generator(0))


def test_run_shapes_and_reproducibility() -> None:
    cfg = _small_chain()
    first = run_experiment(cfg, workers=1)
    again = run_experiment(cfg, workers=1)
    assert first.times.tolist() == [0, 5, 10, 15]
    assert first.episodic
    assert set(first.estimates) == {"value", "direct", "second_moment", "vtd"}
    for name, values in first.estimates.items():
        assert values.shape == (3, 4, 5)
        assert np.array_equal(values, again.estimates[name])
        assert first.mean[name].shape == (4, 5)
    assert not first.estimates["value"][:, 0].any()
    assert first.step_sizes == {}


def test_estimator_selection() -> None:
    result = run_experiment(_small_chain(estimators=Estimators.DIRECT, num_runs=1), workers=1)
    assert set(result.estimates) == {"value", "direct"}
    assert result.variance_estimators == ["direct"]
    assert np.isnan(update_magnitude(result)["vtd"])


def test_pool_matches_single_process() -> None:
    cfg = _small_chain()
    serial = run_experiment(cfg, workers=1)
    pooled = run_experiment(cfg, workers=2)
    for name in serial.estimates:
        assert np.array_equal(serial.estimates[name], pooled.estimates[name])
        assert np.array_equal(serial.update_rates[name], pooled.update_rates[name])


def test_run_does_not_depend_on_its_batch() -> None:
    cfg = _small_chain(value_init=ValueInit.TRUTH_PLUS_ERROR, err_ratio=0.5)
    truth = experiment_truth(cfg)
    batch = run_experiment(cfg, truth, workers=1)
    solo = _simulate_runs(cfg, truth, [2])
    for name, values in solo.estimates.items():
        assert np.array_equal(values[0], batch.estimates[name][2])


def test_continuing_runs_log_on_timesteps() -> None:
    cfg = ExperimentConfig(name="c4", mdp_name="complex4", alpha=0.01, alpha_bar=0.01, num_runs=2, run_length=40, log_every=10, steady_state_window=20)
    result = run_experiment(cfg, workers=1)
    assert not result.episodic
    assert result.estimates["vtd"].shape == (2, 5, 4)
    assert mse(result).per_state["vtd"].shape == (4,)


def test_frozen_value_never_moves() -> None:
    cfg = preset("fig7").replace(num_runs=2, run_length=20, steady_state_window=10)
    result = run_experiment(cfg, workers=1)
    assert update_magnitude(result)["value"] == 0.0
    assert np.all(result.estimates["value"] == result.truth.j)
    assert update_magnitude(result)["direct"] > 0.0


def test_adadelta_run_logs_step_sizes() -> None:
    cfg = preset("fig9").replace(num_runs=2, run_length=30, steady_state_window=10)
    result = run_experiment(cfg, workers=1)
    assert set(result.step_sizes) == {"value", "direct", "vtd"}
    for rates in result.step_sizes.values():
        assert rates.shape == (2, 3)
        assert np.all(rates > 0.0)


def test_modes_agree_when_policies_match() -> None:
    runs = {
        mode: run_experiment(_small_chain(mode=mode, num_runs=2), workers=1)
        for mode in WeightingMode
    }
    reference = runs[WeightingMode.ON_POLICY]
    for result in runs.values():
        for name, values in reference.estimates.items():
            assert np.array_equal(values, result.estimates[name])


def test_mse_window_bounds() -> None:
    result = run_experiment(_small_chain(num_runs=1), workers=1)
    assert mse(result, window=4).summed["direct"] >= 0.0
    with pytest.raises(ConfigurationError):
        mse(result, window=5)


def test_update_magnitude_table_columns() -> None:
    results = {"small": run_experiment(_small_chain(num_runs=1), workers=1)}
    table = update_magnitude_table(results)
    assert list(table.columns) == ["Value", "Snd Mmnt", "VTD", "Direct"]
    assert table.index.tolist() == ["small"]


def test_sweep_shapes_and_best_cells() -> None:
    cfg = _small_chain(num_runs=1, run_length=20, value_init=ValueInit.TRUTH)
    sweep = sweep_step_sizes(cfg, [0.0, 0.05], [0.05, 0.01])
    assert sweep.summed["direct"].shape == (2, 2)
    assert sweep.per_state["vtd"].shape == (2, 2, 5)
    alpha_index, alpha_bar_index = sweep.best_cell("direct")
    assert sweep.summed["direct"][alpha_index, alpha_bar_index] == sweep.summed["direct"].min()
    with pytest.raises(ConfigurationError):
        sweep_step_sizes(cfg, [], [0.1])


def test_error_injection_freezes_value() -> None:
    cfg = preset("fig12_err000").replace(num_runs=2, run_length=50, log_every=10, steady_state_window=20)
    studies = error_injection_study(cfg, [0.0, 0.5], [0.05, 0.01])
    assert sorted(studies) == [0.0, 0.5]
    rows = best_step_per_state(studies, "direct")
    assert len(rows) == 2 * 4
    assert {row.alpha_bar for row in rows} <= {0.05, 0.01}


def test_chain_estimates_settle_near_truth() -> None:
    cfg = _small_chain(num_runs=20, run_length=4000, log_every=10, steady_state_window=2000, alpha=0.01, alpha_bar=0.01)
    result = run_experiment(cfg, workers=1)
    window = 2000 // 10
    for name in ("direct", "vtd"):
        settled = result.estimates[name][:, -window:, :4].mean(axis=(0, 1))
        assert settled == pytest.approx(CHAIN_V, abs=0.25)


@pytest.mark.slow
def test_equal_step_sizes_converge_to_truth() -> None:
    result = run_experiment(preset("fig4"))
    window = result.config.steady_state_window // result.config.log_every
    for name in ("direct", "vtd"):
        settled = result.mean[name][-window:, :4].mean(axis=0)
        assert settled == pytest.approx(CHAIN_V, abs=0.15)


@pytest.mark.slow
def test_direct_beats_vtd_off_the_diagonal() -> None:
    plan = SWEEPS["fig8"]
    sweep = sweep_step_sizes(preset(plan.base), plan.alphas, plan.alpha_bars)
    direct, vtd = sweep.summed["direct"], sweep.summed["vtd"]
    off_diagonal = [(i, k) for i in range(len(RATIO_GRID)) for k in range(len(RATIO_GRID)) if i != k]
    wins = sum(direct[i, k] <= vtd[i, k] for i, k in off_diagonal)
    assert wins >= 0.9 * len(off_diagonal)
    for i in range(len(RATIO_GRID)):
        assert direct[i, i] == pytest.approx(vtd[i, i], rel=0.1)


@pytest.mark.slow
def test_vtd_dips_and_overshoots() -> None:
    fig5 = run_experiment(preset("fig5"))
    assert fig5.mean["vtd"][:, 0].min() < -0.5
    assert fig5.mean["direct"][:, 0].min() >= -0.05
    fig6 = run_experiment(preset("fig6"))
    vtd_peak, direct_peak = fig6.mean["vtd"][:, 0].max(), fig6.mean["direct"][:, 0].max()
    assert direct_peak > CHAIN_V[0]
    assert vtd_peak >= direct_peak


@pytest.mark.slow
def test_frozen_value_spread_is_larger_for_vtd() -> None:
    result = run_experiment(preset("fig7"))
    window = result.config.steady_state_window // result.config.log_every
    assert result.std["vtd"][-window:, 0].mean() > result.std["direct"][-window:, 0].mean()


@pytest.mark.slow
@pytest.mark.parametrize(
    ("name", "expected"),
    [
        ("fig4", (0.00332, 0.0157, 0.00415, 0.00415)),
        ("fig5", (0.0322, 0.0165, 0.143, 0.00387)),
        ("fig6", (0.00332, 0.156, 0.142, 0.0419)),
    ],
)
def test_update_magnitudes_match_table(name: str, expected: tuple[float, float, float, float]) -> None:
    magnitudes = update_magnitude(run_experiment(preset(name)))
    observed = (magnitudes["value"], magnitudes["second_moment"], magnitudes["vtd"], magnitudes["direct"])
    assert observed == pytest.approx(expected, rel=0.25)


@pytest.mark.slow
def test_direct_is_less_affected_by_value_error() -> None:
    studies = error_injection_study(preset("fig12_err000"), [0.5, 1.0], ERROR_STUDY_ALPHA_BARS)
    for sweep in studies.values():
        assert sweep.summed["direct"].min() <= sweep.summed["vtd"].min()


def test_best_cell_prefers_smaller_steps_on_ties() -> None:
    summed = np.array([[1.0, 2.0], [1.0, 1.0], [3.0, 1.0]])
    sweep = SweepResult(
        alphas=[0.05, 0.001, 0.01],
        alpha_bars=[0.05, 0.001],
        summed={"direct": summed},
        per_state={"direct": np.zeros((3, 2, 1))},
        final_mean={"direct": np.zeros((3, 2, 1))},
        final_std={"direct": np.zeros((3, 2, 1))},
    )
    assert sweep.best_cell("direct") == (1, 1)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["fig4", "fig10"])
def test_equal_step_sizes_give_matching_update_sizes(name: str) -> None:
    magnitudes = update_magnitude(run_experiment(preset(name)))
    assert abs(magnitudes["vtd"] - magnitudes["direct"]) / magnitudes["direct"] <= 0.05


@pytest.mark.slow
def test_value_error_biases_direct_upward() -> None:
    base = preset("fig12_err000")
    truth = experiment_truth(base)
    studies = error_injection_study(base, [0.5, 1.0], ERROR_STUDY_ALPHA_BARS, truth)
    states = truth.v.size
    for err_ratio in (0.5, 1.0):
        direct = best_step_per_state({err_ratio: studies[err_ratio]}, "direct")
        vtd = best_step_per_state({err_ratio: studies[err_ratio]}, "vtd")
        noise = [3.0 * row.std / np.sqrt(base.num_runs) for row in vtd]
        direct_bias = [row.mean - truth.v[row.state] for row in direct]
        vtd_bias = [row.mean - truth.v[row.state] for row in vtd]
        assert sum(bias >= 0.0 for bias in direct_bias) >= states / 2
        assert sum(bias <= tol for bias, tol in zip(vtd_bias, noise)) >= states / 2
