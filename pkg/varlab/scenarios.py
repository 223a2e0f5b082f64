"""Preset experiment configurations and their JSON document form."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from pydantic import ValidationError

from .estimators import WeightingMode
from .experiments import (
    AdadeltaSpec,
    ConfigurationError,
    Estimators,
    ExperimentConfig,
    StepSpec,
    ValueInit,
    VarianceInit,
)
from .schemas import AdadeltaDocument, ExperimentConfigDocument, TruthPlusErrorDocument

CHAIN_EPISODES = 20_000
COMPLEX_STEPS = 200_000
ERROR_STUDY_ALPHA_BARS = (0.05, 0.04, 0.03, 0.02, 0.01, 0.007, 0.005, 0.003, 0.001)
ERROR_STUDY_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
RATIO_GRID = (0.05, 0.01, 0.005, 0.001)


def _chain(name: str, description: str, **overrides: object) -> ExperimentConfig:
    settings: dict[str, object] = dict(
        name=name,
        description=description,
        mdp_name="chain",
        num_runs=30,
        run_length=CHAIN_EPISODES,
        log_every=10,
        steady_state_window=CHAIN_EPISODES // 20,
    )
    settings.update(overrides)
    return ExperimentConfig(**settings)  # type: ignore[arg-type]


def _complex(name: str, description: str, **overrides: object) -> ExperimentConfig:
    settings: dict[str, object] = dict(
        name=name,
        description=description,
        mdp_name="complex4",
        alpha=0.01,
        alpha_bar=0.01,
        num_runs=30,
        run_length=COMPLEX_STEPS,
        log_every=100,
        steady_state_window=COMPLEX_STEPS // 20,
    )
    settings.update(overrides)
    return ExperimentConfig(**settings)  # type: ignore[arg-type]


def _error_study(err_ratio: float) -> ExperimentConfig:
    return _complex(
        f"fig12_err{int(round(err_ratio * 100)):03d}",
        f"Value frozen at truth plus error (err_ratio={err_ratio}); summed and per-state MSE",
        alpha=0.0,
        alpha_bar=0.01,
        value_frozen=True,
        value_init=ValueInit.TRUTH_PLUS_ERROR,
        err_ratio=err_ratio,
        num_runs=120,
        run_length=80_000,
        steady_state_window=10_000,
    )


def scenario_catalog() -> dict[str, ExperimentConfig]:
    """Every preset by name, in a stable order."""
    presets = [
        _chain("fig4", "Chain, equal step sizes", alpha=0.001, alpha_bar=0.001),
        _chain("fig5", "Chain, variance step size smaller", alpha=0.01, alpha_bar=0.001),
        _chain("fig6", "Chain, value step size smaller", alpha=0.001, alpha_bar=0.01),
        _chain(
            "fig7",
            "Chain, value held fixed at the true values",
            alpha=0.0,
            alpha_bar=0.001,
            value_init=ValueInit.TRUTH,
            value_frozen=True,
        ),
        _chain(
            "fig8",
            "Chain step-size ratio sweep base, all estimates initialized to truth",
            run_length=2000,
            log_every=1,
            steady_state_window=100,
            value_init=ValueInit.TRUTH,
            variance_init=VarianceInit.TRUTH,
        ),
        _chain("fig9", "Chain, ADADELTA step sizes", alpha=AdadeltaSpec(), alpha_bar=AdadeltaSpec()),
        _complex("fig10", "complex4 evaluated on-policy under the behavior policy"),
        *(_error_study(ratio) for ratio in (0.0, 0.25, 0.5, 1.0)),
        _complex("fig13a", "complex4, traces in the variance estimators", kappa=0.0, kappa_bar=1.0),
        _complex("fig13b", "complex4, traces in the value estimator", kappa=1.0, kappa_bar=0.0),
        _complex(
            "offpolicy_target",
            "complex4 off-policy, variance of the target return (eta=1, rho_bar=rho)",
            mode=WeightingMode.OFF_POLICY_TARGET_VARIANCE,
        ),
        _complex(
            "offpolicy_return",
            "complex4 off-policy, variance of the off-policy return (rho_bar=1, eta=rho)",
            mode=WeightingMode.OFF_POLICY_RETURN_VARIANCE,
        ),
    ]
    return {preset.name: preset for preset in presets}


TABLE1_PRESETS = ("fig4", "fig5", "fig6", "fig7", "fig9", "fig10", "offpolicy_target", "offpolicy_return")


@dataclass(frozen=True)
class SweepPlan:
    base: str
    alphas: tuple[float, ...]
    alpha_bars: tuple[float, ...]
    err_ratios: tuple[float, ...] = ()


SWEEPS = {
    "fig8": SweepPlan(base="fig8", alphas=RATIO_GRID, alpha_bars=RATIO_GRID),
    "fig11": SweepPlan(base="fig12_err000", alphas=(0.0,), alpha_bars=ERROR_STUDY_ALPHA_BARS, err_ratios=ERROR_STUDY_RATIOS),
}


def preset(name: str) -> ExperimentConfig:
    catalog = scenario_catalog()
    try:
        return catalog[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; run 'list' to see the catalog") from None


def _step_to_document(spec: StepSpec) -> float | dict:
    if isinstance(spec, AdadeltaSpec):
        return {"adadelta": {"decay": spec.decay, "epsilon": spec.epsilon}}
    return float(spec)


def _step_from_document(value: float | AdadeltaDocument) -> StepSpec:
    if isinstance(value, AdadeltaDocument):
        return AdadeltaSpec(decay=value.adadelta.decay, epsilon=value.adadelta.epsilon)
    return float(value)


def config_to_document(cfg: ExperimentConfig) -> dict:
    if cfg.value_init is ValueInit.TRUTH_PLUS_ERROR:
        value_init: str | dict = {"truth_plus_error": cfg.err_ratio}
    else:
        value_init = cfg.value_init.value
    document = ExperimentConfigDocument(
        name=cfg.name,
        description=cfg.description,
        mdp_name=cfg.mdp_name,
        mode=cfg.mode.value,
        alpha=_step_to_document(cfg.alpha),
        alpha_bar=_step_to_document(cfg.alpha_bar),
        kappa=cfg.kappa,
        kappa_bar=cfg.kappa_bar,
        estimators=cfg.estimators.value,
        num_runs=cfg.num_runs,
        run_length=cfg.run_length,
        base_seed=cfg.base_seed,
        value_init=value_init,
        variance_init=cfg.variance_init.value,
        value_frozen=cfg.value_frozen,
        log_every=cfg.log_every,
        steady_state_window=cfg.steady_state_window,
    )
    return document.model_dump(mode="json")


def config_from_document(payload: dict) -> ExperimentConfig:
    """Validate a configuration document and build the config it describes."""
    try:
        document = ExperimentConfigDocument.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid experiment configuration: {exc}") from exc
    if isinstance(document.value_init, TruthPlusErrorDocument):
        value_init, err_ratio = ValueInit.TRUTH_PLUS_ERROR, document.value_init.truth_plus_error
    else:
        value_init, err_ratio = ValueInit(document.value_init), 0.0
    cfg = ExperimentConfig(
        name=document.name,
        description=document.description,
        mdp_name=document.mdp_name,
        mode=WeightingMode(document.mode),
        alpha=_step_from_document(document.alpha),
        alpha_bar=_step_from_document(document.alpha_bar),
        kappa=document.kappa,
        kappa_bar=document.kappa_bar,
        estimators=Estimators(document.estimators),
        num_runs=document.num_runs,
        run_length=document.run_length,
        base_seed=document.base_seed,
        value_init=value_init,
        err_ratio=err_ratio,
        variance_init=VarianceInit(document.variance_init),
        value_frozen=document.value_frozen,
        log_every=document.log_every,
        steady_state_window=document.steady_state_window,
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with Path(path).open("r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{path}: configuration must be a JSON object")
    return config_from_document(payload)
