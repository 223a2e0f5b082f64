"""Command-line surface: list presets, compute ground truth, run experiments and sweeps."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import textwrap
from pathlib import Path
from typing import Callable, Sequence

from .estimators import WeightingMode
from .experiments import (
    ConfigurationError,
    best_step_per_state,
    error_injection_study,
    run_experiment,
    sweep_step_sizes,
    update_magnitude_table,
)
from .mdp import BUILTIN_MDPS, MdpError, builtin
from .oracles import PathBudgetExceeded, SingularSystemError, TruthMethod
from .pipeline import BRUTE_FORCE_DEPTH, MONTE_CARLO_STEPS, compute_truth, truth_payload
from .reporting import write_report
from .scenarios import SWEEPS, TABLE1_PRESETS, load_config, preset, scenario_catalog
from .schemas import mdp_to_document, resolve_mdp

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

METHODS = {"exact": TruthMethod.LINEAR_SOLVE, "monte-carlo": TruthMethod.MONTE_CARLO, "brute-force": TruthMethod.BRUTE_FORCE}


def setup_logging(debug: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="[%(levelname)s] %(message)s",
    )


def _write_json(path: Path | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2)
    if path is None:
        print(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")
    logging.info("Wrote %s", path)


def cmd_list(args: argparse.Namespace) -> int:
    for name, cfg in scenario_catalog().items():
        print(f"{name:18s} {cfg.mdp_name:9s} {cfg.description}")
    return EXIT_OK


def cmd_truth(args: argparse.Namespace) -> int:
    try:
        mdp, mu, pi = resolve_mdp(args.mdp)
    except MdpError as exc:
        raise ConfigurationError(str(exc)) from exc
    mode = WeightingMode(args.mode)
    truth = compute_truth(mdp, mu, pi, mode, METHODS[args.method], seed=args.seed, steps=args.steps, depth=args.depth)
    _write_json(args.out, {"mdp_name": args.mdp, "mode": mode.value, "truth": truth_payload(truth)})
    return EXIT_OK


def _configured_run(args: argparse.Namespace):
    cfg = load_config(args.config) if args.config else preset(args.preset)
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.runs is not None:
        overrides["num_runs"] = args.runs
    if args.run_length is not None:
        overrides["run_length"] = args.run_length
        overrides["steady_state_window"] = min(cfg.steady_state_window, max(args.run_length, 1))
    return cfg.replace(**overrides) if overrides else cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _configured_run(args)
    cfg.validate()
    out = Path(args.out) / cfg.name
    result = run_experiment(cfg, workers=args.workers)
    summary = write_report(result, out)
    for name, value in sorted(summary.summed_mse.items()):
        print(f"{name:8s} steady-state summed MSE {value:.6g}")
    return EXIT_OK


def cmd_table1(args: argparse.Namespace) -> int:
    results = {}
    for name in TABLE1_PRESETS:
        cfg = preset(name)
        if args.runs is not None:
            cfg = cfg.replace(num_runs=args.runs)
        results[name] = run_experiment(cfg, workers=args.workers)
    table = update_magnitude_table(results)
    print(table.to_string(float_format=lambda value: f"{value:.3g}"))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, float_format="%.17g")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    plan = SWEEPS.get(args.name)
    if plan is None:
        raise ConfigurationError(f"unknown sweep {args.name!r}; choose from {sorted(SWEEPS)}")
    base = preset(plan.base)
    if args.runs is not None:
        base = base.replace(num_runs=args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if plan.err_ratios:
        studies = error_injection_study(base, plan.err_ratios, plan.alpha_bars, workers=args.workers)
        payload = {
            "err_ratios": {
                str(ratio): {
                    name: {"alpha_bars": list(study.alpha_bars), "summed": study.summed[name][0].tolist()}
                    for name in study.summed
                }
                for ratio, study in studies.items()
            },
            "best_per_state": {
                name: [row.__dict__ for row in best_step_per_state(studies, name)]
                for name in next(iter(studies.values())).summed
            },
        }
    else:
        sweep = sweep_step_sizes(base, plan.alphas, plan.alpha_bars, workers=args.workers)
        payload = {
            "alphas": sweep.alphas,
            "alpha_bars": sweep.alpha_bars,
            "summed": {name: grid.tolist() for name, grid in sweep.summed.items()},
        }
    _write_json(out / f"{args.name}.json", payload)
    return EXIT_OK


def cmd_export_mdp(args: argparse.Namespace) -> int:
    if args.name not in BUILTIN_MDPS:
        raise ConfigurationError(f"unknown built-in MDP {args.name!r}; choose from {sorted(BUILTIN_MDPS)}")
    _write_json(Path(args.out) if args.out else None, mdp_to_document(*builtin(args.name)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lab.py",
        description="VarLab: estimators of the variance of the λ-return",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent(
            """
              Examples:
                lab.py list
                lab.py truth --mdp complex4 --mode off-policy-return-variance
                lab.py run --preset fig4 --out results/
                lab.py sweep --name fig8 --out results/
            """
        ),
    )
    parser.add_argument("--debug", action="store_true", help="verbose logging")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("list", help="print the preset catalog").set_defaults(handler=cmd_list)

    truth = commands.add_parser("truth", help="compute ground truth for an MDP")
    truth.add_argument("--mdp", required=True, help="built-in name or MDP document path")
    truth.add_argument("--mode", default=WeightingMode.ON_POLICY.value, choices=[mode.value for mode in WeightingMode])
    truth.add_argument("--method", default="exact", choices=sorted(METHODS))
    truth.add_argument("--steps", type=int, default=MONTE_CARLO_STEPS, help="Monte Carlo timesteps")
    truth.add_argument("--depth", type=int, default=BRUTE_FORCE_DEPTH, help="brute-force enumeration depth")
    truth.add_argument("--seed", type=int, default=0)
    truth.add_argument("--out", type=Path, help="write JSON here instead of stdout")
    truth.set_defaults(handler=cmd_truth)

    run = commands.add_parser("run", help="run a preset or configuration document")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset")
    source.add_argument("--config", type=Path)
    run.add_argument("--out", default="results")
    run.add_argument("--seed", type=int)
    run.add_argument("--runs", type=int)
    run.add_argument("--run-length", dest="run_length", type=int)
    run.add_argument("--workers", type=int)
    run.set_defaults(handler=cmd_run)

    table = commands.add_parser("table1", help="average update magnitudes for the table presets")
    table.add_argument("--runs", type=int)
    table.add_argument("--workers", type=int)
    table.add_argument("--out", help="also write the table as CSV")
    table.set_defaults(handler=cmd_table1)

    sweep = commands.add_parser("sweep", help="step-size sweeps (fig8) and the error-injection study (fig11)")
    sweep.add_argument("--name", required=True)
    sweep.add_argument("--out", default="results")
    sweep.add_argument("--runs", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.set_defaults(handler=cmd_sweep)

    export = commands.add_parser("export-mdp", help="write a built-in MDP as a document")
    export.add_argument("--name", required=True)
    export.add_argument("--out")
    export.set_defaults(handler=cmd_export_mdp)
    return parser


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    except (AssertionError, SingularSystemError, PathBudgetExceeded) as exc:
        return _fail(EXIT_INVARIANT, str(exc))
