"""Operator entry points: train, analyze-convergence, estimate-cost,
eval-readout.

Every command is reproducible from (config file + seed); the resolved
config is echoed verbatim into the output directory. Exit codes:
0 success, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .analysis import convergence_grid, write_cost_csv, write_grid_csv
from .costmodel import flops_estimate
from .data import IntegrityError
from .engine import (
    DivergenceError,
    RunConfig,
    load_checkpoint,
    run_config_from_dict,
    run_config_to_dict,
    run_training,
)
from .model import ConfigError
from .presets import get_preset
from .readout import ReadoutBudget, train_and_eval_readout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


class CliConfigError(ValueError):
    pass


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise CliConfigError("give either --config or --preset, not both")
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            cfg = run_config_from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise CliConfigError(f"invalid config: {exc}") from exc
    elif getattr(args, "preset", None):
        try:
            cfg = get_preset(args.preset)
        except KeyError as exc:
            raise CliConfigError(str(exc.args[0])) from exc
    else:
        raise CliConfigError("one of --config or --preset is required")

    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("LAYERLOCK_SEED"):
        try:
            seed = int(os.environ["LAYERLOCK_SEED"])
        except ValueError as exc:
            raise CliConfigError("LAYERLOCK_SEED must be an integer") from exc
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, steps=args.steps,
                      optim=replace(cfg.optim, total_steps=max(args.steps,
                                    cfg.optim.warmup_steps + 1)))
    return cfg


def _echo_config(cfg: RunConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(run_config_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise CliConfigError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = args.out or "run_out"
    _echo_config(cfg, out)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        if args.steps is not None:
            state.config = cfg
    metrics_path = os.path.join(out, "metrics.jsonl")
    ckpt_dir = os.path.join(out, "checkpoint")
    state, losses = run_training(cfg, metrics_path=metrics_path,
                                 checkpoint_dir=ckpt_dir, state=state)
    print(f"trained to step {state.step}; final loss {losses[-1]:.6f}; "
          f"metrics at {metrics_path}")
    return EXIT_OK


def cmd_analyze_convergence(args) -> int:
    cfg = _load_config(args)
    layers = _int_list(args.layers)
    freeze_steps = _int_list(args.freeze_steps)
    if not layers or not freeze_steps:
        raise CliConfigError("--layers and --freeze-steps must be non-empty")
    out = args.out or "grid_out"
    _echo_config(cfg, out)
    total = args.steps if args.steps is not None else cfg.steps
    grid = convergence_grid(cfg, layers, freeze_steps, total,
                            window=args.window, n_jobs=args.jobs)
    csv_path = os.path.join(out, "grid.csv")
    write_grid_csv(grid, csv_path)
    violations = grid.monotonicity_violations(args.tolerance)
    with open(os.path.join(out, "monotonicity.json"), "w") as f:
        json.dump({"tolerance_pct": args.tolerance,
                   "violations": [list(v) for v in violations]}, f, indent=1)
    print(f"grid written to {csv_path}; {len(violations)} monotonicity "
          f"violation(s) beyond {args.tolerance}% tolerance")
    return EXIT_OK


def cmd_estimate_cost(args) -> int:
    cfg = _load_config(args)
    steps = args.steps if args.steps is not None else cfg.steps
    report = flops_estimate(cfg.model, cfg.schedule, cfg.mask.mask_ratio, steps,
                            batch_size=cfg.batch_size, target_pass=args.target_pass)
    out = args.out or "cost.csv"
    out_dir = os.path.dirname(os.path.abspath(out))
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    write_cost_csv(report, out)
    savings = report.cumulative_savings_fraction()
    print(f"cost series written to {out}; freeze events at {report.event_steps}; "
          f"cumulative FLOPs savings {100.0 * savings:.4f}%")
    return EXIT_OK


def cmd_eval_readout(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = args.out or "readout.csv"
    out_dir = os.path.dirname(os.path.abspath(out))
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(state.config, out_dir)
    budget = ReadoutBudget(seed=args.seed if args.seed is not None else 123)
    best, rows = train_and_eval_readout(state, args.task, budget=budget,
                                        csv_path=out)
    label = "top-1 accuracy" if args.task == "classify" else "AbsRel"
    print(f"{len(rows)} sweep cells written to {out}; best {label} "
          f"{best['metric']:.4f} at lr={best['lr']} "
          f"depth_fraction={best['depth_fraction']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="layerlock",
        description="Self-supervised video pretraining with progressive "
                    "layer freezing and evolving prediction targets.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset=True):
        sp.add_argument("--config", help="JSON run-config file")
        if preset:
            sp.add_argument("--preset", help="named built-in configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed override (default: LAYERLOCK_SEED env or config)")
        sp.add_argument("--steps", type=int, default=None, help="step-count override")

    t = sub.add_parser("train", help="run a training loop")
    common(t)
    t.add_argument("--out", help="output directory (default run_out)")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("analyze-convergence",
                       help="freeze-ablation grid vs. the unfrozen baseline")
    common(a)
    a.add_argument("--layers", required=True, help="comma-separated prefix lengths")
    a.add_argument("--freeze-steps", required=True, help="comma-separated freeze steps")
    a.add_argument("--window", type=int, default=250, help="final-loss window size")
    a.add_argument("--tolerance", type=float, default=2.0,
                   help="monotonicity tolerance in percent deviation")
    a.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    a.add_argument("--out", help="output directory (default grid_out)")
    a.set_defaults(fn=cmd_analyze_convergence)

    c = sub.add_parser("estimate-cost", help="analytic FLOPs/memory series")
    common(c)
    c.add_argument("--target-pass", choices=("truncated", "full"), default="truncated",
                   help="charge the target forward at the target layer or full depth")
    c.add_argument("--out", help="output CSV path (default cost.csv)")
    c.set_defaults(fn=cmd_estimate_cost)

    r = sub.add_parser("eval-readout", help="frozen-feature readout sweep")
    r.add_argument("--checkpoint", required=True, help="checkpoint directory")
    r.add_argument("--task", choices=("classify", "dense"), required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", help="output CSV path (default readout.csv)")
    r.set_defaults(fn=cmd_eval_readout)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliConfigError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IntegrityError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
