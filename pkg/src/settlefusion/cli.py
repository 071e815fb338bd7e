"""Command line front end.

Subcommands:
  gen-data       generate the synthetic low-fidelity dataset (CSV + metadata)
  train-lf       train the low-fidelity operator net, write lf.ckpt
  study          run one of the measurement-fusion studies
  predict-field  evaluate a trained checkpoint on a scenario at one step
  serve          start the drive-session HTTP service

Shared flags: --seed overrides the preset seeds (scenario seed = N, training
seed = N + 1), --config points at a key=value file (see parse_config_file),
--reduced selects the small desk preset instead of the full-size one, --out
chooses the output directory, --format picks csv or json study exports.

Exit codes: 0 success, 2 validation or input failure, 3 training failure.

Config file format: one `key = value` per line, `#` starts a comment, blank
lines ignored. Recognized keys: preset, n_scenarios, n_steps, scenario_seed,
train_seed, grid_x1, grid_x2, grid_length_m, grid_width_m, width, depth,
residual_width, residual_depth, iterations, online_iterations, batch_size
(an integer or `none` for full batch), lr_initial, lr_decay_steps,
lr_decay_rate. Values parse as int, then float, then string.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .errors import (CorruptCheckpointError, DegenerateRangeError,
                     NumericError, TrainingFailure, UndefinedMetricError)
from .numkit import LrSchedule
from .presets import PRESETS, RunConfig, desk, paper_scale

_RUN_KEYS = {"n_scenarios", "grid_x1", "grid_x2", "grid_length_m",
             "grid_width_m", "width", "depth", "residual_width",
             "residual_depth", "iterations", "online_iterations",
             "batch_size", "train_seed"}
_LR_KEYS = {"lr_initial": "initial", "lr_decay_steps": "decay_steps",
            "lr_decay_rate": "decay_rate"}


def parse_config_file(path: str) -> dict:
    """Parse the documented key=value config format into a plain dict."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, "
                                 f"got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if value.lower() == "none":
                out[key] = None
                continue
            for cast in (int, float):
                try:
                    out[key] = cast(value)
                    break
                except ValueError:
                    continue
            else:
                out[key] = value
    return out


def build_run_config(args) -> RunConfig:
    overrides = parse_config_file(args.config) if args.config else {}
    preset = overrides.pop("preset", "desk" if args.reduced else "paper-scale")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, choose from "
                         f"{sorted(PRESETS)}")
    run = PRESETS[preset]()

    scenario_kwargs = {}
    if "scenario_seed" in overrides:
        scenario_kwargs["seed"] = int(overrides.pop("scenario_seed"))
    if "n_steps" in overrides:
        scenario_kwargs["n_steps"] = int(overrides.pop("n_steps"))
    if args.seed is not None:
        scenario_kwargs["seed"] = args.seed
    if scenario_kwargs:
        run = dataclasses.replace(
            run, scenario=dataclasses.replace(run.scenario, **scenario_kwargs))
    if args.seed is not None:
        run = dataclasses.replace(run, train_seed=args.seed + 1)

    lr_kwargs = {field: overrides.pop(key)
                 for key, field in _LR_KEYS.items() if key in overrides}
    if lr_kwargs:
        run = dataclasses.replace(
            run, lr=LrSchedule(**{**dataclasses.asdict(run.lr), **lr_kwargs}))

    run_kwargs = {}
    for key in list(overrides):
        if key in _RUN_KEYS:
            run_kwargs[key] = overrides.pop(key)
    if overrides:
        raise ValueError(f"unknown config keys: {sorted(overrides)}")
    if run_kwargs:
        run = dataclasses.replace(run, **run_kwargs)
    return run


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_lf(path: str):
    from .opnet import load_checkpoint
    if not os.path.exists(path):
        raise ValueError(
            f"checkpoint {path!r} not found; run `settlefusion train-lf` first "
            f"or pass --checkpoint")
    return load_checkpoint(path)


def cmd_gen_data(args) -> int:
    from .ground import calibrate_gain, gen_lowfi_dataset, write_raw_csv
    run = build_run_config(args)
    out = _ensure_out(args)
    model = calibrate_gain(run.ground_model(), run.scenario, run.grid())
    raw = gen_lowfi_dataset(model, run.scenario, run.n_scenarios, run.grid())
    csv_path = os.path.join(out, "raw.csv")
    meta_path = os.path.join(out, "raw_meta.json")
    write_raw_csv(raw, csv_path, meta_path)
    print(f"wrote {len(raw.settlement_mm)} records for {run.n_scenarios} "
          f"scenarios to {csv_path}")
    return 0


def cmd_train_lf(args) -> int:
    import numpy as np

    from .causal import assemble_lowfi, fit_norm
    from .ground import calibrate_gain, gen_lowfi_dataset
    from .opnet import NetConfig, save_checkpoint
    from .training import TrainConfig, train_lowfi

    run = build_run_config(args)
    out = _ensure_out(args)
    model = calibrate_gain(run.ground_model(), run.scenario, run.grid())
    raw = gen_lowfi_dataset(model, run.scenario, run.n_scenarios, run.grid())
    data = assemble_lowfi(raw, fit_norm(raw))
    net = NetConfig(branch_input_dim=2 * run.scenario.n_steps,
                    trunk_input_dim=2, width=run.width, depth=run.depth)
    cfg = TrainConfig(iterations=run.iterations, batch_size=run.batch_size,
                      lr=run.lr, seed=run.train_seed)
    ckpt, hist = train_lowfi(data, net, cfg)
    ckpt_path = os.path.join(out, "lf.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    hist_path = os.path.join(out, "train_history.json")
    with open(hist_path, "w") as f:
        json.dump({"iterations": hist.iterations,
                   "train_loss": hist.train_loss,
                   "val_r2": hist.val_r2,
                   "wall_seconds": hist.wall_seconds}, f, indent=2)
    final_r2 = hist.val_r2[-1] if hist.val_r2 else None
    print(f"trained {run.iterations} iterations in {hist.wall_seconds:.1f}s, "
          f"final val R2 {final_r2}, wrote {ckpt_path}")
    return 0


def cmd_study(args) -> int:
    from .studies import (build_study_context, run_error_level_study,
                          run_error_type_study, run_min_data_study,
                          write_report)
    run = build_run_config(args)
    out = _ensure_out(args)
    checkpoint = args.checkpoint or os.path.join(args.out, "lf.ckpt")
    lf = _load_lf(checkpoint)
    ctx = build_study_context(run, lf)
    runner = {"error-type": run_error_type_study,
              "error-level": run_error_level_study,
              "min-data": run_min_data_study}[args.which]
    report = runner(ctx)
    files = write_report(report, out, fmt=args.format)
    worst = min(c.r2 for c in report.cases)
    print(f"{report.study} study: {len(report.cases)} cases, worst final R2 "
          f"{worst:.4f}, wrote {', '.join(files)} in {out}")
    return 0


def cmd_predict_field(args) -> int:
    import numpy as np

    from .ground import gen_scenario
    from .training import lf_predict_batch
    run = build_run_config(args)
    out = _ensure_out(args)
    checkpoint = args.checkpoint or os.path.join(args.out, "lf.ckpt")
    lf = _load_lf(checkpoint)
    if not 1 <= args.t <= run.scenario.n_steps:
        raise ValueError(f"step {args.t} outside 1..{run.scenario.n_steps}")
    scenario = gen_scenario(run.scenario, args.scenario)
    grid = run.grid()
    pts = grid.points()
    values = lf_predict_batch(lf, scenario.p_g, scenario.p_s, args.t, pts)
    if args.format == "json":
        path = os.path.join(out, "field.json")
        doc = {"scenario_id": args.scenario, "t": args.t,
               "points": [{"x1_m": float(x1), "x2_m": float(x2),
                           "settlement_mm": float(v)}
                          for (x1, x2), v in zip(pts, values)]}
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    else:
        path = os.path.join(out, "field.csv")
        lines = ["x1_m,x2_m,settlement_mm"]
        for (x1, x2), v in zip(pts, values):
            lines.append(f"{x1!r},{x2!r},{v!r}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    print(f"scenario {args.scenario} step {args.t}: max settlement "
          f"{float(np.max(np.abs(values))):.3f} mm, wrote {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    run = build_run_config(args)
    checkpoint = args.checkpoint or os.path.join(args.out, "lf.ckpt")
    lf = _load_lf(checkpoint)
    app = create_app(run, {"default": lf})
    print(f"serving on http://{args.host}:{args.port} "
          f"(checkpoint {checkpoint})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def make_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None,
                        help="override scenario seed (training seed = N + 1)")
    shared.add_argument("--config", default=None,
                        help="key=value config file")
    shared.add_argument("--reduced", action="store_true",
                        help="use the small desk-scale preset")
    shared.add_argument("--out", default="out", help="output directory")
    shared.add_argument("--format", choices=("csv", "json"), default="json",
                        help="study/field export format")

    parser = argparse.ArgumentParser(
        prog="settlefusion",
        description="multi-fidelity tunnel settlement prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[shared],
                   help="generate the synthetic dataset").set_defaults(
        func=cmd_gen_data)
    sub.add_parser("train-lf", parents=[shared],
                   help="train the low-fidelity net").set_defaults(
        func=cmd_train_lf)

    p = sub.add_parser("study", parents=[shared], help="run a study")
    p.add_argument("which", choices=("error-type", "error-level", "min-data"))
    p.add_argument("--checkpoint", default=None,
                   help="low-fidelity checkpoint (default <out>/lf.ckpt)")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("predict-field", parents=[shared],
                       help="evaluate a checkpoint over the grid")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.set_defaults(func=cmd_predict_field)

    p = sub.add_parser("serve", parents=[shared], help="start the HTTP service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingFailure as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return 3
    except (ValueError, DegenerateRangeError, UndefinedMetricError,
            CorruptCheckpointError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
