"""Command-line surface: synth | ingest | split | train | evaluate | predict | compare.

Every run writes a resolved-config snapshot beside its outputs so it can be
reproduced from the snapshot plus the seed alone. Relative output paths
resolve under $FIRECAST_OUT when that variable is set. Exit codes: 0 on
success, 2 for configuration errors, 3 for data-format errors, 4 for
numerical errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from . import evaluation as ev
from . import model as mdl
from . import training as tr
from .errors import ConfigurationError, FirecastError

OUT_ROOT_ENV = "FIRECAST_OUT"


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _snapshot(out: Path, name: str, resolved: dict):
    clean = {}
    for key, value in resolved.items():
        if key == "func":
            continue
        clean[key] = str(value) if isinstance(value, Path) else value
    (out / name).write_text(json.dumps(clean, sort_keys=True, indent=2) + "\n")


def _read_stack(path) -> dt.GridStack:
    try:
        return dt.read_stack(path)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"grid stack not found: {path}") from exc


def _load_model(path) -> mdl.ModelVariant:
    try:
        model, _, _ = mdl.load_checkpoint(path)
        return model
    except FileNotFoundError as exc:
        raise ConfigurationError(f"checkpoint not found: {path}") from exc


def _load_sequence(obs_path, fire_path) -> tuple[dt.GridStack, dt.SequenceData]:
    obs = _read_stack(obs_path)
    fire = _read_stack(fire_path) if fire_path else None
    return obs, dt.sequence_from_stacks(obs, fire)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    window = args.window if args.window is not None else 12
    horizon = args.horizon if args.horizon is not None else 4
    minimum = window + horizon + 10
    if args.weeks < minimum:
        raise ConfigurationError(
            f"--weeks {args.weeks} is below the minimum {minimum} "
            f"(window {window} + horizon {horizon} + 10)"
        )
    cfg = dt.SimConfig(
        height=args.height,
        width=args.width,
        channels=args.channels,
        noise_sigma=args.noise_sigma,
        dropout_p=args.dropout_p,
        base_spread=args.base_spread,
    )
    obs, fire = dt.generate_dataset(cfg, args.weeks, args.seed)
    out = _out_dir(args.out)
    dt.write_stack(obs, out / "obs.gstk")
    dt.write_stack(fire, out / "fire.gstk")
    _snapshot(out, "synth_config.json", vars(args))
    print(f"wrote {out / 'obs.gstk'} and {out / 'fire.gstk'} ({args.weeks} weeks)")
    return 0


# ---------------------------------------------------------------------------
# ingest / split


def cmd_ingest(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"ingestion manifest not found: {args.manifest}") from exc
    stack, report = dt.ingest_csv_rasters(args.dir, manifest)
    out = _out_dir(args.out)
    dt.write_stack(stack, out / "ingested.gstk")
    (out / "qa_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    _snapshot(out, "ingest_config.json", vars(args))
    print(
        f"wrote {out / 'ingested.gstk'}: {stack.frames} weeks, "
        f"{stack.channels} channels, {report.forward_fill_count} frames forward-filled"
    )
    return 0


def cmd_split(args) -> int:
    stack = _read_stack(args.stack)
    train, valid = dt.temporal_split(stack, args.ratio)
    out = _out_dir(args.out)
    stem = Path(args.stack).stem
    dt.write_stack(train, out / f"{stem}_train.gstk")
    dt.write_stack(valid, out / f"{stem}_valid.gstk")
    _snapshot(out, f"split_{stem}_config.json", vars(args))
    print(f"split {stack.frames} weeks into {train.frames} train / {valid.frames} validation")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_config(args) -> tr.TrainConfig:
    values: dict = {}
    if args.config:
        try:
            values.update(tr.parse_config_file(args.config))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {args.config}") from exc
    overrides = {
        "variant": args.variant,
        "state_size": args.state_size,
        "horizon": args.horizon,
        "window": args.window,
        "batch_windows": args.batch_windows,
        "buffer_capacity": args.buffer_capacity,
        "traj_len": args.traj_len,
        "iterations": args.iterations,
        "seed": args.seed,
        "checkpoint_interval": args.checkpoint_interval,
        "c_pred": args.c_pred,
        "a_pred": args.a_pred,
        "c_sys": args.c_sys,
        "a_sys": args.a_sys,
        "grad_clip": args.grad_clip,
        "channels": args.channels,
        "height": args.height,
        "width": args.width,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return tr.TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    config = _train_config(args)
    obs, dataset = _load_sequence(args.obs, args.fire)
    config.check_grid(obs.channels, obs.height, obs.width)
    out = _out_dir(args.out)
    state, rows = tr.train_run(config, dataset, out_dir=out, resume_from=args.resume)
    from dataclasses import asdict

    snapshot = dict(vars(args))
    snapshot["resolved_training_config"] = asdict(config)
    _snapshot(out, "train_config.json", snapshot)
    final = rows[-1] if rows else None
    tail = f", final l_pred {final[4]:.4f}" if final else ""
    print(f"trained {config.variant} for {config.iterations} iterations{tail}; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / predict / compare


def _eval_inputs(args) -> tuple[dt.SequenceData, np.ndarray | None]:
    """Validation data plus warm-up frames per the flags."""
    if args.train_obs:
        _, val = _load_sequence(args.obs, args.fire)
        warm = _read_stack(args.train_obs).values if not args.cold else None
        return val, warm
    obs = _read_stack(args.obs)
    fire = _read_stack(args.fire) if args.fire else None
    obs_train, obs_valid = dt.temporal_split(obs, args.ratio)
    if fire is not None:
        fire_train, fire_valid = dt.temporal_split(fire, args.ratio)
    else:
        fire_valid = None
    val = dt.sequence_from_stacks(obs_valid, fire_valid)
    warm = None if args.cold else obs_train.values
    return val, warm


def _evaluate_model(model, val, warm) -> ev.EvalReport:
    mode = "cold" if warm is None else "carried"
    return ev.evaluate_stream(model, val, warm=mode, warm_frames=warm)


def cmd_evaluate(args) -> int:
    model = _load_model(args.checkpoint)
    val, warm = _eval_inputs(args)
    report = _evaluate_model(model, val, warm)
    out = _out_dir(args.out)
    (out / "report.csv").write_text(ev.report_csv([report]))
    _snapshot(out, "evaluate_config.json", vars(args))
    if args.emit_png:
        _emit_eval_pngs(model, val, warm, out)
    area = "NA" if report.auroc is None else f"{report.auroc:.4f}"
    print(
        f"{report.variant}: frames {report.frames}, total BCE {report.total_bce:.4f}, "
        f"mean pixel BCE {report.mean_pixel_bce:.4f}, AUROC {area}"
    )
    return 0


def _emit_eval_pngs(model, val: dt.SequenceData, warm, out: Path):
    from .numerics import Tensor

    dims = model.dims
    h = Tensor(np.zeros((1, dims.state), dtype=np.float32))
    if warm is not None:
        for k in range(warm.shape[0]):
            h = mdl.state_update_t(model, h, Tensor(warm[k][None]))
    png_dir = out / "risk_png"
    png_dir.mkdir(exist_ok=True)
    n = len(val)
    for k in range(n - dims.horizon):
        risk = mdl.decode_fire_t(h, model.params, dims).data[0]
        week = k + dims.horizon
        ev.write_risk_png(png_dir / f"risk_{week:04d}_{dt.week_date(val.week0, week)}.png", risk)
        if k < n - dims.horizon - 1:
            h = mdl.state_update_t(model, h, Tensor(val.obs[k][None]))


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    obs = _read_stack(args.obs)
    if (obs.channels, obs.height, obs.width) != (
        model.dims.channels, model.dims.height, model.dims.width,
    ):
        raise ConfigurationError(
            f"stack grid {(obs.channels, obs.height, obs.width)} does not match "
            f"model dims {(model.dims.channels, model.dims.height, model.dims.width)}"
        )
    out = _out_dir(args.out)
    horizon = model.dims.horizon
    traj = mdl.forward_trajectory(model, obs.values)
    if args.all_steps:
        risk = traj.fire_preds
        first_week = 1 + horizon
    else:
        risk = traj.fire_preds[-1:]
        first_week = obs.frames + horizon
    stack = dt.GridStack(
        values=np.clip(risk[:, None], 0.0, 1.0),
        week0=dt.week_date(obs.week0, first_week),
        channel_names=["fire_risk"],
        channel_min=[0.0],
        channel_max=[1.0],
    )
    dt.write_stack(stack, out / "risk.gstk")
    for i in range(risk.shape[0]):
        week = first_week + i
        ev.write_risk_png(out / f"risk_{week:04d}_{dt.week_date(obs.week0, week)}.png", risk[i])
    _snapshot(out, "predict_config.json", vars(args))
    print(
        f"predicted {risk.shape[0]} risk map(s) at horizon {horizon}; "
        f"first target week {dt.week_date(obs.week0, first_week)}; outputs in {out}"
    )
    return 0


def cmd_compare(args) -> int:
    val, warm = _eval_inputs(args)
    reports = []
    for path in args.checkpoints:
        model = _load_model(path)
        reports.append(_evaluate_model(model, val, warm))
    ranked = ev.compare_models(reports)
    out = _out_dir(args.out)
    (out / "comparison.csv").write_text(ev.report_csv(ranked))
    table = ev.render_table(ranked)
    (out / "comparison.txt").write_text(table)
    _snapshot(out, "compare_config.json", vars(args))
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firecast",
        description="Dynamic auto-encoder for weekly fire-risk map prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic partially-observed dataset")
    p.add_argument("--out", default="synth", help="output directory")
    p.add_argument("--weeks", type=int, default=260)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=5)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--dropout-p", type=float, default=0.3)
    p.add_argument("--base-spread", type=float, default=0.35)
    p.add_argument("--window", type=int, default=None, help="planned unroll K (minimum-length check)")
    p.add_argument("--horizon", type=int, default=None, help="planned horizon T (minimum-length check)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="assemble a grid stack from per-week CSV rasters")
    p.add_argument("--dir", required=True, help="directory holding the CSV grids")
    p.add_argument("--manifest", required=True, help="JSON manifest: channel name -> glob")
    p.add_argument("--out", default="ingest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="temporal train/validation split of a stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--ratio", type=float, default=0.70)
    p.add_argument("--out", default="split")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a training-period stack")
    p.add_argument("--obs", required=True, help="training observation stack")
    p.add_argument("--fire", default=None, help="training fire-truth stack (else thresholded channel 0)")
    p.add_argument("--out", default="train")
    p.add_argument("--config", default=None, help="key = value training config file")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--variant", choices=mdl.VARIANTS, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--state-size", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--batch-windows", type=int, default=None)
    p.add_argument("--buffer-capacity", type=int, default=None)
    p.add_argument("--traj-len", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument("--c-pred", type=float, default=None)
    p.add_argument("--a-pred", type=float, default=None)
    p.add_argument("--c-sys", type=float, default=None)
    p.add_argument("--a-sys", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--channels", type=int, default=None, help="expected dataset channels (checked)")
    p.add_argument("--height", type=int, default=None, help="expected dataset height (checked)")
    p.add_argument("--width", type=int, default=None, help="expected dataset width (checked)")
    p.set_defaults(func=cmd_train)

    def eval_io(p, multi=False):
        if multi:
            p.add_argument("--checkpoints", nargs="+", required=True)
        else:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--obs", required=True, help="full stack (split at --ratio) or validation stack")
        p.add_argument("--fire", default=None)
        p.add_argument("--train-obs", default=None, help="training stack when --obs is validation-only")
        p.add_argument("--ratio", type=float, default=0.70)
        p.add_argument("--cold", action="store_true", help="start validation from the zero state")

    p = sub.add_parser("evaluate", help="score a checkpoint on the held-out future weeks")
    eval_io(p)
    p.add_argument("--out", default="evaluate")
    p.add_argument("--emit-png", action="store_true", help="write per-week risk PNGs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="emit fire-risk maps for the weeks after a stack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out", default="predict")
    p.add_argument("--all-steps", action="store_true", help="emit one map per ingested week")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="side-by-side evaluation of several checkpoints")
    eval_io(p, multi=True)
    p.add_argument("--out", default="compare")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FirecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
