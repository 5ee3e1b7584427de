"""Command-line entry point: ``rgns {gen,train,rollout,invert,goal,eval,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .errors import RgnsError
from .particles import (
    ToyGenConfig,
    export_frames_csv,
    generate_trajectory,
    read_trajectory,
    state_from_trajectory,
    write_trajectory,
)
from .simulator import goal_condition, inverse_rollout, rollout
from .training import TrainConfig, load_checkpoint, model_config_for, save_checkpoint, train

log = logging.getLogger("rgns")

PRECISIONS = {"single": "float32", "double": "float64"}
TRAJ_GLOB = "traj_*.rgt"


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("steps must be >= 1")
    return value


def _load_dir(path) -> list:
    files = sorted(Path(path).glob(TRAJ_GLOB))
    if not files:
        raise RgnsError(f"no {TRAJ_GLOB} files in {path}")
    return [read_trajectory(f) for f in files]


def _load_model(args):
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt.model


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = ToyGenConfig(n_particles=args.n_particles, n_steps=args.n_steps)
    for i in range(args.count):
        cfg = ToyGenConfig(**{**asdict(base), "seed": args.seed + i})
        write_trajectory(generate_trajectory(cfg), out / f"traj_{i:04d}.rgt")
    _write_json(out / "manifest.json", metrics.run_manifest("gen", asdict(base), args.seed, extra={"count": args.count}))
    return 0


def cmd_train(args) -> int:
    trajs = _load_dir(args.data)
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model_over = dict(raw.pop("model", {}))
    if args.precision:
        model_over["precision"] = PRECISIONS[args.precision]
    known = {f.name for f in fields(TrainConfig)} - {"model"}
    unknown = set(raw) - known
    if unknown:
        raise RgnsError(f"unknown training options: {sorted(unknown)}")
    cfg = TrainConfig(model=model_config_for(trajs[0], **model_over), **{**raw, "seed": args.seed})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = train(cfg, trajs, log_path=out.with_suffix(".log.jsonl"))
    save_checkpoint(ckpt, out)
    print(json.dumps({"best_step": ckpt.step, "history": ckpt.history[-1:] if ckpt.history else []}))
    return 0


def cmd_rollout(args) -> int:
    model = _load_model(args)
    traj = read_trajectory(args.trajectory)
    start = model.config.k if args.start is None else args.start
    if start + args.steps >= traj.n_steps:
        raise RgnsError(f"trajectory has {traj.n_steps} frames; cannot score {args.steps} steps from frame {start}")
    res = rollout(model, state_from_trajectory(traj, start, model.config.k), args.steps)
    score = metrics.rollout_mse(res.positions[1:], traj.positions[start + 1 : start + args.steps + 1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_frames_csv(res.positions, out / "frames.csv", start)
    manifest = metrics.run_manifest(
        "rollout", model.config.to_dict(), args.seed, res.diagnostics, {"start": start, "rollout_mse": score}
    )
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"rollout_mse": score}))
    return 0


def cmd_invert(args) -> int:
    model = _load_model(args)
    traj = read_trajectory(args.trajectory)
    start = traj.n_steps - 1 if args.start is None else args.start
    res = inverse_rollout(model, state_from_trajectory(traj, start, model.config.k), args.steps)
    # frames run backwards in time; export them in chronological order
    chrono = res.positions[::-1]
    first = start - args.steps
    residuals = {}
    if first >= 0:
        residuals["position_mse"] = metrics.rollout_mse(chrono, traj.positions[first : start + 1])
    residuals["latent_residual"] = [d.latent_residual for d in res.diagnostics]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_frames_csv(chrono, out / "frames.csv", first)
    _write_json(
        out / "manifest.json",
        metrics.run_manifest("invert", model.config.to_dict(), args.seed, res.diagnostics, {"start": start, **residuals}),
    )
    print(json.dumps({k: v for k, v in residuals.items() if k == "position_mse"}))
    return 0


def cmd_goal(args) -> int:
    model = _load_model(args)
    cfg = model.config
    mask = metrics.read_mask(args.mask)
    target = metrics.rasterize_target(
        mask, cfg.box_lo, cfg.box_hi, args.n_max, cfg.k, np.random.default_rng(args.seed)
    )
    res = goal_condition(model, target, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_frames_csv(target.positions[None], out / "target.csv", 0)
    export_frames_csv(res.inferred.positions[None], out / "inferred.csv", 0)
    export_frames_csv(res.reproduced.positions, out / "reproduced.csv", 0)
    diag = list(res.inverse.diagnostics) + list(res.reproduced.diagnostics)
    manifest = metrics.run_manifest(
        "goal", cfg.to_dict(), args.seed, diag, {"n_particles": int(len(target.positions)), "consistency_mse": res.consistency_mse}
    )
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"consistency_mse": res.consistency_mse}))
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args)
    trajs = _load_dir(args.data)
    report = metrics.evaluate(model, trajs, args.horizon, args.consistency)
    report.validate()
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(args.seed)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgns", description="Reversible graph-network particle simulator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 for bit-reproducible runs)")
    p.add_argument("--precision", choices=sorted(PRECISIONS), default=None, help="training precision")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate toy trajectories")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_positive, default=50)
    g.add_argument("--n-particles", type=_positive, default=150)
    g.add_argument("--n-steps", type=_positive, default=200)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a directory of trajectories")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON training options; a 'model' object overrides model settings")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("rollout", cmd_rollout, "forward rollout scored against the trajectory"),
        ("invert", cmd_invert, "inverse rollout from a trajectory frame"),
    ):
        r = sub.add_parser(name, help=help_text)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--trajectory", required=True)
        r.add_argument("--steps", type=_positive, required=True)
        r.add_argument("--start", type=int, default=None)
        r.add_argument("--out", required=True)
        r.set_defaults(func=func)

    q = sub.add_parser("goal", help="infer an initial state that evolves into a mask shape")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--mask", required=True)
    q.add_argument("--steps", type=_positive, required=True)
    q.add_argument("--n-max", type=_positive, default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_goal)

    e = sub.add_parser("eval", help="metric report on a directory of trajectories")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=_positive, default=40)
    e.add_argument("--consistency", type=_positive, nargs="+", default=[10, 20, 40])
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (RgnsError, OSError) as exc:
        print(f"rgns {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
