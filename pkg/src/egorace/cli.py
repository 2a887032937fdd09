"""Command-line entry point: ``egorace {train,eval,race,attribute,track}``.

Output layout under ``--out``: ``checkpoints/``, ``metrics.jsonl``,
``results.csv``, ``replays/``, ``attributions/`` and ``config.resolved.toml``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import signal
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from egorace import config as config_mod
from egorace.attribution import TARGETS, integrated_gradients, write_map
from egorace.config import RunConfigError
from egorace.env import read_replay, frame_from_replay
from egorace.evaluation import (EvalConfig, EvalMismatch, evaluate, export_results, load_policy,
                                run_eval_episode, select_checkpoint)
from egorace.neural import CheckpointError
from egorace.track import TrackError, dump_track, resolve_track

log = logging.getLogger("egorace")


class CliError(RuntimeError):
    pass


def _sigterm(signum, frame):
    raise KeyboardInterrupt


def _run_config(args):
    cfg = config_mod.load_config(args.config)
    return config_mod.apply_overrides(
        cfg, seed=getattr(args, "seed", None), epochs=getattr(args, "epochs", None),
        workers=getattr(args, "workers", None), ablations=getattr(args, "ablation", None) or (),
        episodes=getattr(args, "episodes", None),
        collision_ceiling=getattr(args, "collision_ceiling", None), out=args.out)


def _eval_config(cfg) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(track=e.track, laps=e.laps, n_opponents=e.n_opponents, start_mode=e.start_mode,
                      opponent_power_scale=e.opponent_power_scale, max_steps=e.max_steps)


def _checkpoint_files(refs) -> list[Path]:
    out = []
    for ref in refs:
        p = Path(ref)
        if p.is_dir():
            found = sorted(p.glob("*.ckpt"))
            if not found:
                raise CliError(f"no .ckpt files in {p}")
            out.extend(found)
        elif p.is_file():
            out.append(p)
        else:
            raise CliError(f"checkpoint not found: {p}")
    return out


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from egorace.training import train

    cfg = _run_config(args)
    result = train(cfg, monolithic=args.monolithic)
    last = result.checkpoints[-1] if result.checkpoints else None
    print(f"trained {result.learner.epoch} epochs; last checkpoint {last}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ecfg = _eval_config(cfg)
    expect = cfg.net if args.config else None
    seed_base = cfg.eval.seed_base if args.seed is None else args.seed
    results, by_ckpt = [], {}
    for path in _checkpoint_files(args.checkpoints):
        policy = load_policy(path, expect)
        rs = evaluate(policy, ecfg, cfg.eval.episodes, seed_base, checkpoint_id=path.stem)
        results.extend(rs)
        by_ckpt[path.stem] = rs
    out = Path(cfg.out)
    csv_path = export_results(results, out / "results.csv")
    sel = select_checkpoint(by_ckpt, cfg.eval.collision_ceiling)
    for k, (margin, coll) in sel.table.items():
        print(f"{k}: mean margin {margin:.3f} m, mean collision time {coll:.3f} s")
    note = " (no checkpoint under the collision ceiling; least-collision fallback)" if sel.flagged else ""
    print(f"selected {sel.checkpoint}{note}")
    print(f"wrote {csv_path}")
    return 0


def cmd_race(args) -> int:
    cfg = _run_config(args)
    ecfg = _eval_config(cfg)
    seed = cfg.eval.seed_base if args.seed is None else args.seed
    path = _checkpoint_files([args.checkpoint])[0]
    policy = load_policy(path, cfg.net if args.config else None)
    replay = Path(cfg.out) / "replays" / f"{path.stem}_seed{seed}.jsonl"
    replay.parent.mkdir(parents=True, exist_ok=True)
    with open(replay, "w") as fh:
        r = run_eval_episode(policy, ecfg, seed, path.stem, replay=fh)
    summary = {k: _jsonable(v) for k, v in asdict(r).items()}
    summary["replay"] = str(replay)
    print(json.dumps(summary, indent=2))
    return 0


def _parse_frames(spec: str, n: int) -> range:
    try:
        if ":" in spec:
            a, b = spec.split(":", 1)
            lo, hi = int(a or 0), int(b) if b else n
        else:
            lo = int(spec)
            hi = lo + 1
    except ValueError:
        raise CliError(f"bad frame range {spec!r}; use START:STOP or INDEX") from None
    if not 0 <= lo < hi <= n:
        raise CliError(f"frame range {lo}:{hi} outside the replay's {n} frames")
    return range(lo, hi)


def cmd_attribute(args) -> int:
    header, rows = read_replay(args.replay)
    frames = _parse_frames(args.frames, len(rows))
    track = resolve_track(header["config"]["track"])
    policy = load_policy(_checkpoint_files([args.checkpoint])[0])
    actor = policy.actor
    out = Path(args.out) / "attributions"
    h = policy.initial_hidden()
    stop = frames.stop
    # the hidden state is rolled from the episode start so every frame sees its true history
    for t in range(stop):
        image, proprio = frame_from_replay(track, rows[t])
        if t in frames:
            amap = integrated_gradients(actor, image, proprio, h, args.target, args.steps)
            side = write_map(out, f"frame_{t:05d}", amap, args.fraction,
                             {"frame": t, "replay": str(args.replay), "checkpoint": str(args.checkpoint)})
            print(f"frame {t}: sum {side['attribution_sum']:.6g}, residual {side['completeness_residual']:.3g}")
        _, h, _ = policy.act(image.astype(np.float32), proprio, h, deterministic=True)
    print(f"wrote {len(frames)} maps to {out}")
    return 0


def cmd_track(args) -> int:
    track = resolve_track(args.track).validate()
    info = {
        "name": track.name, "points": len(track.centerline), "length_m": round(track.total_length, 3),
        "min_half_width_m": float(track.half_width.min()), "max_half_width_m": float(track.half_width.max()),
        "max_abs_curvature": float(np.abs(track.vertex_curvature).max()),
    }
    print(json.dumps(info, indent=2))
    if args.export:
        Path(args.export).write_text(dump_track(track))
        print(f"wrote {args.export}")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egorace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs/default"):
        sp.add_argument("--config", help="TOML file or bundled name ('desk'); defaults built in")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=None, help=f"output directory (config 'out', else {out_default})")

    t = sub.add_parser("train", help="train an agent")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--ablation", action="append",
                   help="symmetric_critic | no_rnn | zero_hidden_init | hidden_size=N (repeatable)")
    t.add_argument("--monolithic", action="store_true", help="single-process loop without the harness")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints and select one")
    common(e)
    e.add_argument("checkpoints", nargs="+", help="checkpoint files or directories")
    e.add_argument("--episodes", type=int)
    e.add_argument("--collision-ceiling", type=float)
    e.add_argument("--ablation", action="append")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("race", help="one evaluation race with replay export")
    common(r)
    r.add_argument("checkpoint")
    r.add_argument("--ablation", action="append")
    r.set_defaults(func=cmd_race)

    a = sub.add_parser("attribute", help="integrated-gradients maps for replay frames")
    a.add_argument("checkpoint")
    a.add_argument("replay")
    a.add_argument("--frames", default="0:1", help="START:STOP or INDEX")
    a.add_argument("--target", choices=TARGETS, default="steer")
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--fraction", type=float, default=0.90)
    a.add_argument("--out", default="runs/default")
    a.set_defaults(func=cmd_attribute)

    k = sub.add_parser("track", help="validate and describe a track")
    k.add_argument("track", help="bundled name or .track file")
    k.add_argument("--export", help="write the track file here")
    k.set_defaults(func=cmd_track)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    prev = signal.signal(signal.SIGTERM, _sigterm)
    try:
        return args.func(args)
    except (RunConfigError, TrackError, CheckpointError, EvalMismatch, CliError, ValueError, OSError) as exc:
        print(f"egorace {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(f"egorace {args.command}: interrupted", file=sys.stderr)
        return 130
    finally:
        signal.signal(signal.SIGTERM, prev)


if __name__ == "__main__":
    sys.exit(main())
