"""Evaluation races, metrics, checkpoint selection and CSV export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from egorace.env import RaceConfig, RaceEnv, ReplayWriter, world_snapshot
from egorace.neural import Checkpoint, CheckpointError, NetConfig, load_checkpoint
from egorace.qrsac import ActingPolicy
from egorace.vehicle import Action

CSV_HEADER = ["checkpoint", "seed", "winning_margin_m", "collision_time_s", "final_place",
              "lap1_s", "lap2_s", "lap3_s", "lap4_s"]


@dataclass(frozen=True)
class EvalConfig:
    track: str = "oval"
    laps: int = 4
    n_opponents: int = 19
    start_mode: str = "back_of_grid"
    opponent_power_scale: float = 1.0
    max_steps: int | None = None

    def race(self, seed: int) -> RaceConfig:
        # balance of performance is a training-time device only
        return RaceConfig(track=self.track, n_opponents=self.n_opponents, laps=self.laps,
                          start_mode=self.start_mode, bop_enabled=False,
                          opponent_power_scale=self.opponent_power_scale, seed=seed,
                          max_steps=self.max_steps)


@dataclass
class EpisodeResult:
    checkpoint: str
    seed: int
    winning_margin: float
    collision_time: float
    final_place: int
    lap_times: list = field(default_factory=list)
    start_place: int = 1
    progress: float = 0.0          # meters covered by the agent
    off_track_steps: int = 0
    first_lap_clean: bool = False  # first lap completed with no 3-tire excursion
    timed_out: bool = False
    steps: int = 0


class EvalMismatch(ValueError):
    pass


def load_policy(ckpt, expect: NetConfig | None = None) -> ActingPolicy:
    if isinstance(ckpt, ActingPolicy):
        return ckpt
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if expect is not None and (ckpt.net.hidden_size != expect.hidden_size
                               or ckpt.net.ablation_bits != expect.ablation_bits):
        raise EvalMismatch(f"checkpoint has hidden {ckpt.net.hidden_size}, ablations {ckpt.net.ablations}; "
                           f"config expects hidden {expect.hidden_size}, ablations {expect.ablations}")
    if not any(k.startswith("actor.") for k in ckpt.tensors):
        raise CheckpointError("checkpoint has no actor weights")
    return ActingPolicy(ckpt.build_actor())


def race_standing(ego_progress: float, opp_progress) -> tuple[float, int]:
    """(winning margin, place) from unwrapped progress."""
    opp = np.asarray(opp_progress, dtype=np.float64)
    if opp.size == 0:
        return math.inf, 1
    margin = float(ego_progress - opp.max())
    place = 1 + int(np.sum(opp >= ego_progress))
    return margin, place


def run_eval_episode(policy, config: EvalConfig, seed: int, checkpoint_id: str = "",
                     replay=None, env: RaceEnv | None = None) -> EpisodeResult:
    """One deterministic race. ``replay`` is an optional text stream."""
    policy = load_policy(policy)
    race = config.race(seed)
    env = env or RaceEnv(race)
    obs = env.reset(race)
    start = env.progress
    _, start_place = race_standing(start[0], start[1:])
    writer = ReplayWriter(replay, race, env.track, {"checkpoint": checkpoint_id}) if replay else None
    h = policy.initial_hidden()
    off_steps = 0
    first_lap_off = False
    done = False
    info = env.info
    while not done:
        snap = world_snapshot(env) if writer else None
        a, h, _ = policy.act(obs.image, obs.proprio, h, deterministic=True)
        action = Action.from_normalized(a)
        prev_obs = obs
        obs, reward, done, info = env.step(action)
        if info.off_track_event:
            off_steps += 1
            if not info.lap_times:
                first_lap_off = True
        if writer:
            writer.record(snap, prev_obs, a, action, reward, info)
    prog = env.progress
    margin, place = race_standing(prog[0], prog[1:])
    cumulative = info.lap_times
    laps = [cumulative[0]] + [b - a for a, b in zip(cumulative, cumulative[1:])] if cumulative else []
    return EpisodeResult(
        checkpoint=checkpoint_id, seed=seed, winning_margin=margin, collision_time=info.contact_clock,
        final_place=place, lap_times=laps, start_place=start_place, progress=float(prog[0] - start[0]),
        off_track_steps=off_steps, first_lap_clean=bool(cumulative) and not first_lap_off,
        timed_out=not info.finished, steps=env.step_count,
    )


def evaluate(policy, config: EvalConfig, episodes: int, seed_base: int = 0,
             checkpoint_id: str = "") -> list[EpisodeResult]:
    policy = load_policy(policy)
    env = RaceEnv(config.race(seed_base))
    return [run_eval_episode(policy, config, seed_base + k, checkpoint_id, env=env)
            for k in range(episodes)]


# -- selection ---------------------------------------------------------------------

@dataclass
class Selection:
    checkpoint: str
    flagged: bool          # no checkpoint met the collision ceiling
    table: dict            # id -> (mean margin, mean collision time)


def select_checkpoint(results: dict[str, list[EpisodeResult]], ceiling: float = 5.0) -> Selection:
    if ceiling < 0:
        raise ValueError("collision ceiling must be non-negative")
    table = {k: (float(np.mean([r.winning_margin for r in v])), float(np.mean([r.collision_time for r in v])))
             for k, v in results.items() if v}
    if not table:
        raise ValueError("no evaluation results to select from")
    ok = [k for k, (_, c) in table.items() if c <= ceiling]
    if ok:
        # ties resolve to the first id in the input order
        best = max(ok, key=lambda k: table[k][0])
        return Selection(best, False, table)
    return Selection(min(table, key=lambda k: table[k][1]), True, table)


# -- export -----------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def export_results(results, path) -> Path:
    """CSV, one row per episode. Laps the agent never completed are blank,
    which also marks timed-out rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in results:
            laps = list(r.lap_times[:4]) + [None] * (4 - min(4, len(r.lap_times)))
            w.writerow([r.checkpoint, r.seed, _fmt(r.winning_margin), _fmt(r.collision_time),
                        r.final_place, *[_fmt(x) for x in laps]])
    return path


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({
            "checkpoint": row["checkpoint"], "seed": int(row["seed"]),
            "winning_margin_m": float(row["winning_margin_m"]),
            "collision_time_s": float(row["collision_time_s"]),
            "final_place": int(row["final_place"]),
            "laps": [float(row[f"lap{i}_s"]) if row[f"lap{i}_s"] else None for i in range(1, 5)],
        })
    return out
