"""Eight-term racing reward.

All terms are pure functions of consecutive step records; the environment
hands over unwrapped (cumulative) progress so lap seams never show up here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

TERMS = ("r_p", "r_o", "r_b", "r_v", "r_c", "r_t", "r_s", "r_h")


@dataclass(frozen=True)
class RewardWeights:
    progress: float = 1.0
    off_track: float = 10.0
    barrier: float = 20.0
    collision_speed: float = 0.5
    collision_fixed: float = 6.0
    steering_change: float = 0.5
    overtake: float = 3.0
    steering_history: float = 5.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("reward weights must be non-negative")

    def by_term(self) -> dict[str, float]:
        return {
            "r_p": self.progress, "r_o": self.off_track, "r_b": self.barrier,
            "r_v": self.collision_speed, "r_c": self.collision_fixed,
            "r_s": self.steering_change, "r_t": self.overtake, "r_h": self.steering_history,
        }


@dataclass(frozen=True)
class RewardConstants:
    c_r: float = -20.0
    c_f: float = 40.0
    c_s: float = 182.883569
    c_o: float = 0.034
    c_d: float = 0.014
    fixed_contact_penalty: float = 1.0

    def __post_init__(self):
        if not self.c_r < 0 < self.c_f:
            raise ValueError("need c_r < 0 < c_f")


@dataclass(frozen=True)
class RewardBreakdown:
    r_p: float = 0.0
    r_o: float = 0.0
    r_b: float = 0.0
    r_v: float = 0.0
    r_c: float = 0.0
    r_t: float = 0.0
    r_s: float = 0.0
    r_h: float = 0.0
    total: float = 0.0

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS}


def r_progress(p_t: float, p_prev: float) -> float:
    return p_t - p_prev


def r_clock_penalty(clock_t: float, clock_prev: float, speed: float) -> float:
    """Speed-weighted penalty for time newly spent in a violation."""
    return -(clock_t - clock_prev) * speed


def r_collision_terms(contacts, constants: RewardConstants = RewardConstants()) -> tuple[float, float]:
    car = [c for c in contacts if c.kind == "car_car"]
    r_v = -sum(c.rel_speed ** 2 for c in car if c.onset)
    r_c = -constants.fixed_contact_penalty if car else 0.0
    return float(r_v), float(r_c)


def r_overtake(p_t: float, p_prev: float, opp_p_t, opp_p_prev,
               constants: RewardConstants = RewardConstants()) -> float:
    opp_t = np.asarray(opp_p_t, dtype=np.float64)
    opp_prev = np.asarray(opp_p_prev, dtype=np.float64)
    if opp_t.size == 0:
        return 0.0
    gap = opp_t - p_t
    window = (gap > constants.c_r) & (gap < constants.c_f)
    gained = (p_t - opp_t) - (p_prev - opp_prev)
    return float(np.sum(np.where(window, gained, 0.0)))


def r_steering(theta_t: float, theta_prev: float, theta_prev2: float,
               constants: RewardConstants = RewardConstants()) -> tuple[float, float]:
    """Steering-change and steering-history (oscillation) penalties.

    The oscillation gate compares *magnitudes* of the last two steering
    deltas against ``c_d``; two deltas that must both exceed a positive
    threshold could never differ in sign otherwise.
    """
    d_t = theta_t - theta_prev
    d_prev = theta_prev - theta_prev2
    r_s = -abs(d_t)
    gate = abs(d_t) > constants.c_d and abs(d_prev) > constants.c_d and np.sign(d_t) != np.sign(d_prev)
    if not gate:
        return r_s, 0.0
    total = abs(d_t) + abs(d_prev)
    return r_s, -(1.0 + math.exp(-constants.c_s * (total - constants.c_o)))


def combine(breakdown: RewardBreakdown, weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    w = weights.by_term()
    total = sum(w[k] * getattr(breakdown, k) for k in TERMS)
    return RewardBreakdown(**breakdown.terms(), total=float(total))


def compute_reward(prev, cur, weights: RewardWeights = RewardWeights(),
                   constants: RewardConstants = RewardConstants()) -> RewardBreakdown:
    """Reward for the transition between two consecutive StepInfo records."""
    r_v, r_c = r_collision_terms(cur.ego_contacts, constants)
    r_s, r_h = r_steering(cur.steer_hist[2], cur.steer_hist[1], cur.steer_hist[0], constants)
    raw = RewardBreakdown(
        r_p=r_progress(cur.progress, prev.progress),
        r_o=r_clock_penalty(cur.off_clock, prev.off_clock, cur.speed),
        r_b=r_clock_penalty(cur.barrier_clock, prev.barrier_clock, cur.speed),
        r_v=r_v,
        r_c=r_c,
        r_t=r_overtake(cur.progress, prev.progress, cur.opp_progress, prev.opp_progress, constants),
        r_s=r_s,
        r_h=r_h,
    )
    return combine(raw, weights)
