"""Multi-car race episodes: spawning, scripted opponents, observations,
lockstep stepping and bookkeeping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO

import numpy as np

from egorace import render
from egorace.reward import RewardBreakdown, RewardConstants, RewardWeights, compute_reward
from egorace.track import (
    TrackDef, centerline_point, curvature_profile, half_width_at, heading_at, normal_at,
    project_points, resolve_track, sample_track_points,
)
from egorace.vehicle import (
    DT, GRASS_RESIST, SUBSTEPS, V_REF, Action, ContactEvent, VehicleSpec, VehicleState,
    bridge_action, car_pairs_in_contact, push_steer_history, resolve_car_contacts, step_physics,
)

OPPONENT_COUNTS = (0, 1, 2, 3, 4, 7, 12, 19)
# seeded offsets of back-of-grid start slots, meters
START_JITTER_S = 1.0
START_JITTER_LAT = 0.5
GRID_AHEAD = 75.0
GRID_BEHIND = 20.0
GRID_SLOTS = 7
PROPRIO_DIM = 18
REPLAY_FORMAT = "egorace-replay"
REPLAY_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RaceConfig:
    track: str = "oval"
    n_opponents: int = 0
    laps: int = 1
    start_mode: str = "random_scatter"
    bop_range: float = 0.25
    bop_enabled: bool = True
    opponent_power_scale: float = 1.0
    seed: int = 0
    control_hz: int = 10
    physics_hz: int = 60
    max_steps: int | None = None

    def validate(self) -> "RaceConfig":
        if self.n_opponents not in OPPONENT_COUNTS:
            raise ConfigError(f"n_opponents must be one of {OPPONENT_COUNTS}, got {self.n_opponents}")
        if self.n_opponents + 1 > 20:
            raise ConfigError("at most 20 cars")
        if self.laps < 1:
            raise ConfigError("laps must be >= 1")
        if self.start_mode not in ("random_scatter", "back_of_grid"):
            raise ConfigError(f"unknown start_mode {self.start_mode!r}")
        if not 0.0 <= self.bop_range <= 0.5:
            raise ConfigError("bop_range must lie in [0, 0.5]")
        if self.physics_hz % self.control_hz != 0 or self.physics_hz // self.control_hz != SUBSTEPS:
            raise ConfigError(f"physics_hz / control_hz must be {SUBSTEPS}")
        return self


@dataclass
class Observation:
    image: np.ndarray        # 64x64x3 float32 in [0, 1]
    proprio: np.ndarray      # 18
    track_points: np.ndarray  # 177x3, ego body frame
    opp_grid: np.ndarray     # 6x14

    @property
    def global_features(self) -> np.ndarray:
        return np.concatenate([self.track_points.ravel(), self.opp_grid.ravel()])


@dataclass
class StepInfo:
    step: int
    progress: float
    speed: float
    off_clock: float
    barrier_clock: float
    contact_clock: float
    steer_hist: tuple
    opp_progress: np.ndarray
    ego_contacts: list = field(default_factory=list)
    laps_completed: int = 0
    race_done: bool = False
    finished: bool = False
    off_track_event: bool = False
    lap_times: list = field(default_factory=list)


# -- observation pieces --------------------------------------------------------

def _body(vec_x, vec_y, heading):
    c, s = math.cos(heading), math.sin(heading)
    return vec_x * c + vec_y * s, -vec_x * s + vec_y * c


def build_proprio(state: VehicleState) -> np.ndarray:
    vx, vy = _body(state.vx, state.vy, state.heading)
    ax, ay = _body(state.ax, state.ay, state.heading)
    tb = state.throttle_brake
    return np.array([
        vx, vy, 0.0,
        ax, ay, 0.0,
        0.0, 0.0, state.yaw_rate,
        state.steer_angle, max(tb, 0.0), max(-tb, 0.0),
        *state.steer_hist,
        *state.delta_hist,
    ], dtype=np.float32)


def build_opponent_grid(ego: VehicleState, ego_progress: float, opponents, opp_progress,
                        track_length: float) -> np.ndarray:
    """6x14 grid: columns 0-6 hold the nearest cars up to 75 m ahead,
    7-13 the nearest up to 20 m behind. Each column is relative position,
    velocity and acceleration in the ego body frame."""
    grid = np.zeros((6, 2 * GRID_SLOTS), dtype=np.float32)
    ahead, behind = [], []
    for st, p in zip(opponents, opp_progress):
        d = (p - ego_progress + track_length / 2) % track_length - track_length / 2
        if 0 < d <= GRID_AHEAD:
            ahead.append((d, st))
        elif 0 < -d <= GRID_BEHIND:
            behind.append((-d, st))
    for base, group in ((0, ahead), (GRID_SLOTS, behind)):
        group.sort(key=lambda t: t[0])
        for k, (_, st) in enumerate(group[:GRID_SLOTS]):
            grid[:, base + k] = (
                *_body(st.x - ego.x, st.y - ego.y, ego.heading),
                *_body(st.vx - ego.vx, st.vy - ego.vy, ego.heading),
                *_body(st.ax - ego.ax, st.ay - ego.ay, ego.heading),
            )
    return grid


def body_frame_points(points: np.ndarray, ego: VehicleState) -> np.ndarray:
    out = np.zeros_like(points, dtype=np.float32)
    x, y = _body(points[:, 0] - ego.x, points[:, 1] - ego.y, ego.heading)
    out[:, 0], out[:, 1] = x, y
    return out


# -- scripted opponents ----------------------------------------------------------

@dataclass(frozen=True)
class BiaiParams:
    lookahead_gain: float = 0.6
    lookahead_min: float = 5.0
    lookahead_max: float = 60.0
    a_lat_max: float = 8.0
    v_cap: float = 45.0
    speed_gain: float = 0.5
    brake_decel: float = 7.0
    avoid_range: float = 15.0
    avoid_offset: float = 3.0
    horizon: float = 150.0


def corner_speed(kappa: float, a_lat_max: float, v_cap: float) -> float:
    if abs(kappa) < 1e-9:
        return v_cap
    return min(v_cap, math.sqrt(a_lat_max / abs(kappa)))


def biai_lane_offset(state: VehicleState, track: TrackDef, spec: VehicleSpec, others=(),
                     params: BiaiParams = BiaiParams()) -> float:
    """Lateral offset from the centerline the scripted driver aims for."""
    return _lane_offset(state, spec, others, _project_cars(state, others, track), track, params)


def _project_cars(state, others, track):
    pts = np.array([[state.x, state.y]] + [[o.x, o.y] for o in others])
    return project_points(pts, track)


def _lane_offset(state, spec, others, proj, track, params) -> float:
    prog, lat, hw = proj
    L = track.total_length
    v = state.speed
    best = None
    for k, o in enumerate(others, start=1):
        d = (prog[k] - prog[0] + L / 2) % L - L / 2
        if 0 < d <= params.avoid_range and abs(lat[k] - lat[0]) < 2.5 and o.speed < v:
            if best is None or d < best[0]:
                best = (d, k)
    if best is None:
        return 0.0
    k = best[1]
    side = -1.0 if lat[k] >= lat[0] else 1.0
    limit = max(0.0, hw[0] - spec.half_width - 0.6)
    offset = float(np.clip(lat[k] + side * params.avoid_offset, -limit, limit))
    return offset if offset != 0.0 else side * 1e-3


def biai_policy(state: VehicleState, track: TrackDef, spec: VehicleSpec, others=(),
                params: BiaiParams = BiaiParams(), projection=None) -> Action:
    """Pure-pursuit steering with a curvature-limited speed profile.

    ``projection`` may carry precomputed ``project_points`` output for
    ``[state, *others]``.
    """
    v = state.speed
    proj = projection if projection is not None else _project_cars(state, others, track)
    p = float(proj[0][0])
    offset = _lane_offset(state, spec, others, proj, track, params)
    ld = float(np.clip(params.lookahead_gain * v, params.lookahead_min, params.lookahead_max))
    target = centerline_point(p + ld, track) + normal_at(p + ld, track) * offset
    dx, dy = target[0] - state.x, target[1] - state.y
    fx, fy = _body(dx, dy, state.heading)
    dist = math.hypot(fx, fy)
    alpha = math.atan2(fy, fx)
    kappa = 2.0 * math.sin(alpha) / max(dist, 1e-6)
    eff = math.atan(spec.wheelbase * kappa)
    steer = min(spec.max_steer, max(-spec.max_steer, eff * (1.0 + (v / V_REF) ** 2)))
    delta_deg = math.degrees(steer - state.steer_angle)

    # slowest speed demanded by any corner ahead, allowing for braking distance
    ahead = np.arange(0.0, params.horizon, 5.0)
    k_abs = np.abs(curvature_profile(p + ahead, track))
    with np.errstate(divide="ignore"):
        vc = np.minimum(params.v_cap, np.sqrt(params.a_lat_max / k_abs))
    v_target = float(min(params.v_cap, np.min(np.sqrt(vc * vc + 2.0 * params.brake_decel * ahead))))
    tb = min(1.0, max(-1.0, params.speed_gain * (v_target - v)))
    return Action(delta_deg, tb).clamped()


def sample_bop(spec: VehicleSpec, rng: np.random.Generator, range_: float = 0.25) -> VehicleSpec:
    if not 0.0 <= range_ <= 0.5:
        raise ValueError("BoP range must lie in [0, 0.5]")
    if range_ == 0.0:
        return spec
    f_power, f_mass = rng.uniform(1.0 - range_, 1.0 + range_, size=2)
    return replace(spec, max_engine_force=spec.max_engine_force * f_power, mass=spec.mass * f_mass)


# -- environment -----------------------------------------------------------------

class RaceEnv:
    """Single-owner race. ``step`` is the only way time advances."""

    def __init__(self, config: RaceConfig, track: TrackDef | None = None,
                 ego_spec: VehicleSpec | None = None, opponent_spec: VehicleSpec | None = None,
                 weights: RewardWeights = RewardWeights(), constants: RewardConstants = RewardConstants(),
                 biai: BiaiParams = BiaiParams()):
        self.config = config.validate()
        try:
            self.track = track if track is not None else resolve_track(config.track)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load track {config.track!r}: {exc}") from exc
        self.ego_spec = ego_spec or VehicleSpec()
        self.opponent_spec = opponent_spec or VehicleSpec()
        self.weights = weights
        self.constants = constants
        self.biai = biai
        self.max_steps = config.max_steps or self.default_step_ceiling(config.laps, self.track)
        self.states: list[VehicleState] = []
        self.specs: list[VehicleSpec] = []
        self._active = False

    @staticmethod
    def default_step_ceiling(laps: int, track: TrackDef) -> int:
        # three times the lap time at an average of 10 m/s, in control steps
        return int(math.ceil(3.0 * laps * track.total_length / 10.0 * 10))

    # -- reset ----------------------------------------------------------------
    def reset(self, config: RaceConfig | None = None) -> Observation:
        if config is not None:
            config = config.validate()
            if config.track != self.config.track:
                self.track = resolve_track(config.track)
            self.config = config
            self.max_steps = config.max_steps or self.default_step_ceiling(config.laps, self.track)
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        n = cfg.n_opponents + 1
        opp_base = self.opponent_spec
        if cfg.opponent_power_scale != 1.0:
            opp_base = replace(opp_base, max_engine_force=opp_base.max_engine_force * cfg.opponent_power_scale)
        self.specs = [self.ego_spec] + [
            sample_bop(opp_base, rng, cfg.bop_range) if cfg.bop_enabled else opp_base
            for _ in range(n - 1)]
        if cfg.start_mode == "random_scatter":
            starts = self._scatter(rng, n)
        else:
            starts = self._grid(n, rng)
        self.states = [self._spawn(s, lat, spec) for (s, lat), spec in zip(starts, self.specs)]
        L = self.track.total_length
        nominal = np.array([s for s, _ in starts], dtype=np.float64)
        # progress is measured by projection, so start from the projected spawn points
        raw, _, _ = project_points(np.array([[s.x, s.y] for s in self.states]), self.track)
        nominal = nominal + (raw - nominal % L + L / 2) % L - L / 2
        self._raw = raw.copy()
        if cfg.start_mode == "back_of_grid":
            self._progress = nominal
            self._finish_line = cfg.laps * L
        else:
            ego0 = raw[0]
            rel = (raw - ego0 + L / 2) % L - L / 2
            self._progress = ego0 + rel
            self._finish_line = ego0 + cfg.laps * L
        self._lap_base = self._finish_line - cfg.laps * L
        self._pairs: set = set()
        self._step = 0
        self._lap_times: list[float] = []
        self._active = True
        self._info = self._make_info([], False)
        return self._observe()

    def _spawn(self, s: float, lateral: float, spec: VehicleSpec) -> VehicleState:
        c = centerline_point(s, self.track) + normal_at(s, self.track) * lateral
        return VehicleState(x=float(c[0]), y=float(c[1]), heading=float(heading_at(s, self.track)),
                            footprint=spec.footprint)

    def _scatter(self, rng: np.random.Generator, n: int):
        placed: list[tuple[float, float]] = []
        states: list[VehicleState] = []
        for k in range(n):
            for _ in range(500):
                s = float(rng.uniform(0.0, self.track.total_length))
                hw = float(half_width_at(s, self.track))
                lim = max(0.0, hw - self.specs[k].half_width - 0.5)
                lat = float(rng.uniform(-lim, lim))
                st = self._spawn(s, lat, self.specs[k])
                # 8 m between centroids keeps 4.4 x 1.9 footprints apart
                if all(math.hypot(st.x - o.x, st.y - o.y) >= 8.0 for o in states):
                    placed.append((s, lat))
                    states.append(st)
                    break
            else:
                raise ConfigError(f"could not place {n} cars without overlap on {self.track.name}")
        return placed

    def _grid(self, n: int, rng: np.random.Generator):
        # the seed jitters each slot a little, so races from the same grid differ;
        # 4 m slot spacing keeps the order and the gaps intact
        out = []
        for slot in range(n):
            s = -(5.0 + 4.0 * slot) + float(rng.uniform(-START_JITTER_S, START_JITTER_S))
            hw = float(half_width_at(s, self.track))
            lat = min(2.5, hw - 1.5) * (1.0 if slot % 2 == 0 else -1.0) \
                + float(rng.uniform(-START_JITTER_LAT, START_JITTER_LAT))
            out.append((s, lat))
        # ego (index 0) takes the last slot, opponents fill the front
        return [out[n - 1]] + out[: n - 1]

    # -- step -------------------------------------------------------------------
    def step(self, action: Action):
        if not self._active:
            raise RuntimeError("step() called on a finished episode; call reset()")
        prev = self._info
        n = len(self.states)
        controls = [bridge_action(self.states[0].steer_angle, action, self.specs[0])]
        proj_all = project_points(np.array([[s.x, s.y] for s in self.states]), self.track)
        for i in range(1, n):
            order = [i] + [j for j in range(n) if j != i]
            others = [self.states[j] for j in order[1:]]
            proj = tuple(arr[order] for arr in proj_all)
            a = biai_policy(self.states[i], self.track, self.specs[i], others, self.biai, proj)
            controls.append(bridge_action(self.states[i].steer_angle, a, self.specs[i]))

        ego_events: list[ContactEvent] = []
        off_now = np.zeros(n, dtype=int)
        off_event = False
        states = self.states
        out_corners = self._corners_out(states)
        for k in range(SUBSTEPS):
            states = [step_physics(s, sp, c[k], DT, GRASS_RESIST * o / 4)
                      for s, sp, c, o in zip(states, self.specs, controls, out_corners)]
            pairs = car_pairs_in_contact(states)
            for (i, j) in pairs:
                if 0 in (i, j):
                    other = j if i == 0 else i
                    rel = math.hypot(states[i].vx - states[j].vx, states[i].vy - states[j].vy)
                    ego_events.append(ContactEvent("car_car", other, rel, DT, (i, j) not in self._pairs))
            touching = {i for pair in pairs for i in pair}
            if pairs:
                states = resolve_car_contacts(states, self.specs, pairs)
            self._pairs = set(pairs)
            out_corners = self._corners_out(states)
            for i, s in enumerate(states):
                o = out_corners[i]
                if o >= 3:
                    s.off_clock += DT
                    if i == 0:
                        off_event = True
                if 0 < o < 4:
                    s.barrier_clock += DT
                    if i == 0:
                        ego_events.append(ContactEvent("car_barrier", None, 0.0, DT))
                if i in touching:
                    s.contact_clock += DT
            off_now = out_corners
        self.states = [push_steer_history(s) for s in states]
        self._update_progress()
        self._step += 1

        ego_done_dist = self._progress[0] - self._lap_base
        laps_done = int(ego_done_dist // self.track.total_length) if ego_done_dist > 0 else 0
        while len(self._lap_times) < min(laps_done, self.config.laps):
            self._lap_times.append(self._step / self.config.control_hz)
        finished = self._progress[0] >= self._finish_line
        done = finished or self._step >= self.max_steps
        info = self._make_info(ego_events, done, finished, laps_done, off_event)
        reward = compute_reward(prev, info, self.weights, self.constants)
        self._info = info
        self._active = not done
        self._last_off = off_now
        return self._observe(), reward, done, info

    def _corners_out(self, states) -> np.ndarray:
        corners = np.concatenate([s.corners() for s in states])
        _, lat, hw = project_points(corners, self.track)
        return (np.abs(lat) > hw).reshape(len(states), 4).sum(axis=1)

    def _update_progress(self):
        L = self.track.total_length
        raw, _, _ = project_points(np.array([[s.x, s.y] for s in self.states]), self.track)
        delta = (raw - self._raw + L / 2) % L - L / 2
        self._progress = self._progress + delta
        self._raw = raw

    def _make_info(self, events, done, finished=False, laps=0, off_event=False) -> StepInfo:
        ego = self.states[0]
        return StepInfo(
            step=self._step, progress=float(self._progress[0]), speed=ego.speed,
            off_clock=ego.off_clock, barrier_clock=ego.barrier_clock, contact_clock=ego.contact_clock,
            steer_hist=tuple(ego.steer_hist), opp_progress=self._progress[1:].copy(),
            ego_contacts=list(events), laps_completed=laps, race_done=done, finished=finished,
            off_track_event=off_event, lap_times=list(self._lap_times),
        )

    # -- observation --------------------------------------------------------------
    def _observe(self) -> Observation:
        ego = self.states[0]
        others = self.states[1:]
        image = render.render_ego_view(self.track, ego, others)
        tp = sample_track_points(float(self._raw[0]), ego.speed, self.track)
        grid = build_opponent_grid(ego, float(self._progress[0]), others, self._progress[1:],
                                   self.track.total_length)
        return Observation(image=image, proprio=build_proprio(ego),
                           track_points=body_frame_points(tp, ego), opp_grid=grid)

    @property
    def progress(self) -> np.ndarray:
        """Unwrapped progress of every car (ego first)."""
        return self._progress.copy()

    @property
    def finish_line(self) -> float:
        return self._finish_line

    @property
    def info(self) -> StepInfo:
        return self._info

    @property
    def step_count(self) -> int:
        return self._step

    def observe_world(self):
        """Poses of all cars as (x, y, heading) rows, ego first."""
        return [(s.x, s.y, s.heading) for s in self.states]


# -- replay export ------------------------------------------------------------------

class ReplayWriter:
    """Line-JSON episode replay: a header line, then one line per step."""

    def __init__(self, fp: IO[str], config: RaceConfig, track: TrackDef, extra: dict | None = None):
        self.fp = fp
        header = {"format": REPLAY_FORMAT, "version": REPLAY_VERSION, "config": asdict(config),
                  "track": track.name, "track_length": track.total_length}
        if extra:
            header.update(extra)
        fp.write(json.dumps(header) + "\n")

    def record(self, snapshot: dict, obs: Observation, action_norm, action: Action,
               reward: RewardBreakdown, info: StepInfo) -> None:
        """Write one row: the world as the action was chosen, and its outcome."""
        row = dict(snapshot)
        row.update({
            "proprio": [float(v) for v in obs.proprio],
            "action": [float(v) for v in action_norm],
            "controls": [action.delta_steer, action.throttle_brake],
            "reward": reward.terms(),
            "total": reward.total,
            "contact_clock": info.contact_clock,
            "progress_after": [float(info.progress)] + [float(v) for v in info.opp_progress],
            "done": bool(info.race_done),
        })
        self.fp.write(json.dumps(row) + "\n")


def world_snapshot(env: RaceEnv) -> dict:
    return {
        "t": env.step_count,
        "poses": [[float(v) for v in p] for p in env.observe_world()],
        "footprints": [list(s.footprint) for s in env.states],
        "progress": [float(v) for v in env.progress],
    }


def read_replay(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty replay")
    header = json.loads(lines[0])
    if header.get("format") != REPLAY_FORMAT:
        raise ValueError(f"{path}: not a replay file")
    if header.get("version") != REPLAY_VERSION:
        raise ValueError(f"{path}: unsupported replay version {header.get('version')}")
    return header, [json.loads(line) for line in lines[1:]]


def frame_from_replay(track: TrackDef, row: dict) -> tuple[np.ndarray, np.ndarray]:
    """Re-render the ego image of a replay row; returns (image, proprio)."""
    states = [VehicleState(x=p[0], y=p[1], heading=p[2], footprint=tuple(f))
              for p, f in zip(row["poses"], row["footprints"])]
    image = render.render_ego_view(track, states[0], states[1:])
    return image, np.asarray(row["proprio"], dtype=np.float32)
