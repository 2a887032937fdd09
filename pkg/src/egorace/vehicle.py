"""Kinematic bicycle cars, the 10 Hz -> 60 Hz control bridge, and contacts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from egorace.track import TrackDef, project_points

PHYSICS_HZ = 60
CONTROL_HZ = 10
SUBSTEPS = PHYSICS_HZ // CONTROL_HZ
DT = 1.0 / PHYSICS_HZ
MAX_DELTA_STEER_DEG = 3.0
# steering authority falls off as 1 / (1 + (v / V_REF)^2)
V_REF = 40.0
# extra longitudinal resistance when all four tires are off the surface
GRASS_RESIST = 3000.0


@dataclass(frozen=True)
class VehicleSpec:
    mass: float = 1200.0
    max_engine_force: float = 6000.0
    max_brake_force: float = 14000.0
    drag_coeff: float = 2.2
    rolling_resist: float = 200.0
    wheelbase: float = 2.6
    footprint: tuple[float, float] = (4.4, 1.9)
    max_steer: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(not (x > 0) for x in vals):
                raise ValueError(f"VehicleSpec.{f.name} must be strictly positive, got {v}")
        if self.max_steer > 0.6:
            raise ValueError(f"max_steer {self.max_steer} exceeds 0.6 rad")

    @property
    def half_width(self) -> float:
        return self.footprint[1] / 2


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    steer_angle: float = 0.0
    throttle_brake: float = 0.0
    # oldest -> newest, radians, one entry per control step
    steer_hist: tuple[float, float, float] = (0.0, 0.0, 0.0)
    delta_hist: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ax: float = 0.0
    ay: float = 0.0
    off_clock: float = 0.0
    barrier_clock: float = 0.0
    contact_clock: float = 0.0
    footprint: tuple[float, float] = (4.4, 1.9)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def accel(self) -> np.ndarray:
        return np.array([self.ax, self.ay])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def corners(self) -> np.ndarray:
        """Footprint corners FL, FR, RR, RL in world frame."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.footprint[0] / 2, self.footprint[1] / 2
        local = ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))
        return np.array([(self.x + c * a - s * b, self.y + s * a + c * b) for a, b in local])

    def copy(self) -> "VehicleState":
        return replace(self)


@dataclass(frozen=True)
class Action:
    delta_steer: float = 0.0  # degrees
    throttle_brake: float = 0.0

    def clamped(self) -> "Action":
        return Action(float(np.clip(self.delta_steer, -MAX_DELTA_STEER_DEG, MAX_DELTA_STEER_DEG)),
                      float(np.clip(self.throttle_brake, -1.0, 1.0)))

    @classmethod
    def from_normalized(cls, a) -> "Action":
        """Map a policy output in [-1, 1]^2 to an action."""
        return cls(float(a[0]) * MAX_DELTA_STEER_DEG, float(a[1])).clamped()


@dataclass(frozen=True)
class SubstepControl:
    steer: float
    throttle_brake: float


@dataclass(frozen=True)
class ContactEvent:
    kind: str  # "car_car" | "car_barrier"
    other_index: int | None
    rel_speed: float
    duration_this_step: float = DT
    onset: bool = False


def bridge_action(prev_steer: float, action: Action, spec: VehicleSpec) -> list[SubstepControl]:
    """Expand one 10 Hz action into six 60 Hz controls.

    Throttle/brake is held; steering ramps linearly from ``prev_steer`` to the
    clamped target so the last substep lands on it exactly.
    """
    a = action.clamped()
    target = float(np.clip(prev_steer + math.radians(a.delta_steer), -spec.max_steer, spec.max_steer))
    out = []
    for k in range(1, SUBSTEPS + 1):
        steer = target if k == SUBSTEPS else prev_steer + (target - prev_steer) * k / SUBSTEPS
        out.append(SubstepControl(steer, a.throttle_brake))
    return out


def step_physics(state: VehicleState, spec: VehicleSpec, control: SubstepControl,
                 dt: float = DT, extra_resist: float = 0.0) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = state.heading
    ch, sh = math.cos(h), math.sin(h)
    speed = max(0.0, state.vx * ch + state.vy * sh)
    tb = min(1.0, max(-1.0, control.throttle_brake))
    throttle, brake = max(tb, 0.0), max(-tb, 0.0)
    force = (throttle * spec.max_engine_force - brake * spec.max_brake_force
             - spec.drag_coeff * speed * speed - spec.rolling_resist - extra_resist)
    new_speed = max(0.0, speed + force / spec.mass * dt)

    steer = min(spec.max_steer, max(-spec.max_steer, control.steer))
    effective = steer / (1.0 + (new_speed / V_REF) ** 2)
    yaw_rate = new_speed * math.tan(effective) / spec.wheelbase
    new_h = h + yaw_rate * dt
    mid = 0.5 * (h + new_h)
    x = state.x + new_speed * math.cos(mid) * dt
    y = state.y + new_speed * math.sin(mid) * dt
    vx, vy = new_speed * math.cos(new_h), new_speed * math.sin(new_h)
    return replace(
        state, x=x, y=y, heading=_wrap_angle(new_h), vx=vx, vy=vy, yaw_rate=yaw_rate,
        steer_angle=steer, throttle_brake=tb,
        ax=(vx - state.vx) / dt, ay=(vy - state.vy) / dt,
    )


def push_steer_history(state: VehicleState) -> VehicleState:
    """Record the current steering angle at a control-step boundary."""
    prev = state.steer_hist[-1]
    return replace(
        state,
        steer_hist=state.steer_hist[1:] + (state.steer_angle,),
        delta_hist=state.delta_hist[1:] + (state.steer_angle - prev,),
    )


def _wrap_angle(a: float) -> float:
    if -math.pi <= a < math.pi:
        return a  # untouched, so a still car keeps its heading bit-exact
    return (a + math.pi) % (2 * math.pi) - math.pi


# -- contacts ---------------------------------------------------------------

def _sat(ca: np.ndarray, cb: np.ndarray) -> tuple[float, np.ndarray] | None:
    """Separating-axis test for two convex quads. Returns (depth, normal a->b)."""
    best = (math.inf, None)
    for poly in (ca, cb):
        for i in range(2):
            e = poly[i + 1] - poly[i]
            axis = np.array([-e[1], e[0]]) / math.hypot(e[0], e[1])
            pa, pb = ca @ axis, cb @ axis
            overlap = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
            if overlap <= 0:
                return None
            if overlap < best[0]:
                best = (overlap, axis)
    depth, axis = best
    if (cb.mean(axis=0) - ca.mean(axis=0)) @ axis < 0:
        axis = -axis
    return depth, axis


def car_pairs_in_contact(states: list[VehicleState]) -> dict[tuple[int, int], tuple[float, np.ndarray]]:
    """All overlapping car pairs (i < j) with penetration depth and normal."""
    n = len(states)
    if n < 2:
        return {}
    pos = np.array([(s.x, s.y) for s in states])
    reach = np.array([math.hypot(*s.footprint) / 2 for s in states])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    cand = np.argwhere(np.triu(d < reach[:, None] + reach[None, :], k=1))
    corners = {}
    out = {}
    for i, j in cand:
        i, j = int(i), int(j)
        ci = corners.setdefault(i, states[i].corners())
        cj = corners.setdefault(j, states[j].corners())
        hit = _sat(ci, cj)
        if hit is not None:
            out[(i, j)] = hit
    return out


def barrier_contact(state: VehicleState, track: TrackDef) -> tuple[bool, int]:
    """(footprint straddles an edge line, number of corners outside)."""
    _, lat, hw = project_points(state.corners(), track)
    out = int(np.count_nonzero(np.abs(lat) > hw))
    return 0 < out < 4, out


def detect_contacts(states: list[VehicleState], specs: list[VehicleSpec], track: TrackDef,
                    previous: set[tuple[int, int]] | frozenset = frozenset(),
                    dt: float = DT) -> list[list[ContactEvent]]:
    """Per-car contact events for one physics substep.

    ``previous`` holds the car pairs touching on the substep before; a pair
    not in it is flagged as a contact onset.
    """
    events: list[list[ContactEvent]] = [[] for _ in states]
    for (i, j) in car_pairs_in_contact(states):
        rel = math.hypot(states[i].vx - states[j].vx, states[i].vy - states[j].vy)
        onset = (i, j) not in previous
        events[i].append(ContactEvent("car_car", j, rel, dt, onset))
        events[j].append(ContactEvent("car_car", i, rel, dt, onset))
    for k, s in enumerate(states):
        if barrier_contact(s, track)[0]:
            events[k].append(ContactEvent("car_barrier", None, 0.0, dt))
    return events


def resolve_car_contacts(states: list[VehicleState], specs: list[VehicleSpec],
                         pairs: dict[tuple[int, int], tuple[float, np.ndarray]]) -> list[VehicleState]:
    """Push overlapping cars apart and remove their closing normal velocity."""
    out = [s.copy() for s in states]
    for (i, j), (depth, n) in pairs.items():
        a, b = out[i], out[j]
        ma, mb = specs[i].mass, specs[j].mass
        wa, wb = mb / (ma + mb), ma / (ma + mb)
        a.x -= n[0] * depth * wa
        a.y -= n[1] * depth * wa
        b.x += n[0] * depth * wb
        b.y += n[1] * depth * wb
        closing = (a.vx - b.vx) * n[0] + (a.vy - b.vy) * n[1]
        if closing > 0:
            # perfectly inelastic along the normal
            a.vx -= n[0] * closing * wa
            a.vy -= n[1] * closing * wa
            b.vx += n[0] * closing * wb
            b.vy += n[1] * closing * wb
    for s in out:
        # kinematic model: keep only the along-heading component
        ch, sh = math.cos(s.heading), math.sin(s.heading)
        v = max(0.0, s.vx * ch + s.vy * sh)
        s.vx, s.vy = v * ch, v * sh
    return out


# -- files --------------------------------------------------------------------

def parse_vehicle_spec(text: str) -> VehicleSpec:
    kwargs: dict = {}
    header = False
    names = {f.name for f in fields(VehicleSpec)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not header:
            if line.split() != ["car", "v1"]:
                raise ValueError(f"line {lineno}: expected header 'car v1'")
            header = True
            continue
        key, *vals = line.split()
        if key not in names:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric value for {key}") from None
        if key == "footprint":
            if len(nums) != 2:
                raise ValueError(f"line {lineno}: footprint takes 'length width'")
            kwargs[key] = (nums[0], nums[1])
        else:
            if len(nums) != 1:
                raise ValueError(f"line {lineno}: {key} takes one value")
            kwargs[key] = nums[0]
    if not header:
        raise ValueError("missing 'car v1' header")
    return VehicleSpec(**kwargs)


def load_vehicle_spec(path) -> VehicleSpec:
    return parse_vehicle_spec(Path(path).read_text())


def dump_vehicle_spec(spec: VehicleSpec) -> str:
    lines = ["car v1"]
    for f in fields(spec):
        v = getattr(spec, f.name)
        lines.append(f"{f.name} {' '.join(repr(float(x)) for x in v)}" if isinstance(v, tuple)
                     else f"{f.name} {float(v)!r}")
    return "\n".join(lines) + "\n"
