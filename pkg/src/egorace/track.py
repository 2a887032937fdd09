"""Closed-loop track geometry.

A track is a closed centerline polyline with a per-vertex lateral half-width.
Everything a car needs from the track goes through arc-length *progress*:
projection, lookahead track points, curvature and off-track checks.
"""

from __future__ import annotations

import math
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

N_TRACK_POINTS = 177
POINTS_PER_LINE = N_TRACK_POINTS // 3
LOOKAHEAD_SECONDS = 6.0
LOOKAHEAD_MIN = 30.0
LOOKAHEAD_MAX = 400.0
MAX_SPACING = 5.0
# Default car is 1.9 m wide; a track must fit it.
MIN_HALF_WIDTH = 0.95


class TrackError(ValueError):
    """A track violates one of its geometric invariants."""


class TrackParseError(TrackError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrackDef:
    """Immutable closed track.

    ``centerline`` holds the N distinct loop vertices (the closing point is
    implicit), ``half_width`` the lateral half-width at each vertex.
    """

    def __init__(self, centerline, half_width, name: str = "track"):
        pts = np.asarray(centerline, dtype=np.float64)
        hw = np.asarray(half_width, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise TrackError("centerline must be an (N>=3, 2) array")
        if hw.shape != (len(pts),):
            raise TrackError("half_width must have one entry per centerline point")
        self.name = name
        self.centerline = pts
        self.half_width = hw
        nxt = np.roll(pts, -1, axis=0)
        seg = nxt - pts
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / np.where(self.seg_len > 0, self.seg_len, 1.0)[:, None]
        self.arc = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.total_length = float(self.arc[-1])

        # vertex normals: average of adjacent segment normals (left of travel)
        seg_n = np.stack([-self.seg_dir[:, 1], self.seg_dir[:, 0]], axis=1)
        vn = seg_n + np.roll(seg_n, 1, axis=0)
        vn /= np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-12)
        self.normals = vn
        self.left_edge = pts + vn * hw[:, None]
        self.right_edge = pts - vn * hw[:, None]
        for arr in (self.centerline, self.half_width, self.seg_len, self.seg_dir,
                    self.arc, self.normals, self.left_edge, self.right_edge):
            arr.setflags(write=False)

    def __repr__(self) -> str:
        return f"TrackDef({self.name!r}, n={len(self.centerline)}, length={self.total_length:.1f} m)"

    @property
    def barriers(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right barrier polylines (closed, coincident with the edges)."""
        return self.left_edge, self.right_edge

    def validate(self) -> "TrackDef":
        if np.any(self.half_width <= 0):
            i = int(np.argmin(self.half_width))
            raise TrackError(f"non-positive half_width {self.half_width[i]} at point {i}")
        if np.any(self.half_width <= MIN_HALF_WIDTH):
            i = int(np.argmin(self.half_width))
            raise TrackError(
                f"half_width {self.half_width[i]} at point {i} does not exceed vehicle half-width {MIN_HALF_WIDTH}")
        if np.any(self.seg_len <= 0):
            i = int(np.argmin(self.seg_len))
            raise TrackError(f"point spacing must be > 0 (duplicate point at {i})")
        if np.any(self.seg_len > MAX_SPACING + 1e-9):
            i = int(np.argmax(self.seg_len))
            raise TrackError(f"point spacing {self.seg_len[i]:.3f} m at point {i} exceeds {MAX_SPACING} m")
        if _self_intersects(self.centerline):
            raise TrackError("centerline is not a simple closed polyline (self-intersection)")
        return self

    # dense samples for rendering / nearest lookups
    @cached_property
    def _dense(self) -> tuple[np.ndarray, np.ndarray, cKDTree]:
        s = np.arange(0.0, self.total_length, 0.25)
        pts = centerline_point(s, self)
        hw = half_width_at(s, self)
        return pts, hw, cKDTree(pts)

    @cached_property
    def vertex_curvature(self) -> np.ndarray:
        p = self.centerline
        return np.array([_menger(p[i - 1], p[i], p[(i + 1) % len(p)]) for i in range(len(p))])

    @cached_property
    def edge_field(self) -> "EdgeField":
        return EdgeField.build(self)


class EdgeField:
    """Raster of (distance to centerline - half_width) for fast ground lookups.

    Negative inside the drivable surface. Used by the renderer only; exact
    queries go through :func:`project_points`.
    """

    RES = 0.5
    MARGIN = 20.0

    def __init__(self, origin, res, values):
        self.origin = origin
        self.res = res
        self.values = values

    @classmethod
    def build(cls, track: TrackDef) -> "EdgeField":
        lo = track.centerline.min(axis=0) - track.half_width.max() - cls.MARGIN
        hi = track.centerline.max(axis=0) + track.half_width.max() + cls.MARGIN
        nx = int(math.ceil((hi[0] - lo[0]) / cls.RES)) + 1
        ny = int(math.ceil((hi[1] - lo[1]) / cls.RES)) + 1
        gx = lo[0] + cls.RES * np.arange(nx)
        gy = lo[1] + cls.RES * np.arange(ny)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        pts, hw, tree = track._dense
        dist, idx = tree.query(np.stack([X.ravel(), Y.ravel()], axis=1))
        values = (dist - hw[idx]).reshape(nx, ny).astype(np.float32)
        return cls(lo, cls.RES, values)

    def lookup(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear lookup; points outside the raster read as far off-track."""
        u = (xy[..., 0] - self.origin[0]) / self.res
        v = (xy[..., 1] - self.origin[1]) / self.res
        nx, ny = self.values.shape
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        inside = (i0 >= 0) & (j0 >= 0) & (i0 < nx - 1) & (j0 < ny - 1)
        i0c = np.clip(i0, 0, nx - 2)
        j0c = np.clip(j0, 0, ny - 2)
        fu = np.clip(u - i0c, 0.0, 1.0)
        fv = np.clip(v - j0c, 0.0, 1.0)
        f = self.values
        val = ((1 - fu) * (1 - fv) * f[i0c, j0c] + fu * (1 - fv) * f[i0c + 1, j0c]
               + (1 - fu) * fv * f[i0c, j0c + 1] + fu * fv * f[i0c + 1, j0c + 1])
        return np.where(inside, val, 1e3)


def _self_intersects(pts: np.ndarray) -> bool:
    a = pts
    b = np.roll(pts, -1, axis=0)
    n = len(pts)
    d = b - a

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    # pairwise proper-intersection test between segments i and j
    ai, aj = a[:, None, :], a[None, :, :]
    di, dj = d[:, None, :], d[None, :, :]
    denom = cross(di, dj)
    rel = aj - ai
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross(rel, dj) / denom
        u = cross(rel, di) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < 1 - 1e-9) & (u > 1e-9) & (u < 1 - 1e-9)
    idx = np.arange(n)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) | (np.abs(idx[:, None] - idx[None, :]) == n - 1)
    return bool(np.any(hit & ~adjacent))


def _wrap(s, track: TrackDef):
    return np.mod(s, track.total_length)


def _segment_at(s, track: TrackDef):
    s = _wrap(np.asarray(s, dtype=np.float64), track)
    i = np.searchsorted(track.arc, s, side="right") - 1
    i = np.clip(i, 0, len(track.seg_len) - 1)
    t = (s - track.arc[i]) / track.seg_len[i]
    return i, np.clip(t, 0.0, 1.0)


def centerline_point(progress, track: TrackDef) -> np.ndarray:
    """Point on the centerline at arc length ``progress`` (any shape, wraps)."""
    i, t = _segment_at(progress, track)
    return track.centerline[i] + t[..., None] * (track.seg_len[i] * 1.0)[..., None] * track.seg_dir[i]


def half_width_at(progress, track: TrackDef) -> np.ndarray:
    i, t = _segment_at(progress, track)
    j = (i + 1) % len(track.half_width)
    return (1 - t) * track.half_width[i] + t * track.half_width[j]


def normal_at(progress, track: TrackDef) -> np.ndarray:
    i, t = _segment_at(progress, track)
    j = (i + 1) % len(track.normals)
    n = (1 - t)[..., None] * track.normals[i] + t[..., None] * track.normals[j]
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def heading_at(progress, track: TrackDef) -> np.ndarray:
    i, _ = _segment_at(progress, track)
    d = track.seg_dir[i]
    return np.arctan2(d[..., 1], d[..., 0])


def project_points(points, track: TrackDef) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points onto the centerline.

    Returns ``(progress, lateral, half_width)``: arc length of the nearest
    centerline point in [0, total_length), signed lateral offset (positive to
    the left of travel) and the interpolated half-width there.
    """
    p = np.asarray(points, dtype=np.float64)
    flat = p.reshape(-1, 2)
    a = track.centerline
    rel = flat[:, None, :] - a[None, :, :]
    t = np.einsum("psk,sk->ps", rel, track.seg_dir)
    t = np.clip(t, 0.0, track.seg_len[None, :])
    closest = a[None, :, :] + t[..., None] * track.seg_dir[None, :, :]
    d2 = np.sum((flat[:, None, :] - closest) ** 2, axis=-1)
    k = np.argmin(d2, axis=1)
    rows = np.arange(len(flat))
    tk = t[rows, k]
    progress = _wrap(track.arc[k] + tk, track)
    off = flat - closest[rows, k]
    sd = track.seg_dir[k]
    lateral = sd[:, 0] * off[:, 1] - sd[:, 1] * off[:, 0]
    frac = tk / track.seg_len[k]
    nxt = (k + 1) % len(track.half_width)
    hw = (1 - frac) * track.half_width[k] + frac * track.half_width[nxt]
    shape = p.shape[:-1]
    return progress.reshape(shape), lateral.reshape(shape), hw.reshape(shape)


def project_progress(position, track: TrackDef) -> float:
    progress, _, _ = project_points(np.asarray(position, dtype=np.float64).reshape(1, 2), track)
    return float(progress[0])


def lookahead_distance(speed: float) -> float:
    return float(np.clip(LOOKAHEAD_SECONDS * speed, LOOKAHEAD_MIN, LOOKAHEAD_MAX))


def sample_track_points(progress: float, speed: float, track: TrackDef) -> np.ndarray:
    """177x3 lookahead feature in world coordinates.

    Rows 0-58 on the left edge, 59-117 on the centerline, 118-176 on the
    right edge; each line uniformly spaced from ``progress`` over the
    speed-dependent lookahead distance. z is always 0.
    """
    if speed < 0:
        raise ValueError("speed must be >= 0")
    span = lookahead_distance(speed)
    s = progress + np.linspace(0.0, span, POINTS_PER_LINE)
    c = centerline_point(s, track)
    n = normal_at(s, track)
    hw = half_width_at(s, track)[:, None]
    out = np.zeros((N_TRACK_POINTS, 3))
    out[:POINTS_PER_LINE, :2] = c + n * hw
    out[POINTS_PER_LINE:2 * POINTS_PER_LINE, :2] = c
    out[2 * POINTS_PER_LINE:, :2] = c - n * hw
    return out


def off_track_corners(corners, track: TrackDef) -> int:
    _, lateral, hw = project_points(corners, track)
    return int(np.count_nonzero(np.abs(lateral) > hw))


def off_track_tire_count(state, track: TrackDef) -> int:
    """Number of footprint corners (tires) outside the track limits."""
    return off_track_corners(state.corners(), track)


def curvature_at(progress: float, track: TrackDef) -> float:
    """Signed curvature (1/m, left turns positive) from the circle through
    the nearest centerline vertex and its two neighbours."""
    n = len(track.centerline)
    i, t = _segment_at(progress, track)
    i = int(i) + (1 if t > 0.5 else 0)
    a = track.centerline[(i - 1) % n]
    b = track.centerline[i % n]
    c = track.centerline[(i + 1) % n]
    return _menger(a, b, c)


def curvature_profile(progress, track: TrackDef) -> np.ndarray:
    """Vectorised :func:`curvature_at` over an array of progress values."""
    i, t = _segment_at(progress, track)
    i = (i + (t > 0.5)) % len(track.centerline)
    return track.vertex_curvature[i]


def _menger(a, b, c) -> float:
    ab, bc, ca = b - a, c - b, a - c
    cross = ab[0] * bc[1] - ab[1] * bc[0]
    denom = np.linalg.norm(ab) * np.linalg.norm(bc) * np.linalg.norm(ca)
    if denom == 0.0:
        return 0.0
    k = 2.0 * cross / denom
    return 0.0 if abs(k) < 1e-12 else float(k)


def max_curvature_ahead(progress: float, distance: float, track: TrackDef) -> float:
    """Largest |curvature| on the centerline over [progress, progress + distance]."""
    s0 = _wrap(progress, track)
    k = track.vertex_curvature
    start = int(np.searchsorted(track.arc, s0, side="right") - 1)
    end = int(np.searchsorted(track.arc, s0 + distance, side="right"))
    n = len(k)
    idx = np.arange(start, max(end, start + 1) + 1) % n
    return float(np.max(np.abs(k[idx])))


# -- files ---------------------------------------------------------------

def parse_track(text: str, name: str = "track") -> TrackDef:
    lines = text.splitlines()
    header_seen = False
    rows: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not header_seen:
            if line.split() != ["track", "v1"]:
                raise TrackParseError(f"expected header 'track v1', got {line!r}", lineno)
            header_seen = True
            continue
        parts = line.split()
        if parts[0] != "point" or len(parts) != 4:
            raise TrackParseError(f"expected 'point x y half_width', got {line!r}", lineno)
        try:
            rows.append((float(parts[1]), float(parts[2]), float(parts[3])))
        except ValueError:
            raise TrackParseError(f"non-numeric value in {line!r}", lineno) from None
    if not header_seen:
        raise TrackParseError("missing 'track v1' header")
    if len(rows) < 4:
        raise TrackError("track needs at least 3 distinct points plus the closing point")
    arr = np.array(rows)
    if not np.allclose(arr[0, :2], arr[-1, :2], atol=1e-9, rtol=0):
        raise TrackError("open loop: last point must repeat the first")
    return TrackDef(arr[:-1, :2], arr[:-1, 2], name=name).validate()


def load_track(path) -> TrackDef:
    path = Path(path)
    return parse_track(path.read_text(), name=path.stem)


def dump_track(track: TrackDef) -> str:
    out = ["track v1", f"# {track.name}: {len(track.centerline)} points, {track.total_length:.3f} m"]
    rows = np.concatenate([track.centerline, track.centerline[:1]])
    hws = np.concatenate([track.half_width, track.half_width[:1]])
    for (x, y), hw in zip(rows, hws):
        out.append(f"point {x:.6f} {y:.6f} {hw:.6f}")
    return "\n".join(out) + "\n"


BUNDLED_TRACKS = ("oval", "kidney")


def bundled_track_path(name: str) -> Path:
    if name not in BUNDLED_TRACKS:
        raise TrackError(f"unknown bundled track {name!r}; choose from {BUNDLED_TRACKS}")
    return Path(str(resources.files("egorace") / "tracks" / f"{name}.track"))


def resolve_track(ref: str) -> TrackDef:
    """Load a bundled track by name, or a track file by path."""
    if ref in BUNDLED_TRACKS:
        return load_track(bundled_track_path(ref))
    return load_track(ref)


# -- generators for bundled tracks ----------------------------------------

def make_oval(straight: float = 100.0, radius: float = 40.0, half_width: float = 6.0,
              spacing: float = 4.0, name: str = "oval") -> TrackDef:
    """Stadium oval, counter-clockwise, start/finish at the start of the
    bottom straight."""
    pts = []
    n_straight = max(1, int(math.ceil(straight / spacing)))
    n_arc = max(2, int(math.ceil(math.pi * radius / spacing)))
    for k in range(n_straight):
        pts.append((-straight / 2 + straight * k / n_straight, -radius))
    for k in range(n_arc):
        a = -math.pi / 2 + math.pi * k / n_arc
        pts.append((straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    for k in range(n_straight):
        pts.append((straight / 2 - straight * k / n_straight, radius))
    for k in range(n_arc):
        a = math.pi / 2 + math.pi * k / n_arc
        pts.append((-straight / 2 + radius * math.cos(a), radius * math.sin(a)))
    return TrackDef(np.array(pts), np.full(len(pts), half_width), name=name)


def make_kidney(scale: float = 70.0, half_width: float = 6.0, spacing: float = 4.0,
                name: str = "kidney") -> TrackDef:
    """Non-convex loop with both left and right turns."""
    t = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    r = scale * (1.0 + 0.35 * np.cos(2 * t) - 0.12 * np.sin(3 * t))
    x = 1.6 * r * np.cos(t) - 0.35 * scale * np.cos(2 * t)
    y = r * np.sin(t)
    dense = np.stack([x, y], axis=1)
    seg = np.linalg.norm(np.roll(dense, -1, axis=0) - dense, axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(math.ceil(s[-1] / spacing))
    target = np.linspace(0.0, s[-1], n, endpoint=False)
    px = np.interp(target, s, np.concatenate([x, x[:1]]))
    py = np.interp(target, s, np.concatenate([y, y[:1]]))
    return TrackDef(np.stack([px, py], axis=1), np.full(n, half_width), name=name)
