"""Ego-view semantic raster.

Channel 0 is drivable surface, channel 1 track edge lines, channel 2 other
cars. Flat world, pinhole camera at the ego centroid looking along the
heading, 90 degree horizontal field of view, horizon on row 20. Cars are
drawn far-to-near so nearer bodies hide farther ones and the ground.
"""

from __future__ import annotations

import math

import numpy as np

from egorace.track import TrackDef

IMAGE_SIZE = 64
SUPERSAMPLE = 2
HORIZON_ROW = 20.0
FOCAL = IMAGE_SIZE / 2 / math.tan(math.radians(90.0) / 2)
CAMERA_HEIGHT = 1.1
CAR_HEIGHT = 1.3
FAR_CLIP = 200.0
NEAR_CLIP = 0.5
EDGE_LINE_HALF = 0.35


def _ground_rays():
    n = IMAGE_SIZE * SUPERSAMPLE
    centers = (np.arange(n) + 0.5) / SUPERSAMPLE
    rows, cols = np.meshgrid(centers, centers, indexing="ij")
    below = rows > HORIZON_ROW
    with np.errstate(divide="ignore"):
        z = np.where(below, FOCAL * CAMERA_HEIGHT / (rows - HORIZON_ROW), np.inf)
    valid = below & (z <= FAR_CLIP)
    left = (IMAGE_SIZE / 2 - cols) * z / FOCAL
    return np.argwhere(valid), z[valid], left[valid]


_GROUND_IDX, _GROUND_Z, _GROUND_LEFT = _ground_rays()


def render_ego_view(track: TrackDef, ego, others=()) -> np.ndarray:
    """64x64x3 float32 image in [0, 1] (exact multiples of 1/255)."""
    n = IMAGE_SIZE * SUPERSAMPLE
    canvas = np.zeros((n, n, 3), dtype=np.float32)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + _GROUND_Z * c - _GROUND_LEFT * s
    wy = ego.y + _GROUND_Z * s + _GROUND_LEFT * c
    e = track.edge_field.lookup(np.stack([wx, wy], axis=-1))
    r, q = _GROUND_IDX[:, 0], _GROUND_IDX[:, 1]
    canvas[r, q, 0] = e < 0.0
    canvas[r, q, 1] = np.abs(e) < EDGE_LINE_HALF

    boxes = []
    for other in others:
        rect = _car_rect(ego, other, c, s)
        if rect is not None:
            boxes.append(rect)
    for _, x0, x1, y0, y1 in sorted(boxes, key=lambda b: -b[0]):
        canvas[y0:y1, x0:x1, :] = (0.0, 0.0, 1.0)

    img = canvas.reshape(IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def _car_rect(ego, other, c, s):
    rel = other.corners() - np.array([ego.x, ego.y])
    z = rel[:, 0] * c + rel[:, 1] * s
    left = -rel[:, 0] * s + rel[:, 1] * c
    if z.max() < NEAR_CLIP:
        return None
    depth = float(np.mean(z))
    if z.min() > FAR_CLIP:
        return None
    z = np.maximum(z, NEAR_CLIP)
    xs = IMAGE_SIZE / 2 - FOCAL * left / z
    bottom = HORIZON_ROW + FOCAL * CAMERA_HEIGHT / z
    top = HORIZON_ROW + FOCAL * (CAMERA_HEIGHT - CAR_HEIGHT) / z
    x0, x1 = xs.min(), xs.max()
    y0, y1 = top.min(), bottom.max()
    if x1 <= 0 or x0 >= IMAGE_SIZE or y1 <= 0 or y0 >= IMAGE_SIZE:
        return None
    n = IMAGE_SIZE * SUPERSAMPLE
    px0 = int(np.clip(math.floor(x0 * SUPERSAMPLE), 0, n))
    px1 = int(np.clip(math.ceil(x1 * SUPERSAMPLE), 0, n))
    py0 = int(np.clip(math.floor(y0 * SUPERSAMPLE), 0, n))
    py1 = int(np.clip(math.ceil(y1 * SUPERSAMPLE), 0, n))
    if px1 <= px0 or py1 <= py0:
        return None
    return depth, px0, px1, py0, py1
