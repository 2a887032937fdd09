"""Integrated-gradients attribution for the recurrent actor."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import uniform_filter

from egorace.neural import Actor

TARGETS = ("steer", "throttle", "combined")
BLUR_SIZE = 7


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionMap:
    values: np.ndarray       # (64, 64), channel-summed
    target: str
    steps: int
    baseline: str
    f_input: float
    f_baseline: float

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def completeness_residual(self) -> float:
        return self.total - (self.f_input - self.f_baseline)


def blur_baseline(image: np.ndarray, size: int = BLUR_SIZE) -> np.ndarray:
    """Per-channel box filter; borders mirrored (edge pixel repeated)."""
    img = np.asarray(image)
    return uniform_filter(img.astype(np.float64), size=(size, size, 1), mode="reflect").astype(img.dtype)


def target_value(mean: torch.Tensor, target: str) -> torch.Tensor:
    """Scalar read-out of the pre-squash action mean."""
    if target == "steer":
        return mean[..., 0]
    if target == "throttle":
        return mean[..., 1]
    if target == "combined":
        return mean.norm(dim=-1)
    raise ValueError(f"unknown target {target!r}; choose from {TARGETS}")


def _check(grad: torch.Tensor, what: str):
    if not torch.isfinite(grad).all():
        raise AttributionError(f"non-finite gradient in {what}")


def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def integrated_gradients(actor: Actor, image, proprio, hidden, target: str = "steer", steps: int = 20,
                         baseline=None) -> AttributionMap:
    """Attributions of one frame with the hidden state and proprio held fixed."""
    return temporal_attribution(actor, np.asarray(image)[None], np.asarray(proprio)[None], hidden,
                                target, steps, baselines=None if baseline is None else np.asarray(baseline)[None])[0]


def temporal_attribution(actor: Actor, images, proprios, h0, target: str = "steer", steps: int = 20,
                         baselines=None) -> list[AttributionMap]:
    """IG of every frame of a T-frame window for the action at the last
    frame, back-propagating through the recurrent chain. Frames other than
    the one being attributed keep their true values."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dtype = next(actor.parameters()).dtype
    imgs = _as_tensor(images, dtype)
    props = _as_tensor(proprios, dtype)
    T = imgs.shape[0]
    if T < 1:
        raise ValueError("need at least one frame")
    if baselines is None:
        baselines = np.stack([blur_baseline(np.asarray(images)[t]) for t in range(T)])
        desc = f"blur{BLUR_SIZE}x{BLUR_SIZE}"
    else:
        desc = "given"
    base = _as_tensor(baselines, dtype)
    h0 = _as_tensor(h0, dtype).reshape(1, -1)
    alphas = torch.arange(1, steps + 1, dtype=dtype) / steps

    with torch.no_grad():
        feats = actor.features(imgs, props)                      # (T, F)

    def readout(feat_seq: torch.Tensor) -> torch.Tensor:
        """feat_seq (B, T, F) -> target at the final frame, (B,)."""
        B = feat_seq.shape[0]
        h = h0.expand(B, -1)
        for t in range(T):
            h_next = actor.core(feat_seq[:, t], h)
            if t == T - 1:
                mean, _ = actor.head_out(feat_seq[:, t], h_next)
            h = h_next
        return target_value(mean, target)

    with torch.no_grad():
        f_true = float(readout(feats[None])[0])

    maps = []
    for t in range(T):
        x, x0 = imgs[t], base[t]
        path = (x0[None] + alphas[:, None, None, None] * (x - x0)[None]).requires_grad_(True)
        f_t = actor.features(path, props[t].expand(steps, -1))
        seq = feats[None].expand(steps, -1, -1).clone()
        seq[:, t] = f_t
        out = readout(seq)
        (grad,) = torch.autograd.grad(out.sum(), path, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(path)
        _check(grad, f"frame {t}")
        attr = ((x - x0) * grad.mean(0)).sum(-1)
        with torch.no_grad():
            seq0 = feats[None].clone()
            seq0[:, t] = actor.features(x0[None], props[t][None])
            f_base = float(readout(seq0)[0])
        maps.append(AttributionMap(attr.detach().numpy().astype(np.float64), target, steps, desc,
                                   f_true, f_base))
    return maps


def top_percent_mask(values: np.ndarray, fraction: float = 0.90) -> np.ndarray:
    """Smallest set of pixels, largest |value| first (row-major among ties),
    holding ``fraction`` of the total |value|."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    mag = np.abs(np.asarray(values, dtype=np.float64))
    flat = mag.ravel()
    mask = np.zeros(flat.shape, dtype=bool)
    total = flat.sum()
    if total == 0.0:
        return mask.reshape(mag.shape)
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    goal = fraction * total
    # relative slack absorbs summation rounding on equal values
    k = int(np.searchsorted(cum, goal * (1.0 - 1e-12), side="left")) + 1
    k = min(k, int(np.count_nonzero(flat)))
    mask[order[:k]] = True
    return mask.reshape(mag.shape)


def write_map(out_dir, stem: str, amap: AttributionMap, fraction: float = 0.90, extra: dict | None = None):
    """Writes <stem>.pgm (|attribution|), <stem>_mask.pgm, <stem>.npy and a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mag = np.abs(amap.values)
    peak = mag.max()
    gray = np.zeros(mag.shape, np.uint8) if peak == 0 else np.round(255.0 * mag / peak).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(out / f"{stem}.pgm")
    mask = top_percent_mask(amap.values, fraction)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / f"{stem}_mask.pgm")
    np.save(out / f"{stem}.npy", amap.values)
    side = {
        "target": amap.target, "steps": amap.steps, "baseline": amap.baseline,
        "f_input": amap.f_input, "f_baseline": amap.f_baseline, "attribution_sum": amap.total,
        "completeness_residual": amap.completeness_residual, "mask_fraction": fraction,
        "mask_pixels": int(mask.sum()),
    }
    side.update(extra or {})
    (out / f"{stem}.json").write_text(json.dumps(side, indent=2))
    return side
