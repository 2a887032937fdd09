import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import box_blur_oracle, mask_count_oracle
from egorace.attribution import (AttributionError, blur_baseline, integrated_gradients, target_value,
                                 temporal_attribution, top_percent_mask, write_map)
from egorace.env import RaceConfig, RaceEnv
from egorace.neural import Actor, NetConfig
from egorace.vehicle import Action

SMALL = NetConfig(hidden_size=8, embed_dim=8, mlp_width=8, mlp_depth=2, n_quantiles=4)


def actor(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    a = Actor(cfg).double()
    with torch.no_grad():
        a.head.weight.mul_(100.0)     # undo the tiny head init so outputs are O(1)
    return a


def obs(rng, T=None):
    shape = (64, 64, 3) if T is None else (T, 64, 64, 3)
    pshape = (18,) if T is None else (T, 18)
    return rng.uniform(0, 1, shape), rng.standard_normal(pshape)


# -- baseline and mask --------------------------------------------------------------------

def test_blur_examples():
    const = np.full((64, 64, 3), 0.3)
    np.testing.assert_allclose(blur_baseline(const), const, atol=1e-15)
    img = np.zeros((64, 64, 3))
    img[30, 30, 1] = 1.0
    out = blur_baseline(img)
    assert np.count_nonzero(out[..., 1] > 1e-12) == 49
    np.testing.assert_allclose(out[27:34, 27:34, 1], 1 / 49, rtol=1e-12)
    assert not out[..., 0].any()


def test_blur_matches_oracle():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (12, 10, 3))
    np.testing.assert_allclose(blur_baseline(img), box_blur_oracle(img), atol=1e-12)
    out = blur_baseline(img)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_mask_examples():
    v = np.zeros((64, 64))
    v[3, 4] = -2.0
    assert np.argwhere(top_percent_mask(v)).tolist() == [[3, 4]]
    assert top_percent_mask(np.ones((64, 64)), 0.5).sum() == math.ceil(0.5 * 4096)
    rng = np.random.default_rng(1)
    v = rng.standard_normal((64, 64)) * (rng.random((64, 64)) < 0.3)
    assert np.array_equal(top_percent_mask(v, 1.0), v != 0)
    assert not top_percent_mask(np.zeros((8, 8))).any()
    with pytest.raises(ValueError):
        top_percent_mask(v, 0.0)


def test_mask_tie_rule_row_major():
    m = top_percent_mask(np.ones((4, 4)), 0.25)
    assert np.argwhere(m).tolist() == [[0, 0], [0, 1], [0, 2], [0, 3]]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_mask_count_and_monotone(seed, a, b):
    rng = np.random.default_rng(seed)
    v = np.round(rng.standard_normal((16, 16)), 1)        # rounding creates ties
    a, b = min(a, b), max(a, b)
    ma, mb = top_percent_mask(v, a), top_percent_mask(v, b)
    assert ma.sum() == mask_count_oracle(v, a)
    assert not (ma & ~mb).any()
    kept = np.abs(v)[ma].sum()
    assert kept >= a * np.abs(v).sum() * (1 - 1e-12)


# -- integrated gradients ----------------------------------------------------------------------

def test_zero_path_and_targets():
    rng = np.random.default_rng(2)
    a = actor()
    img, prop = obs(rng)
    h = rng.uniform(-0.5, 0.5, 8)
    m = integrated_gradients(a, img, prop, h, baseline=img)
    assert not m.values.any() and m.values.shape == (64, 64)
    mean = torch.tensor([[0.3, -0.4]])
    assert float(target_value(mean, "throttle")) == pytest.approx(-0.4)
    assert float(target_value(mean, "combined")) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        target_value(mean, "brake")


def rendered_frame(rng, seed):
    env = RaceEnv(RaceConfig(n_opponents=3, seed=seed))
    o = env.reset()
    for _ in range(int(rng.integers(0, 20))):
        o, *_ = env.step(Action(float(rng.uniform(-1, 1)), 1.0))
    return o.image.astype(np.float64), o.proprio.astype(np.float64)


def test_completeness_on_rendered_frames():
    rng = np.random.default_rng(3)
    for k in range(5):
        torch.manual_seed(k)
        a = Actor(SMALL).double()
        img, prop = rendered_frame(rng, k)
        m = integrated_gradients(a, img, prop, rng.uniform(-0.5, 0.5, 8), steps=200)
        gap = m.f_input - m.f_baseline
        assert abs(m.completeness_residual) <= 0.02 * abs(gap) + 1e-5


def test_riemann_convergence():
    rng = np.random.default_rng(8)
    a = actor(9)
    img, prop = obs(rng)
    tot = {s: integrated_gradients(a, img, prop, np.zeros(8), steps=s).total for s in (20, 40, 200, 400)}
    assert abs(tot[400] - tot[200]) < abs(tot[40] - tot[20])


def test_symmetry_outside_region():
    rng = np.random.default_rng(4)
    img, prop = obs(rng)
    base = img.copy()
    base[10:20, 30:40] = 0.0
    m = integrated_gradients(actor(), img, prop, np.zeros(8), baseline=base)
    outside = np.ones((64, 64), bool)
    outside[10:20, 30:40] = False
    assert not m.values[outside].any()


def test_temporal_degenerate_and_no_rnn():
    rng = np.random.default_rng(5)
    a = actor()
    imgs, props = obs(rng, T=4)
    h = rng.uniform(-0.5, 0.5, 8)
    one = temporal_attribution(a, imgs[:1], props[:1], h)[0]
    np.testing.assert_array_equal(one.values, integrated_gradients(a, imgs[0], props[0], h).values)
    maps = temporal_attribution(a, imgs, props, h)
    assert len(maps) == 4 and all(np.abs(m.values).sum() > 0 for m in maps)
    flat = actor(cfg=NetConfig(hidden_size=8, embed_dim=8, mlp_width=8, mlp_depth=2, no_rnn=True))
    maps = temporal_attribution(flat, imgs, props, h)
    assert all(not m.values.any() for m in maps[:-1]) and maps[-1].values.any()


def test_nan_gradient_reported():
    a = actor()
    with torch.no_grad():
        a.encoder.convs[0].weight[0, 0, 0, 0] = float("nan")
    rng = np.random.default_rng(6)
    img, prop = obs(rng)
    with pytest.raises(AttributionError):
        integrated_gradients(a, img, prop, np.zeros(8))


def test_write_map(tmp_path):
    rng = np.random.default_rng(7)
    img, prop = obs(rng)
    m = integrated_gradients(actor(), img, prop, np.zeros(8))
    side = write_map(tmp_path, "frame_00003", m, extra={"frame": 3})
    for suffix in (".pgm", "_mask.pgm", ".npy", ".json"):
        assert (tmp_path / f"frame_00003{suffix}").exists()
    assert np.array_equal(np.load(tmp_path / "frame_00003.npy"), m.values)
    assert json.loads((tmp_path / "frame_00003.json").read_text()) == side
    assert side["frame"] == 3 and side["mask_pixels"] == int(top_percent_mask(m.values).sum())
