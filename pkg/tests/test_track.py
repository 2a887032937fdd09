import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egorace.track import (N_TRACK_POINTS, TrackDef, TrackError, TrackParseError, curvature_at,
                           dump_track, load_track, lookahead_distance, make_oval, off_track_tire_count,
                           parse_track, project_points, project_progress, resolve_track,
                           sample_track_points)
from egorace.vehicle import VehicleState


def straight_loop(length=200.0, width=40.0, hw=5.0, spacing=2.0):
    """Rectangle whose bottom edge runs along +x from the origin."""
    pts = []
    for x in np.arange(0.0, length, spacing):
        pts.append((x, 0.0))
    for y in np.arange(0.0, width, spacing):
        pts.append((length, y))
    for x in np.arange(length, 0.0, -spacing):
        pts.append((x, width))
    for y in np.arange(width, 0.0, -spacing):
        pts.append((0.0, y))
    return TrackDef(np.array(pts), np.full(len(pts), hw))


def circle(radius=50.0, n=80, hw=5.0, clockwise=False):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    if clockwise:
        a = -a
    return TrackDef(np.stack([radius * np.cos(a), radius * np.sin(a)], 1), np.full(n, hw))


def test_projection_examples():
    tr = straight_loop()
    assert project_progress(tr.centerline[50], tr) == pytest.approx(100.0)
    assert project_progress((0.0, 0.0), tr) == pytest.approx(0.0)
    assert project_progress((50.0, 2.0), tr) == pytest.approx(50.0)
    _, lat, hw = project_points(np.array([[50.0, 2.0], [50.0, -1.5]]), tr)
    assert lat == pytest.approx([2.0, -1.5])
    assert hw == pytest.approx([5.0, 5.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(5.0, 195.0), st.floats(-4.0, 4.0))
def test_projection_on_straight(x, off):
    tr = straight_loop()
    s, lat, _ = project_points(np.array([[x, off]]), tr)
    assert s[0] == pytest.approx(x, abs=1e-9)
    assert lat[0] == pytest.approx(off, abs=1e-9)


def test_lookahead():
    assert lookahead_distance(0.0) == 30.0
    assert lookahead_distance(20.0) == 120.0
    assert lookahead_distance(1000.0) == 400.0
    tr = make_oval()
    pts = sample_track_points(0.0, 0.0, tr)
    assert pts.shape == (N_TRACK_POINTS, 3) == (177, 3)
    center = pts[59:118, :2]
    # start and end of the oval's bottom straight are on the same line
    assert np.linalg.norm(center[-1] - center[0]) == pytest.approx(30.0, rel=1e-9)
    assert np.all(pts[:, 2] == 0.0)
    # left edge is half_width to the left of the centerline
    assert np.linalg.norm(pts[:59, :2] - center, axis=1) == pytest.approx(np.full(59, 6.0))
    with pytest.raises(ValueError):
        sample_track_points(0.0, -1.0, tr)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 2000.0), st.floats(0.0, 100.0))
def test_sample_shape_any_query(p, v):
    assert sample_track_points(p, v, make_oval()).shape == (177, 3)


def test_off_track_tires():
    tr = straight_loop(hw=5.0)
    assert off_track_tire_count(VehicleState(x=50.0, y=0.0), tr) == 0
    # centered on the edge line, heading parallel: two corners outside by 0.95 m
    assert off_track_tire_count(VehicleState(x=50.0, y=-5.0), tr) == 2
    assert off_track_tire_count(VehicleState(x=50.0, y=-10.0), tr) == 4


def test_curvature():
    tr = straight_loop()
    assert curvature_at(50.0, tr) == 0.0
    k_left = curvature_at(10.0, circle(50.0))
    k_right = curvature_at(10.0, circle(50.0, clockwise=True))
    assert abs(k_left) == pytest.approx(0.02, rel=0.05)
    assert k_left > 0 > k_right
    assert k_left == pytest.approx(-k_right)


def test_bundled_oval_length():
    oval = resolve_track("oval")
    analytic = 2 * 100.0 + 2 * math.pi * 40.0
    assert oval.total_length == pytest.approx(analytic, rel=0.01)
    resolve_track("kidney").validate()


def test_dump_parse_round_trip(tmp_path):
    tr = make_oval()
    p = tmp_path / "o.track"
    p.write_text(dump_track(tr))
    back = load_track(p)
    np.testing.assert_allclose(back.centerline, tr.centerline, atol=1e-6)
    np.testing.assert_allclose(back.half_width, tr.half_width)


def _text(rows):
    return "track v1\n" + "".join(f"point {x} {y} {w}\n" for x, y, w in rows)


def test_file_errors():
    sq = [(0, 0, 3), (4, 0, 3), (4, 4, 3), (0, 4, 3)]
    parse_track(_text([*sq, sq[0]]))  # valid
    with pytest.raises(TrackError, match="open loop"):
        parse_track(_text(sq))
    with pytest.raises(TrackError, match="half_width"):
        parse_track(_text([(0, 0, 0), *sq[1:], (0, 0, 0)]))
    with pytest.raises(TrackParseError):
        parse_track("point 0 0 1\n")
    with pytest.raises(TrackParseError):
        parse_track("track v1\npoint 0 zero 1\n")
    with pytest.raises(TrackError, match="spacing"):
        parse_track(_text([(0, 0, 3), (40, 0, 3), (40, 40, 3), (0, 0, 3)]))
    with pytest.raises(TrackError, match="intersection"):
        bow = [(0, 0, 1), (3, 3, 1), (3, 0, 1), (0, 3, 1)]
        parse_track(_text([*bow, bow[0]]))
