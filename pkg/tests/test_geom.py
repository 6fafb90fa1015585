import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopclose.errors import InvalidPose, TooFewPoses
from loopclose.geom import (
    PlanarPoint,
    Ray,
    Segment,
    compute_search_window,
    perpendicular_at,
    project_pose,
    ray_segment_intersect,
)
from oracles import brute_search_window, dense_first_hit, point_segment_distance


def _yaw(theta, t=(0.0, 0.0, 0.0)):
    T = np.eye(4)
    c, s = math.cos(theta), math.sin(theta)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:3, 3] = t
    return T


def square_path(n=40, side=10.0):
    per_side = n // 4
    pts = []
    corners = [(0, 0), (side, 0), (side, side), (0, side)]
    for k in range(4):
        a = np.array(corners[k], float)
        b = np.array(corners[(k + 1) % 4], float)
        for i in range(per_side):
            pts.append(a + (b - a) * i / per_side)
    return np.array(pts)


def circle_path(n=360, r=10.0):
    ang = np.deg2rad(np.arange(n) * 360.0 / n)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def figure_eight_path(n, r=10.0):
    s = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([r * np.sin(s), r * np.sin(s) * np.cos(s)], axis=1)


# ---------------------------------------------------------------- project_pose

def test_project_identity():
    assert project_pose(np.eye(4)) == PlanarPoint(0.0, 0.0)


def test_project_drops_z_and_rotation():
    assert project_pose(_yaw(0.7, (1, 2, 3))) == PlanarPoint(1.0, 2.0)
    assert project_pose(_yaw(0.7, (1, 2, 3))[:3]) == PlanarPoint(1.0, 2.0)


def test_project_yaw_invariant():
    assert project_pose(_yaw(0.1, (4, 5, 6))) == project_pose(_yaw(-2.0, (4, 5, 6)))


def test_project_rejects_non_finite():
    T = np.eye(4)
    T[0, 3] = np.nan
    with pytest.raises(InvalidPose):
        project_pose(T)
    with pytest.raises(InvalidPose):
        project_pose(np.eye(2))


# ---------------------------------------------------------------- ray / segment

def test_ray_axis_aligned_crossing():
    hit = ray_segment_intersect(Ray((0, 0), (1, 0)), Segment((2, -1), (2, 1)))
    assert hit is not None
    (x, y), t = hit
    assert (x, y, t) == pytest.approx((2.0, 0.0, 2.0), abs=1e-12)


def test_ray_behind_origin():
    assert ray_segment_intersect(Ray((0, 0), (1, 0)), Segment((-2, -1), (-2, 1))) is None


def test_ray_oblique_against_hand_solution_and_dense_walk():
    # hand solution: 0.8 t = 2 -> t = 2.5, x = 0.6 * 2.5 = 1.5
    hit = ray_segment_intersect(Ray((0, 0), (0.6, 0.8)), Segment((0, 2), (3, 2)))
    (x, y), t = hit
    assert (x, y, t) == pytest.approx((1.5, 2.0, 2.5), abs=1e-12)
    ts, dist = dense_first_hit((0, 0), (0.6, 0.8), (0, 2), (3, 2), t_max=4.0)
    first = ts[np.argmax(dist < 1e-4)]
    assert abs(first - 2.5) < 2e-4


def test_ray_collinear_overlap_returns_nearest_point():
    hit = ray_segment_intersect(Ray((0, 0), (1, 0)), Segment((5, 0), (3, 0)))
    assert hit[1] == pytest.approx(3.0)
    # origin inside the overlap -> parameter 0
    hit = ray_segment_intersect(Ray((4, 0), (1, 0)), Segment((5, 0), (3, 0)))
    assert hit[1] == 0.0
    assert ray_segment_intersect(Ray((6, 0), (1, 0)), Segment((5, 0), (3, 0))) is None
    # parallel but offset
    assert ray_segment_intersect(Ray((0, 1), (1, 0)), Segment((5, 0), (3, 0))) is None


def test_segment_and_ray_validation():
    with pytest.raises(ValueError):
        Segment((1, 1), (1, 1))
    with pytest.raises(ValueError):
        Ray((0, 0), (1, 1))
    with pytest.raises(ValueError):
        Ray((np.inf, 0), (1, 0))


def check_against_dense_walk(rng, n_pairs):
    """Every reported hit lies on the segment; the dense walk finds nothing earlier;
    reported misses are confirmed by the walk never coming close."""
    disagreements = 0
    for _ in range(n_pairs):
        o = rng.uniform(-5, 5, 2)
        ang = rng.uniform(-np.pi, np.pi)
        d = np.array([math.cos(ang), math.sin(ang)])
        a, b = rng.uniform(-5, 5, 2), rng.uniform(-5, 5, 2)
        hit = ray_segment_intersect(Ray(o, d), Segment(a, b))
        ts, dist = dense_first_hit(o, d, a, b, t_max=16.0)
        if hit is None:
            if dist.min() <= 0.5e-4:
                disagreements += 1
            continue
        p, t = hit
        if point_segment_distance(p, a, b) >= 1e-6:
            disagreements += 1
            continue
        e = (b - a) / np.linalg.norm(b - a)
        sin_angle = abs(d[0] * e[1] - d[1] * e[0])
        slack = 1e-4 / max(sin_angle, 1e-3) + 1e-4
        close = ts[dist < 1e-4 * max(sin_angle, 1e-3)]
        if len(close) and close[0] < t - slack:
            disagreements += 1
    return disagreements


def test_ray_segment_matches_dense_walk_sampled():
    assert check_against_dense_walk(np.random.default_rng(11), 100) == 0


# ---------------------------------------------------------------- perpendicular

def test_perpendicular_examples():
    line = perpendicular_at(Ray((0, 0), (1, 0)))
    assert line.point == (0.0, 0.0) and line.direction == pytest.approx((0.0, 1.0))
    line = perpendicular_at(Ray((3, 4), (0, 1)))
    assert line.point == (3.0, 4.0) and line.direction == pytest.approx((-1.0, 0.0))


def test_perpendicular_is_orthogonal():
    rng = np.random.default_rng(5)
    for _ in range(100):
        ang = rng.uniform(-np.pi, np.pi)
        ray = Ray(rng.uniform(-10, 10, 2), (math.cos(ang), math.sin(ang)))
        n = perpendicular_at(ray).direction
        assert abs(ray.direction[0] * n[0] + ray.direction[1] * n[1]) < 1e-15


# ---------------------------------------------------------------- search window

def test_window_needs_two_poses():
    with pytest.raises(TooFewPoses):
        compute_search_window([(0, 0), (1, 0)], 1, 1)
    with pytest.raises(TooFewPoses):
        compute_search_window([(0, 0), (1, 0)], 2, 1)


def test_window_square_heading_home():
    pts = square_path(40)
    win = compute_search_window(pts, 35, 5)
    assert brute_search_window(pts, 35, 5) == (win.start_index, win.end_index)
    # the motion ray runs down x = 0 and hits the start corner
    assert win.p_start == pytest.approx((0.0, 0.0), abs=1e-9)
    assert win.start_index == 0
    # perpendicular y = 5 crosses the right edge at index 15
    assert win.end_index == 15
    assert win.p_end == pytest.approx((10.0, 5.0))


def test_window_straight_line_falls_back():
    pts = np.stack([np.linspace(0, 20, 41), np.zeros(41)], axis=1)
    for c in (10, 25, 40):
        win = compute_search_window(pts, c, 5)
        assert win.start_index == 0
        assert win.p_end is None
        assert win.end_index == c - 5


def test_window_circle_prunes():
    pts = circle_path(360)
    win = compute_search_window(pts, 350, 30)
    assert brute_search_window(pts, 350, 30) == (win.start_index, win.end_index)
    assert win.start_index <= 5
    assert len(win) < 350 - 30 + 1


def test_window_none_before_gap():
    assert compute_search_window(square_path(40), 3, 5) is None


def random_trajectory(rng):
    kind = rng.integers(3)
    n = int(rng.integers(30, 160))
    laps = rng.uniform(0.8, 2.2)
    if kind == 0:
        base = square_path(4 * n, side=rng.uniform(5, 20))
    elif kind == 1:
        base = circle_path(n, r=rng.uniform(5, 20))
    else:
        base = figure_eight_path(n, r=rng.uniform(5, 20))
    total = int(len(base) * laps)
    pts = np.array([base[i % len(base)] for i in range(total)])
    pts = pts + rng.normal(0, rng.choice([0.0, 0.01, 0.2]), pts.shape)
    return pts


def windows_match_oracle(rng, n_traj):
    bad = 0
    for _ in range(n_traj):
        pts = random_trajectory(rng)
        gap = int(rng.integers(2, 25))
        c = int(rng.integers(max(2, gap), len(pts)))
        win = compute_search_window(pts, c, gap)
        ref = brute_search_window(pts, c, gap)
        got = None if win is None else (win.start_index, win.end_index)
        if got != ref:
            bad += 1
        if win is not None:
            assert 0 <= win.start_index <= win.end_index <= c - gap
    return bad


def test_window_matches_oracle_sampled():
    assert windows_match_oracle(np.random.default_rng(21), 60) == 0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    angle=st.floats(-math.pi, math.pi),
    shift=st.tuples(st.floats(-100, 100), st.floats(-100, 100)),
)
def test_window_rigid_invariance(seed, angle, shift):
    rng = np.random.default_rng(seed)
    pts = random_trajectory(rng)
    pts = pts + rng.normal(0, 0.05, pts.shape)  # avoid exact vertex ties
    c = len(pts) - 1
    gap = 10
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    moved = pts @ R.T + np.array(shift)
    a = compute_search_window(pts, c, gap)
    b = compute_search_window(moved, c, gap)
    assert (a.start_index, a.end_index) == (b.start_index, b.end_index)
