"""Planar geometry behind the loop-search window.

Positions are projected onto the ground plane, the latest motion step is
extended into a ray, and the ray (plus a perpendicular cut at the current
position) is intersected with the older part of the trajectory. The
keyframes between the two hits form the window that gets image-matched.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidPose, TooFewPoses

DET_EPS = 1e-9  # below this |cross(d, e)| the ray and segment are treated as parallel
_PARAM_EPS = 1e-12


class PlanarPoint(NamedTuple):
    x: float
    y: float


def _finite_point(p):
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite point ({x}, {y})")
    return PlanarPoint(x, y)


@dataclass(frozen=True)
class Ray:
    origin: PlanarPoint
    direction: PlanarPoint

    def __post_init__(self):
        object.__setattr__(self, "origin", _finite_point(self.origin))
        d = _finite_point(self.direction)
        if abs(math.hypot(d.x, d.y) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", d)

    @classmethod
    def through(cls, origin, target):
        """Ray starting at ``origin`` and passing through ``target``."""
        dx, dy = target[0] - origin[0], target[1] - origin[1]
        n = math.hypot(dx, dy)
        if n == 0.0:
            raise ValueError("origin and target coincide")
        return cls(origin, (dx / n, dy / n))


@dataclass(frozen=True)
class Segment:
    a: PlanarPoint
    b: PlanarPoint

    def __post_init__(self):
        a, b = _finite_point(self.a), _finite_point(self.b)
        if a == b:
            raise ValueError("zero-length segment")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class Line:
    point: PlanarPoint
    direction: PlanarPoint


@dataclass(frozen=True)
class SearchWindow:
    start_index: int
    end_index: int
    p_start: PlanarPoint
    p_end: Optional[PlanarPoint] = None

    def __len__(self):
        return self.end_index - self.start_index + 1

    def indices(self):
        return range(self.start_index, self.end_index + 1)


def project_pose(pose):
    """Drop height and rotation: a 3x4/4x4 rigid pose (or bare 3-vector) -> ground-plane point."""
    arr = np.asarray(pose, dtype=float)
    if arr.shape in ((3, 4), (4, 4)):
        t = arr[:3, 3]
    elif arr.shape == (3,):
        t = arr
    else:
        raise InvalidPose(f"unsupported pose shape {arr.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidPose("pose translation is not finite")
    return PlanarPoint(float(t[0]), float(t[1]))


def _ray_hits(origin, d, starts, ends, bounded):
    """Smallest ray parameter t >= 0 at which the ray meets each span, NaN if it misses.

    Spans run from ``starts`` along ``ends - starts``; with ``bounded`` False
    the span parameter is unbounded above (``ends`` then holds unit directions
    of rays instead of endpoints).
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(d, dtype=float)
    a = np.atleast_2d(np.asarray(starts, dtype=float))
    e = np.atleast_2d(np.asarray(ends, dtype=float))
    if bounded:
        e = e - a
    w = a - o
    det = d[0] * e[:, 1] - d[1] * e[:, 0]
    out = np.full(len(a), np.nan)

    crossing = np.abs(det) >= DET_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / det
        u = (w[:, 0] * d[1] - w[:, 1] * d[0]) / det
    ok = crossing & (t >= -_PARAM_EPS) & (u >= -_PARAM_EPS)
    if bounded:
        ok &= u <= 1.0 + _PARAM_EPS
    out[ok] = np.maximum(t[ok], 0.0)

    # parallel spans: only collinear ones touch the ray; take the nearest overlap
    off_line = np.abs(w[:, 0] * d[1] - w[:, 1] * d[0])
    collinear = ~crossing & (off_line <= DET_EPS)
    if np.any(collinear):
        ta = w[collinear] @ d
        along = e[collinear] @ d
        if bounded:
            lo = np.minimum(ta, ta + along)
            hi = np.maximum(ta, ta + along)
        else:
            lo = np.where(along > 0, ta, -np.inf)
            hi = np.where(along > 0, np.inf, ta)
        hit = hi >= -_PARAM_EPS
        vals = np.where(hit, np.maximum(lo, 0.0), np.nan)
        out[collinear] = vals
    return out


def ray_segment_intersect(ray, seg):
    """First point where ``ray`` meets the closed segment, as ``(point, ray_param)``, or None."""
    t = _ray_hits(ray.origin, ray.direction, [seg.a], [seg.b], bounded=True)[0]
    if np.isnan(t):
        return None
    o, d = ray.origin, ray.direction
    return PlanarPoint(o.x + t * d.x, o.y + t * d.y), float(t)


def perpendicular_at(ray):
    """Line through the ray origin, direction rotated +90 degrees."""
    d = ray.direction
    return Line(ray.origin, PlanarPoint(-d.y, d.x))


def _nearest_vertex(points, p, last):
    dist = np.hypot(points[: last + 1, 0] - p[0], points[: last + 1, 1] - p[1])
    return int(np.argmin(dist))  # argmin returns the first minimum -> smaller index wins ties


def compute_search_window(projected, current_index, min_loop_gap):
    """Past keyframe span worth matching against ``current_index``.

    The motion ray runs from the previous position through the current one.
    Its first hit on the eligible trajectory prefix (or on the backward
    extension of the very first step) sets the start; the perpendicular
    through the current position sets the end. Without a hit the whole
    eligible prefix is searched. Returns None when no past keyframe is
    eligible yet.
    """
    c = int(current_index)
    if c < 2:
        raise TooFewPoses(f"need currentIndex >= 2, got {c}")
    pts = np.asarray(projected, dtype=float)[:, :2]
    if len(pts) < c + 1:
        raise TooFewPoses(f"need {c + 1} projected points, got {len(pts)}")
    last = c - int(min_loop_gap)
    if last < 0:
        return None

    def fallback():
        return SearchWindow(0, last, PlanarPoint(*pts[0]), None)

    step = pts[c] - pts[c - 1]
    norm = math.hypot(step[0], step[1])
    if norm == 0.0:
        return fallback()
    d = step / norm

    # candidate 0: backward extension of the first step; candidates 1..last: segments v_k
    params = np.full(last + 1, np.nan)
    first = pts[0] - pts[1]
    first_norm = math.hypot(first[0], first[1])
    if first_norm > 0.0:
        params[0] = _ray_hits(pts[c - 1], d, [pts[0]], [first / first_norm], bounded=False)[0]
    if last >= 1:
        params[1:] = _ray_hits(pts[c - 1], d, pts[: last], pts[1 : last + 1], bounded=True)
    if np.all(np.isnan(params)):
        return fallback()
    t = float(np.nanmin(params))
    p = PlanarPoint(pts[c - 1, 0] + t * d[0], pts[c - 1, 1] + t * d[1])
    start = _nearest_vertex(pts, p, last)

    p_end = None
    end = last
    if last >= 1:
        normal = np.array([-d[1], d[0]])
        best = None
        for sign in (1.0, -1.0):
            hits = _ray_hits(pts[c], sign * normal, pts[: last], pts[1 : last + 1], bounded=True)
            if np.all(np.isnan(hits)):
                continue
            s = float(np.nanmin(hits))
            if best is None or s < best[0]:
                best = (s, sign)
        if best is not None:
            s, sign = best
            p_end = PlanarPoint(pts[c, 0] + sign * s * normal[0], pts[c, 1] + sign * s * normal[1])
            snapped = _nearest_vertex(pts, p_end, last)
            if snapped > start:
                end = snapped
    return SearchWindow(start, end, p, p_end)

