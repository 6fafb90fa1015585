"""Trajectory accuracy metrics and the K-sweep experiment harness."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import DetectorConfig, Keyframe, run_sequence
from .errors import LengthMismatch, SpecError, TooShort
from .features import extract_features
from .posegraph import PoseSE2, between, normalize_angle

STANDARD_SEGMENTS = tuple(range(100, 801, 100))
DEFAULT_TOLERANCE = 2


def _xy(poses):
    return np.array([(p.x, p.y) if isinstance(p, PoseSE2) else (p[0], p[1]) for p in poses], dtype=float)


def _as_poses(poses):
    return [p if isinstance(p, PoseSE2) else PoseSE2.from_array(p) for p in poses]


def rigid_align_2d(src, dst):
    """Rotation R and translation t minimising sum |R src_i + t - dst_i|^2 (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag([1.0, d]) @ vt
    return rot, mu_d - rot @ mu_s


def ate(estimated, gt, align="none"):
    """Position RMSE, optionally after the best 2-D rigid alignment of ``estimated`` onto ``gt``."""
    if len(estimated) != len(gt):
        raise LengthMismatch(f"{len(estimated)} estimated poses vs {len(gt)} ground-truth poses")
    if len(gt) < 2:
        raise LengthMismatch("need at least 2 poses")
    est, ref = _xy(estimated), _xy(gt)
    if align not in ("none", "rigid2d"):
        raise ValueError(f"unknown alignment {align!r}")
    err = float(math.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))
    if align == "rigid2d":
        rot, t = rigid_align_2d(est, ref)
        aligned = float(math.sqrt(np.mean(np.sum((est @ rot.T + t - ref) ** 2, axis=1))))
        # the identity is one of the candidate transforms; keep it when rounding makes SVD worse
        err = min(err, aligned)
    return err


def default_segment_lengths(total_length):
    """Standard {100..800} m segments, shrunk by powers of ten until the shortest fits four times."""
    factor = 1.0
    while factor > 1e-6 and 4 * STANDARD_SEGMENTS[0] * factor > total_length:
        factor /= 10.0
    return [L * factor for L in STANDARD_SEGMENTS]


def arc_lengths(poses):
    xy = _xy(poses)
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])


def segment_errors(estimated, gt, segment_lengths=None):
    """Per-segment ``(start, length, trans_err_fraction, rot_err_rad)`` over every start pose.

    A segment of length L starting at pose i ends at the first pose whose
    ground-truth arc length exceeds that of i by more than L. Errors are the
    translation norm and |angle| of the relative-motion discrepancy.
    """
    if len(estimated) != len(gt):
        raise LengthMismatch(f"{len(estimated)} estimated poses vs {len(gt)} ground-truth poses")
    est, ref = _as_poses(estimated), _as_poses(gt)
    dist = arc_lengths(ref)
    if segment_lengths is None:
        segment_lengths = default_segment_lengths(dist[-1])
    segment_lengths = sorted(float(L) for L in segment_lengths)
    if not segment_lengths:
        raise TooShort("no segment lengths given")
    if dist[-1] <= segment_lengths[0]:
        raise TooShort(f"trajectory of {dist[-1]:.3f} m is shorter than a {segment_lengths[0]:g} m segment")
    out = []
    for i in range(len(ref)):
        for L in segment_lengths:
            j = int(np.searchsorted(dist, dist[i] + L, side="right"))
            if j >= len(ref):
                continue
            d_gt = between(ref[i], ref[j])
            d_est = between(est[i], est[j])
            # between(d_est, d_gt), written so identical inputs give exactly zero
            c, s = math.cos(d_est.theta), math.sin(d_est.theta)
            dx, dy = d_gt.x - d_est.x, d_gt.y - d_est.y
            ex, ey = c * dx + s * dy, -s * dx + c * dy
            eth = normalize_angle(d_gt.theta - d_est.theta)
            out.append((i, L, math.hypot(ex, ey) / L, abs(eth) / L))
    return out


def kitti_rel_errors(estimated, gt, segment_lengths=None):
    """(mean translation error in %, mean rotation error in deg/m) over all segments."""
    segs = segment_errors(estimated, gt, segment_lengths)
    t = float(np.mean([s[2] for s in segs])) * 100.0
    r = math.degrees(float(np.mean([s[3] for s in segs])))
    return t, r


@dataclass
class ErrorReport:
    ate_rmse: float
    trans_err_percent: float
    rot_err_deg_per_m: float
    segment_lengths: list

    def to_tsv(self):
        lines = ["metric\tvalue",
                 f"ate_rmse_m\t{self.ate_rmse:.9g}",
                 f"trans_err_percent\t{self.trans_err_percent:.9g}",
                 f"rot_err_deg_per_m\t{self.rot_err_deg_per_m:.9g}",
                 "segment_lengths_m\t" + ",".join(f"{L:g}" for L in self.segment_lengths)]
        return "\n".join(lines) + "\n"

    def segment_series(self, estimated, gt):
        """Two-column ``length<TAB>trans_err_percent`` lines for plotting."""
        segs = segment_errors(estimated, gt, self.segment_lengths)
        rows = []
        for L in self.segment_lengths:
            vals = [s[2] for s in segs if s[1] == L]
            if vals:
                rows.append(f"{L:g}\t{100.0 * float(np.mean(vals)):.9g}")
        return "\n".join(rows) + "\n"


def evaluate(estimated, gt, align="rigid2d", segment_lengths=None):
    if segment_lengths is None:
        segment_lengths = default_segment_lengths(arc_lengths(_as_poses(gt))[-1])
    t, r = kitti_rel_errors(estimated, gt, segment_lengths)
    return ErrorReport(ate(estimated, gt, align), t, r, list(segment_lengths))


# ---------------------------------------------------------------- K sweep

@dataclass
class SweepReport:
    rows: list  # (dataset name, K, success) sorted by dataset then K
    minimal_k: object  # smallest K at which every dataset succeeds, or None
    minimal_k_per_dataset: dict = field(default_factory=dict)
    anomalies: list = field(default_factory=list)  # datasets whose success is not monotone in K

    @property
    def ks(self):
        return sorted({k for _, k, _ in self.rows})

    def success_rate(self, k):
        cells = [s for _, kk, s in self.rows if kk == k]
        return sum(cells) / len(cells) if cells else float("nan")

    def is_monotone(self):
        return not self.anomalies

    def to_tsv(self):
        lines = ["dataset\tK\tsuccess"]
        lines += [f"{name}\t{k}\t{int(s)}" for name, k, s in self.rows]
        lines.append(f"# minimal_k\t{self.minimal_k if self.minimal_k is not None else 'none'}")
        for name, k in self.minimal_k_per_dataset.items():
            lines.append(f"# minimal_k[{name}]\t{k if k is not None else 'none'}")
        for name in self.anomalies:
            lines.append(f"# non_monotone\t{name}")
        return "\n".join(lines) + "\n"

    def series(self):
        """``K<TAB>success_rate`` lines."""
        return "".join(f"{k}\t{self.success_rate(k):.6g}\n" for k in self.ks)


def is_success(events, pairs, tolerance=DEFAULT_TOLERANCE):
    """Some event lies within ``tolerance`` frames (both indices) of a ground-truth revisit pair."""
    for e in events:
        for i, j in pairs:
            if abs(e.current_index - j) <= tolerance and abs(e.matched_index - i) <= tolerance:
                return True
    return False


def ranked_features(dataset, threshold=20):
    """All described features of every keyframe, best first (computed once per dataset)."""
    out = []
    for kf in dataset.keyframes:
        if kf.features is not None:
            out.append(list(kf.features))
        else:
            out.append(extract_features(kf.image, kf.mask, None, threshold))
    return out


def _sweep_dataset(args):
    dataset, ks, config, min_matches_fn, tolerance, fullscan = args
    feats = ranked_features(dataset, config.fast_threshold)
    poses = [kf.pose for kf in dataset.keyframes]
    cells = []
    for k in ks:
        cfg = replace(config, k=k)
        if min_matches_fn is not None:
            cfg = replace(cfg, min_matches=int(min_matches_fn(k)))
        frames = (Keyframe(kf.index, pose, features=f) for kf, pose, f in zip(dataset.keyframes, poses, feats))
        rep = run_sequence(frames, cfg, baseline=fullscan)
        events = rep.fullscan_events if fullscan else rep.events
        cells.append((dataset.name, k, is_success(events, dataset.revisit_pairs, tolerance)))
    return cells


def success_sweep(corpus, k_range, config=None, min_matches_fn=None, tolerance=DEFAULT_TOLERANCE,
                  fullscan=False, jobs=1):
    """Run the detector for every (dataset, K) and tabulate loop-detection success.

    Features are extracted once per dataset and the top-K cut is applied per
    run. ``min_matches_fn`` optionally derives the acceptance count from K.
    With ``fullscan`` the exhaustive-search events are scored instead.
    """
    config = config or DetectorConfig()
    ks = sorted(set(int(k) for k in k_range))
    names = [d.name for d in corpus]
    if len(set(names)) != len(names):
        raise SpecError("dataset names in a sweep corpus must be unique")
    for d in corpus:
        if not d.revisit_pairs:
            raise SpecError(f"dataset {d.name} has no ground-truth revisit")
    tasks = [(d, ks, config, min_matches_fn, tolerance, fullscan) for d in corpus]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_dataset, tasks))
    else:
        results = [_sweep_dataset(t) for t in tasks]
    rows = sorted((cell for cells in results for cell in cells), key=lambda r: (r[0], r[1]))

    per_dataset, anomalies = {}, []
    for name in sorted(names):
        series = [s for n, _, s in rows if n == name]
        if any(a and not b for a, b in zip(series, series[1:])):
            anomalies.append(name)
        per_dataset[name] = next((k for k, s in zip(ks, series) if s), None)
    minimal = next((k for k in ks if all(s for _, kk, s in rows if kk == k)), None)
    return SweepReport(rows, minimal, per_dataset, anomalies)
