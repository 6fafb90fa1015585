"""Synthetic worlds with ground truth: loop trajectories, drifting odometry, re-observable features.

Two fidelity tiers are available. In ``descriptors`` mode each landmark
carries a fixed random 256-bit signature and a keyframe simply lists the
signatures of landmarks within sensing range. In ``images`` mode a global
texture raster of high-contrast blobs (one per landmark) is cropped around
the true position, so revisiting a place reproduces its pixels and hence its
FAST/BRIEF features.

All randomness comes from the portable LCG in ``rng``; a fixed spec yields a
byte-identical dataset everywhere.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .detector import Keyframe
from .errors import SpecError
from .features import InformativeFeature, Keypoint, informativeness_score
from .posegraph import PoseSE2, between, compose, to_matrix
from .rng import Lcg64

SHAPES = ("square", "circle", "figure-eight", "line")
FEATURE_MODES = ("images", "descriptors")

BACKGROUND = 128
GRAIN = 6  # background noise amplitude, grey levels
PLANT_SCORE_MIN = 160  # planted descriptors score at least this
FILLER_SCORE_MAX = 150  # filler descriptors score at most this


@dataclass(frozen=True)
class WorldSpec:
    shape: str = "square"
    num_poses: int = 80
    scale: float = 10.0
    drift_rot: float = 0.0  # radians added to every odometry step
    drift_trans: float = 0.0  # meters added to every forward odometry step
    seed: int = 0
    feature_mode: str = "descriptors"
    landmarks_per_cell: int = 2
    laps: int = 2
    noise_rot: float = 0.0  # std-dev of zero-mean step noise
    noise_trans: float = 0.0
    cell_size: float = 1.0
    sensing_radius: float = 3.0
    revisit_radius: float = None  # default 1.5 x pose spacing
    revisit_gap: int = 30
    image_size: int = 128
    resolution: float = 0.05  # meters per pixel

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}; expected one of {', '.join(SHAPES)}")
        if self.feature_mode not in FEATURE_MODES:
            raise SpecError(f"unknown feature mode {self.feature_mode!r}")
        if int(self.num_poses) != self.num_poses or self.num_poses < 4:
            raise SpecError("num_poses must be an integer >= 4")
        checks = {
            "scale": self.scale > 0,
            "laps": int(self.laps) == self.laps and self.laps >= 1,
            "landmarks_per_cell": self.landmarks_per_cell >= 0,
            "noise_rot": self.noise_rot >= 0,
            "noise_trans": self.noise_trans >= 0,
            "cell_size": self.cell_size > 0,
            "sensing_radius": self.sensing_radius > 0,
            "revisit_gap": self.revisit_gap >= 1,
            "image_size": self.image_size >= 64,
            "resolution": self.resolution > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise SpecError(f"invalid {name}: {getattr(self, name)!r}")
        for name in ("scale", "drift_rot", "drift_trans", "noise_rot", "noise_trans"):
            if not math.isfinite(getattr(self, name)):
                raise SpecError(f"{name} must be finite")
        if self.revisit_radius is not None and not self.revisit_radius > 0:
            raise SpecError("revisit_radius must be positive")
        if not 0 <= self.seed < 1 << 64:
            raise SpecError("seed must fit in 64 unsigned bits")

    @property
    def path_length(self):
        return _perimeter(self.shape, self.scale) * (1 if self.shape == "line" else self.laps)

    @property
    def spacing(self):
        return self.path_length / self.num_poses

    @property
    def effective_revisit_radius(self):
        return 1.5 * self.spacing if self.revisit_radius is None else self.revisit_radius

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown world spec keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class SynthDataset:
    spec: WorldSpec
    gt_poses: list
    odom_poses: list
    keyframes: list
    revisit_pairs: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.gt_poses)


# ---------------------------------------------------------------- trajectories

def _perimeter(shape, scale):
    if shape == "square":
        return 4.0 * scale
    if shape == "circle":
        return 2.0 * math.pi * scale
    if shape == "figure-eight":
        return 2.0 * math.pi * scale  # two circles of radius scale/2
    return float(scale)


def _pose_at(shape, scale, s):
    """Pose at arc length ``s`` along one lap (s may exceed one lap; it wraps)."""
    if shape == "line":
        return PoseSE2(s, 0.0, 0.0)
    s = math.fmod(s, _perimeter(shape, scale))
    if shape == "square":
        side = min(int(s // scale), 3)
        u = s - side * scale
        corners = ((0.0, 0.0), (scale, 0.0), (scale, scale), (0.0, scale))
        heading = side * math.pi / 2
        cx, cy = corners[side]
        return PoseSE2(cx + u * math.cos(heading), cy + u * math.sin(heading), heading)
    if shape == "circle":
        a = s / scale  # counter-clockwise about (0, scale), starting at the origin heading +x
        return PoseSE2(scale * math.sin(a), scale - scale * math.cos(a), a)
    # figure-eight: counter-clockwise round the upper circle, then clockwise round the lower one
    r = scale / 2.0
    half = 2.0 * math.pi * r
    if s < half:
        a = s / r
        return PoseSE2(r * math.sin(a), r - r * math.cos(a), a)
    a = (s - half) / r
    return PoseSE2(r * math.sin(a), -r + r * math.cos(a), -a)


def ground_truth(spec):
    step = spec.spacing
    return [_pose_at(spec.shape, spec.scale, k * step) for k in range(spec.num_poses)]


def integrate_odometry(gt, drift_rot=0.0, drift_trans=0.0, noise_rot=0.0, noise_trans=0.0, rng=None):
    """Chain true relative steps corrupted by a constant bias and Gaussian noise."""
    if drift_rot == drift_trans == noise_rot == noise_trans == 0.0:
        return list(gt)
    out = [gt[0]]
    for a, b in zip(gt, gt[1:]):
        rel = between(a, b)
        nx = ny = nt = 0.0
        if rng is not None and (noise_rot or noise_trans):
            nx, ny, nt = noise_trans * rng.normal(), noise_trans * rng.normal(), noise_rot * rng.normal()
        step = PoseSE2(rel.x + drift_trans + nx, rel.y + ny, rel.theta + drift_rot + nt)
        out.append(compose(out[-1], step))
    return out


def revisit_pairs(gt, radius, gap):
    """All (i, j), i < j, with j - i >= gap and true positions within ``radius``."""
    xy = np.array([(p.x, p.y) for p in gt])
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    idx = np.arange(len(gt))
    ok = (idx[None, :] - idx[:, None] >= gap) & (d <= radius)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(ok))]


# ---------------------------------------------------------------- landmarks

def _landmarks(spec, rng, margin):
    gt = ground_truth(spec)
    xs = [p.x for p in gt]
    ys = [p.y for p in gt]
    x0, x1 = min(xs) - margin, max(xs) + margin
    y0, y1 = min(ys) - margin, max(ys) + margin
    nx = int(math.ceil((x1 - x0) / spec.cell_size))
    ny = int(math.ceil((y1 - y0) / spec.cell_size))
    pts = []
    for gy in range(ny):
        for gx in range(nx):
            for _ in range(spec.landmarks_per_cell):
                pts.append((x0 + (gx + rng.uniform()) * spec.cell_size, y0 + (gy + rng.uniform()) * spec.cell_size))
    return np.array(pts, dtype=float).reshape(-1, 2), (x0, y0, x0 + nx * spec.cell_size, y0 + ny * spec.cell_size)


def _descriptor_frames(spec, gt, rng):
    lm, _ = _landmarks(spec, rng, spec.sensing_radius + spec.cell_size)
    sigs = [rng.randbytes(32) for _ in range(len(lm))]
    scores = [informativeness_score(s) for s in sigs]
    half = spec.image_size / 2.0
    reach = half - 16.0
    frames = []
    for p in gt:
        d = np.hypot(lm[:, 0] - p.x, lm[:, 1] - p.y)
        feats = []
        for i in np.nonzero(d <= spec.sensing_radius)[0]:
            u = half + (lm[i, 0] - p.x) / spec.sensing_radius * reach
            v = half - (lm[i, 1] - p.y) / spec.sensing_radius * reach
            feats.append(InformativeFeature(Keypoint(int(round(u)), int(round(v)), 1.0), sigs[i], scores[i]))
        frames.append(feats)
    return frames


def render_texture(spec, rng):
    """Global world raster: grainy gray with one random two-tone rectangle per landmark.

    Returns ``(raster, mapped, (x0, y1))``. ``mapped`` marks landmark pixels
    and ``(x0, y1)`` is the world position of pixel (0, 0); columns grow with
    x and rows grow with -y.
    """
    view = spec.image_size * spec.resolution
    lm, (x0, y0, x1, y1) = _landmarks(spec, rng, view / 2.0 + 1.0)
    res = spec.resolution
    w = int(math.ceil((x1 - x0) / res))
    h = int(math.ceil((y1 - y0) / res))
    # low-amplitude grain (below any sensible FAST threshold) keeps flat areas from all looking alike
    grain = np.frombuffer(rng.randbytes(h * w), dtype=np.uint8).reshape(h, w) % (2 * GRAIN + 1)
    raster = (BACKGROUND - GRAIN + grain).astype(np.uint8)
    mapped = np.zeros((h, w), dtype=bool)
    for lx, ly in lm:
        bw, bh = 3 + rng.randint(6), 3 + rng.randint(6)
        dark = rng.uniform() < 0.5
        level = 10 + rng.randint(60) if dark else 190 + rng.randint(60)
        inner = 255 - level
        col = int((lx - x0) / res)
        row = int((y1 - ly) / res)
        raster[max(row, 0):row + bh, max(col, 0):col + bw] = level
        mapped[max(row, 0):row + bh, max(col, 0):col + bw] = True
        # a smaller offset patch in the opposite tone breaks the blob's symmetry
        if bw > 4 and bh > 4:
            raster[row + 1:row + bh // 2 + 1, col + 1:col + bw // 2 + 1] = inner
    return raster, mapped, (x0, y1)


def crop_view(raster, mapped, origin, pose, spec):
    """Axis-aligned ``image_size`` crop centred on the pose's position, plus its mapped-pixel mask."""
    x0, y1 = origin
    n = spec.image_size
    col = int(round((pose.x - x0) / spec.resolution)) - n // 2
    row = int(round((y1 - pose.y) / spec.resolution)) - n // 2
    if row < 0 or col < 0 or row + n > raster.shape[0] or col + n > raster.shape[1]:
        raise SpecError("view leaves the rendered world")
    img = raster[row:row + n, col:col + n].copy()
    mask = ndimage.binary_dilation(mapped[row:row + n, col:col + n], iterations=3)
    return img, mask


# ---------------------------------------------------------------- datasets

def generate(spec):
    """Build the dataset described by ``spec`` (a WorldSpec)."""
    if not isinstance(spec, WorldSpec):
        raise SpecError("generate expects a WorldSpec")
    root = Lcg64(spec.seed)
    world_rng = root.fork(1)
    noise_rng = root.fork(2)
    gt = ground_truth(spec)
    odom = integrate_odometry(gt, spec.drift_rot, spec.drift_trans, spec.noise_rot, spec.noise_trans, noise_rng)
    keyframes = []
    if spec.feature_mode == "descriptors":
        for k, (pose, feats) in enumerate(zip(odom, _descriptor_frames(spec, gt, world_rng))):
            keyframes.append(Keyframe(k, to_matrix(pose), features=feats))
    else:
        raster, mapped, origin = render_texture(spec, world_rng)
        for k, (true_pose, pose) in enumerate(zip(gt, odom)):
            img, mask = crop_view(raster, mapped, origin, true_pose, spec)
            keyframes.append(Keyframe(k, to_matrix(pose), image=img, mask=mask))
    pairs = [] if spec.shape == "line" else revisit_pairs(gt, spec.effective_revisit_radius, spec.revisit_gap)
    return SynthDataset(spec, gt, odom, keyframes, pairs, name=f"{spec.shape}-s{spec.seed}")


def _descriptor_with(rng, low=None, high=None):
    """Random descriptor whose popcount lies in [low, high]; high-tier draws OR two words."""
    while True:
        if low is not None:
            raw = bytes(a | b for a, b in zip(rng.randbytes(32), rng.randbytes(32)))
        else:
            raw = rng.randbytes(32)
        score = informativeness_score(raw)
        if (low is None or score >= low) and (high is None or score <= high):
            return raw, score


def plant_matches(dataset, overlap):
    """Copy of ``dataset`` whose descriptors are re-drawn so every revisit shares exactly ``overlap``.

    Every frame gets ``overlap`` high-scoring planted descriptors and fills the
    rest of its original feature count with lower-scoring random ones, so the
    planted set is always what top-K retention keeps first. Each revisiting
    frame j then takes the planted set (keypoints included) of its nearest
    earlier partner i. Frames keep their original feature counts.
    """
    frames = [kf.features for kf in dataset.keyframes]
    if any(f is None for f in frames):
        raise SpecError("plant_matches needs descriptor-mode keyframes")
    per_frame = min(len(f) for f in frames)
    if overlap < 0 or overlap > per_frame:
        raise SpecError(f"overlap {overlap} exceeds the {per_frame} features available per frame")

    rng = Lcg64(dataset.spec.seed).fork(3 + overlap)
    new = []
    for feats in frames:
        out = []
        for n, f in enumerate(feats):
            if n < overlap:
                raw, score = _descriptor_with(rng, low=PLANT_SCORE_MIN)
            else:
                raw, score = _descriptor_with(rng, high=FILLER_SCORE_MAX)
            out.append(InformativeFeature(f.keypoint, raw, score))
        new.append(out)

    xy = np.array([(p.x, p.y) for p in dataset.gt_poses])
    partners = {}
    for i, j in dataset.revisit_pairs:
        d = math.hypot(*(xy[i] - xy[j]))
        if j not in partners or d < partners[j][0]:
            partners[j] = (d, i)
    for j in sorted(partners):
        i = partners[j][1]
        new[j] = new[i][:overlap] + new[j][overlap:]

    keyframes = [replace(kf, features=f) for kf, f in zip(dataset.keyframes, new)]
    return replace(dataset, keyframes=keyframes)


STANDARD_CORPUS = (
    dict(shape="square", scale=10.0, num_poses=80, seed=1),
    dict(shape="circle", scale=6.0, num_poses=76, seed=2, drift_rot=0.001),
    dict(shape="figure-eight", scale=10.0, num_poses=126, seed=3),
    dict(shape="square", scale=8.0, num_poses=64, seed=4, drift_trans=0.005),
    dict(shape="circle", scale=8.0, num_poses=100, seed=5, drift_rot=-0.001),
)


def standard_corpus_specs(feature_mode="images"):
    return [WorldSpec(feature_mode=feature_mode, **kw) for kw in STANDARD_CORPUS]


def standard_corpus(feature_mode="images"):
    """The five reference worlds (seeds 1-5) used for the K sweep."""
    return [generate(s) for s in standard_corpus_specs(feature_mode)]
