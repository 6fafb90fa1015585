"""Oriented FAST keypoints, rotated BRIEF descriptors and top-K retention.

Images are 2-D ``uint8`` numpy arrays indexed ``[y, x]``; masks are boolean
arrays of the same shape. Descriptors are 32-byte ``bytes`` objects (bit i of
the descriptor is bit ``i % 8`` of byte ``i // 8``).
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import MaskMismatch, PatchOutOfBounds
from .rng import Lcg64

DESCRIPTOR_BYTES = 32
PATCH_RADIUS = 15
BORDER = PATCH_RADIUS + 1
PATTERN_SEED = 0xB121F
MIN_SIDE = 32

# 16-pixel Bresenham circle of radius 3, in angular order, as (dx, dy)
RING = (
    (0, 3), (1, 3), (2, 2), (3, 1), (3, 0), (3, -1), (2, -2), (1, -3),
    (0, -3), (-1, -3), (-2, -2), (-3, -1), (-3, 0), (-3, 1), (-2, 2), (-1, 3),
)
ARC = 9


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    response: float
    orientation: float = 0.0


@dataclass(frozen=True)
class InformativeFeature:
    keypoint: Keypoint
    descriptor: bytes
    score: int

    def __post_init__(self):
        if len(self.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError(f"descriptor must be {DESCRIPTOR_BYTES} bytes")

    @classmethod
    def from_descriptor(cls, keypoint, descriptor):
        descriptor = bytes(descriptor)
        return cls(keypoint, descriptor, informativeness_score(descriptor))


def _check_image(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 image")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[1]}x{img.shape[0]}")
    return img


def _check_mask(img, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise MaskMismatch(f"mask {mask.shape} does not match image {img.shape}")
    return mask


def fast_score_map(img, threshold, border=BORDER):
    """Per-pixel FAST-9 response (0 where the segment test fails)."""
    img = _check_image(img)
    h, w = img.shape
    score = np.zeros((h, w), dtype=np.int64)
    if h <= 2 * border or w <= 2 * border:
        return score
    center = img[border:h - border, border:w - border].astype(np.int64)
    ring = np.stack([
        img[border + dy:h - border + dy, border + dx:w - border + dx].astype(np.int64)
        for dx, dy in RING
    ])
    absdiff = np.abs(ring - center)
    inner = np.zeros(center.shape, dtype=np.int64)
    for flags in (ring > center + threshold, ring < center - threshold):
        if not flags.any():
            continue
        for start in range(16):
            running = np.ones(center.shape, dtype=bool)
            acc = np.zeros(center.shape, dtype=np.int64)
            for length in range(16):
                k = (start + length) % 16
                running &= flags[k]
                acc += np.where(running, absdiff[k], 0)
                if length + 1 >= ARC:
                    np.maximum(inner, np.where(running, acc, 0), out=inner)
    score[border:h - border, border:w - border] = inner
    return score


def _non_max_suppress(score):
    h, w = score.shape
    padded = np.zeros((h + 2, w + 2), dtype=score.dtype)
    padded[1:-1, 1:-1] = score
    keep = score > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            n = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            if (dy, dx) < (0, 0):
                keep &= n < score  # earlier raster neighbour wins ties
            else:
                keep &= n <= score
    return keep


def fast_corners(img, mask=None, threshold=20):
    """FAST-9 corners with 3x3 non-maximum suppression, in raster order.

    Only pixels at least 16 px from the border are tested so the descriptor
    patch always fits. The mask filters survivors after suppression, so a
    masked run returns a subset of the unmasked one.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    img = _check_image(img)
    mask = _check_mask(img, mask)
    score = fast_score_map(img, threshold)
    keep = _non_max_suppress(score)
    if mask is not None:
        keep &= mask
    ys, xs = np.nonzero(keep)
    return [Keypoint(int(x), int(y), float(score[y, x])) for y, x in zip(ys, xs)]


def _disc_offsets(radius):
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r)
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside], dy[inside]


def _patch_fits(img, x, y, radius):
    h, w = img.shape
    return radius <= x < w - radius and radius <= y < h - radius


def orientation(img, kp, radius=PATCH_RADIUS):
    """Intensity-centroid angle atan2(m01, m10) over the disc of ``radius`` around ``kp``."""
    img = np.asarray(img)
    if not _patch_fits(img, kp.x, kp.y, radius):
        raise PatchOutOfBounds(f"patch of radius {radius} at ({kp.x}, {kp.y}) leaves the image")
    dx, dy = _disc_offsets(radius)
    vals = img[kp.y + dy, kp.x + dx].astype(np.float64)
    m10 = float(np.dot(dx, vals))
    m01 = float(np.dot(dy, vals))
    if abs(m10) < 1e-9 and abs(m01) < 1e-9:
        return 0.0
    theta = math.atan2(m01, m10)
    return math.pi if theta == -math.pi else theta


def make_pattern(seed=PATTERN_SEED, n_pairs=256, radius=PATCH_RADIUS):
    """Sampling pairs for BRIEF: isotropic Gaussian (sigma = patch/5), kept inside the disc.

    Keeping points inside the disc (not just the square) guarantees they stay
    inside the patch after any rotation.
    """
    rng = Lcg64(seed)
    sigma = (2 * radius + 1) / 5.0

    def draw():
        while True:
            x = round(rng.normal() * sigma)
            y = round(rng.normal() * sigma)
            if x * x + y * y <= radius * radius:
                return x, y

    pairs = []
    while len(pairs) < n_pairs:
        a, b = draw(), draw()
        if a != b:
            pairs.append(a + b)
    return np.array(pairs, dtype=np.int64)


PATTERN = make_pattern()
PATTERN.setflags(write=False)


def _rotated_samples(pattern, theta):
    c, s = math.cos(theta), math.sin(theta)
    ax = np.rint(c * pattern[:, 0] - s * pattern[:, 1]).astype(np.int64)
    ay = np.rint(s * pattern[:, 0] + c * pattern[:, 1]).astype(np.int64)
    bx = np.rint(c * pattern[:, 2] - s * pattern[:, 3]).astype(np.int64)
    by = np.rint(s * pattern[:, 2] + c * pattern[:, 3]).astype(np.int64)
    return ax, ay, bx, by


def brief_descriptor(img, kp, pattern=PATTERN):
    """256-bit descriptor: bit i set iff I(a_i) < I(b_i), pairs rotated by ``kp.orientation``."""
    img = np.asarray(img)
    if not _patch_fits(img, kp.x, kp.y, PATCH_RADIUS):
        raise PatchOutOfBounds(f"31x31 patch at ({kp.x}, {kp.y}) leaves the image")
    ax, ay, bx, by = _rotated_samples(pattern, kp.orientation)
    bits = img[kp.y + ay, kp.x + ax] < img[kp.y + by, kp.x + bx]
    return np.packbits(bits, bitorder="little").tobytes()


def informativeness_score(descriptor):
    """Number of set bits (0..256)."""
    return int.from_bytes(bytes(descriptor), "little").bit_count()


def select_top_k(features, k):
    """The ``k`` highest-scoring features; ties go to stronger response, then raster order."""
    if k < 0:
        raise ValueError("k must be >= 0")
    ranked = sorted(
        features,
        key=lambda f: (-f.score, -f.keypoint.response, f.keypoint.y, f.keypoint.x),
    )
    return ranked[:k]


def describe(img, keypoints):
    """Orientation + descriptor for each keypoint -> list of InformativeFeature."""
    img = _check_image(img)
    if not keypoints:
        return []
    xs = np.array([kp.x for kp in keypoints])
    ys = np.array([kp.y for kp in keypoints])
    for kp in keypoints:
        if not _patch_fits(img, kp.x, kp.y, PATCH_RADIUS):
            raise PatchOutOfBounds(f"31x31 patch at ({kp.x}, {kp.y}) leaves the image")

    # batched version of orientation(): same sums, one row per keypoint
    dx, dy = _disc_offsets(PATCH_RADIUS)
    vals = img[ys[:, None] + dy, xs[:, None] + dx].astype(np.float64)
    m10 = vals @ dx.astype(np.float64)
    m01 = vals @ dy.astype(np.float64)
    theta = np.arctan2(m01, m10)
    theta[(np.abs(m10) < 1e-9) & (np.abs(m01) < 1e-9)] = 0.0
    theta[theta == -np.pi] = np.pi

    # batched version of brief_descriptor()
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    p = PATTERN
    ax = np.rint(c * p[:, 0] - s * p[:, 1]).astype(np.int64)
    ay = np.rint(s * p[:, 0] + c * p[:, 1]).astype(np.int64)
    bx = np.rint(c * p[:, 2] - s * p[:, 3]).astype(np.int64)
    by = np.rint(s * p[:, 2] + c * p[:, 3]).astype(np.int64)
    bits = img[ys[:, None] + ay, xs[:, None] + ax] < img[ys[:, None] + by, xs[:, None] + bx]
    packed = np.packbits(bits, axis=1, bitorder="little")

    out = []
    for kp, th, row in zip(keypoints, theta, packed):
        out.append(InformativeFeature.from_descriptor(replace(kp, orientation=float(th)), row.tobytes()))
    return out


def extract_features(img, mask=None, k=15, threshold=20):
    """Full per-frame pipeline; ``k=None`` keeps every described corner (ranked)."""
    feats = describe(img, fast_corners(img, mask, threshold))
    return select_top_k(feats, len(feats) if k is None else k)


def descriptor_matrix(features):
    """Stack descriptors into an ``(n, 32)`` uint8 array."""
    if not features:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    raw = b"".join(f.descriptor for f in features)
    return np.frombuffer(raw, dtype=np.uint8).reshape(len(features), DESCRIPTOR_BYTES)
