"""Hamming matching of retained features and the per-window loop decision."""

from dataclasses import dataclass, field

import numpy as np

from .features import DESCRIPTOR_BYTES, descriptor_matrix

DEFAULT_MAX_DISTANCE = 40
DEFAULT_MIN_MATCHES = 7


@dataclass(frozen=True)
class MatchPair:
    index_a: int
    index_b: int
    distance: int


@dataclass(frozen=True)
class FrameMatchResult:
    frame_index: int
    pairs: tuple
    accepted: bool


@dataclass(frozen=True)
class LoopCandidate:
    current_index: int
    matched_index: int
    pairs: tuple = field(default=())

    @property
    def num_pairs(self):
        return len(self.pairs)


def hamming(a, b):
    """Number of differing bits between two descriptors."""
    return (int.from_bytes(bytes(a), "little") ^ int.from_bytes(bytes(b), "little")).bit_count()


def _as_matrix(features):
    if isinstance(features, np.ndarray):
        return features.reshape(-1, DESCRIPTOR_BYTES)
    return descriptor_matrix(features)


def hamming_matrix(a, b):
    """Pairwise distances between two ``(n, 32)`` uint8 descriptor stacks."""
    a, b = _as_matrix(a), _as_matrix(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2, dtype=np.int64)


def match_frames(current, past, max_distance=DEFAULT_MAX_DISTANCE, min_matches=DEFAULT_MIN_MATCHES,
                 frame_index=-1):
    """Mutual nearest neighbours within ``max_distance`` bits.

    ``current`` and ``past`` are feature lists or descriptor stacks. Ties in
    the nearest-neighbour search go to the lower index on either side.
    """
    if max_distance > 256:
        raise ValueError("max_distance cannot exceed 256 bits")
    dist = hamming_matrix(current, past)
    pairs = []
    if dist.size:
        fwd = np.argmin(dist, axis=1)
        back = np.argmin(dist, axis=0)
        for i, j in enumerate(fwd):
            d = int(dist[i, j])
            if back[j] == i and d <= max_distance:
                pairs.append(MatchPair(i, int(j), d))
    return FrameMatchResult(frame_index, tuple(pairs), len(pairs) >= min_matches)


def detect_in_window(current, window, max_distance=DEFAULT_MAX_DISTANCE, min_matches=DEFAULT_MIN_MATCHES,
                     current_index=-1):
    """Best accepted frame in ``window`` (pairs of ``(frame_index, features)``), or None.

    Frames are visited in ascending index order; the most pairs wins and the
    lowest index breaks ties.
    """
    best = None
    for index, feats in sorted(window, key=lambda item: item[0]):
        res = match_frames(current, feats, max_distance, min_matches, frame_index=index)
        if res.accepted and (best is None or len(res.pairs) > len(best.pairs)):
            best = res
    if best is None:
        return None
    return LoopCandidate(current_index, best.frame_index, best.pairs)
