"""Frame-by-frame loop detection over a keyframe stream.

Each incoming keyframe keeps only its K most informative features and its
projected position. Every ``cadence``-th frame the geometric search window
is built from the projected trajectory and the current features are matched
against the frames inside it.
"""

import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import geom
from .errors import EmptyFrame, EmptySequence, IndexOrder, LoopCloseError, ParseError
from .features import DESCRIPTOR_BYTES, descriptor_matrix, extract_features, select_top_k
from .matching import LoopCandidate, detect_in_window

KEYPOINT_RECORD_BYTES = 32  # x, y, response, orientation as 8-byte numbers
POSE_RECORD_BYTES = 16  # projected x, y


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 15
    cadence: int = 1
    fast_threshold: int = 20
    max_distance: int = 40
    min_matches: int = 7
    min_loop_gap: int = 30

    def __post_init__(self):
        if not 1 <= self.k <= 256:
            raise ValueError(f"k must be in 1..256, got {self.k}")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.min_loop_gap < 2:
            raise ValueError("min_loop_gap must be >= 2")
        if not 0 <= self.max_distance <= 256:
            raise ValueError("max_distance must be in 0..256")
        if self.min_matches < 1:
            raise ValueError("min_matches must be >= 1")
        if self.fast_threshold < 1:
            raise ValueError("fast_threshold must be >= 1")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Keyframe:
    index: int
    pose: np.ndarray  # 4x4 (or 3x4) rigid transform, camera in world
    image: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    features: Optional[list] = None


@dataclass
class DetectionReport:
    events: list = field(default_factory=list)
    comparisons_windowed: int = 0
    comparisons_fullscan: int = 0
    features_stored: int = 0
    per_frame: list = field(default_factory=list)  # (index, windowed, fullscan) per check frame
    fullscan_events: Optional[list] = None
    wall_time: float = 0.0
    config: Optional[DetectorConfig] = None
    notes: list = field(default_factory=list)

    @property
    def pruning_ratio(self):
        if self.comparisons_fullscan == 0:
            return float("nan")
        return self.comparisons_windowed / self.comparisons_fullscan

    @property
    def recall_vs_fullscan(self):
        """Share of full-scan loop frames that the windowed detector also flagged."""
        if not self.fullscan_events:
            return float("nan")
        found = {e.current_index for e in self.events}
        return sum(e.current_index in found for e in self.fullscan_events) / len(self.fullscan_events)

    def to_text(self):
        lines = ["# loopclose detection report"]
        if self.config is not None:
            lines.append("# config " + " ".join(f"{k}={v}" for k, v in self.config.as_dict().items()))
        lines += [f"# note {n}" for n in self.notes]
        lines.append(f"# wall_time {self.wall_time:.6f}")
        lines += [f"LOOP {e.current_index} {e.matched_index} {e.num_pairs}" for e in self.events]
        if self.fullscan_events is not None:
            lines += [f"FULLSCAN_LOOP {e.current_index} {e.matched_index} {e.num_pairs}"
                      for e in self.fullscan_events]
        lines.append(f"COMPARISONS {self.comparisons_windowed} {self.comparisons_fullscan}")
        lines.append(f"FEATURES_STORED {self.features_stored}")
        return "\n".join(lines) + "\n"


def parse_report(text):
    """Inverse of ``DetectionReport.to_text`` for the record lines (comments are skipped).

    Loop events come back with empty pair lists but the original pair count
    in ``LoopCandidate.pairs`` length is not recoverable, so it is kept in
    ``report.pair_counts`` keyed by event order.
    """
    report = DetectionReport()
    report.pair_counts = []
    report.fullscan_pair_counts = []
    seen_fullscan = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag, args = parts[0], parts[1:]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ParseError(f"non-integer field in {tag!r} record", lineno) from None
        if any(n < 0 for n in nums):
            raise ParseError("negative value", lineno)
        if tag in ("LOOP", "FULLSCAN_LOOP"):
            if len(nums) != 3:
                raise ParseError(f"{tag} needs 3 fields, got {len(nums)}", lineno)
            cur, matched, npairs = nums
            if matched >= cur:
                raise ParseError("matched index must precede current index", lineno)
            event = LoopCandidate(cur, matched, ())
            if tag == "LOOP":
                report.events.append(event)
                report.pair_counts.append(npairs)
            else:
                if report.fullscan_events is None:
                    report.fullscan_events = []
                report.fullscan_events.append(event)
                report.fullscan_pair_counts.append(npairs)
                seen_fullscan = True
        elif tag == "COMPARISONS":
            if len(nums) != 2:
                raise ParseError("COMPARISONS needs 2 fields", lineno)
            report.comparisons_windowed, report.comparisons_fullscan = nums
        elif tag == "FEATURES_STORED":
            if len(nums) != 1:
                raise ParseError("FEATURES_STORED needs 1 field", lineno)
            report.features_stored = nums[0]
        else:
            raise ParseError(f"unknown record {tag!r}", lineno)
    if seen_fullscan and report.fullscan_events is None:
        report.fullscan_events = []
    return report


class LoopDetector:
    """Stateful detector; submit frames in index order with ``process_frame``.

    With ``baseline`` set, every check frame is also matched against the
    whole eligible history so windowed results can be compared with an
    exhaustive search. Comparison counts for both are always recorded.
    """

    def __init__(self, config=None, baseline=False):
        self.config = config or DetectorConfig()
        self.baseline = baseline
        self.base_index = None
        self.points = []
        self.features = []
        self._descs = []
        self.events = []
        self.fullscan_events = [] if baseline else None
        self.comparisons_windowed = 0
        self.comparisons_fullscan = 0
        self.per_frame = []
        self.notes = []

    @property
    def last_index(self):
        return None if self.base_index is None else self.base_index + len(self.points) - 1

    @property
    def features_stored(self):
        return sum(len(f) for f in self.features)

    def stored_bytes(self):
        per_feature = DESCRIPTOR_BYTES + KEYPOINT_RECORD_BYTES
        return self.features_stored * per_feature + len(self.points) * POSE_RECORD_BYTES

    def _retained_features(self, frame):
        cfg = self.config
        if frame.features is not None:
            return select_top_k(frame.features, cfg.k)
        if frame.image is not None:
            if frame.mask is None and "no mapped-pixel mask: full-image detection" not in self.notes:
                self.notes.append("no mapped-pixel mask: full-image detection")
            return extract_features(frame.image, frame.mask, cfg.k, cfg.fast_threshold)
        raise EmptyFrame(f"frame {frame.index} has neither image nor features")

    def process_frame(self, frame):
        """Ingest one keyframe; returns a LoopCandidate when a loop is accepted, else None."""
        if self.base_index is not None and frame.index != self.last_index + 1:
            raise IndexOrder(f"expected frame {self.last_index + 1}, got {frame.index}")
        feats = self._retained_features(frame)
        point = geom.project_pose(frame.pose)
        if self.base_index is None:
            self.base_index = frame.index
        self.points.append(point)
        self.features.append(feats)
        self._descs.append(descriptor_matrix(feats))

        cfg = self.config
        c = len(self.points) - 1
        if c < cfg.min_loop_gap + 2 or c % cfg.cadence != 0:
            return None
        window = geom.compute_search_window(self.points, c, cfg.min_loop_gap)
        if window is None:
            return None
        last = c - cfg.min_loop_gap
        self.comparisons_windowed += len(window)
        self.comparisons_fullscan += last + 1
        self.per_frame.append((frame.index, len(window), last + 1))

        current = self._descs[c]
        found = detect_in_window(current, [(i, self._descs[i]) for i in window.indices()],
                                 cfg.max_distance, cfg.min_matches, current_index=c)
        if self.baseline:
            full = detect_in_window(current, [(i, self._descs[i]) for i in range(last + 1)],
                                    cfg.max_distance, cfg.min_matches, current_index=c)
            if full is not None:
                self.fullscan_events.append(self._globalize(full))
        if found is None:
            return None
        event = self._globalize(found)
        self.events.append(event)
        return event

    def _globalize(self, cand):
        return LoopCandidate(cand.current_index + self.base_index, cand.matched_index + self.base_index,
                             cand.pairs)

    def report(self, wall_time=0.0):
        return DetectionReport(
            events=list(self.events),
            comparisons_windowed=self.comparisons_windowed,
            comparisons_fullscan=self.comparisons_fullscan,
            features_stored=self.features_stored,
            per_frame=list(self.per_frame),
            fullscan_events=None if self.fullscan_events is None else list(self.fullscan_events),
            wall_time=wall_time,
            config=self.config,
            notes=list(self.notes),
        )


def run_sequence(frames, config=None, baseline=False):
    """Run the detector over an iterable of keyframes and summarise the run."""
    det = LoopDetector(config, baseline=baseline)
    t0 = time.perf_counter()
    n = 0
    for frame in frames:
        try:
            det.process_frame(frame)
        except LoopCloseError as exc:
            exc.frame_index = frame.index
            raise
        n += 1
    if n == 0:
        raise EmptySequence("no keyframes supplied")
    return det.report(wall_time=time.perf_counter() - t0)
