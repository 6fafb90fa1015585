import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopclose.detector import (
    KEYPOINT_RECORD_BYTES,
    POSE_RECORD_BYTES,
    DetectorConfig,
    Keyframe,
    LoopDetector,
    parse_report,
    run_sequence,
)
from loopclose.errors import EmptyFrame, EmptySequence, IndexOrder, MaskMismatch, ParseError
from loopclose.features import DESCRIPTOR_BYTES
from loopclose.geom import compute_search_window
from loopclose.matching import detect_in_window
from loopclose.synth import WorldSpec, generate


@pytest.fixture(scope="module")
def square7():
    return generate(WorldSpec(shape="square", num_poses=80, seed=7))


def first_revisit(ds):
    j = min(j for _, j in ds.revisit_pairs)
    return j, [i for i, jj in ds.revisit_pairs if jj == j]


def test_first_frames_never_emit(square7):
    det = LoopDetector()
    assert det.process_frame(square7.keyframes[0]) is None
    assert det.process_frame(square7.keyframes[1]) is None


def test_square_loop_found_near_true_revisit(square7):
    rep = run_sequence(square7.keyframes, baseline=True)
    j, partners = first_revisit(square7)
    first = rep.events[0]
    assert abs(first.current_index - j) <= 3
    assert min(abs(first.matched_index - i) for i in partners) <= 2
    # exhaustive search over all past frames agrees on the first detection
    assert rep.fullscan_events[0].current_index == first.current_index


def test_cadence_delays_to_next_check_frame(square7):
    full = run_sequence(square7.keyframes, baseline=True).fullscan_events[0]
    rep = run_sequence(square7.keyframes, DetectorConfig(cadence=4))
    first = rep.events[0]
    assert first.current_index == next(c for c in range(full.current_index, 80) if c % 4 == 0)
    assert all(e.current_index % 4 == 0 for e in rep.events)


def test_straight_line_has_no_loops():
    ds = generate(WorldSpec(shape="line", num_poses=70, scale=70.0, seed=2))
    rep = run_sequence(ds.keyframes, baseline=True)
    assert rep.events == [] and rep.fullscan_events == []


def test_square_window_prunes_more_than_half(square7):
    rep = run_sequence(square7.keyframes)
    assert rep.comparisons_fullscan > 0
    assert rep.comparisons_windowed / rep.comparisons_fullscan < 0.5
    assert rep.fullscan_events is None  # baseline counted, not executed, by default


def test_empty_stream():
    with pytest.raises(EmptySequence):
        run_sequence([])


def test_out_of_order_and_empty_frames(square7):
    det = LoopDetector()
    det.process_frame(square7.keyframes[0])
    with pytest.raises(IndexOrder):
        det.process_frame(square7.keyframes[2])
    with pytest.raises(EmptyFrame):
        det.process_frame(Keyframe(1, np.eye(4)))


def test_errors_carry_the_offending_index(square7):
    frames = list(square7.keyframes[:5]) + [Keyframe(5, np.eye(4))]
    with pytest.raises(EmptyFrame) as info:
        run_sequence(frames)
    assert info.value.frame_index == 5
    img = np.zeros((64, 64), np.uint8)
    with pytest.raises(MaskMismatch) as info:
        run_sequence([Keyframe(3, np.eye(4), image=img, mask=np.ones((10, 10), bool))])
    assert info.value.frame_index == 3


def test_stream_may_start_at_any_index(square7):
    shifted = [Keyframe(kf.index + 100, kf.pose, features=kf.features) for kf in square7.keyframes]
    a = run_sequence(square7.keyframes)
    b = run_sequence(shifted)
    assert [(e.current_index + 100, e.matched_index + 100) for e in a.events] == \
        [(e.current_index, e.matched_index) for e in b.events]


def test_memory_ceiling_and_no_images_retained():
    ds = generate(WorldSpec(shape="square", num_poses=40, laps=1, feature_mode="images"))
    cfg = DetectorConfig(k=9)
    det = LoopDetector(cfg)
    for kf in ds.keyframes:
        det.process_frame(kf)
    per_frame_cap = cfg.k * (DESCRIPTOR_BYTES + KEYPOINT_RECORD_BYTES) + POSE_RECORD_BYTES
    assert det.stored_bytes() <= len(ds.keyframes) * per_frame_cap
    assert all(len(f) <= cfg.k for f in det.features)
    for value in vars(det).values():
        items = value if isinstance(value, list) else [value]
        for item in items:
            assert not (isinstance(item, np.ndarray) and item.ndim == 2 and item.shape[1] > DESCRIPTOR_BYTES)


def test_no_mask_is_noted():
    ds = generate(WorldSpec(shape="square", num_poses=6, laps=1, feature_mode="images"))
    frames = [Keyframe(kf.index, kf.pose, image=kf.image) for kf in ds.keyframes]
    rep = run_sequence(frames)
    assert any("mask" in n for n in rep.notes)


def test_output_is_deterministic(square7):
    a = run_sequence(square7.keyframes, baseline=True)
    b = run_sequence(square7.keyframes, baseline=True)
    a.wall_time = b.wall_time = 0.0
    assert a.to_text() == b.to_text()


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["square", "circle", "figure-eight"]), st.integers(5, 20))
def test_windowed_loops_are_subset_of_fullscan(seed, shape, k):
    spec = WorldSpec(shape=shape, num_poses=72, scale=9.0, seed=seed, drift_rot=0.003, noise_trans=0.01)
    ds = generate(spec)
    rep = run_sequence(ds.keyframes, DetectorConfig(k=k), baseline=True)
    full = {e.current_index for e in rep.fullscan_events}
    assert {e.current_index for e in rep.events} <= full
    # and the windowed match is a legal full-scan candidate with at least as many pairs available
    by_frame = {e.current_index: e for e in rep.fullscan_events}
    for e in rep.events:
        assert by_frame[e.current_index].num_pairs >= e.num_pairs
        assert e.matched_index <= e.current_index - 30


def test_windowed_choice_matches_exhaustive_window_scan(square7):
    # rerun detect_in_window by hand on the recorded window of one frame
    det = LoopDetector()
    for kf in square7.keyframes[:46]:
        event = det.process_frame(kf)
    w = compute_search_window(det.points, 45, 30)
    manual = detect_in_window(det.features[45], [(i, det.features[i]) for i in w.indices()], current_index=45)
    assert (event.current_index, event.matched_index, event.num_pairs) == \
        (manual.current_index, manual.matched_index, manual.num_pairs)


# ---------------------------------------------------------------- config and report

@pytest.mark.parametrize("bad", [dict(k=0), dict(cadence=0), dict(min_loop_gap=1), dict(max_distance=300),
                                 dict(min_matches=0), dict(fast_threshold=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DetectorConfig(**bad)


def test_report_round_trip(square7):
    rep = run_sequence(square7.keyframes, baseline=True)
    text = rep.to_text()
    assert text.count("\nLOOP ") == len(rep.events)
    back = parse_report(text)
    assert [(e.current_index, e.matched_index) for e in back.events] == \
        [(e.current_index, e.matched_index) for e in rep.events]
    assert back.pair_counts == [e.num_pairs for e in rep.events]
    assert len(back.fullscan_events) == len(rep.fullscan_events)
    assert (back.comparisons_windowed, back.comparisons_fullscan) == \
        (rep.comparisons_windowed, rep.comparisons_fullscan)
    assert back.features_stored == rep.features_stored
    assert "# config k=15" in text


@pytest.mark.parametrize("text,line", [
    ("LOOP 40 0 7\nLOOP 41 x 7\n", 2),
    ("# c\nBOGUS 1\n", 2),
    ("LOOP 40 0\n", 1),
    ("COMPARISONS 1\n", 1),
    ("LOOP 10 20 7\n", 1),
    ("FEATURES_STORED -3\n", 1),
])
def test_report_parse_errors_have_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_report(text)
    assert info.value.line == line
