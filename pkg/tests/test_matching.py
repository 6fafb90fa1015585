import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopclose.features import InformativeFeature, Keypoint
from loopclose.matching import detect_in_window, hamming, hamming_matrix, match_frames
from oracles import brute_hamming, brute_mutual_nn


def rand_desc(rng):
    return rng.integers(0, 256, 32, dtype=np.uint8).tobytes()


def feats_from(descs):
    return [InformativeFeature.from_descriptor(Keypoint(20 + i, 20, 1.0), d) for i, d in enumerate(descs)]


def random_frame(rng, n=15):
    return feats_from([rand_desc(rng) for _ in range(n)])


def test_hamming_examples():
    rng = np.random.default_rng(0)
    d = rand_desc(rng)
    assert hamming(d, d) == 0
    assert hamming(d, bytes(255 - b for b in d)) == 256
    a = b"\xff" + bytes(31)
    b = b"\x0f" + bytes(31)
    assert hamming(a, b) == brute_hamming(a, b) == 4


def test_hamming_matrix_agrees_with_scalar():
    rng = np.random.default_rng(1)
    A = [rand_desc(rng) for _ in range(6)]
    B = [rand_desc(rng) for _ in range(4)]
    M = hamming_matrix(feats_from(A), feats_from(B))
    assert M.tolist() == [[hamming(a, b) for b in B] for a in A]
    assert hamming_matrix(feats_from(A), []).shape == (6, 0)


def test_self_match():
    f = random_frame(np.random.default_rng(2))
    res = match_frames(f, f, max_distance=0, min_matches=15)
    assert res.accepted and len(res.pairs) == 15
    assert all(p.index_a == p.index_b and p.distance == 0 for p in res.pairs)


def test_empty_current():
    res = match_frames([], random_frame(np.random.default_rng(3)))
    assert res.pairs == () and not res.accepted


def test_planted_seven_recovered():
    rng = np.random.default_rng(4)
    shared = [rand_desc(rng) for _ in range(7)]
    cur = shared + [rand_desc(rng) for _ in range(8)]
    past_descs = [rand_desc(rng) for _ in range(8)] + shared
    order = rng.permutation(15)
    past = [past_descs[k] for k in order]
    res = match_frames(feats_from(cur), feats_from(past), max_distance=40, min_matches=7)
    assert res.accepted
    expected = {(i, int(np.where(order == 8 + i)[0][0])) for i in range(7)}
    assert {(p.index_a, p.index_b) for p in res.pairs} == expected
    assert {(p.index_a, p.index_b, p.distance) for p in res.pairs} == brute_mutual_nn(cur, past, 40)


def test_max_distance_limit():
    with pytest.raises(ValueError):
        match_frames([], [], max_distance=257)


def mutual_nn_agreement(rng, n_pairs):
    bad = 0
    for _ in range(n_pairs):
        n, m = rng.integers(0, 20, 2)
        base = [rand_desc(rng) for _ in range(max(n, m))]
        # perturb shared descriptors by a few bits so distances are small but not all zero
        cur = []
        for d in base[:n]:
            arr = np.frombuffer(d, np.uint8).copy()
            arr[rng.integers(32)] ^= np.uint8(1 << int(rng.integers(8)))
            cur.append(arr.tobytes() if rng.random() < 0.6 else rand_desc(rng))
        past = [d if rng.random() < 0.7 else rand_desc(rng) for d in base[:m]]
        max_d = int(rng.integers(0, 140))
        res = match_frames(feats_from(cur), feats_from(past), max_distance=max_d)
        got = {(p.index_a, p.index_b, p.distance) for p in res.pairs}
        if got != brute_mutual_nn(cur, past, max_d):
            bad += 1
    return bad


def test_match_frames_equals_oracle_sampled():
    assert mutual_nn_agreement(np.random.default_rng(5), 100) == 0


def false_accepts(rng, n_pairs):
    return sum(match_frames(random_frame(rng), random_frame(rng)).accepted for _ in range(n_pairs))


def test_random_frames_never_accepted():
    assert false_accepts(np.random.default_rng(6), 200) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_symmetry_and_injectivity(seed):
    rng = np.random.default_rng(seed)
    shared = [rand_desc(rng) for _ in range(int(rng.integers(0, 10)))]
    a = feats_from(shared + [rand_desc(rng) for _ in range(5)])
    b = feats_from([rand_desc(rng) for _ in range(3)] + shared)
    ab = match_frames(a, b, max_distance=60)
    ba = match_frames(b, a, max_distance=60)
    assert len(ab.pairs) == len(ba.pairs)
    assert len({p.index_a for p in ab.pairs}) == len(ab.pairs)
    assert len({p.index_b for p in ab.pairs}) == len(ab.pairs)


# ---------------------------------------------------------------- window

def test_window_without_shared_descriptors():
    rng = np.random.default_rng(7)
    cur = random_frame(rng)
    window = [(i, random_frame(rng)) for i in range(5)]
    for _, f in window:
        assert len(brute_mutual_nn([x.descriptor for x in cur], [x.descriptor for x in f], 40)) < 7
    assert detect_in_window(cur, window) is None


def test_window_copy_of_current_wins():
    rng = np.random.default_rng(8)
    cur = random_frame(rng)
    window = [(0, random_frame(rng)), (1, list(cur)), (2, random_frame(rng))]
    cand = detect_in_window(cur, window, current_index=40)
    assert cand.matched_index == 1 and cand.current_index == 40
    assert len(cand.pairs) == len(cur)


def test_window_prefers_more_pairs():
    rng = np.random.default_rng(9)
    cur_descs = [rand_desc(rng) for _ in range(15)]
    f8 = cur_descs[:8] + [rand_desc(rng) for _ in range(7)]
    f12 = cur_descs[3:15] + [rand_desc(rng) for _ in range(3)]
    window = [(4, feats_from(f8)), (9, feats_from(f12)), (2, random_frame(rng))]
    cand = detect_in_window(feats_from(cur_descs), window)
    assert cand.matched_index == 9 and cand.num_pairs == 12


def test_window_tie_goes_to_lower_index():
    rng = np.random.default_rng(10)
    cur = random_frame(rng)
    window = [(7, list(cur)), (3, list(cur))]
    assert detect_in_window(cur, window).matched_index == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_window_result_invariant_to_feature_order(seed):
    rng = np.random.default_rng(seed)
    cur_d = [rand_desc(rng) for _ in range(15)]
    window = []
    for idx in range(4):
        k = int(rng.integers(0, 15))
        window.append((idx, cur_d[:k] + [rand_desc(rng) for _ in range(15 - k)]))
    base = detect_in_window(feats_from(cur_d), [(i, feats_from(d)) for i, d in window])
    shuffled = [(i, feats_from([d[j] for j in rng.permutation(len(d))])) for i, d in window]
    perm_cur = feats_from([cur_d[j] for j in rng.permutation(15)])
    other = detect_in_window(perm_cur, shuffled)
    if base is None:
        assert other is None
    else:
        assert (other.matched_index, other.num_pairs) == (base.matched_index, base.num_pairs)
