from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asars.batching import (
    count_pairs,
    make_batches,
    session_parallel_batches,
    truncate,
    user_parallel_batches,
)
from asars.dataprep import Session

from conftest import random_sessions


def S(user, items, t0=0):
    L = len(items)
    return Session(user, list(items), [t0 + k for k in range(L)], [1.0] * (L - 1), list(range(L - 1)))


def steps(batches):
    return [(sl.pairs(), sl.reset_mask[sl.active_mask].tolist()) for sl in batches]


def all_pairs(sessions):
    return Counter((a, b, t) for s in sessions for a, b, t in zip(s.items, s.items[1:], s.time_bins))


def emitted(batches):
    return Counter(p for sl in batches for p in sl.pairs())


def test_session_parallel_b1():
    a, b, c, d, e = range(5)
    sess = [S(0, [a, b, c], 0), S(0, [d, e], 100)]
    out = [(sl.input_ids[0], sl.target_ids[0], bool(sl.reset_mask[0])) for sl in session_parallel_batches(sess, 1)]
    assert out == [(a, b, True), (b, c, False), (d, e, True)]


def test_session_parallel_refill_layout():
    sess = [S(0, [1, 2, 3, 4], 0), S(1, [5, 6], 1), S(2, [7, 8, 9], 2)]
    sl = list(session_parallel_batches(sess, 2))
    lane1 = [(int(s.input_ids[1]), bool(s.reset_mask[1]), bool(s.active_mask[1])) for s in sl]
    assert lane1 == [(5, True, True), (7, True, True), (8, False, True)]
    lane0 = [(int(s.input_ids[0]), bool(s.reset_mask[0])) for s in sl]
    assert lane0 == [(1, True), (2, False), (3, False)]


def test_exhausted_lanes_inactive_fixed_width():
    sess = [S(0, [1, 2, 3, 4]), S(1, [5, 6], 1)]
    sl = list(session_parallel_batches(sess, 3))
    assert all(s.size == 3 for s in sl)
    assert [s.active_mask.tolist() for s in sl] == [[True, True, False], [True, False, False], [True, False, False]]


def test_user_parallel_b1_order():
    sess = [S(1, [5, 6], 50), S(0, [1, 2], 0), S(0, [3, 4], 10)]
    sl = list(user_parallel_batches(sess, 1))
    assert [int(s.input_ids[0]) for s in sl] == [1, 3, 5]
    assert [int(s.user_ids[0]) for s in sl] == [0, 0, 1]
    assert all(s.reset_mask[0] for s in sl)


def test_user_parallel_lane_continuity():
    sess = [S(0, [1, 2], 0), S(0, [3, 4], 10), S(1, [5, 6], 1), S(2, [7, 8], 2)]
    lanes = {}
    for s in user_parallel_batches(sess, 2):
        for b in np.nonzero(s.active_mask)[0]:
            lanes.setdefault(int(s.user_ids[b]), set()).add(int(b))
    assert all(len(v) == 1 for v in lanes.values())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), B=st.integers(1, 9), max_len=st.sampled_from([None, 3, 5]))
def test_coverage_both_modes(seed, B, max_len):
    rng = np.random.default_rng(seed)
    sess = random_sessions(rng, 25, 12, 5, max_len=9)
    for mode in ("session_parallel", "user_parallel"):
        got = emitted(make_batches(mode, sess, B, max_len))
        if max_len is None:
            assert got == all_pairs(sess)
        else:
            frags = [f for s in sess for f in truncate(s, max_len)]
            assert got == all_pairs(frags)
            cuts = sum(len(truncate(s, max_len)) - 1 for s in sess)
            dropped = sum(1 for s in sess for f in [s] if len(s) > max_len and len(s) % max_len == 1)
            assert sum(got.values()) == count_pairs(sess) - cuts - dropped


def test_targets_follow_inputs_and_resets():
    rng = np.random.default_rng(5)
    sess = random_sessions(rng, 40, 30, 6)
    lookup = {}
    for s in sess:
        for k in range(len(s) - 1):
            lookup.setdefault((s.items[k], s.items[k + 1]), True)
    prev_active = None
    for sl in session_parallel_batches(sess, 4):
        for b in np.nonzero(sl.active_mask)[0]:
            assert (sl.input_ids[b], sl.target_ids[b]) in lookup
        if prev_active is not None:
            # a lane that was idle can only come back with a fresh session
            assert not np.any(sl.active_mask & ~prev_active & ~sl.reset_mask)
        prev_active = sl.active_mask


def test_truncate_examples():
    s = S(0, [1, 2, 3, 4, 5])
    assert truncate(s, 200) == [s]
    parts = truncate(s, 3)
    assert [p.items for p in parts] == [[1, 2, 3], [4, 5]]
    assert [p.time_bins for p in parts] == [[0, 1], [3]]
    assert count_pairs(parts) == count_pairs([s]) - 1
    assert [p.items for p in truncate(S(0, [1, 2, 3, 4]), 3)] == [[1, 2, 3]]
    with pytest.raises(ValueError):
        truncate(s, 1)


def test_stream_is_deterministic():
    sess = random_sessions(np.random.default_rng(1), 30, 10, 4)
    a = [sl.input_ids.tobytes() + sl.reset_mask.tobytes() for sl in user_parallel_batches(sess, 3, 4)]
    b = [sl.input_ids.tobytes() + sl.reset_mask.tobytes() for sl in user_parallel_batches(sess, 3, 4)]
    assert a == b


def test_shuffle_keeps_coverage():
    sess = random_sessions(np.random.default_rng(2), 30, 10, 4)
    assert emitted(session_parallel_batches(sess, 4, shuffle_seed=3)) == all_pairs(sess)
