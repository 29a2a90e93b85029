import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asars import dataprep as dp
from asars.dataprep import Event, Session


def ev(u, i, t, s=None):
    return Event(str(u), str(i), t, s)


def test_event_negative_timestamp():
    with pytest.raises(ValueError):
        Event("u", "i", -1)


def test_sessionize_examples():
    out = dp.sessionize([ev(1, "a", 0), ev(1, "b", 1800), ev(1, "c", 7200)], 3600)
    assert [s.items for s in out] == [["a", "b"], ["c"]]
    assert out[0].dwell == [1800.0]
    out = dp.sessionize([ev(1, "a", 0), ev(1, "b", 10), ev(1, "c", 20)])
    assert len(out) == 1 and out[0].dwell == [10.0, 10.0]
    assert dp.sessionize([]) == []


def test_sessionize_gap_boundary_and_users():
    # a gap equal to the threshold starts a new session
    out = dp.sessionize([ev(1, "a", 0), ev(1, "b", 3600), ev(2, "c", 3601)], 3600)
    assert [(s.user, s.items) for s in out] == [("1", ["a"]), ("1", ["b"]), ("2", ["c"])]


def test_sessionize_duplicate_timestamps_clamped():
    out = dp.sessionize([ev(1, "b", 5), ev(1, "a", 5), ev(1, "c", 9)])
    # ties ordered by raw item id
    assert out[0].items == ["a", "b", "c"]
    assert out[0].dwell == [1.0, 4.0]


def test_sessionize_provided_session_ids():
    evs = [ev(1, "a", 0, "s1"), ev(1, "b", 10000, "s1"), ev(1, "c", 20, "s2")]
    out = dp.sessionize(evs)
    assert sorted(s.items for s in out) == [["a", "b"], ["c"]]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5), st.integers(0, 20000)), min_size=1, max_size=60), st.randoms())
def test_sessionize_permutation_invariant(rows, rnd):
    evs = [ev(u, i, t) for u, i, t in rows]
    shuffled = list(evs)
    rnd.shuffle(shuffled)
    a = dp.sessionize(evs)
    b = dp.sessionize(shuffled)
    assert [(s.user, s.items, s.timestamps, s.dwell) for s in a] == [(s.user, s.items, s.timestamps, s.dwell) for s in b]
    for s in a:
        assert len(s.dwell) == len(s.items) - 1
        assert all(d > 0 for d in s.dwell)
        assert all(0 <= t2 - t1 < 3600 for t1, t2 in zip(s.timestamps, s.timestamps[1:]))


def test_read_events(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("user_id,item_id,timestamp\nu1,i1,5\nu1,i2,9\n")
    evs = dp.read_events(p)
    assert evs == [Event("u1", "i1", 5), Event("u1", "i2", 9)]
    p.write_text("user_id,item_id,timestamp\nu1,i1,5\nu1,i2,x\n")
    with pytest.raises(dp.FormatError, match="line 3"):
        dp.read_events(p)
    p.write_text("user,item,ts\n")
    with pytest.raises(dp.FormatError, match="line 1"):
        dp.read_events(p)


def raw_session(user, items, t0=0, step=60):
    ts = [t0 + k * step for k in range(len(items))]
    return Session(str(user), [str(i) for i in items], ts, [float(step)] * (len(items) - 1))


def test_filter_support_identity_with_unit_thresholds():
    sess = [raw_session("u2", ["b", "a"]), raw_session("u1", ["a", "c", "a"], t0=5000)]
    c = dp.filter_support(sess, 1, 1, 1)
    assert c.item_ids == ["a", "b", "c"] and c.user_ids == ["u1", "u2"]
    back = [[c.item_ids[i] for i in s.items] for s in c.sessions]
    assert back == [s.items for s in sess]
    assert c.popularity.tolist() == [3, 1, 1]


def test_filter_support_drops_rare_item():
    # "r" and "q" have 9 events each; "x" and "y" have 10
    sess = [raw_session(0, ["r", "x", "y"], t0=k * 10000) for k in range(9)]
    sess.append(raw_session(0, ["x", "y"], t0=10**6))
    sess += [raw_session(0, ["q", "q", "q"], t0=2 * 10**6 + k * 10000) for k in range(3)]
    c = dp.filter_support(sess, min_item_events=10, min_session_len=2, min_user_sessions=1)
    assert c.item_ids == ["x", "y"]
    assert len(c.sessions) == 10
    assert all([c.item_ids[i] for i in s.items] == ["x", "y"] for s in c.sessions)
    # the cut session keeps its remaining events with recomputed dwell
    assert c.sessions[0].dwell == [60.0]


def test_filter_support_only_rare_sessions_dropped():
    sess = [raw_session(0, ["a", "b"], t0=k * 10000) for k in range(10)]
    sess.append(raw_session(0, ["r", "r"], t0=10**6))
    c = dp.filter_support(sess, min_item_events=10, min_session_len=2, min_user_sessions=1)
    assert len(c.sessions) == 10 and "r" not in c.item_ids


def test_filter_support_empty_raises():
    with pytest.raises(dp.EmptyCorpusError):
        dp.filter_support([raw_session(0, ["a", "b"])], 10, 2, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_filter_support_fixed_point(seed):
    rng = np.random.default_rng(seed)
    sess = [
        raw_session(int(rng.integers(6)), rng.integers(12, size=int(rng.integers(1, 6))).tolist(), t0=k * 10000)
        for k in range(80)
    ]
    try:
        c = dp.filter_support(sess, 4, 2, 3)
    except dp.EmptyCorpusError:
        return
    raw = [Session(c.user_ids[s.user], [c.item_ids[i] for i in s.items], s.timestamps, s.dwell) for s in c.sessions]
    again = dp.filter_support(raw, 4, 2, 3)
    assert [(s.user, s.items) for s in again.sessions] == [(s.user, s.items) for s in c.sessions]
    for s in c.sessions:
        assert len(s.dwell) == len(s.items) - 1 and all(d > 0 for d in s.dwell)


def test_scott_bin_width_examples():
    x = np.random.default_rng(0).normal(size=1000)
    x = (x - x.mean()) / x.std(ddof=1)
    assert abs(dp.scott_bin_width(x) - 0.34911) < 1e-4
    assert abs(dp.scott_bin_width(x) - (24 * math.sqrt(math.pi) / 1000) ** (1 / 3)) < 1e-12
    assert math.isclose(dp.scott_bin_width(5 * x + 3), 5 * dp.scott_bin_width(x), rel_tol=1e-12)
    y = np.random.default_rng(1).normal(size=43)
    y = 2 * (y - y.mean()) / y.std(ddof=1)
    assert abs(dp.scott_bin_width(y) - 2 * (24 * math.sqrt(math.pi) / 43) ** (1 / 3)) < 1e-12
    assert abs(dp.scott_bin_width(y) - 1.99286) < 2e-3


def test_scott_bin_width_degenerate():
    with pytest.raises(dp.DegenerateDistributionError):
        dp.scott_bin_width([3.0])
    with pytest.raises(dp.DegenerateDistributionError):
        dp.scott_bin_width([2.0, 2.0, 2.0])


def test_build_binning_examples():
    b = dp.build_binning([1.0, 12.0, 35.0], 10.0, 512)
    assert b.num_bins == 4
    assert b.assign([27.0]).tolist() == [2]
    assert b.assign([10.0]).tolist() == [1]
    assert b.assign([1e9]).tolist() == [3]
    assert np.all(np.diff(b.edges) > 0)
    assert dp.build_binning([1e6], 1.0, 512).num_bins == 512
    with pytest.raises(ValueError):
        dp.build_binning([1.0], 0.0)


def test_binning_gamma_direct_count():
    d = np.random.default_rng(7).gamma(2.0, 30.0, size=100_000)
    b = dp.build_binning(d, dp.scott_bin_width(d), 512)
    ids = b.assign(d)
    assert ids.min() >= 0 and ids.max() < b.num_bins
    hist = np.bincount(ids, minlength=b.num_bins)
    oracle = np.zeros(b.num_bins, dtype=int)
    for x in d[:5000]:
        k = 0
        while k + 1 < b.num_bins and x >= (k + 1) * b.bin_width:
            k += 1
        oracle[k] += 1
    assert np.array_equal(np.bincount(ids[:5000], minlength=b.num_bins), oracle)
    assert hist.sum() == d.size


def _corpus(sessions):
    return dp.filter_support(sessions, 1, 2, 1)


def test_split_examples():
    sess = [raw_session("u", ["a", "b"], t0=0), raw_session("u", ["a", "b"], t0=10000), raw_session("v", ["a", "b"], t0=20000)]
    c = _corpus(sess)
    with pytest.raises(dp.EmptyCorpusError):
        dp.split_train_test(c, 10**9)
    with pytest.raises(dp.EmptyCorpusError):
        # the only test session belongs to unseen user v
        dp.split_train_test(c, 10060)


def test_split_unseen_item_drops_session():
    sess = [raw_session("u", ["a", "b"], t0=0), raw_session("u", ["a", "z"], t0=10000), raw_session("u", ["b", "a"], t0=20000)]
    tr, te = dp.split_train_test(_corpus(sess), 100)
    assert len(te.sessions) == 1 and [te.item_ids[i] for i in te.sessions[0].items] == ["b", "a"]
    assert tr.binning is te.binning and tr.binning.from_train


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_split_inclusion(seed):
    rng = np.random.default_rng(seed)
    sess = [raw_session(int(rng.integers(4)), rng.integers(8, size=int(rng.integers(2, 6))).tolist(), t0=k * 5000) for k in range(40)]
    c = _corpus(sess)
    try:
        tr, te = dp.split_train_test(c, dp.boundary_for_fraction(c, 0.3))
    except dp.EmptyCorpusError:
        return
    orig = sorted((c.user_ids[s.user], tuple(c.item_ids[i] for i in s.items), s.start_ts) for s in c.sessions)
    got = [(tr.user_ids[s.user], tuple(tr.item_ids[i] for i in s.items), s.start_ts) for s in tr.sessions + te.sessions]
    assert all(x in orig for x in got)
    for s in te.sessions:
        assert max(s.items) < tr.num_items and s.user < tr.num_users
        assert len(s.time_bins) == len(s.items) - 1


def test_corpus_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    evs = [ev(int(rng.integers(5)), int(rng.integers(15)), int(t)) for t in np.sort(rng.integers(0, 10**6, size=600))]
    data = dp.prepare(evs, 3600, 2, 2, 2)
    p = tmp_path / "c.bin"
    dp.save_corpus(data, p)
    assert p.read_bytes().startswith(b"ASARS-CORPUS-1")
    back = dp.load_corpus(p)
    for a, b in ((data.train, back.train), (data.test, back.test)):
        assert [(s.user, s.items, s.timestamps, s.dwell, s.time_bins) for s in a.sessions] == [
            (s.user, s.items, s.timestamps, s.dwell, s.time_bins) for s in b.sessions
        ]
    assert back.summary() == data.summary()
    p2 = tmp_path / "c2.bin"
    dp.save_corpus(back, p2)
    assert p.read_bytes() == p2.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"ASARS-CORPUS-0" + p.read_bytes()[14:])
    with pytest.raises(dp.FormatError, match="compatible"):
        dp.load_corpus(bad)


def test_split_validation_takes_latest():
    sess = [raw_session("u", ["a", "b"], t0=k * 10000) for k in range(20)]
    c = _corpus(sess)
    fit, val = dp.split_validation(c, 0.1)
    assert len(val.sessions) == 2
    assert min(s.end_ts for s in val.sessions) > max(s.end_ts for s in fit.sessions)


def test_read_movielens(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::1193::5::978300760\n1::661::3::978302109\n\n2::1357::5::978298709\n")
    ev = dp.read_movielens(p)
    assert [(e.user_raw, e.item_raw, e.timestamp) for e in ev] == [
        ("1", "1193", 978300760),
        ("1", "661", 978302109),
        ("2", "1357", 978298709),
    ]
    p.write_text("1::1193::5\n")
    with pytest.raises(dp.FormatError, match="line 1"):
        dp.read_movielens(p)
