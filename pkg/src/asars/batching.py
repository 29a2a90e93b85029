"""Session-parallel and user-parallel mini-batches.

Each lane of a batch holds one session at a time.  Every slice advances all
lanes by one step; a lane whose session ends is refilled with the next
session (flagged in ``reset_mask``).  Lanes with nothing left to do stay in
the slice with ``active_mask`` false so the slice width is always ``B``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dataprep import Corpus, Session

SESSION_PARALLEL = "session_parallel"
USER_PARALLEL = "user_parallel"


@dataclass(frozen=True)
class BatchSlice:
    input_ids: np.ndarray
    target_ids: np.ndarray
    time_bin_ids: np.ndarray
    user_ids: np.ndarray
    reset_mask: np.ndarray
    active_mask: np.ndarray
    timestamps: np.ndarray  # of the input events, seconds

    @property
    def size(self) -> int:
        return len(self.input_ids)

    def pairs(self):
        """(input, target, time_bin) for active lanes."""
        a = self.active_mask
        return list(zip(self.input_ids[a].tolist(), self.target_ids[a].tolist(), self.time_bin_ids[a].tolist()))


def truncate(session: Session, max_len: int | None) -> list[Session]:
    """Cut a session into consecutive pieces of at most ``max_len`` items.

    The dwell gap across each cut is dropped; pieces shorter than two items
    carry no training pair and are discarded.
    """
    if max_len is None or len(session) <= max_len:
        return [session]
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    out = []
    for lo in range(0, len(session), max_len):
        hi = min(lo + max_len, len(session))
        if hi - lo < 2:
            continue
        out.append(
            Session(
                session.user,
                session.items[lo:hi],
                session.timestamps[lo:hi],
                session.dwell[lo : hi - 1],
                session.time_bins[lo : hi - 1] if session.time_bins else [],
            )
        )
    return out


def _ordered(sessions: Sequence[Session], max_len: int | None, shuffle_seed: int | None) -> list[Session]:
    order = sorted(range(len(sessions)), key=lambda k: (sessions[k].start_ts, k))
    if shuffle_seed is not None:
        order = list(np.random.default_rng(shuffle_seed).permutation(order))
    out = []
    for k in order:
        out.extend(truncate(sessions[k], max_len))
    return [s for s in out if len(s) >= 2]


class _Lanes:
    def __init__(self, B: int, next_session):
        if B < 1:
            raise ValueError("batch size must be >= 1")
        self.B = B
        self.next_session = next_session
        self.sess: list[Session | None] = [None] * B
        self.pos = [0] * B
        for b in range(B):
            self.sess[b] = next_session(b)

    def __iter__(self) -> Iterator[BatchSlice]:
        B = self.B
        while any(s is not None for s in self.sess):
            inp = np.zeros(B, dtype=np.int64)
            tgt = np.zeros(B, dtype=np.int64)
            bins = np.zeros(B, dtype=np.int64)
            users = np.zeros(B, dtype=np.int64)
            ts = np.zeros(B, dtype=np.int64)
            reset = np.zeros(B, dtype=bool)
            active = np.zeros(B, dtype=bool)
            for b in range(B):
                s = self.sess[b]
                if s is None:
                    continue
                p = self.pos[b]
                inp[b] = s.items[p]
                tgt[b] = s.items[p + 1]
                bins[b] = s.time_bins[p] if s.time_bins else 0
                users[b] = s.user
                ts[b] = s.timestamps[p]
                reset[b] = p == 0
                active[b] = True
            yield BatchSlice(inp, tgt, bins, users, reset, active, ts)
            for b in range(B):
                s = self.sess[b]
                if s is None:
                    continue
                self.pos[b] += 1
                if self.pos[b] + 1 >= len(s):
                    self.pos[b] = 0
                    self.sess[b] = self.next_session(b)


def session_parallel_batches(
    corpus: Corpus | Sequence[Session],
    B: int,
    max_len: int | None = None,
    shuffle_seed: int | None = None,
) -> Iterator[BatchSlice]:
    """Fill lanes from one global queue ordered by session start time."""
    sessions = corpus.sessions if isinstance(corpus, Corpus) else corpus
    queue = _ordered(sessions, max_len, shuffle_seed)
    it = iter(queue)
    return iter(_Lanes(B, lambda b: next(it, None)))


def user_parallel_batches(
    corpus: Corpus | Sequence[Session],
    B: int,
    max_len: int | None = None,
    shuffle_seed: int | None = None,
) -> Iterator[BatchSlice]:
    """Like :func:`session_parallel_batches`, but a lane keeps serving one
    user's sessions in time order until that user is exhausted."""
    sessions = corpus.sessions if isinstance(corpus, Corpus) else corpus
    per_user: dict[int, list[Session]] = {}
    for s in _ordered(sessions, max_len, None):
        per_user.setdefault(s.user, []).append(s)
    users = sorted(per_user, key=lambda u: (per_user[u][0].start_ts, u))
    if shuffle_seed is not None:
        users = list(np.random.default_rng(shuffle_seed).permutation(users))
    user_queue = iter(users)
    lane_queue: list[Iterator[Session] | None] = [None] * max(B, 1)

    def next_session(b: int):
        while True:
            q = lane_queue[b]
            if q is not None:
                s = next(q, None)
                if s is not None:
                    return s
            u = next(user_queue, None)
            if u is None:
                lane_queue[b] = None
                return None
            lane_queue[b] = iter(per_user[u])

    return iter(_Lanes(B, next_session))


def make_batches(mode: str, corpus, B: int, max_len: int | None = None, shuffle_seed: int | None = None):
    if mode == SESSION_PARALLEL:
        return session_parallel_batches(corpus, B, max_len, shuffle_seed)
    if mode == USER_PARALLEL:
        return user_parallel_batches(corpus, B, max_len, shuffle_seed)
    raise ValueError(f"unknown batch mode {mode!r}")


def count_pairs(sessions: Sequence[Session]) -> int:
    return sum(len(s) - 1 for s in sessions)
