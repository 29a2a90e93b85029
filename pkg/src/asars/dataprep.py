"""Event-log ingestion: sessionization, support filtering, dwell binning, splits.

Corpus files are little-endian binaries starting with ``ASARS-CORPUS-1``,
followed by a length-prefixed JSON header and the flat session arrays.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CORPUS_MAGIC = b"ASARS-CORPUS-1"
DEFAULT_GAP = 3600


class EmptyCorpusError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    user_raw: str
    item_raw: str
    timestamp: int
    session_raw: str | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class Session:
    """One user session.  Before id remapping ``user``/``items`` hold raw strings."""

    user: int | str
    items: list
    timestamps: list[int]
    dwell: list[float] = field(default_factory=list)
    time_bins: list[int] = field(default_factory=list)

    @property
    def start_ts(self) -> int:
        return self.timestamps[0]

    @property
    def end_ts(self) -> int:
        return self.timestamps[-1]

    def __len__(self) -> int:
        return len(self.items)


def _dwell_from(ts: Sequence[int]) -> list[float]:
    # duplicate timestamps would give zero dwell; clamp to one second
    return [float(max(b - a, 1)) for a, b in zip(ts[:-1], ts[1:])]


def _raw_key(s: str):
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def read_events(path: str | Path) -> list[Event]:
    """Read ``user_id,item_id,timestamp[,session_id]`` CSV (with header)."""
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return events
        header = [h.strip() for h in header]
        if header[:3] != ["user_id", "item_id", "timestamp"] or len(header) > 4 or (
            len(header) == 4 and header[3] != "session_id"
        ):
            raise FormatError(f"line 1: unexpected header {header}")
        has_sess = len(header) == 4
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = int(row[2])
            except ValueError:
                raise FormatError(f"line {lineno}: timestamp {row[2]!r} is not an integer") from None
            if ts < 0:
                raise FormatError(f"line {lineno}: negative timestamp")
            events.append(Event(row[0].strip(), row[1].strip(), ts, row[3].strip() if has_sess else None))
    return events


def read_movielens(path: str | Path) -> list[Event]:
    """Read MovieLens ``ratings.dat`` (``user::movie::rating::timestamp``); each rating is a click."""
    events = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise FormatError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                ts = int(parts[3])
            except ValueError:
                raise FormatError(f"line {lineno}: timestamp {parts[3]!r} is not an integer") from None
            events.append(Event(parts[0], parts[1], ts))
    return events


def sessionize(events: Iterable[Event], gap_seconds: int = DEFAULT_GAP) -> list[Session]:
    """Split each user's time-ordered events at inactivity gaps >= ``gap_seconds``.

    Events carrying a session id are grouped by (user, session id) instead.
    Timestamp ties are ordered by raw item id.  Output order: user, then start.
    """
    if gap_seconds <= 0:
        raise ValueError("gap_seconds must be positive")
    events = sorted(events, key=lambda e: (_raw_key(e.user_raw), e.timestamp, _raw_key(e.item_raw), e.session_raw or ""))
    sessions: list[Session] = []
    by_sid: dict[tuple[str, str], Session] = {}
    cur: Session | None = None
    for e in events:
        if e.session_raw is not None:
            key = (e.user_raw, e.session_raw)
            s = by_sid.get(key)
            if s is None:
                s = by_sid[key] = Session(e.user_raw, [], [])
                sessions.append(s)
            s.items.append(e.item_raw)
            s.timestamps.append(e.timestamp)
            continue
        if cur is None or cur.user != e.user_raw or e.timestamp - cur.timestamps[-1] >= gap_seconds:
            cur = Session(e.user_raw, [], [])
            sessions.append(cur)
        cur.items.append(e.item_raw)
        cur.timestamps.append(e.timestamp)
    for s in sessions:
        s.dwell = _dwell_from(s.timestamps)
    sessions.sort(key=lambda s: (_raw_key(str(s.user)), s.start_ts))
    return sessions


@dataclass
class DwellBinning:
    """Equal-width dwell bins ``[k*w, (k+1)*w)``; the last bin is open-ended."""

    bin_width: float
    num_bins: int
    from_train: bool = True

    def __post_init__(self):
        if self.bin_width <= 0 or self.num_bins < 1:
            raise ValueError("bin_width must be > 0 and num_bins >= 1")

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.num_bins, dtype=np.float64) * self.bin_width

    def assign(self, dwell) -> np.ndarray:
        d = np.asarray(dwell, dtype=np.float64)
        return np.clip(np.floor(d / self.bin_width), 0, self.num_bins - 1).astype(np.int64)


def scott_bin_width(dwells: Sequence[float]) -> float:
    """Scott's rule: sigma * cbrt(24 * sqrt(pi) / n)."""
    d = np.asarray(dwells, dtype=np.float64)
    n = d.size
    if n < 2:
        raise DegenerateDistributionError(f"need at least 2 dwell values, got {n}")
    sigma = float(np.std(d, ddof=1))
    if not sigma > 0:
        raise DegenerateDistributionError("dwell values have zero spread")
    return sigma * (24.0 * math.sqrt(math.pi) / n) ** (1.0 / 3.0)


def build_binning(train_dwells: Sequence[float], width: float, max_bins: int = 512) -> DwellBinning:
    if width <= 0:
        raise ValueError("width must be positive")
    top = float(np.max(train_dwells))
    n = max(1, min(int(math.ceil(top / width)), max_bins))
    return DwellBinning(width, n)


def fit_binning(train_sessions: Sequence[Session], cap_quantile: float = 0.995, max_bins: int = 512) -> DwellBinning:
    """Scott-width binning over train dwells clamped at ``cap_quantile``."""
    d = np.concatenate([np.asarray(s.dwell, dtype=np.float64) for s in train_sessions])
    cap = float(np.quantile(d, cap_quantile))
    d = np.minimum(d, cap)
    try:
        width = scott_bin_width(d)
    except DegenerateDistributionError:
        # every dwell identical: a single bin
        return DwellBinning(max(float(d.max()), 1.0), 1)
    return build_binning(d, width, max_bins)


@dataclass
class Corpus:
    sessions: list[Session]
    item_ids: list[str]  # contiguous id -> raw id
    user_ids: list[str]
    popularity: np.ndarray  # events per item in this corpus
    binning: DwellBinning | None = None

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def item_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.item_ids)}

    @property
    def user_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.user_ids)}

    def by_user(self) -> dict[int, list[Session]]:
        out: dict[int, list[Session]] = defaultdict(list)
        for s in self.sessions:
            out[s.user].append(s)
        return dict(out)

    def user_histories(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for s in self.sessions:
            out[s.user].update(s.items)
        return dict(out)

    def user_mean_days(self) -> np.ndarray:
        tot = np.zeros(self.num_users)
        cnt = np.zeros(self.num_users)
        for s in self.sessions:
            tot[s.user] += sum(s.timestamps)
            cnt[s.user] += len(s.timestamps)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0) / 86400.0

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sessions)

    def summary(self) -> dict:
        return {
            "events": self.num_events,
            "users": len({s.user for s in self.sessions}),
            "items": len({i for s in self.sessions for i in s.items}),
            "sessions": len(self.sessions),
        }

    def with_sessions(self, sessions: list[Session]) -> "Corpus":
        return dataclasses.replace(self, sessions=sessions)


def _remap(sessions: Sequence[Session], item_ids: list[str], user_ids: list[str]) -> list[Session]:
    iidx = {r: i for i, r in enumerate(item_ids)}
    uidx = {r: i for i, r in enumerate(user_ids)}
    return [
        Session(uidx[s.user], [iidx[i] for i in s.items], list(s.timestamps), list(s.dwell), list(s.time_bins))
        for s in sessions
    ]


def _vocab(sessions: Sequence[Session]) -> tuple[list[str], list[str]]:
    items = sorted({i for s in sessions for i in s.items}, key=_raw_key)
    users = sorted({s.user for s in sessions}, key=_raw_key)
    return items, users


def _popularity(sessions: Sequence[Session], n: int) -> np.ndarray:
    pop = np.zeros(n, dtype=np.int64)
    for s in sessions:
        np.add.at(pop, s.items, 1)
    return pop


def filter_support(
    sessions: Sequence[Session],
    min_item_events: int = 10,
    min_session_len: int = 2,
    min_user_sessions: int = 10,
) -> Corpus:
    """Apply item-support, session-length and user-session filters to a fixed point.

    Input sessions carry raw ids; the result is remapped to contiguous ids.
    Removing an item's events keeps the session and recomputes its dwell gaps.
    """
    if min(min_item_events, min_session_len, min_user_sessions) < 1:
        raise ValueError("support thresholds must be >= 1")
    cur = [Session(str(s.user), [str(i) for i in s.items], list(s.timestamps), list(s.dwell)) for s in sessions]
    while True:
        before = (len(cur), sum(len(s) for s in cur))
        counts = Counter(i for s in cur for i in s.items)
        keep_items = {i for i, c in counts.items() if c >= min_item_events}
        nxt = []
        for s in cur:
            if all(i in keep_items for i in s.items):
                nxt.append(s)
                continue
            pairs = [(i, t) for i, t in zip(s.items, s.timestamps) if i in keep_items]
            if pairs:
                items, ts = map(list, zip(*pairs))
                nxt.append(Session(s.user, items, ts, _dwell_from(ts)))
        nxt = [s for s in nxt if len(s) >= min_session_len]
        per_user = Counter(s.user for s in nxt)
        nxt = [s for s in nxt if per_user[s.user] >= min_user_sessions]
        cur = nxt
        if (len(cur), sum(len(s) for s in cur)) == before:
            break
    if not cur:
        raise EmptyCorpusError("all sessions were removed by the support filters")
    items, users = _vocab(cur)
    remapped = _remap(cur, items, users)
    return Corpus(remapped, items, users, _popularity(remapped, len(items)))


def split_train_test(corpus: Corpus, boundary_ts: int, allow_empty_test: bool = False) -> tuple[Corpus, Corpus]:
    """Sessions ending after ``boundary_ts`` form the test set.

    Ids are re-derived from train only; test sessions touching an unseen item
    or user are dropped whole.  Dwell bins are fitted on train dwells.
    """
    raw_sessions = [
        Session(corpus.user_ids[s.user], [corpus.item_ids[i] for i in s.items], list(s.timestamps), list(s.dwell))
        for s in corpus.sessions
    ]
    train = [s for s in raw_sessions if s.end_ts <= boundary_ts]
    test = [s for s in raw_sessions if s.end_ts > boundary_ts]
    if not train:
        raise EmptyCorpusError(f"no training sessions end at or before {boundary_ts}")
    items, users = _vocab(train)
    iset, uset = set(items), set(users)
    test = [s for s in test if s.user in uset and all(i in iset for i in s.items)]
    if not test and not allow_empty_test:
        raise EmptyCorpusError(f"no usable test sessions end after {boundary_ts}")
    train_s = _remap(train, items, users)
    test_s = _remap(test, items, users)
    binning = fit_binning(train_s)
    for s in train_s + test_s:
        s.time_bins = binning.assign(s.dwell).tolist()
    pop = _popularity(train_s, len(items))
    return Corpus(train_s, items, users, pop, binning), Corpus(test_s, items, users, pop, binning)


def boundary_for_fraction(corpus: Corpus, test_fraction: float) -> int:
    """Time boundary leaving roughly ``test_fraction`` of sessions (by end time) in test."""
    ends = np.sort([s.end_ts for s in corpus.sessions])
    k = int(round(len(ends) * (1.0 - test_fraction))) - 1
    return int(ends[min(max(k, 0), len(ends) - 1)])


def split_validation(train: Corpus, fraction: float = 0.1) -> tuple[Corpus, Corpus]:
    """Hold out the last ``fraction`` of train sessions by end time."""
    order = sorted(range(len(train.sessions)), key=lambda k: (train.sessions[k].end_ts, k))
    n_val = max(1, int(round(len(order) * fraction)))
    if n_val >= len(order):
        raise EmptyCorpusError("training corpus too small for a validation split")
    val_idx = set(order[-n_val:])
    fit = [s for k, s in enumerate(train.sessions) if k not in val_idx]
    val = [s for k, s in enumerate(train.sessions) if k in val_idx]
    return train.with_sessions(fit), train.with_sessions(val)


@dataclass
class PreparedData:
    train: Corpus
    test: Corpus
    raw_summary: dict
    thresholds: dict

    def summary(self) -> dict:
        tr, te = self.train.summary(), self.test.summary()
        return {
            "events": tr["events"] + te["events"],
            "users": self.train.num_users,
            "items": self.train.num_items,
            "sessions": tr["sessions"] + te["sessions"],
            "train": tr,
            "test": te,
            "raw": self.raw_summary,
            "session_support": self.thresholds["min_session_len"],
            "item_support": self.thresholds["min_item_events"],
            "user_support": self.thresholds["min_user_sessions"],
            "dwell_bin_width": self.train.binning.bin_width,
            "dwell_bins": self.train.binning.num_bins,
        }


def prepare(
    events: Sequence[Event],
    gap_seconds: int = DEFAULT_GAP,
    min_item_events: int = 10,
    min_session_len: int = 2,
    min_user_sessions: int = 10,
    test_fraction: float = 0.2,
    boundary_ts: int | None = None,
) -> PreparedData:
    if not events:
        raise EmptyCorpusError("no events")
    raw = sessionize(events, gap_seconds)
    corpus = filter_support(raw, min_item_events, min_session_len, min_user_sessions)
    # test_fraction 0 keeps everything for training (empty test split)
    train_only = boundary_ts is None and test_fraction == 0
    if boundary_ts is None:
        boundary_ts = boundary_for_fraction(corpus, test_fraction)
    train, test = split_train_test(corpus, boundary_ts, allow_empty_test=train_only)
    thresholds = dict(
        min_item_events=min_item_events, min_session_len=min_session_len, min_user_sessions=min_user_sessions
    )
    raw_summary = {"events": len(events), "sessions": len(raw)}
    return PreparedData(train, test, raw_summary, thresholds)


# -- binary corpus file -------------------------------------------------

def _pack_sessions(buf: io.BytesIO, sessions: Sequence[Session]) -> None:
    lens = np.array([len(s) for s in sessions], dtype="<i8")
    buf.write(struct.pack("<Q", len(sessions)))
    buf.write(np.array([s.user for s in sessions], dtype="<i8").tobytes())
    buf.write(lens.tobytes())
    for key, dt in (("items", "<i8"), ("timestamps", "<i8")):
        flat = np.array([v for s in sessions for v in getattr(s, key)], dtype=dt)
        buf.write(flat.tobytes())
    buf.write(np.array([v for s in sessions for v in s.dwell], dtype="<f8").tobytes())
    buf.write(np.array([v for s in sessions for v in s.time_bins], dtype="<i8").tobytes())


def _unpack_sessions(mv: memoryview, pos: int) -> tuple[list[Session], int]:
    (n,) = struct.unpack_from("<Q", mv, pos)
    pos += 8

    def take(count, dt):
        nonlocal pos
        arr = np.frombuffer(mv, dtype=dt, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    users = take(n, "<i8")
    lens = take(n, "<i8")
    total = int(lens.sum())
    items = take(total, "<i8")
    ts = take(total, "<i8")
    dwell = take(total - n, "<f8")
    bins = take(total - n, "<i8")
    out = []
    a = b = 0
    for u, ln in zip(users, lens):
        ln = int(ln)
        out.append(
            Session(
                int(u),
                items[a : a + ln].tolist(),
                ts[a : a + ln].tolist(),
                dwell[b : b + ln - 1].tolist(),
                bins[b : b + ln - 1].tolist(),
            )
        )
        a += ln
        b += ln - 1
    return out, pos


def save_corpus(data: PreparedData, path: str | Path) -> None:
    header = {
        "item_ids": data.train.item_ids,
        "user_ids": data.train.user_ids,
        "bin_width": data.train.binning.bin_width,
        "num_bins": data.train.binning.num_bins,
        "raw": data.raw_summary,
        "thresholds": data.thresholds,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    buf.write(np.asarray(data.train.popularity, dtype="<i8").tobytes())
    _pack_sessions(buf, data.train.sessions)
    _pack_sessions(buf, data.test.sessions)
    Path(path).write_bytes(buf.getvalue())


def load_corpus(path: str | Path) -> PreparedData:
    raw = Path(path).read_bytes()
    if not raw.startswith(CORPUS_MAGIC):
        head = raw[: len(CORPUS_MAGIC)]
        raise FormatError(f"{path}: not a compatible corpus file (magic {head!r}, expected {CORPUS_MAGIC!r})")
    mv = memoryview(raw)
    pos = len(CORPUS_MAGIC)
    (hlen,) = struct.unpack_from("<Q", mv, pos)
    pos += 8
    header = json.loads(bytes(mv[pos : pos + hlen]).decode("utf-8"))
    pos += hlen
    n_items = len(header["item_ids"])
    pop = np.frombuffer(mv, dtype="<i8", count=n_items, offset=pos).astype(np.int64)
    pos += 8 * n_items
    train_s, pos = _unpack_sessions(mv, pos)
    test_s, pos = _unpack_sessions(mv, pos)
    binning = DwellBinning(header["bin_width"], header["num_bins"])
    train = Corpus(train_s, header["item_ids"], header["user_ids"], pop, binning)
    test = Corpus(test_s, header["item_ids"], header["user_ids"], pop, binning)
    return PreparedData(train, test, header["raw"], header["thresholds"])
