"""Seeded synthetic click logs with planted sequential (and dwell) structure.

Two profiles:

``markov``
    Within a session each next item is drawn from a planted first-order
    transition table: every item has a few successors, most of them in its own
    cluster.  Dwell gaps are gamma distributed and carry no information.

``dwell-signal``
    Same chain, but a click can be a quick look that the user abandons.  A
    long dwell means the item was accepted and the next click follows from it;
    a short dwell means it was rejected and the next click is another
    successor of the last accepted item (several quick looks may follow each
    other).  The rejected item is itself a plausible successor, so only the
    dwell time tells the two cases apart.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataprep import Event

PROFILES = ("markov", "dwell-signal")
T0 = 1_500_000_000
DAY = 86400


@dataclass(frozen=True)
class SynthConfig:
    profile: str = "markov"
    num_items: int = 1000
    num_users: int = 200
    num_events: int = 100_000
    successors: int = 4
    cluster_size: int = 50
    same_cluster: float = 0.8
    mean_session_len: float = 8.0
    concentration: float = 2.0  # Dirichlet prior on each item's successor weights
    reject_prob: float = 0.5  # dwell-signal only
    home_cluster_prob: float = 0.7  # session starts in the user's favourite cluster
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.successors < 1 or self.successors >= self.num_items:
            raise ValueError("successors must be in [1, num_items)")
        if self.mean_session_len < 2:
            raise ValueError("mean_session_len must be >= 2")


@dataclass
class Planted:
    succ: np.ndarray  # V x k successor ids
    prob: np.ndarray  # V x k transition probabilities
    cluster: np.ndarray  # V cluster labels

    def dense(self) -> np.ndarray:
        V = len(self.succ)
        P = np.zeros((V, V))
        np.add.at(P, (np.repeat(np.arange(V), self.succ.shape[1]), self.succ.ravel()), self.prob.ravel())
        return P


def planted_chain(cfg: SynthConfig) -> Planted:
    rng = np.random.default_rng([cfg.seed, 1])
    V, k = cfg.num_items, cfg.successors
    cs = min(cfg.cluster_size, V)
    cluster = np.arange(V) // cs
    n_clusters = int(cluster.max()) + 1
    succ = np.empty((V, k), dtype=np.int64)
    for i in range(V):
        chosen: list[int] = []
        while len(chosen) < k:
            if n_clusters > 1 and rng.random() >= cfg.same_cluster:
                c = (cluster[i] + 1) % n_clusters
            else:
                c = cluster[i]
            members = np.nonzero(cluster == c)[0]
            j = int(rng.choice(members))
            if j != i and j not in chosen:
                chosen.append(j)
            elif members.size <= k:
                # tiny cluster: take any other item
                j = int(rng.integers(V))
                if j != i and j not in chosen:
                    chosen.append(j)
        succ[i] = chosen
    prob = rng.dirichlet(np.full(k, cfg.concentration), size=V)
    return Planted(succ, prob, cluster)


def _dwell(rng: np.random.Generator, long: bool) -> int:
    if long:
        d = rng.gamma(4.0, 60.0)
    else:
        d = rng.gamma(2.0, 4.0)
    return int(np.clip(round(d), 1, 3000))


def generate(cfg: SynthConfig) -> tuple[list[Event], Planted]:
    """Events for ``cfg`` plus the planted chain that produced them."""
    planted = planted_chain(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    V, U = cfg.num_items, cfg.num_users
    n_clusters = int(planted.cluster.max()) + 1
    home = rng.integers(n_clusters, size=U)
    clock = T0 + rng.integers(0, 30 * DAY, size=U)
    cum = np.cumsum(planted.prob, axis=1)

    def step(i: int) -> int:
        return int(planted.succ[i, min(int(np.searchsorted(cum[i], rng.random() * cum[i, -1], side="right")), cum.shape[1] - 1)])

    def step_avoiding(i: int, skip: int) -> int:
        # successor of i other than the item just dismissed
        w = np.where(planted.succ[i] == skip, 0.0, planted.prob[i])
        if w.sum() <= 0:
            return step(i)
        c = np.cumsum(w)
        return int(planted.succ[i, min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(c) - 1)])

    events: list[Event] = []
    p_stop = 1.0 / (cfg.mean_session_len - 1)
    dwell_profile = cfg.profile == "dwell-signal"
    while len(events) < cfg.num_events:
        u = int(rng.integers(U))
        if rng.random() < cfg.home_cluster_prob:
            members = np.nonzero(planted.cluster == home[u])[0]
            cur = int(rng.choice(members))
        else:
            cur = int(rng.integers(V))
        length = 2 + int(rng.geometric(p_stop)) - 1
        anchor = cur
        t = int(clock[u])
        items = [cur]
        stamps = [t]
        while len(items) < length:
            if dwell_profile and len(items) > 1 and rng.random() < cfg.reject_prob:
                # quick look at the current item, then back to the anchor
                t += _dwell(rng, long=False)
                nxt = step_avoiding(anchor, cur)
            else:
                t += _dwell(rng, long=True)
                anchor = cur
                nxt = step(cur)
            items.append(nxt)
            stamps.append(t)
            cur = nxt
        for it, ts in zip(items, stamps):
            events.append(Event(str(u), str(it), int(ts)))
        # next session of this user starts after a long break
        clock[u] = t + 2 * 3600 + int(rng.exponential(DAY))
    return events[: cfg.num_events] if len(events) > cfg.num_events else events, planted


def write_events(events: list[Event], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp"])
        for e in sorted(events, key=lambda e: (e.timestamp, int(e.user_raw), int(e.item_raw))):
            w.writerow([e.user_raw, e.item_raw, e.timestamp])


def synth_to_csv(path: str | Path, profile: str = "markov", seed: int = 0, **overrides) -> Planted:
    cfg = replace(SynthConfig(profile=profile, seed=seed), **overrides)
    events, planted = generate(cfg)
    write_events(events, path)
    return planted
