"""Next-item ranking metrics and teacher-forced session replay."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff import Graph
from .batching import BatchSlice, session_parallel_batches
from .dataprep import Corpus


def _check_ranks(ranks, K) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise ValueError("no ranks to evaluate")
    if K < 1 or r.min() < 1:
        raise ValueError("ranks and K must be >= 1")
    return r


def mrr_at_k(ranks: Sequence[int], K: int) -> float:
    r = _check_ranks(ranks, K)
    return float(np.where(r <= K, 1.0 / r, 0.0).mean())


def recall_at_k(ranks: Sequence[int], K: int) -> float:
    r = _check_ranks(ranks, K)
    return float((r <= K).mean())


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target under (score desc, item id asc)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    st = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > st) | ((scores == st) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


class Ranker(Protocol):
    def new_state(self, B: int): ...

    def step_scores(self, sl: BatchSlice, state) -> np.ndarray: ...


class PopularityRanker:
    """Scores every item by its training frequency, independent of context."""

    def __init__(self, popularity: Sequence[int]):
        self.popularity = np.asarray(popularity, dtype=np.float64)

    def new_state(self, B: int):
        return None

    def ranking(self) -> np.ndarray:
        return np.lexsort((np.arange(len(self.popularity)), -self.popularity))

    def step_scores(self, sl: BatchSlice, state) -> np.ndarray:
        return np.broadcast_to(self.popularity, (sl.size, len(self.popularity)))


def popularity_baseline(corpus: Corpus) -> PopularityRanker:
    return PopularityRanker(corpus.popularity)


class ModelRanker:
    """Replays sessions through a frozen model one step at a time."""

    def __init__(self, model):
        self.model = model

    def new_state(self, B: int):
        return self.model.new_state(B)

    def step_scores(self, sl: BatchSlice, state) -> np.ndarray:
        g = Graph(record=False)
        out = self.model.forward_window(g, [sl], state, train=False)
        return self.model.full_scores(g, out, sl.user_ids, sl.time_bin_ids, sl.timestamps).data


@dataclass
class MetricsReport:
    Ks: list[int]
    mrr: dict[int, float]
    recall: dict[int, float]
    n_predictions: int
    seed: int | None = None
    config_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "Ks": list(self.Ks),
            "mrr": {str(k): v for k, v in self.mrr.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "n_predictions": self.n_predictions,
            "seed": self.seed,
            "checkpoint_hash": self.config_hash,
        }
        d.update(self.meta)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def collect_ranks(ranker, corpus: Corpus, batch_size: int = 256) -> np.ndarray:
    num_items = corpus.num_items
    state = ranker.new_state(batch_size)
    out = []
    for sl in session_parallel_batches(corpus, batch_size):
        a = sl.active_mask
        if sl.target_ids[a].max(initial=0) >= num_items or sl.input_ids[a].max(initial=0) >= num_items:
            raise ValueError("test item outside the training vocabulary")
        scores = ranker.step_scores(sl, state)
        if a.any():
            out.append(target_ranks(scores[a], sl.target_ids[a]))
    if not out:
        raise ValueError("test corpus has no predictions to make")
    return np.concatenate(out)


def evaluate(ranker, corpus: Corpus, Ks: Sequence[int] = (10, 20, 30, 40), batch_size: int = 256, seed=None) -> MetricsReport:
    """MRR@K and Recall@K over every next-item prediction in ``corpus``.

    ``ranker`` may be a model (wrapped in :class:`ModelRanker`) or any object
    with ``new_state``/``step_scores``.  K values of 0 or "all" mean the full
    vocabulary.
    """
    if not hasattr(ranker, "step_scores"):
        ranker = ModelRanker(ranker)
    ks = [corpus.num_items if k in (0, "all") else int(k) for k in Ks]
    # sorted so the means do not depend on lane order
    ranks = np.sort(collect_ranks(ranker, corpus, batch_size))
    h = None
    if isinstance(ranker, ModelRanker):
        h = ranker.model.checksum()[:16]
    return MetricsReport(
        ks,
        {k: mrr_at_k(ranks, k) for k in ks},
        {k: recall_at_k(ranks, k) for k in ks},
        int(ranks.size),
        seed,
        h,
    )
