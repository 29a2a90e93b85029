"""Pairwise ranking losses, in-batch negative sampling, optimizers and the fit loop."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Graph, Tensor
from .batching import USER_PARALLEL, SESSION_PARALLEL, BatchSlice, count_pairs, make_batches
from .dataprep import Corpus, split_validation
from .evaluate import evaluate
from .model import USER_VARIANTS, ASARSModel, ModelConfig

log = logging.getLogger(__name__)

LOSSES = ("bpr", "top1", "hinge")


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "hinge"
    optimizer: str = "adagrad"
    learning_rate: float = 0.2
    batch_size: int = 64
    epochs_max: int = 20
    early_stop_patience: int = 10
    negatives_per_positive: int = 50
    dropout: float | None = None  # None: the model's own setting
    seed: int = 0
    bptt: int = 8
    max_len: int = 200
    batch_mode: str | None = None  # None: user-parallel for user variants
    exclude_history: bool | None = None  # None: on for user variants
    literal_losses: bool = False
    shuffle: bool = False
    validation_fraction: float = 0.1
    grid: dict | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adagrad", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.early_stop_patience < 1 or self.negatives_per_positive < 1 or self.batch_size < 1 or self.bptt < 1:
            raise ValueError("patience, negatives, batch_size and bptt must be >= 1")

    def resolved_mode(self, variant: str) -> str:
        if self.batch_mode is not None:
            return self.batch_mode
        return USER_PARALLEL if variant in USER_VARIANTS else SESSION_PARALLEL

    def resolved_exclude_history(self, variant: str) -> bool:
        if self.exclude_history is not None:
            return self.exclude_history
        return variant in USER_VARIANTS


# -- losses -----------------------------------------------------------------

def pairwise_loss(
    g: Graph,
    kind: str,
    pos: Tensor,
    neg: Tensor,
    weights: np.ndarray | None = None,
    literal: bool = False,
) -> Tensor:
    """Mean pairwise loss over all (row, negative) pairs.

    pos: R or R x 1 positive scores; neg: R x k negative scores; ``weights``
    (R,) zeroes out rows (inactive lanes).  ``literal`` flips TOP1/hinge to the
    orientation that penalises the positive item instead of the negative.
    """
    if pos.data.ndim == 1:
        pos = g.reshape(pos, (pos.shape[0], 1))
    R, k = neg.shape
    for name, t in (("positive", pos), ("negative", neg)):
        bad = ~np.isfinite(t.data).all(axis=1)
        if bad.any():
            raise TrainingError(f"non-finite {name} score in lane {int(np.argmax(bad))}")
    diff = g.sub(pos, neg)
    if kind == "bpr":
        per = g.scale(g.log_sigmoid(diff), -1.0)
    elif kind == "top1":
        if literal:
            per = g.add(g.sigmoid(diff), g.broadcast_to(g.sigmoid(g.mul(pos, pos)), (R, k)))
        else:
            per = g.add(g.sigmoid(g.scale(diff, -1.0)), g.sigmoid(g.mul(neg, neg)))
    elif kind == "hinge":
        if literal:
            per = g.relu(g.add(diff, g.const(1.0)))
        else:
            per = g.relu(g.sub(g.const(1.0), diff))
    else:
        raise ValueError(f"unknown loss {kind!r}")
    if weights is None:
        return g.mean(per)
    w = np.asarray(weights, dtype=g.dtype).reshape(R, 1)
    n = float(w.sum()) * k
    if n == 0:
        raise TrainingError("no active rows in loss")
    return g.scale(g.sum(g.mul(per, g.const(w))), 1.0 / n)


# -- negative sampling ------------------------------------------------------

class HistoryIndex:
    """Sparse user x item membership matrix."""

    def __init__(self, histories: dict[int, Iterable[int]], num_users: int, num_items: int):
        rows, cols = [], []
        for u, items in histories.items():
            items = list(items)
            rows.extend([u] * len(items))
            cols.extend(items)
        self.matrix = sp.csr_matrix(
            (np.ones(len(rows), dtype=bool), (rows, cols)), shape=(num_users, num_items), dtype=bool
        )

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "HistoryIndex":
        return cls(corpus.user_histories(), corpus.num_users, corpus.num_items)

    def lookup(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Boolean len(users) x len(items) matrix of history membership."""
        return self.matrix[users][:, items].toarray()


@dataclass
class NegativeSet:
    ids: np.ndarray  # B x k
    pool: np.ndarray  # candidate item ids of the in-batch pool
    pool_weights: np.ndarray  # in-batch frequencies
    fallback: np.ndarray  # B bool, lane drew from global popularity


def _draw(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k draws per row, proportional to the row's non-negative weights."""
    cum = np.cumsum(weights, axis=1)
    total = cum[:, -1:]
    u = rng.random((weights.shape[0], k)) * total
    idx = (cum[:, None, :] <= u[:, :, None]).sum(axis=2)
    # guard the u == total rounding edge: fall back to the last positive entry
    last = weights.shape[1] - 1 - np.argmax(weights[:, ::-1] > 0, axis=1)
    over = idx >= weights.shape[1]
    if over.any():
        idx[over] = np.broadcast_to(last[:, None], idx.shape)[over]
    return idx


def local_negative_sample(
    sl: BatchSlice,
    popularity: np.ndarray,
    histories: HistoryIndex | None,
    k_neg: int,
    rng: np.random.Generator,
    global_fallback: bool = True,
    pool_slices: Sequence[BatchSlice] | None = None,
) -> NegativeSet:
    """Draw ``k_neg`` negatives per lane from the mini-batch's own items.

    The pool holds the inputs and targets of the active lanes of
    ``pool_slices`` (default: just ``sl``), weighted by how often they occur.
    Each lane excludes its own target and, when ``histories`` is given,
    everything its user has interacted with.  Lanes left with an empty pool
    draw from global popularity instead.
    """
    active = sl.active_mask
    B = sl.size
    src = [sl] if pool_slices is None else pool_slices
    seen = np.concatenate([np.concatenate([x.input_ids[x.active_mask], x.target_ids[x.active_mask]]) for x in src])
    pool, freq = np.unique(seen, return_counts=True)
    ids = np.zeros((B, k_neg), dtype=np.int64)
    fallback = np.zeros(B, dtype=bool)
    lanes = np.nonzero(active)[0]
    if lanes.size == 0:
        return NegativeSet(ids, pool, freq, fallback)
    allowed = pool[None, :] != sl.target_ids[lanes][:, None]
    if histories is not None:
        allowed &= ~histories.lookup(sl.user_ids[lanes], pool)
    w = freq[None, :] * allowed
    ok = w.sum(axis=1) > 0
    if ok.any():
        ids[lanes[ok]] = pool[_draw(w[ok].astype(np.float64), k_neg, rng)]
    if not ok.all():
        bad = lanes[~ok]
        if not global_fallback:
            raise SamplingError(f"in-batch pool exhausted for lanes {bad.tolist()}")
        items = np.arange(len(popularity))
        gw = np.broadcast_to(np.asarray(popularity, dtype=np.float64), (bad.size, len(popularity))).copy()
        gw[np.arange(bad.size), sl.target_ids[bad]] = 0
        if histories is not None:
            gw[histories.lookup(sl.user_ids[bad], items)] = 0
        if (gw.sum(axis=1) <= 0).any():
            raise SamplingError("no valid negative item left after exclusions")
        ids[bad] = _draw(gw, k_neg, rng)
        fallback[bad] = True
    return NegativeSet(ids, pool, freq, fallback)


# -- optimizers ---------------------------------------------------------------

class Adagrad:
    def __init__(self, lr: float, eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self.acc: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            acc = self.acc.get(name)
            if acc is None:
                acc = self.acc[name] = np.zeros_like(p.data)
            acc += p.grad * p.grad
            p.data -= self.lr * p.grad / np.sqrt(acc + self.eps)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "adagrad":
        return Adagrad(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(kind_or_opt, params: dict[str, Tensor], lr: float | None = None):
    """Apply one update in place and return the optimizer (its state persists)."""
    opt = make_optimizer(kind_or_opt, lr) if isinstance(kind_or_opt, str) else kind_or_opt
    opt.step(params)
    for p in params.values():
        if not np.isfinite(p.data).all():
            raise TrainingError(f"parameter {p.name} became non-finite")
    return opt


# -- training loop ------------------------------------------------------------

@dataclass
class EpochStats:
    mean_loss: float
    examples: int
    windows: int
    seconds: float


def _windows(batches: Iterable[BatchSlice], size: int):
    it = iter(batches)
    while True:
        chunk = list(itertools.islice(it, size))
        if not chunk:
            return
        yield chunk


def _window_loss(model: ASARSModel, g: Graph, window, state, cfg: TrainConfig, negs, train: bool, rng) -> tuple[Tensor, int]:
    out = model.forward_window(g, window, state, train=train, rng=rng, dropout=cfg.dropout)
    lane_major = lambda key: np.stack([getattr(s, key) for s in window], axis=1).reshape(-1)  # noqa: E731
    users, bins, ts = lane_major("user_ids"), lane_major("time_bin_ids"), lane_major("timestamps")
    targets, active = lane_major("target_ids"), lane_major("active_mask")
    neg_ids = np.stack([n.ids for n in negs], axis=1).reshape(len(targets), -1)
    pos = model.score(g, out, targets[:, None], users, bins, ts)
    neg = model.score(g, out, neg_ids, users, bins, ts)
    loss = pairwise_loss(g, cfg.loss, pos, neg, weights=active, literal=cfg.literal_losses)
    return loss, int(active.sum())


def run_epoch(
    model: ASARSModel,
    corpus: Corpus,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer=None,
    histories: HistoryIndex | None = None,
    shuffle_seed: int | None = None,
) -> EpochStats:
    """One pass over ``corpus``.  With ``optimizer=None`` nothing is updated and
    dropout is off (validation loss)."""
    train = optimizer is not None
    variant = model.config.variant
    mode = cfg.resolved_mode(variant)
    if histories is None and cfg.resolved_exclude_history(variant):
        histories = HistoryIndex.from_corpus(corpus)
    elif not cfg.resolved_exclude_history(variant):
        histories = None
    batches = make_batches(mode, corpus, cfg.batch_size, cfg.max_len, shuffle_seed)
    return train_epoch(model, batches, cfg, rng, optimizer, corpus.popularity, histories, train=train)


def train_epoch(
    model: ASARSModel,
    batches: Iterable[BatchSlice],
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer=None,
    popularity: np.ndarray | None = None,
    histories: HistoryIndex | None = None,
    train: bool = True,
) -> EpochStats:
    """Every active lane step of every slice is a training example."""
    t0 = time.perf_counter()
    if popularity is None:
        popularity = np.ones(model.config.num_items)
    state = None
    total = 0.0
    examples = 0
    windows = 0
    for window in _windows(batches, cfg.bptt):
        if state is None:
            state = model.new_state(window[0].size)
        # the pool spans every slice of the window (the mini-batch sequences)
        negs = [
            local_negative_sample(s, popularity, histories, cfg.negatives_per_positive, rng, pool_slices=window)
            for s in window
        ]
        g = Graph(record=train)
        loss, n = _window_loss(model, g, window, state, cfg, negs, train, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at window {windows}")
        if train:
            model.zero_grad()
            g.backward(loss)
            optimizer_step(optimizer, model.params)
        total += value * n
        examples += n
        windows += 1
    return EpochStats(total / max(examples, 1), examples, windows, time.perf_counter() - t0)


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.bad = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if value < self.best:
            self.best = value
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class FitResult:
    model: ASARSModel
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    best_val_mrr20: float


def fit(
    model: ASARSModel,
    train: Corpus,
    cfg: TrainConfig,
    val: Corpus | None = None,
    log_path: str | Path | None = None,
    validate: Callable[[ASARSModel], tuple[float, float]] | None = None,
) -> FitResult:
    """Train with early stopping on validation loss; returns the best snapshot.

    Without an explicit ``val`` corpus the last ``validation_fraction`` of the
    training sessions (by end time) are held out.
    """
    if val is None and validate is None:
        train, val = split_validation(train, cfg.validation_fraction)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    variant = model.config.variant
    hist_index = HistoryIndex.from_corpus(train) if cfg.resolved_exclude_history(variant) else None

    if validate is None:
        val_hist = HistoryIndex.from_corpus(val) if hist_index is not None else None

        def validate(m):
            vl = run_epoch(m, val, cfg, np.random.default_rng(cfg.seed + 1), None, val_hist).mean_loss
            return vl, evaluate(m, val, Ks=[20]).mrr[20]

    stopper = EarlyStopping(cfg.early_stop_patience)
    best = model.copy()
    best_epoch, best_mrr = 0, 0.0
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs_max + 1):
            t0 = time.perf_counter()
            shuffle_seed = cfg.seed * 100003 + epoch if cfg.shuffle else None
            stats = run_epoch(model, train, cfg, rng, opt, hist_index, shuffle_seed)
            val_loss, val_mrr = validate(model)
            rec = {
                "epoch": epoch,
                "train_loss": stats.mean_loss,
                "val_loss": float(val_loss),
                "val_mrr20": float(val_mrr),
                "seconds": round(time.perf_counter() - t0, 3),
            }
            history.append(rec)
            log.info("epoch %d train %.5f val %.5f mrr@20 %.5f", epoch, stats.mean_loss, val_loss, val_mrr)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            improved, stop = stopper.update(float(val_loss))
            if improved:
                best = model.copy()
                best_epoch, best_mrr = epoch, float(val_mrr)
            if stop:
                break
    finally:
        if fh:
            fh.close()
    return FitResult(best, history, best_epoch, stopper.best, best_mrr)


def build_model(train: Corpus, model_cfg: ModelConfig | dict, seed: int) -> ASARSModel:
    """Model sized to ``train``'s vocabularies; ``model_cfg`` may be a dict of
    ModelConfig fields without the table sizes."""
    sizes = dict(
        num_items=train.num_items,
        num_users=train.num_users,
        num_time_bins=train.binning.num_bins if train.binning else 1,
    )
    if isinstance(model_cfg, dict):
        cfg = ModelConfig(**{**model_cfg, **sizes})
    else:
        cfg = dataclasses.replace(model_cfg, **sizes)
    return ASARSModel(cfg, seed=seed, user_mean_day=train.user_mean_days())


def grid_search(
    train: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    grid: dict[str, Sequence],
    log_dir: str | Path | None = None,
) -> tuple[FitResult, dict, list[dict]]:
    """Fit once per grid point; the winner has the highest validation MRR@20.

    Grid keys may name TrainConfig or ModelConfig fields.
    """
    keys = sorted(grid)
    tfields = {f.name for f in dataclasses.fields(TrainConfig)}
    mfields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = [k for k in keys if k not in tfields | mfields]
    if unknown:
        raise ValueError(f"unknown grid keys {unknown}")
    fit_part, val_part = split_validation(train, train_cfg.validation_fraction)
    runs = []
    best: tuple[FitResult, dict] | None = None
    for n, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = dict(zip(keys, values))
        tc = dataclasses.replace(train_cfg, **{k: v for k, v in point.items() if k in tfields})
        mc = dataclasses.replace(model_cfg, **{k: v for k, v in point.items() if k in mfields and k not in tfields})
        if "dropout" in point:
            mc = dataclasses.replace(mc, dropout=point["dropout"])
        model = build_model(train, mc, tc.seed)
        lp = Path(log_dir) / f"grid_{n:03d}.jsonl" if log_dir else None
        res = fit(model, fit_part, tc, val=val_part, log_path=lp)
        runs.append({"point": point, "best_val_mrr20": res.best_val_mrr20, "best_val_loss": res.best_val_loss, "epochs": len(res.history)})
        if best is None or res.best_val_mrr20 > best[0].best_val_mrr20:
            best = (res, point)
    return best[0], best[1], runs
