"""Session-aware recurrent recommender with dwell-time and user-profile paths.

Variants
--------
``baseline``   GRU over item embeddings, output = hidden state.
``time_cat``   item and dwell-bin embeddings concatenated into one GRU.
``time_att``   item GRU plus a dwell GRU; the dwell states weight the item
               states through causal (lower-triangular) attention.
``user_cat``   GRU output concatenated with the user embedding, then affine+tanh.
``user_att``   causal attention over item states scored against the user embedding.
``time_user``  ``time_att`` followed by the ``user_cat`` fusion.

Sequences are processed in windows of consecutive batch slices.  Hidden states
and per-lane attention history flow across windows as constants, so gradients
are truncated at window boundaries; a window covering whole sessions gives
exact full-sequence gradients.
"""
from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Graph, Tensor, get_precision
from .batching import BatchSlice

VARIANTS = ("baseline", "user_att", "user_cat", "time_att", "time_cat", "time_user")
TIME_VARIANTS = ("time_att", "time_cat", "time_user")
USER_VARIANTS = ("user_att", "user_cat", "time_user")
CKPT_MAGIC = b"ASARS-CKPT-1"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "baseline"
    num_items: int = 1
    num_users: int = 1
    num_time_bins: int = 1
    item_embed_dim: int = 64
    time_embed_dim: int = 16
    user_embed_dim: int = 32
    hidden_dim: int = 100
    dropout: float = 0.5
    cell: str = "gru"
    # bias terms; None picks the variant default
    global_bias: bool | None = None
    user_bias: bool | None = None
    item_bias: bool | None = None
    item_time_bias: bool | None = None
    user_dev: bool | None = None
    dev_beta: float = 0.4
    item_time_full_table: bool = False
    attention_zero_fill: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.cell not in ("gru", "lstm"):
            raise ConfigError(f"unknown cell {self.cell!r}")
        dims = (self.item_embed_dim, self.time_embed_dim, self.user_embed_dim, self.hidden_dim)
        if min(dims) < 1 or min(self.num_items, self.num_users, self.num_time_bins) < 1:
            raise ConfigError("dimensions and table sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        user = self.variant in USER_VARIANTS
        time = self.variant in TIME_VARIANTS
        defaults = dict(
            global_bias=user, user_bias=user, item_bias=True, item_time_bias=time, user_dev=self.variant == "time_user"
        )
        for k, v in defaults.items():
            if getattr(self, k) is None:
                setattr(self, k, v)

    @property
    def uses_time(self) -> bool:
        return self.variant in TIME_VARIANTS

    @property
    def uses_user(self) -> bool:
        return self.variant in USER_VARIANTS or self.user_bias or self.user_dev

    @property
    def attention(self) -> str | None:
        if self.variant in ("time_att", "time_user"):
            return "time"
        if self.variant == "user_att":
            return "user"
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- building blocks ------------------------------------------------------

def _gru_gates(g: Graph, xg: Tensor, h, U_zr: Tensor, U_h: Tensor) -> Tensor:
    d = U_h.shape[0]
    if not isinstance(h, Tensor):
        h = g.const(h)
    zr = g.sigmoid(g.add(g.slice(xg, 1, 0, 2 * d), g.matmul(h, U_zr)))
    z = g.slice(zr, 1, 0, d)
    r = g.slice(zr, 1, d, 2 * d)
    cand = g.tanh(g.add(g.slice(xg, 1, 2 * d, 3 * d), g.matmul(g.mul(r, h), U_h)))
    return g.add(h, g.mul(z, g.sub(cand, h)))


def gru_step(g: Graph, x: Tensor, h_prev, W_x: Tensor, U_zr: Tensor, U_h: Tensor, b: Tensor) -> Tensor:
    """One GRU step with fused gate weights (column blocks: update, reset, candidate).

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wc + (r*h) Uc + bc), h' = (1-z)*h + z*c.
    """
    d = U_h.shape[0]
    hp = h_prev.data if isinstance(h_prev, Tensor) else np.asarray(h_prev)
    if x.data.ndim != 2 or x.shape[1] != W_x.shape[0] or W_x.shape[1] != 3 * d or hp.shape != (x.shape[0], d):
        raise DimensionError(f"gru_step shapes: x {x.shape}, h {hp.shape}, W_x {W_x.shape}, U_h {U_h.shape}")
    return _gru_gates(g, g.add(g.matmul(x, W_x), b), h_prev, U_zr, U_h)


def lstm_step(g: Graph, x: Tensor, h_prev, c_prev, W_x: Tensor, U: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    return _lstm_gates(g, g.add(g.matmul(x, W_x), b), h_prev, c_prev, U)


def _lstm_gates(g: Graph, xg: Tensor, h, c, U: Tensor) -> tuple[Tensor, Tensor]:
    d = U.shape[0]
    if not isinstance(h, Tensor):
        h = g.const(h)
    if not isinstance(c, Tensor):
        c = g.const(c)
    gates = g.add(xg, g.matmul(h, U))
    sg = g.sigmoid(g.slice(gates, 1, 0, 3 * d))
    i, f, o = (g.slice(sg, 1, k * d, (k + 1) * d) for k in range(3))
    cand = g.tanh(g.slice(gates, 1, 3 * d, 4 * d))
    c_new = g.add(g.mul(f, c), g.mul(i, cand))
    return g.mul(o, g.tanh(c_new)), c_new


def triangle_attention(
    g: Graph, h_session: Tensor, h_time: Tensor, W_s: Tensor, b_s: Tensor, zero_fill: bool = False
) -> Tensor:
    """All prefix outputs of dwell-weighted attention in one masked pass.

    p_j = tanh(W_s h_time_j + b_s), score_j = p_j . h_session_j, and row i of the
    output is the softmax(score_0..i)-weighted sum of h_session_0..i.
    """
    n = h_session.shape[0]
    if n == 0:
        return h_session
    if h_time.shape != h_session.shape:
        raise DimensionError(f"h_session {h_session.shape} vs h_time {h_time.shape}")
    p = g.tanh(g.add(g.matmul(h_time, W_s), b_s))
    s = g.sum(g.mul(p, h_session), axis=1)
    scores = g.broadcast_to(g.reshape(s, (1, n)), (n, n))
    alpha = g.masked_softmax_rows(scores, np.arange(1, n + 1), zero_fill=zero_fill)
    return g.matmul(alpha, h_session)


def user_attention(g: Graph, p_seq: Tensor, e_u: Tensor, triangle: bool = False) -> Tensor:
    """Softmax of p_i . e_u over the sequence; with ``triangle`` the n x n matrix
    whose row i covers the prefix 0..i."""
    n, d = p_seq.shape
    if e_u.shape != (d,):
        raise DimensionError(f"user vector {e_u.shape} does not match attention width {d}")
    s = g.reshape(g.matmul(p_seq, g.reshape(e_u, (d, 1))), (1, n))
    if not triangle:
        return g.reshape(g.masked_softmax_rows(s, [n]), (n,))
    return g.masked_softmax_rows(g.broadcast_to(s, (n, n)), np.arange(1, n + 1))


def fuse_user_cat(g: Graph, q: Tensor, e_u: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """tanh([q, e_u] W + b), mapping back to the hidden width."""
    if q.data.ndim != 2 or e_u.data.ndim != 2 or q.shape[0] != e_u.shape[0]:
        raise DimensionError(f"fuse_user_cat: q {q.shape} vs e_u {e_u.shape}")
    if W.shape[0] != q.shape[1] + e_u.shape[1]:
        raise DimensionError(f"fuse_user_cat: projection {W.shape} for inputs {q.shape}, {e_u.shape}")
    return g.tanh(g.add(g.matmul(g.concat([q, e_u], axis=1), W), b))


# -- model ----------------------------------------------------------------

@dataclass
class LaneState:
    h_item: np.ndarray
    c_item: np.ndarray | None = None
    h_time: np.ndarray | None = None
    c_time: np.ndarray | None = None
    att_keys: np.ndarray | None = None  # B x cap x d_h
    att_scores: np.ndarray | None = None  # B x cap
    att_len: np.ndarray | None = None


class ASARSModel:
    def __init__(self, config: ModelConfig, seed: int = 0, user_mean_day: np.ndarray | None = None):
        self.config = config
        self.user_mean_day = (
            np.zeros(config.num_users) if user_mean_day is None else np.asarray(user_mean_day, dtype=np.float64)
        )
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- parameters -----------------------------------------------------
    def _add(self, name, shape, kind, rng):
        if kind == "embed":
            arr = rng.uniform(-0.05, 0.05, size=shape)
        elif kind == "affine":
            lim = math.sqrt(6.0 / (shape[0] + shape[-1]))
            arr = rng.uniform(-lim, lim, size=shape)
        else:
            arr = np.zeros(shape)
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _add_rnn(self, prefix, d_in, d_h, rng):
        if self.config.cell == "gru":
            self._add(f"{prefix}.W_x", (d_in, 3 * d_h), "affine", rng)
            self._add(f"{prefix}.U_zr", (d_h, 2 * d_h), "affine", rng)
            self._add(f"{prefix}.U_h", (d_h, d_h), "affine", rng)
            self._add(f"{prefix}.b", (3 * d_h,), "zero", rng)
        else:
            self._add(f"{prefix}.W_x", (d_in, 4 * d_h), "affine", rng)
            self._add(f"{prefix}.U", (d_h, 4 * d_h), "affine", rng)
            self._add(f"{prefix}.b", (4 * d_h,), "zero", rng)

    def _init_params(self, rng):
        c = self.config
        d_i, d_t, d_u, d_h = c.item_embed_dim, c.time_embed_dim, c.user_embed_dim, c.hidden_dim
        V, U, T = c.num_items, c.num_users, c.num_time_bins
        self._add("item_embed", (V, d_i), "embed", rng)
        if c.uses_time:
            self._add("time_embed", (T, d_t), "embed", rng)
        if c.variant in USER_VARIANTS:
            self._add("user_embed", (U, d_u), "embed", rng)
        self._add_rnn("rnn_item", d_i + (d_t if c.variant == "time_cat" else 0), d_h, rng)
        if c.attention == "time":
            self._add_rnn("rnn_time", d_t, d_h, rng)
        if c.attention is not None:
            self._add("att.W_s", (d_h, d_h), "affine", rng)
            self._add("att.b_s", (d_h,), "zero", rng)
        if c.attention == "user" and d_u != d_h:
            self._add("att.W_u", (d_u, d_h), "affine", rng)
        if c.variant in ("user_cat", "time_user"):
            self._add("fuse.W", (d_h + d_u, d_h), "affine", rng)
            self._add("fuse.b", (d_h,), "zero", rng)
        if d_h != d_i:
            self._add("out.W", (d_h, d_i), "affine", rng)
        if c.global_bias:
            self._add("bias.global", (1,), "zero", rng)
        if c.user_bias:
            self._add("bias.user", (U,), "zero", rng)
        if c.user_dev:
            self._add("bias.user_dev_scale", (U,), "zero", rng)
        if c.item_bias:
            self._add("bias.item", (V,), "zero", rng)
        if c.item_time_bias:
            if c.item_time_full_table:
                self._add("bias.item_time", (V, T), "zero", rng)
            else:
                self._add("bias.item_factor", (V,), "zero", rng)
                # nonzero so the product factorisation is not stuck at a saddle
                self._add("bias.bin_factor", (T,), "embed", rng)
                self._add("bias.bin", (T,), "zero", rng)

    def astype(self, dtype) -> "ASARSModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def copy(self) -> "ASARSModel":
        m = ASARSModel.__new__(ASARSModel)
        m.config = dataclasses.replace(self.config)
        m.user_mean_day = self.user_mean_day.copy()
        m.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.data.dtype) for k, v in self.params.items()}
        return m

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # -- recurrent state ------------------------------------------------
    def new_state(self, B: int) -> LaneState:
        c = self.config
        dt = get_precision()
        z = lambda: np.zeros((B, c.hidden_dim), dtype=dt)  # noqa: E731
        lstm = c.cell == "lstm"
        st = LaneState(h_item=z(), c_item=z() if lstm else None)
        if c.attention == "time":
            st.h_time = z()
            st.c_time = z() if lstm else None
        if c.attention is not None:
            st.att_keys = np.zeros((B, 8, c.hidden_dim), dtype=dt)
            st.att_scores = np.zeros((B, 8), dtype=dt)
            st.att_len = np.zeros(B, dtype=np.int64)
        return st

    def _run_rnn(self, g: Graph, prefix: str, x: Tensor, h0, c0, keep: np.ndarray):
        """x: W x B x d_in (time-major); keep: W x B, zero where state resets."""
        P = self.params
        W, B = keep.shape
        xg = g.add(g.reshape(g.matmul(g.reshape(x, (W * B, x.shape[2])), P[f"{prefix}.W_x"]), (W, B, -1)), P[f"{prefix}.b"])
        h, c = h0, c0
        outs = []
        for t in range(W):
            k = keep[t][:, None].astype(g.dtype)
            h = g.mul(h, g.const(k)) if isinstance(h, Tensor) else h * k
            xt = g.slice(xg, 0, t)
            if self.config.cell == "gru":
                h = _gru_gates(g, xt, h, P[f"{prefix}.U_zr"], P[f"{prefix}.U_h"])
            else:
                c = g.mul(c, g.const(k)) if isinstance(c, Tensor) else c * k
                h, c = _lstm_gates(g, xt, h, c, P[f"{prefix}.U"])
            outs.append(h)
        return outs, h, c

    def forward_window(
        self,
        g: Graph,
        slices: Sequence[BatchSlice],
        state: LaneState,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout: float | None = None,
    ) -> Tensor:
        """Run the network over consecutive slices.

        Returns the output vectors (rows ordered lane-major: lane b, step t at
        row ``b * W + t``) with width ``item_embed_dim``; ``state`` is advanced.
        """
        c = self.config
        P = self.params
        W, B = len(slices), slices[0].size
        stack = lambda key: np.stack([getattr(s, key) for s in slices])  # noqa: E731  (W x B)
        ids, bins, users = stack("input_ids"), stack("time_bin_ids"), stack("user_ids")
        active = stack("active_mask")
        # exhausted lanes restart every step so their state never grows
        reset = stack("reset_mask") | ~active
        keep = ~reset
        drop = (c.dropout if dropout is None else dropout) if train else 0.0

        x = g.embedding(P["item_embed"], ids, "item_embed")
        if c.variant == "time_cat":
            x = g.concat([x, g.embedding(P["time_embed"], bins, "time_embed")], axis=2)
        x = g.dropout(x, drop, rng, train)
        hs, h_last, c_last = self._run_rnn(g, "rnn_item", x, state.h_item, state.c_item, keep)
        H = g.stack(hs, axis=1)  # B x W x d_h
        state.h_item = np.array(h_last.data if isinstance(h_last, Tensor) else h_last)
        if c.cell == "lstm":
            state.c_item = np.array(c_last.data if isinstance(c_last, Tensor) else c_last)

        d_h = c.hidden_dim
        if c.attention is not None:
            if c.attention == "time":
                xt = g.dropout(g.embedding(P["time_embed"], bins, "time_embed"), drop, rng, train)
                hts, ht_last, ct_last = self._run_rnn(g, "rnn_time", xt, state.h_time, state.c_time, keep)
                state.h_time = np.array(ht_last.data)
                if c.cell == "lstm":
                    state.c_time = np.array(ct_last.data)
                src = g.stack(hts, axis=1)
            else:
                src = H
            p = g.tanh(g.add(g.einsum("bwd,de->bwe", src, P["att.W_s"]), P["att.b_s"]))
            if c.attention == "time":
                s = g.sum(g.mul(p, H), axis=2)
            else:
                eu = g.embedding(P["user_embed"], users.T, "user_embed")  # B x W x d_u
                if "att.W_u" in P:
                    eu = g.einsum("bwu,ud->bwd", eu, P["att.W_u"])
                s = g.sum(g.mul(p, eu), axis=2)
            Q = self._lane_attention(g, H, s, state, reset.T)
        else:
            Q = H
        out = g.reshape(Q, (B * W, d_h))
        if c.variant in ("user_cat", "time_user"):
            eu = g.embedding(P["user_embed"], users.T.reshape(-1), "user_embed")
            out = fuse_user_cat(g, out, eu, P["fuse.W"], P["fuse.b"])
        if "out.W" in P:
            out = g.matmul(out, P["out.W"])
        return out

    def _lane_attention(self, g: Graph, H: Tensor, s: Tensor, state: LaneState, reset: np.ndarray) -> Tensor:
        """Causal attention per lane over the current session's steps.

        Steps from earlier windows come from the lane cache (constants)."""
        B, W, d = H.shape
        C = int(state.att_len.max()) if state.att_len.size else 0
        seg = np.cumsum(reset, axis=1)  # B x W; 0 = continues the cached session
        tri = np.arange(W)[None, None, :] <= np.arange(W)[None, :, None]
        win_mask = tri & (seg[:, None, :] == seg[:, :, None])
        if C:
            cache_mask = (seg[:, :, None] == 0) & (np.arange(C)[None, None, :] < state.att_len[:, None, None])
            mask = np.concatenate([cache_mask, win_mask], axis=2)
            keys = g.concat([g.const(state.att_keys[:, :C]), H], axis=1)
            ks = g.concat([g.const(state.att_scores[:, :C]), s], axis=1)
        else:
            mask, keys, ks = win_mask, H, s
        K = keys.shape[1]
        scores = g.broadcast_to(g.reshape(ks, (B, 1, K)), (B, W, K))
        alpha = g.masked_softmax(scores, mask, zero_fill=self.config.attention_zero_fill)
        self._update_cache(state, H.data, s.data, seg)
        return g.einsum("bwk,bkd->bwd", alpha, keys)

    @staticmethod
    def _update_cache(state: LaneState, H: np.ndarray, s: np.ndarray, seg: np.ndarray) -> None:
        B, W, d = H.shape
        last = seg[:, -1]
        for b in range(B):
            sel = np.nonzero(seg[b] == last[b])[0]
            start = int(state.att_len[b]) if last[b] == 0 else 0
            need = start + sel.size
            if need > state.att_keys.shape[1]:
                cap = max(need, 2 * state.att_keys.shape[1])
                pad = cap - state.att_keys.shape[1]
                state.att_keys = np.concatenate([state.att_keys, np.zeros((B, pad, d), state.att_keys.dtype)], axis=1)
                state.att_scores = np.concatenate([state.att_scores, np.zeros((B, pad), state.att_scores.dtype)], axis=1)
            state.att_keys[b, start:need] = H[b, sel]
            state.att_scores[b, start:need] = s[b, sel]
            state.att_len[b] = need

    # -- scoring --------------------------------------------------------
    def dev_term(self, users: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
        delta = np.asarray(timestamps, dtype=np.float64) / 86400.0 - self.user_mean_day[users]
        return np.sign(delta) * np.abs(delta) ** self.config.dev_beta

    def score(
        self,
        g: Graph,
        out: Tensor,
        candidates,
        users: np.ndarray,
        bins: np.ndarray,
        timestamps: np.ndarray,
    ) -> Tensor:
        """Raw scores ``out . e_k`` plus enabled bias terms.

        ``candidates`` is either one id list shared by all rows (-> R x k) or a
        per-row R x k id matrix.
        """
        c = self.config
        P = self.params
        cand = np.asarray(candidates, dtype=np.int64)
        R = out.shape[0]
        if out.shape[1] != c.item_embed_dim:
            raise DimensionError(f"output width {out.shape[1]} != item embedding width {c.item_embed_dim}")
        users = np.asarray(users, dtype=np.int64).reshape(R)
        bins = np.asarray(bins, dtype=np.int64).reshape(R)
        if cand.ndim == 1:
            E = g.embedding(P["item_embed"], cand, "item_embed")
            sc = g.matmul(out, g.transpose(E))
        else:
            E = g.embedding(P["item_embed"], cand, "item_embed")
            sc = g.einsum("rd,rkd->rk", out, E)
        col = lambda t: g.reshape(t, (R, 1))  # noqa: E731
        if c.item_bias:
            sc = g.add(sc, g.embedding(P["bias.item"], cand, "bias.item"))
        if c.item_time_bias:
            T = c.num_time_bins
            if c.item_time_full_table:
                flat = g.reshape(P["bias.item_time"], (c.num_items * T,))
                idx = (cand[None, :] if cand.ndim == 1 else cand) * T + bins[:, None]
                sc = g.add(sc, g.embedding(flat, idx, "bias.item_time"))
            else:
                fi = g.embedding(P["bias.item_factor"], cand, "bias.item_factor")
                ft = col(g.embedding(P["bias.bin_factor"], bins, "bias.bin_factor"))
                sc = g.add(sc, g.add(g.mul(fi, ft), col(g.embedding(P["bias.bin"], bins, "bias.bin"))))
        if c.global_bias:
            sc = g.add(sc, P["bias.global"])
        if c.user_bias:
            sc = g.add(sc, col(g.embedding(P["bias.user"], users, "bias.user")))
        if c.user_dev:
            dev = g.const(self.dev_term(users, timestamps).reshape(R, 1))
            sc = g.add(sc, g.mul(col(g.embedding(P["bias.user_dev_scale"], users, "bias.user_dev_scale")), dev))
        return sc

    def full_scores(self, g: Graph, out: Tensor, users, bins, timestamps) -> Tensor:
        return self.score(g, out, np.arange(self.config.num_items), users, bins, timestamps)

    # -- convenience ----------------------------------------------------
    def forward_variant(self, g: Graph, sessions, train: bool = False, rng=None) -> Tensor:
        """Full-vocabulary scores for every step of the given sessions.

        Each session occupies one lane; all steps run in one window so the
        gradients are exact.  Rows are lane-major (session b, step t).
        """
        slices = sessions_to_window(sessions)
        state = self.new_state(len(sessions))
        out = self.forward_window(g, slices, state, train=train, rng=rng)
        u, bn, ts = (np.stack([getattr(s, k) for s in slices], 1).reshape(-1) for k in ("user_ids", "time_bin_ids", "timestamps"))
        return self.full_scores(g, out, u, bn, ts)


def sessions_to_window(sessions) -> list[BatchSlice]:
    """One slice per step with each session in its own lane (shorter ones
    padded with inactive steps)."""
    B = len(sessions)
    W = max(len(s.items) - 1 for s in sessions)
    out = []
    for t in range(W):
        inp = np.zeros(B, np.int64)
        tgt = np.zeros(B, np.int64)
        bins = np.zeros(B, np.int64)
        users = np.zeros(B, np.int64)
        ts = np.zeros(B, np.int64)
        act = np.zeros(B, bool)
        for b, s in enumerate(sessions):
            if t < len(s.items) - 1:
                inp[b], tgt[b] = s.items[t], s.items[t + 1]
                bins[b] = s.time_bins[t] if s.time_bins else 0
                users[b] = s.user
                ts[b] = s.timestamps[t]
                act[b] = True
        out.append(BatchSlice(inp, tgt, bins, users, np.full(B, t == 0), act, ts))
    return out


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model: ASARSModel, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "config": model.config.to_dict(),
        "user_mean_day": model.user_mean_day.tolist(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ASARSModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(
            f"{path}: incompatible checkpoint (magic {raw[:len(CKPT_MAGIC)]!r}, expected {CKPT_MAGIC!r})"
        )
    pos = len(CKPT_MAGIC)
    (hl,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hl].decode("utf-8"))
    pos += hl
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + ln].decode("utf-8")
        pos += ln
        (nd,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{nd}I", raw, pos)
        pos += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        params[name] = arr
    config = ModelConfig(**header["config"])
    model = ASARSModel.__new__(ASARSModel)
    model.config = config
    model.user_mean_day = np.asarray(header["user_mean_day"], dtype=np.float64)
    dt = get_precision()
    model.params = {k: Tensor(v.astype(dt), requires_grad=True, name=k, dtype=dt) for k, v in params.items()}
    return model, header.get("extra", {})
