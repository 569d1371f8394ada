"""Sparse mixture-of-experts feed-forward layer with top-k routing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .layers import MLP, Linear, Module, _rng
from .tensorcore import Tensor


@dataclass(frozen=True)
class MoeConfig:
    E: int = 8
    k: int = 2
    expert_hidden: int = 128
    alpha: float = 0.01
    renormalize: bool = True

    def __post_init__(self):
        if not 1 <= self.k <= self.E:
            raise ValueError(f"need 1 <= k <= E, got k={self.k}, E={self.E}")


@dataclass
class RoutingRecord:
    """Routing decisions for one batch of T tokens.

    ``probs`` (T, E) and ``weights`` (T, k) stay on the tape; ``indices`` (T, k)
    are hard choices. ``positions`` optionally maps tokens to (row, col) patches.
    """

    probs: Tensor
    indices: np.ndarray
    weights: Tensor
    E: int
    k: int
    positions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def f(self) -> np.ndarray:
        """Fraction of dispatched slots per expert."""
        counts = np.bincount(self.indices.ravel(), minlength=self.E)
        return counts / (self.n_tokens * self.k)

    @property
    def p_bar(self) -> Tensor:
        return self.probs.mean(axis=0)

    def subset(self, rows: np.ndarray, positions: np.ndarray | None = None) -> "RoutingRecord":
        rows = np.asarray(rows)
        with tc.no_grad():
            probs = Tensor(self.probs.data[rows])
            weights = Tensor(self.weights.data[rows])
        pos = positions if positions is not None else (
            self.positions[rows] if self.positions is not None else None)
        return RoutingRecord(probs, self.indices[rows], weights, self.E, self.k, pos, dict(self.meta))


class ExpertPool(Module):
    def __init__(self, dim: int, cfg: MoeConfig, rng=None):
        rng = _rng(rng)
        self.router = Linear(dim, cfg.E, rng)
        self.experts = [MLP(dim, cfg.expert_hidden, rng) for _ in range(cfg.E)]


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the smaller index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route(tokens: Tensor, pool: ExpertPool, cfg: MoeConfig, fixed_indices: np.ndarray | None = None,
          positions: np.ndarray | None = None) -> RoutingRecord:
    """Softmax router, top-k selection and combine weights for (T, D) tokens."""
    tokens = tc.as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise tc.ShapeError("route", tokens.shape)
    return route_logits(pool.router(tokens), cfg, fixed_indices, positions)


def route_logits(logits: Tensor, cfg: MoeConfig, fixed_indices: np.ndarray | None = None,
                 positions: np.ndarray | None = None) -> RoutingRecord:
    logits = tc.as_tensor(logits)
    probs = tc.softmax(logits, axis=-1)
    if fixed_indices is None:
        idx = top_k(probs.data, cfg.k)
    else:
        idx = np.asarray(fixed_indices)
        if idx.shape != (probs.shape[0], cfg.k):
            raise tc.ShapeError("route", idx.shape, (probs.shape[0], cfg.k))
    rows = np.arange(probs.shape[0])[:, None]
    w = probs[rows, idx]
    if cfg.renormalize:
        w = w / w.sum(axis=-1, keepdims=True)
    return RoutingRecord(probs, idx, w, cfg.E, cfg.k, positions)


def moe_forward(tokens: Tensor, pool: ExpertPool, record: RoutingRecord) -> Tensor:
    """out(x) = sum_j w_j(x) * Expert_{g_j(x)}(x), evaluating only selected experts."""
    tokens = tc.as_tensor(tokens)
    T, D = tokens.shape
    pieces, rows_all = [], []
    for e, expert in enumerate(pool.experts):
        rows, slots = np.nonzero(record.indices == e)
        if rows.size == 0:
            continue
        y = expert(tokens[rows])
        w = record.weights[rows, slots].reshape((rows.size, 1))
        pieces.append(y * w)
        rows_all.append(rows)
    return tc.scatter_add((T, D), np.concatenate(rows_all), tc.concat(pieces, axis=0))


def load_balance_loss(record: RoutingRecord, cfg: MoeConfig) -> Tensor:
    """alpha * E * sum_e f_e * p_bar_e; only p_bar carries gradient."""
    return (record.p_bar * record.f).sum() * (cfg.alpha * cfg.E)


class MoELayer(Module):
    """Router plus experts; keeps the last routing record for inspection.

    Inside ``freeze_routing`` the first call's expert choices are reused, so
    finite differences see a fixed dispatch.
    """

    def __init__(self, dim: int, cfg: MoeConfig, rng=None):
        self.pool = ExpertPool(dim, cfg, rng)
        self._cfg = cfg
        self._frozen = False
        self._frozen_indices = None
        self._last: RoutingRecord | None = None

    @property
    def cfg(self) -> MoeConfig:
        return self._cfg

    @property
    def last_record(self) -> RoutingRecord | None:
        return self._last

    def set_frozen(self, frozen: bool) -> None:
        self._frozen = frozen
        self._frozen_indices = None

    def forward(self, x: Tensor) -> Tensor:
        lead, D = x.shape[:-1], x.shape[-1]
        flat = x.reshape((-1, D))
        fixed = self._frozen_indices if self._frozen else None
        record = route(flat, self.pool, self._cfg, fixed)
        if self._frozen and self._frozen_indices is None:
            self._frozen_indices = record.indices
        record.meta["lead_shape"] = lead
        self._last = record
        return moe_forward(flat, self.pool, record).reshape(lead + (D,))

    def aux_loss(self) -> Tensor:
        if self._last is None:
            raise RuntimeError("aux_loss needs a forward pass first")
        return load_balance_loss(self._last, self._cfg)


class DenseFFN(Module):
    """Dense MLP ablation with the same call contract as MoELayer."""

    def __init__(self, dim: int, hidden: int, rng=None):
        self.mlp = MLP(dim, hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def occupancy_map(records: list[RoutingRecord], grid_shape: tuple[int, int]) -> np.ndarray:
    """(steps, E, Hp, Wp) masks of patches dispatched to each expert."""
    Hp, Wp = grid_shape
    if not records:
        return np.zeros((0, 0, Hp, Wp), dtype=bool)
    E = records[0].E
    out = np.zeros((len(records), E, Hp, Wp), dtype=bool)
    for s, rec in enumerate(records):
        if rec.positions is None:
            raise ValueError("routing record has no token positions")
        for slot in range(rec.k):
            out[s, rec.indices[:, slot], rec.positions[:, 0], rec.positions[:, 1]] = True
    return out


def write_routing_csv(record: RoutingRecord, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "i", "j", "experts", "weights"])
        for t in range(record.n_tokens):
            i, j = (record.positions[t] if record.positions is not None else (-1, -1))
            experts = " ".join(str(int(e)) for e in record.indices[t])
            weights = " ".join(f"{float(v):.6g}" for v in record.weights.data[t])
            w.writerow([t, int(i), int(j), experts, weights])
