"""Temporal, neighborhood and full spatial self-attention over patch tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .layers import Linear, Module, _rng, param
from .tensorcore import Tensor


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    radius: int = 3
    mode: str = "neighborhood"   # or "full"

    def validate(self, dim: int) -> None:
        if self.heads < 1 or dim % self.heads:
            raise AttentionError(f"heads={self.heads} must divide embedding dim {dim}")
        if self.radius < 0:
            raise AttentionError(f"neighborhood radius must be >= 0, got {self.radius}")
        if self.mode not in ("neighborhood", "full"):
            raise AttentionError(f"unknown attention mode {self.mode!r}")


@lru_cache(maxsize=64)
def neighbor_table(Hp: int, Wp: int, radius: int):
    """Key indices, validity mask and offset ids of every query's clamped window.

    Returns ``(idx, valid, offsets)`` with idx/valid of shape (N, K), K = (2r+1)^2.
    Offsets are enumerated row-major over (di, dj) in [-r, r]^2; positions that
    fall off the grid are marked invalid (their index points at the query).
    """
    if radius < 0:
        raise AttentionError(f"neighborhood radius must be >= 0, got {radius}")
    span = np.arange(-radius, radius + 1)
    di, dj = np.meshgrid(span, span, indexing="ij")
    di, dj = di.ravel(), dj.ravel()
    rows, cols = np.divmod(np.arange(Hp * Wp), Wp)
    nr = rows[:, None] + di[None, :]
    nc = cols[:, None] + dj[None, :]
    valid = (nr >= 0) & (nr < Hp) & (nc >= 0) & (nc < Wp)
    idx = np.where(valid, nr * Wp + nc, np.arange(Hp * Wp)[:, None])
    for arr in (idx, valid):
        arr.setflags(write=False)
    return idx, valid, np.stack([di, dj], axis=1)


def mirrored_offsets(radius: int) -> np.ndarray:
    """Permutation of offset ids under a left-right mirror (dj -> -dj)."""
    n = 2 * radius + 1
    k = np.arange(n * n).reshape(n, n)
    return k[:, ::-1].ravel()


class _SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng=None):
        rng = _rng(rng)
        if heads < 1 or dim % heads:
            raise AttentionError(f"heads={heads} must divide embedding dim {dim}")
        self.dim = dim
        self.heads = heads
        # no key bias: it shifts every logit of a query equally and cancels in softmax
        self.qkv = Linear(dim, 3 * dim, rng, bias=False)
        self.q_bias = param(np.zeros(dim))
        self.v_bias = param(np.zeros(dim))
        self.proj = Linear(dim, dim, rng)

    def _split(self, t: Tensor, lead: tuple[int, ...], n: int) -> Tensor:
        # (..., n, D) -> (..., heads, n, hd)
        hd = self.dim // self.heads
        t = t.reshape(lead + (n, self.heads, hd))
        nl = len(lead)
        axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        return t.transpose(axes)

    def _merge(self, t: Tensor, lead: tuple[int, ...], n: int) -> Tensor:
        nl = len(lead)
        axes = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        return t.transpose(axes).reshape(lead + (n, self.dim))

    def _qkv(self, x: Tensor, qk_input: Tensor | None = None):
        lead, n = x.shape[:-2], x.shape[-2]
        d = self.dim
        if qk_input is None:
            qkv = self.qkv(x)
            q, k, v = (qkv[..., i * d:(i + 1) * d] for i in range(3))
        else:
            w = self.qkv.weight
            qk = qk_input @ w[:, :2 * d]
            q, k = qk[..., :d], qk[..., d:]
            v = x @ w[:, 2 * d:]
        q = q + self.q_bias
        v = v + self.v_bias
        return (self._split(q, lead, n), self._split(k, lead, n), self._split(v, lead, n)), lead, n

    def _dense(self, x: Tensor, qk_input: Tensor | None = None) -> Tensor:
        (q, k, v), lead, n = self._qkv(x, qk_input)
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        nd = q.ndim
        kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
        attn = tc.softmax((q @ kt) * scale, axis=-1)
        return self.proj(self._merge(attn @ v, lead, n))


class FullAttention(_SelfAttention):
    """Global scaled dot-product attention over all tokens of a frame."""

    def forward(self, x: Tensor) -> Tensor:
        """``x``: (..., Hp, Wp, D)."""
        x = tc.as_tensor(x)
        Hp, Wp, D = x.shape[-3:]
        lead = x.shape[:-3]
        out = self._dense(x.reshape(lead + (Hp * Wp, D)))
        return out.reshape(lead + (Hp, Wp, D))


class NeighborhoodAttention(_SelfAttention):
    """Each query attends to keys within Chebyshev distance ``radius``.

    Windows are clamped at the grid edge, so border queries see fewer keys.
    A learned bias per head and relative offset is added to the logits.
    """

    def __init__(self, dim: int, heads: int, radius: int, rng=None):
        if radius < 0:
            raise AttentionError(f"neighborhood radius must be >= 0, got {radius}")
        super().__init__(dim, heads, rng)
        self.radius = radius
        self.pos_bias = param(np.zeros((heads, (2 * radius + 1) ** 2)))

    def forward(self, x: Tensor) -> Tensor:
        x = tc.as_tensor(x)
        Hp, Wp, D = x.shape[-3:]
        lead = x.shape[:-3]
        n = Hp * Wp
        (q, k, v), lead2, _ = self._qkv(x.reshape(lead + (n, D)))
        idx, valid, _ = neighbor_table(Hp, Wp, self.radius)
        K = idx.shape[1]
        hd = self.dim // self.heads
        axis = q.ndim - 2
        k_nb = tc.take(k, idx, axis=axis)          # (..., h, n, K, hd)
        v_nb = tc.take(v, idx, axis=axis)
        nd = k_nb.ndim
        kt = k_nb.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
        qe = q.reshape(q.shape[:-1] + (1, hd))
        logits = (qe @ kt).reshape(q.shape[:-1] + (K,)) * (1.0 / math.sqrt(hd))
        logits = logits + self.pos_bias.reshape((self.heads, 1, K))
        attn = tc.softmax(logits, axis=-1, mask=valid)
        out = (attn.reshape(attn.shape[:-1] + (1, K)) @ v_nb).reshape(q.shape)
        out = self.proj(self._merge(out, lead2, n))
        return out.reshape(lead + (Hp, Wp, D))


class TemporalAttention(_SelfAttention):
    """Full attention across the F history frames at each patch position.

    Learned frame embeddings are added to the query/key input only, so
    identical frames give identical outputs.
    """

    def __init__(self, dim: int, heads: int, frames: int, rng=None):
        rng = _rng(rng)
        super().__init__(dim, heads, rng)
        self.frames = frames
        self.frame_embed = param(rng.normal(0.0, 0.02, size=(frames, dim)))

    def forward(self, x: Tensor) -> Tensor:
        """``x``: (..., F, Hp, Wp, D)."""
        x = tc.as_tensor(x)
        F, Hp, Wp, D = x.shape[-4:]
        if F > self.frames:
            raise AttentionError(f"{F} frames exceed the {self.frames} learned frame embeddings")
        lead = x.shape[:-4]
        nl = len(lead)
        # (..., Hp*Wp, F, D)
        xt = x.reshape(lead + (F, Hp * Wp, D)).transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))
        emb = self.frame_embed[self.frames - F:]
        out = self._dense(xt, xt + emb.reshape((F, D)))
        out = out.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))
        return out.reshape(lead + (F, Hp, Wp, D))


def make_spatial(dim: int, cfg: AttentionConfig, rng=None) -> Module:
    cfg.validate(dim)
    if cfg.mode == "full":
        return FullAttention(dim, cfg.heads, rng)
    return NeighborhoodAttention(dim, cfg.heads, cfg.radius, rng)


def attention_cost(Hp: int, Wp: int, D: int, heads: int, r: int, mode: str, clamped: bool = False) -> dict:
    """Analytic multiply-add counts (2 flops each) for one spatial attention layer.

    ``keys`` per query is N for full attention and (2r+1)^2 for neighborhood
    attention (the exact clamped count when ``clamped``).
    """
    N = Hp * Wp
    if mode == "full":
        keys_total = N * N
    elif mode == "neighborhood":
        if r < 0:
            raise AttentionError("radius must be >= 0")
        if clamped:
            rows = np.minimum(np.arange(Hp) + r, Hp - 1) - np.maximum(np.arange(Hp) - r, 0) + 1
            cols = np.minimum(np.arange(Wp) + r, Wp - 1) - np.maximum(np.arange(Wp) - r, 0) + 1
            keys_total = int(rows.sum()) * int(cols.sum())
        else:
            keys_total = N * (2 * r + 1) ** 2
    else:
        raise AttentionError(f"unknown attention mode {mode!r}")
    score_flops = 2 * keys_total * D + 2 * keys_total * D   # QK^T and weights @ V
    projection_flops = 8 * N * D * D
    return {
        "tokens": N,
        "score_flops": score_flops,
        "projection_flops": projection_flops,
        "flops": score_flops + projection_flops,
        "peak_score_memory": keys_total,
        "heads": heads,
    }
