"""Pre-norm Transformer encoder (no positional encoding) and the classification head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import EVAL, MLP3, Context, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor, matmul, transpose


@dataclass
class EncoderConfig:
    d_model: int = 64
    depth: int = 3
    heads: int = 4
    d_ff: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_ff is None:
            self.d_ff = 2 * self.d_model

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * (1.0 / math.sqrt(d_k))
    weights = F.softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Per-head projections are column blocks of ``wq``/``wk``/``wv``; ``wo`` mixes the concat."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.wk = Linear(d_model, d_model, rng, bias=False)
        self.wv = Linear(d_model, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, t: Tensor) -> Tensor:
        *lead, n_tok, d = t.shape
        dk = d // self.heads
        t = t.reshape(*lead, n_tok, self.heads, dk)
        nd = t.ndim
        return t.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        heads = scaled_dot_attention(q, k, v)
        nd = heads.ndim
        merged = heads.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)
        merged = merged.reshape(*x.shape)
        return self.wo(merged)


class EncoderBlock(Module):
    """x + MHA(LN(x)), then + FFN(LN(.)) with FFN = linear, GELU, linear."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.dropout = cfg.dropout
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor, ctx: Context = EVAL, site: int = 0) -> Tensor:
        h = F.dropout(self.attn(self.ln1(x)), self.dropout, ctx.rng(site), ctx.training)
        x = x + h
        h = self.ff2(F.gelu(self.ff1(self.ln2(x))))
        h = F.dropout(h, self.dropout, ctx.rng(site + 1), ctx.training)
        return x + h


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, site_offset: int = 0):
        super().__init__()
        self.cfg = cfg
        self.site_offset = site_offset
        self.blocks = _Blocks([EncoderBlock(cfg, rng) for _ in range(cfg.depth)])

    def __call__(self, tokens, ctx: Context = EVAL) -> Tensor:
        x = getattr(tokens, "tokens", tokens)
        for i, block in enumerate(self.blocks):
            x = block(x, ctx, site=self.site_offset + 2 * i)
        return x


class _Blocks(Module):
    def __init__(self, blocks):
        super().__init__()
        self._list = list(blocks)
        for i, b in enumerate(self._list):
            setattr(self, str(i), b)

    def __iter__(self):
        return iter(self._list)

    def __len__(self) -> int:
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class ClassifierHead(Module):
    """Mean-pool over tokens, then a three-layer MLP to class logits."""

    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator, d_hidden: int | None = None):
        super().__init__()
        self.mlp = MLP3(d_model, d_hidden or d_model, n_classes, rng)

    def __call__(self, encoded: Tensor) -> Tensor:
        return self.mlp(F.mean_pool(encoded, axis=-2))


def predict(logits) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest index."""
    return np.argmax(np.asarray(getattr(logits, "data", logits)), axis=-1)
