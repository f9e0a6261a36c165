"""Noam-style transformer building blocks.

RMSNorm, SwiGLU feed-forward, rotary position embeddings, grouped-query
attention, and the sequential pre-norm block (attention and FFN applied one
after the other, not in parallel from the same normalized input).

All functions are pure over tensors and accept either a single sequence
(seq, d_model) or a batch (batch, seq, d_model).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, matmul, softmax


@dataclass
class RmsNormParams:
    g: Tensor  # gain, shape (d_model,)
    eps: float = 1e-6

    def __post_init__(self):
        if self.g.ndim != 1:
            raise ConfigError(f"rmsnorm gain must be 1-D, got shape {self.g.shape}")
        # eps == 0 is allowed (pure scale invariance); all-zero input then
        # surfaces as a NumericError instead of being silently damped
        if self.eps < 0:
            raise ConfigError(f"rmsnorm eps must be non-negative, got {self.eps}")


@dataclass
class SwigluParams:
    w_gate: Tensor  # (d_model, d_ff)
    w_up: Tensor    # (d_model, d_ff)
    w_down: Tensor  # (d_ff, d_model)


@dataclass
class RopeConfig:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ConfigError(f"rope head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 0:
            raise ConfigError(f"rope base must be positive, got {self.base}")

    def freqs(self) -> np.ndarray:
        """Per-pair angular frequencies base^(-2i/head_dim), i in [0, head_dim/2)."""
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


@dataclass
class GqaParams:
    w_q: Tensor   # (d_model, H * d_head)
    w_k: Tensor   # (d_model, G * d_head)
    w_v: Tensor   # (d_model, G * d_head)
    w_o: Tensor   # (H * d_head, d_model)
    n_heads: int
    n_groups: int

    def __post_init__(self):
        if self.n_heads <= 0 or self.n_groups <= 0 or self.n_heads % self.n_groups != 0:
            raise ConfigError(
                f"query heads ({self.n_heads}) must be a positive multiple of "
                f"kv groups ({self.n_groups})")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.n_heads


@dataclass
class BlockParams:
    attn_norm: RmsNormParams
    attn: GqaParams
    ffn_norm: RmsNormParams
    ffn: SwigluParams


def default_ffn_dim(d_model: int) -> int:
    """Parameter-neutral gated-FFN width: 8/3 * d_model rounded up to a multiple of 8."""
    raw = int(math.ceil(8.0 * d_model / 3.0))
    return ((raw + 7) // 8) * 8


def rmsnorm(x: Tensor, p: RmsNormParams) -> Tensor:
    """y_i = g_i * x_i / sqrt(mean_j x_j^2 + eps), per position over the last axis."""
    d = x.shape[-1]
    if d != p.g.shape[0]:
        raise ShapeError(f"rmsnorm: last axis {d} != gain length {p.g.shape[0]}")
    ms = x.square().mean(axis=-1, keepdims=True)
    # 1/sqrt(z) as exp(-log(z)/2); expanded back to (..., d) by a ones matmul
    inv = ((ms + p.eps).log() * -0.5).exp()
    ones_row = Tensor(np.ones((1, d)), dtype=x.dtype)
    return x * matmul(inv, ones_row) * p.g


def swiglu_ffn(x: Tensor, p: SwigluParams) -> Tensor:
    """y = W_down (silu(W_gate x) * (W_up x))."""
    return matmul(matmul(x, p.w_gate).silu() * matmul(x, p.w_up), p.w_down)


def rope_apply(x: Tensor, positions: np.ndarray, cfg: RopeConfig) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) by angle position * freq_i.

    x has shape (..., seq, heads, head_dim); positions is an integer vector of
    length seq giving the absolute position of each sequence slot.
    """
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"rope: head_dim {cfg.head_dim} != input last axis {x.shape[-1]}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[-3]:
        raise ShapeError(f"rope: positions {positions.shape} do not match sequence axis of {x.shape}")
    if positions.size and positions.min() < 0:
        raise ConfigError("rope: positions must be non-negative")

    angles = positions[:, None].astype(np.float64) * cfg.freqs()[None, :]  # (seq, hd/2)
    half = x.shape[:-3] + (x.shape[-3], x.shape[-2], cfg.head_dim // 2)
    cos = Tensor(np.broadcast_to(np.cos(angles)[..., :, None, :], half).copy(), dtype=x.dtype)
    sin = Tensor(np.broadcast_to(np.sin(angles)[..., :, None, :], half).copy(), dtype=x.dtype)

    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    paired = concat([r_even.reshape(half + (1,)), r_odd.reshape(half + (1,))], axis=-1)
    return paired.reshape(x.shape)


def gqa_project(x: Tensor, p: GqaParams, rope: RopeConfig | None = None,
                positions: np.ndarray | None = None):
    """Project x to rotated per-head queries and per-group keys/values."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"gqa_attention: input must be 2-D or 3-D, got {x.shape}")
    seq = x.shape[-2]
    hd = p.head_dim
    if positions is None:
        positions = np.arange(seq)
    q = matmul(x, p.w_q).reshape(x.shape[:-1] + (p.n_heads, hd))
    k = matmul(x, p.w_k).reshape(x.shape[:-1] + (p.n_groups, hd))
    v = matmul(x, p.w_v).reshape(x.shape[:-1] + (p.n_groups, hd))
    if rope is not None:
        q = rope_apply(q, positions, rope)
        k = rope_apply(k, positions, rope)
    return q, k, v


def gqa_core(q: Tensor, k: Tensor, v: Tensor, p: GqaParams,
             causal: bool = True, query_offset: int = 0) -> Tensor:
    """Attention from projected q/k/v; query i sits at absolute key position
    query_offset + i (nonzero offset is the append-only KV-cache path)."""
    n_q = q.shape[-3]
    n_k = k.shape[-3]
    hd = p.head_dim
    heads_per_group = p.n_heads // p.n_groups

    mask = None
    if causal:
        mask = np.arange(n_k)[None, :] <= (query_offset + np.arange(n_q))[:, None]
        if q.ndim == 4:
            mask = np.broadcast_to(mask, (q.shape[0], n_q, n_k))

    scale = 1.0 / math.sqrt(hd)
    head_outs = []
    for h in range(p.n_heads):
        g = h // heads_per_group
        q_h = q[..., h, :]                       # (..., n_q, hd)
        k_g = k[..., g, :]
        v_g = v[..., g, :]
        scores = matmul(q_h, k_g.transpose_last()) * scale
        probs = softmax(scores, mask=mask)
        head_outs.append(matmul(probs, v_g))
    return matmul(concat(head_outs, axis=-1), p.w_o)


def gqa_attention(x: Tensor, p: GqaParams, rope: RopeConfig | None = None,
                  causal: bool = True, positions: np.ndarray | None = None) -> Tensor:
    """Grouped-query attention over (..., seq, d_model).

    Each of the G key/value groups serves H/G query heads. RoPE (when given)
    rotates queries and keys before scores; scores are scaled by
    1/sqrt(d_head); the causal mask gives future positions exactly zero
    attention weight; head outputs are concatenated and projected by w_o.
    """
    q, k, v = gqa_project(x, p, rope, positions)
    return gqa_core(q, k, v, p, causal=causal)


def transformer_block(x: Tensor, p: BlockParams, rope: RopeConfig | None = None,
                      causal: bool = True, positions: np.ndarray | None = None) -> Tensor:
    """Sequential pre-norm residual block: attention first, then the FFN on its output."""
    h = x + gqa_attention(rmsnorm(x, p.attn_norm), p.attn, rope, causal, positions)
    return h + swiglu_ffn(rmsnorm(h, p.ffn_norm), p.ffn)


def gqa_param_count(d_model: int, n_heads: int, n_groups: int) -> int:
    """Attention parameter count; strictly decreasing in n_groups for fixed heads."""
    d_head = d_model // n_heads
    return d_model * n_heads * d_head * 2 + d_model * n_groups * d_head * 2


# -- initialization ------------------------------------------------------------------


def init_rmsnorm(d_model: int, dtype, eps: float = 1e-6) -> RmsNormParams:
    return RmsNormParams(Tensor(np.ones(d_model), requires_grad=True, dtype=dtype), eps=eps)


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def init_block(d_model: int, n_heads: int, n_groups: int, d_ff: int, n_layers: int,
               rng: np.random.Generator, dtype) -> BlockParams:
    """Depth-scaled init: residual-output projections get std 0.02/sqrt(2*n_layers)."""
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    std = 0.02
    res_std = 0.02 / math.sqrt(2.0 * n_layers)
    attn = GqaParams(
        w_q=_normal(rng, (d_model, n_heads * d_head), std, dtype),
        w_k=_normal(rng, (d_model, n_groups * d_head), std, dtype),
        w_v=_normal(rng, (d_model, n_groups * d_head), std, dtype),
        w_o=_normal(rng, (n_heads * d_head, d_model), res_std, dtype),
        n_heads=n_heads, n_groups=n_groups)
    ffn = SwigluParams(
        w_gate=_normal(rng, (d_model, d_ff), std, dtype),
        w_up=_normal(rng, (d_model, d_ff), std, dtype),
        w_down=_normal(rng, (d_ff, d_model), res_std, dtype))
    return BlockParams(attn_norm=init_rmsnorm(d_model, dtype),
                       attn=attn, ffn_norm=init_rmsnorm(d_model, dtype), ffn=ffn)
