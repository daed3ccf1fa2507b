"""Reference multi-head self-attention with a hand-written backward pass.

Tokens are rows: ``Q = x @ W_Q`` and so on, ``out = concat_heads(A V) @ W_O``
with ``A = softmax(Q_h K_h^T / sqrt(head_dim))``.  No bias, norm or
positional encoding.  The block kernel here is shared with the windowed
attention in :mod:`t3attn.t3`, which feeds it batches of gathered blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .tensorlite import ShapeError, bmm, matmul, randn, softmax_rows


@dataclass(frozen=True)
class ModelDims:
    channels: int
    heads: int = 1
    ffn_width: int = 0
    depth: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1:
            raise ShapeError(f"channels and heads must be >= 1: {self}")
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.ffn_width < 0 or self.depth < 0:
            raise ShapeError(f"ffn_width and depth must be >= 0: {self}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class AttnWeights:
    """Projection matrices shared by full attention and every windowed block."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    NAMES = ("w_q", "w_k", "w_v", "w_o")

    def __iter__(self):
        return iter((self.w_q, self.w_k, self.w_v, self.w_o))

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.w_q.dtype

    @classmethod
    def random(cls, channels: int, gen: np.random.Generator, dtype: str = "f32", scale: float | None = None):
        scale = 1.0 / math.sqrt(channels) if scale is None else scale
        return cls(*(randn(gen, (channels, channels), dtype, scale) for _ in range(4)))

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32):
        return cls(*(np.zeros((channels, channels), dtype=dtype) for _ in range(4)))

    def astype(self, dtype) -> "AttnWeights":
        return AttnWeights(*(np.asarray(w, dtype=dtype) for w in self))

    def copy(self) -> "AttnWeights":
        return AttnWeights(*(w.copy() for w in self))

    def map(self, fn, other: "AttnWeights | None" = None) -> "AttnWeights":
        if other is None:
            return AttnWeights(*(fn(w) for w in self))
        return AttnWeights(*(fn(a, b) for a, b in zip(self, other)))

    def check(self, dims: ModelDims) -> None:
        C = dims.channels
        for f in fields(self):
            w = getattr(self, f.name)
            if w.shape != (C, C):
                raise ShapeError(f"{f.name} has shape {w.shape}, expected {(C, C)}")
            if w.dtype != self.w_q.dtype:
                raise ShapeError(f"{f.name} dtype {w.dtype} differs from w_q dtype {self.w_q.dtype}")
            if not np.isfinite(w).all():
                raise ShapeError(f"{f.name} has non-finite entries")


def _check_input(x: np.ndarray, w: AttnWeights, dims: ModelDims) -> None:
    w.check(dims)
    if x.ndim != 2 or x.shape[1] != dims.channels or x.shape[0] < 1:
        raise ShapeError(f"input shape {x.shape} does not match (L, {dims.channels})")
    if x.dtype != w.dtype:
        raise ShapeError(f"input dtype {x.dtype} differs from weight dtype {w.dtype}")


# --------------------------------------------------------------------------
# block kernel: (B, n, C) batches, heads processed one at a time


def block_attention(q, k, v, heads: int, keep_probs: bool = False):
    """Attention inside each of ``B`` independent blocks.

    Returns ``(out, probs)``; ``probs`` is a per-head list of ``(B, n, n)``
    matrices when ``keep_probs`` is set, else ``None``.
    """
    B, n, C = q.shape
    d = C // heads
    scale = q.dtype.type(1.0 / math.sqrt(d))
    out = np.empty_like(q)
    probs = [] if keep_probs else None
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        qh, kh, vh = q[:, :, sl], k[:, :, sl], v[:, :, sl]
        logits = bmm(qh, kh.transpose(0, 2, 1), tag="attn") * scale
        p = softmax_rows(logits)
        out[:, :, sl] = bmm(p, vh, tag="attn")
        if keep_probs:
            probs.append(p)
    return out, probs


def block_attention_backward(q, k, v, probs, heads: int, d_out):
    B, n, C = q.shape
    d = C // heads
    scale = q.dtype.type(1.0 / math.sqrt(d))
    dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        qh, kh, vh = q[:, :, sl], k[:, :, sl], v[:, :, sl]
        p, do = probs[hd], d_out[:, :, sl]
        dv[:, :, sl] = bmm(p.transpose(0, 2, 1), do, tag="grad")
        dp = bmm(do, vh.transpose(0, 2, 1), tag="grad")
        # softmax JVP: dS = P * (dP - rowsum(dP * P))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq[:, :, sl] = bmm(ds, kh, tag="grad")
        dk[:, :, sl] = bmm(ds.transpose(0, 2, 1), qh, tag="grad")
    return dq, dk, dv


def project_qkv(x, w: AttnWeights):
    return (
        matmul(x, w.w_q, tag="proj"),
        matmul(x, w.w_k, tag="proj"),
        matmul(x, w.w_v, tag="proj"),
    )


def project_qkv_backward(x, w: AttnWeights, dq, dk, dv):
    """Gradients of ``(q, k, v) = x @ (W_Q, W_K, W_V)``; returns ``(dx, dW_Q, dW_K, dW_V)``."""
    xt = x.T
    dx = (
        matmul(dq, w.w_q.T, tag="grad")
        + matmul(dk, w.w_k.T, tag="grad")
        + matmul(dv, w.w_v.T, tag="grad")
    )
    return dx, matmul(xt, dq, tag="grad"), matmul(xt, dk, tag="grad"), matmul(xt, dv, tag="grad")


# --------------------------------------------------------------------------
# full attention


def full_attention_forward(x: np.ndarray, w: AttnWeights, dims: ModelDims) -> np.ndarray:
    _check_input(x, w, dims)
    q, k, v = project_qkv(x, w)
    o, _ = block_attention(q[None], k[None], v[None], dims.heads)
    return matmul(o[0], w.w_o, tag="proj")


def full_attention_backward(x, w: AttnWeights, dims: ModelDims, grad_out):
    """Returns ``(grad_x, AttnWeights of parameter gradients)``."""
    _check_input(x, w, dims)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} differs from output shape {x.shape}")
    q, k, v = project_qkv(x, w)
    o, probs = block_attention(q[None], k[None], v[None], dims.heads, keep_probs=True)
    o = o[0]
    d_wo = matmul(o.T, grad_out, tag="grad")
    d_o = matmul(grad_out, w.w_o.T, tag="grad")
    dq, dk, dv = block_attention_backward(q[None], k[None], v[None], probs, dims.heads, d_o[None])
    dx, d_wq, d_wk, d_wv = project_qkv_backward(x, w, dq[0], dk[0], dv[0])
    return dx, AttnWeights(d_wq, d_wk, d_wv, d_wo)
