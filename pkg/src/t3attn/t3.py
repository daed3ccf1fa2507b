"""Multi-scale shared-window attention.

Q, K and V are projected once.  For every scale the rows of each block are
gathered, attended with the shared weights, and scattered back; the scale
outputs are combined as ``sum_s w_s * Y_s / Z`` (the plain mean for the
default ``w_s = 1/S``) and only then projected by ``W_O``.
"""

from __future__ import annotations

import math
from dataclasses import InitVar, dataclass

import numpy as np

from .attention import (
    AttnWeights,
    ModelDims,
    _check_input,
    block_attention,
    block_attention_backward,
    project_qkv,
    project_qkv_backward,
)
from .grid import GridDims, LayerConfig
from .tensorlite import ShapeError, matmul


@dataclass(frozen=True)
class T3Layer:
    weights: AttnWeights
    config: LayerConfig
    dims: ModelDims
    grid: GridDims
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool):
        self.weights.check(self.dims)
        if validate:
            self.config.validate(self.grid)

    def coefficients(self) -> list[float]:
        Z = self.config.normalization
        return [w / Z for w in self.config.scale_weights]


def _check(x: np.ndarray, layer: T3Layer) -> None:
    _check_input(x, layer.weights, layer.dims)
    if x.shape[0] != layer.grid.L:
        raise ShapeError(f"input has {x.shape[0]} rows, grid {layer.grid.extents} has L={layer.grid.L}")


def _scatter(blocks: np.ndarray, out_blocks: np.ndarray, L: int) -> np.ndarray:
    y = np.empty((L, out_blocks.shape[-1]), dtype=out_blocks.dtype)
    y[blocks.ravel()] = out_blocks.reshape(-1, out_blocks.shape[-1])
    return y


def t3_aggregate(x: np.ndarray, layer: T3Layer, keep: bool = False):
    """Aggregated pre-``W_O`` features; with ``keep`` also the backward cache."""
    w, heads, L = layer.weights, layer.dims.heads, layer.grid.L
    q, k, v = project_qkv(x, w)
    acc = np.zeros_like(x)
    cache = []
    # fixed order: scales ascending, blocks in plan order
    for plan, c in zip(layer.config.scales, layer.coefficients()):
        idx = plan.blocks
        o, probs = block_attention(q[idx], k[idx], v[idx], heads, keep_probs=keep)
        acc += x.dtype.type(c) * _scatter(idx, o, L)
        if keep:
            cache.append(probs)
    return acc, (q, k, v, cache)


def t3_forward(x: np.ndarray, layer: T3Layer) -> np.ndarray:
    _check(x, layer)
    acc, _ = t3_aggregate(x, layer)
    return matmul(acc, layer.weights.w_o, tag="proj")


def t3_backward(x: np.ndarray, layer: T3Layer, grad_out: np.ndarray):
    """Returns ``(grad_x, AttnWeights of parameter gradients)``.

    Weight gradients accumulate over every block of every scale.
    """
    _check(x, layer)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} differs from output shape {x.shape}")
    w, heads = layer.weights, layer.dims.heads
    acc, (q, k, v, cache) = t3_aggregate(x, layer, keep=True)
    d_wo = matmul(acc.T, grad_out, tag="grad")
    d_acc = matmul(grad_out, w.w_o.T, tag="grad")
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for plan, c, probs in zip(layer.config.scales, layer.coefficients(), cache):
        idx = plan.blocks
        flat = idx.ravel()
        d_o = x.dtype.type(c) * d_acc[idx]
        bq, bk, bv = block_attention_backward(q[idx], k[idx], v[idx], probs, heads, d_o)
        C = x.shape[1]
        dq[flat] += bq.reshape(-1, C)
        dk[flat] += bk.reshape(-1, C)
        dv[flat] += bv.reshape(-1, C)
    dx, d_wq, d_wk, d_wv = project_qkv_backward(x, w, dq, dk, dv)
    return dx, AttnWeights(d_wq, d_wk, d_wv, d_wo)


def masked_attention_oracle(x: np.ndarray, layer: T3Layer) -> np.ndarray:
    """Brute-force reference: dense L x L attention under per-scale block masks.

    Block membership comes from each plan's ``voxel_to_block`` map, not from
    the gather tables the fast path uses.
    """
    _check(x, layer)
    w, dims = layer.weights, layer.dims
    d = dims.head_dim
    # evaluated in f64 regardless of input dtype
    x64, w64 = x.astype(np.float64), w.astype(np.float64)
    q, k, v = x64 @ w64.w_q, x64 @ w64.w_k, x64 @ w64.w_v
    acc = np.zeros_like(x64)
    for plan, c in zip(layer.config.scales, layer.coefficients()):
        owner = plan.voxel_to_block
        mask = owner[:, None] == owner[None, :]
        y = np.empty_like(x64)
        for hd in range(dims.heads):
            sl = slice(hd * d, (hd + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
            a_full = np.exp(logits - logits.max(axis=1, keepdims=True))
            a_full /= a_full.sum(axis=1, keepdims=True)
            a = np.where(mask, a_full, 0.0)
            a /= a.sum(axis=1, keepdims=True)
            y[:, sl] = a @ v[:, sl]
        acc += c * y
    return (acc @ w64.w_o).astype(x.dtype)
