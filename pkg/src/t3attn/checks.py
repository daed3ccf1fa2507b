"""Verification suites shared by the CLI and the tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import AttnWeights, ModelDims, full_attention_backward, full_attention_forward
from .grid import (
    AXES,
    GridDims,
    LayerConfig,
    ScalePlan,
    make_layer_config,
    membership,
    validate_tiling,
)
from .t3 import T3Layer, masked_attention_oracle, t3_backward, t3_forward
from .tensorlite import randn, rng

TOLERANCE = {"f32": 1e-5, "f64": 1e-10}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + (f": {self.detail}" if self.detail else "")


# --------------------------------------------------------------------------
# gradient checks


def central_difference(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` w.r.t. ``arr``, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    """``max|numeric - analytic|`` scaled by the larger of the two max-abs values."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(numeric - analytic).max() / scale)


def gradcheck_kernel(forward, backward, x, weights: AttnWeights, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Relative error of ``backward`` against central differences for every input.

    ``forward(x, w)`` returns the output; ``backward(x, w, g)`` returns
    ``(grad_x, AttnWeights)``.  The scalar probed is ``sum(out * G)`` for a
    fixed random ``G``.
    """
    x = x.astype(np.float64).copy()
    w = weights.astype(np.float64).copy()
    G = rng(seed).standard_normal(x.shape)
    dx, dw = backward(x, w, G)

    def loss() -> float:
        return float((forward(x, w) * G).sum())

    errors = {"x": relative_error(central_difference(loss, x, eps), dx)}
    for name, arr, ana in zip(AttnWeights.NAMES, w, dw):
        errors[name] = relative_error(central_difference(loss, arr, eps), ana)
    return errors


def gradcheck_suite(grid: GridDims, dims: ModelDims, config: LayerConfig, seed: int = 0) -> dict[str, dict[str, float]]:
    gen = rng(seed)
    x = randn(gen, (grid.L, dims.channels), "f64")
    w = AttnWeights.random(dims.channels, gen, "f64", scale=0.7)
    full = gradcheck_kernel(
        lambda x, w: full_attention_forward(x, w, dims),
        lambda x, w, g: full_attention_backward(x, w, dims, g),
        x, w, seed,
    )
    t3 = gradcheck_kernel(
        lambda x, w: t3_forward(x, T3Layer(w, config, dims, grid)),
        lambda x, w, g: t3_backward(x, T3Layer(w, config, dims, grid), g),
        x, w, seed,
    )
    return {"full": full, "t3": t3}


# --------------------------------------------------------------------------
# oracle-equivalence suite


def inject_fault(config: LayerConfig) -> tuple[LayerConfig, tuple[int, int]]:
    """Swap one voxel between the first two blocks of the finest scale's gather table.

    The tiling stays a valid partition, but the gather table no longer
    agrees with ``voxel_to_block``.
    """
    plan = config.scales[0]
    if plan.n_blocks < 2:
        raise ValueError("fault injection needs at least two blocks in the finest scale")
    blocks = plan.blocks.copy()
    a, b = int(blocks[0, 0]), int(blocks[1, 0])
    blocks[0, 0], blocks[1, 0] = b, a
    broken = dataclasses.replace(plan, blocks=blocks)
    return dataclasses.replace(config, scales=(broken, *config.scales[1:])), (a, b)


def _max_err(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    diff = np.abs(a - b).max(axis=1)
    row = int(diff.argmax())
    return float(diff[row]), row


def check_tiling(grid: GridDims, config: LayerConfig, label: str) -> CheckResult:
    for plan in config.scales:
        report = validate_tiling(plan, grid)
        if not report:
            return CheckResult(f"tiling {label}", False, f"scale {plan.scale_index}: {report.message}")
    for t in range(grid.t):
        for h in range(grid.h):
            for w in range(grid.w):
                m = membership(grid, config, (t, h, w))
                if len(m.entries) != config.S or abs(m.Z - config.normalization) > 1e-12:
                    return CheckResult(f"tiling {label}", False, f"membership at {(t, h, w)}: {m}")
    return CheckResult(f"tiling {label}", True, f"S={config.S}, Z={config.normalization:g}")


def check_oracle(
    grid: GridDims,
    dims: ModelDims,
    config: LayerConfig,
    x: np.ndarray,
    w: AttnWeights,
    tol: float,
    label: str,
) -> CheckResult:
    # unvalidated so a faulted gather table can still be exercised
    layer = T3Layer(w, config, dims, grid, validate=False)
    err, row = _max_err(t3_forward(x, layer), masked_attention_oracle(x, layer))
    if err <= tol:
        return CheckResult(f"oracle {label}", True, f"max abs err {err:.2e}")
    coords = np.unravel_index(row, grid.extents)
    where = ", ".join(f"{a}={int(c)}" for a, c in zip(AXES, coords))
    return CheckResult(f"oracle {label}", False, f"max abs err {err:.2e} > {tol:g} at voxel {row} ({where})")


def verify_suite(
    grid: GridDims,
    dims: ModelDims,
    configs: list[tuple[str, LayerConfig]],
    dtype: str = "f32",
    seed: int = 0,
    fault: bool = False,
) -> list[CheckResult]:
    if grid.L > 512:
        raise ValueError(f"verification materializes L x L masks; L={grid.L} exceeds 512")
    tol = TOLERANCE[dtype]
    gen = rng(seed)
    x = randn(gen, (grid.L, dims.channels), dtype)
    w = AttnWeights.random(dims.channels, gen, dtype)
    results: list[CheckResult] = []

    full_cfg = make_layer_config(grid, grid.extents, S=1)
    ref = full_attention_forward(x, w, dims)
    err, _ = _max_err(t3_forward(x, T3Layer(w, full_cfg, dims, grid)), ref)
    results.append(CheckResult("degenerate full-window == full attention", err <= tol, f"max abs err {err:.2e}"))

    lin_cfg = make_layer_config(grid, (1, 1, 1), S=2)
    lin = (x @ w.w_v) @ w.w_o
    err, _ = _max_err(t3_forward(x, T3Layer(w, lin_cfg, dims, grid)), lin)
    results.append(CheckResult("degenerate (1,1,1) window == x W_V W_O", err <= tol, f"max abs err {err:.2e}"))

    for label, cfg in configs:
        results.append(check_tiling(grid, cfg, label))
        target = cfg
        if fault:
            target, (a, b) = inject_fault(cfg)
            label = f"{label} [fault: voxels {a}<->{b}]"
            fault = False
        results.append(check_oracle(grid, dims, target, x, w, tol, label))
    return results
