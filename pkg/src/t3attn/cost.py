"""Analytic parameter and MAC accounting for full and windowed attention.

Counts exclude biases, softmax and normalization.  A ``M x K`` by ``K x N``
product costs ``M * K * N`` MACs.  Per layer:

* parameters: ``3C^2`` (QKV) + ``C^2`` (O) + ``2 C C_ffn`` (FFN)
* full MACs:  ``3LC^2 + LC^2 + 2L^2C + 2LC C_ffn``
* T3 MACs:    the same with attention ``sum_s 2 L L_b C``; QKV and O are
  charged once per layer, not per scale.

Python integers keep every count exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .attention import AttnWeights, ModelDims, full_attention_forward
from .grid import (
    GridDims,
    LayerSchedule,
    PlanError,
    WindowShape,
    divisors,
    make_layer_config,
    uniform_schedule,
)
from .t3 import T3Layer, t3_forward
from .tensorlite import count_macs, randn, rng

PARAM_KEYS = ("rest", "proj_qkv", "proj_o", "ffn", "attn", "total")
MAC_KEYS = ("rest", "proj_qkv", "proj_o", "ffn", "attn", "total")


class SpecError(ValueError):
    """Latent geometry does not produce an integer token grid."""


def _with_total(d: dict) -> dict:
    d["total"] = sum(v for k, v in d.items() if k != "total")
    return d


def params_full(dims: ModelDims, rest: int = 0) -> dict[str, int]:
    C, n = dims.channels, dims.depth
    return _with_total(
        {
            "rest": int(rest),
            "proj_qkv": 3 * C * C * n,
            "proj_o": C * C * n,
            "ffn": 2 * C * dims.ffn_width * n,
            "attn": 0,
        }
    )


def _linear_macs(L: int, dims: ModelDims) -> dict[str, int]:
    C, n = dims.channels, dims.depth
    return {
        "proj_qkv": 3 * L * C * C * n,
        "proj_o": L * C * C * n,
        "ffn": 2 * L * C * dims.ffn_width * n,
    }


def macs_full(L: int, dims: ModelDims, rest: int = 0) -> dict[str, int]:
    if L < 1:
        raise ValueError(f"token count must be >= 1, got {L}")
    d = {"rest": int(rest), **_linear_macs(L, dims), "attn": 2 * L * L * dims.channels * dims.depth}
    return _with_total(d)


def attn_macs_t3_layer(L: int, config, channels: int) -> int:
    return sum(2 * L * p.window.L_b * channels for p in config.scales)


def macs_t3(schedule: LayerSchedule, grid: GridDims, dims: ModelDims, rest: int = 0) -> dict[str, int]:
    if schedule.depth != dims.depth:
        raise PlanError(f"schedule has {schedule.depth} layers, model depth is {dims.depth}")
    seen: set[int] = set()
    attn = 0
    for cfg in schedule.configs:
        if id(cfg) not in seen:
            cfg.validate(grid)
            seen.add(id(cfg))
        attn += attn_macs_t3_layer(grid.L, cfg, dims.channels)
    return _with_total({"rest": int(rest), **_linear_macs(grid.L, dims), "attn": attn})


@dataclass
class CostReport:
    mode: str
    label: str
    L: int
    params: dict[str, int]
    macs: dict[str, int]
    speedup_attn: float = 1.0


def full_report(grid: GridDims, dims: ModelDims, rest_params: int = 0, rest_macs: int = 0, label: str = "") -> CostReport:
    return CostReport("full", label, grid.L, params_full(dims, rest_params), macs_full(grid.L, dims, rest_macs))


def t3_report(schedule: LayerSchedule, grid: GridDims, dims: ModelDims, rest_params: int = 0, rest_macs: int = 0, label: str = "") -> CostReport:
    macs = macs_t3(schedule, grid, dims, rest_macs)
    full_attn = 2 * grid.L * grid.L * dims.channels * dims.depth
    return CostReport("t3", label, grid.L, params_full(dims, rest_params), macs, full_attn / macs["attn"])


def implied_window_budget(L: int, attn_macs: float, dims: ModelDims) -> float:
    """Mean ``S * L_b`` a uniform T3 schedule needs to spend ``attn_macs``."""
    return attn_macs / (2 * L * dims.channels * dims.depth)


# --------------------------------------------------------------------------
# latent geometry


@dataclass(frozen=True)
class LatentSpec:
    height: int
    width: int
    frames: int
    temporal_factor: int = 4
    spatial_factor: int = 8
    patch: tuple[int, int, int] = (1, 2, 2)


def token_count(spec: LatentSpec) -> tuple[GridDims, int]:
    f_t, f_s = spec.temporal_factor, spec.spatial_factor
    p_t, p_h, p_w = spec.patch
    if min(spec.height, spec.width, spec.frames, f_t, f_s, p_t, p_h, p_w) < 1:
        raise SpecError(f"all latent factors must be >= 1: {spec}")
    if (spec.frames - 1) % f_t:
        raise SpecError(f"frames - 1 = {spec.frames - 1} not divisible by temporal factor {f_t}")
    t_lat = (spec.frames - 1) // f_t + 1
    if t_lat % p_t:
        raise SpecError(f"latent frames {t_lat} not divisible by temporal patch {p_t}")
    if spec.height % (f_s * p_h) or spec.width % (f_s * p_w):
        raise SpecError(
            f"pixel size {spec.height}x{spec.width} not divisible by {f_s}*{(p_h, p_w)}"
        )
    grid = GridDims(t_lat // p_t, spec.height // (f_s * p_h), spec.width // (f_s * p_w))
    return grid, grid.L


# --------------------------------------------------------------------------
# Wan2.1-T2V-1.3B-sized reference setting

WAN_1_3B = ModelDims(channels=1536, heads=12, ffn_width=8960, depth=30)
WAN_REST_PARAMS = 309_600_000


@dataclass(frozen=True)
class Resolution:
    height: int
    width: int
    frames: int = 81
    rest_macs: int = 0
    # published attention speedup of the windowed schedule at this size
    reference_speedup: float | None = None

    @property
    def name(self) -> str:
        return f"{self.height}x{self.width}"

    def latent(self) -> LatentSpec:
        return LatentSpec(self.height, self.width, self.frames)


REFERENCE_RESOLUTIONS = (
    Resolution(480, 832, rest_macs=4_700_000_000_000, reference_speedup=22.0),
    Resolution(720, 1280, rest_macs=10_800_000_000_000, reference_speedup=30.9),
    Resolution(1088, 1920, rest_macs=24_500_000_000_000, reference_speedup=34.9),
    Resolution(2176, 3840, rest_macs=97_700_000_000_000, reference_speedup=43.0),
)


def fit_window(grid: GridDims, target_L_b: float) -> WindowShape:
    """Window dividing ``grid`` whose token count is log-closest to ``target_L_b``.

    Ties prefer the most cube-like window, then lexicographic order.
    """
    best = None
    for m in product(*(divisors(e) for e in grid.extents)):
        L_b = m[0] * m[1] * m[2]
        key = (abs(math.log(L_b / target_L_b)), max(m) / min(m), m)
        if best is None or key < best[0]:
            best = (key, m)
    return WindowShape(*best[1])


def fitted_schedule(res: Resolution, dims: ModelDims = WAN_1_3B, S: int = 2) -> LayerSchedule:
    """Uniform S-scale schedule whose window approximates the reference speedup."""
    grid, L = token_count(res.latent())
    if res.reference_speedup is None:
        raise ValueError(f"{res.name} has no reference speedup to fit")
    window = fit_window(grid, L / (S * res.reference_speedup))
    return uniform_schedule(dims.depth, make_layer_config(grid, window, S))


# --------------------------------------------------------------------------
# counting execution


def instrumented_count(
    grid: GridDims,
    dims: ModelDims,
    schedule: LayerSchedule | None = None,
    seed: int = 0,
) -> dict[str, int]:
    """Run the real kernels for ``dims.depth`` layers and count their MACs.

    ``schedule=None`` runs full attention.  Returns ``{"proj", "attn"}``.
    """
    if grid.L > 256:
        raise ValueError(f"instrumented counting is for tiny grids (L <= 256), got L={grid.L}")
    gen = rng(seed)
    x = randn(gen, (grid.L, dims.channels), "f64")
    with count_macs() as counter:
        for i in range(dims.depth):
            w = AttnWeights.random(dims.channels, gen, "f64")
            if schedule is None:
                x = full_attention_forward(x, w, dims)
            else:
                x = t3_forward(x, T3Layer(w, schedule.configs[i], dims, grid))
            # rescale between layers; an elementwise op, no MACs
            x = x / (np.abs(x).max() + 1.0)
    return {"proj": counter["proj"], "attn": counter["attn"]}
