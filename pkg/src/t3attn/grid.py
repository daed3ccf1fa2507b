"""Multi-scale disjoint tilings of a T x H x W token grid.

Voxels are addressed by their row-major flat index ``(t * H + h) * W + w``.
A scale is a tiling of the grid into equally shaped windows whose members are
spaced ``stride`` apart along each axis.  Along one axis of extent ``E`` with
window ``m`` and stride ``d`` the positions are cut into super-cells of length
``m * d``; inside a super-cell position ``p`` belongs to group ``p mod d`` and
occupies slot ``(p mod m*d) // d`` of that group.  A 3-D block is the
Cartesian product of one group per axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

AXES = ("t", "h", "w")
GROUP_SIZE = 5

Stride = tuple[int, int, int]


class PlanError(ValueError):
    """A tiling, layer config or schedule is invalid for the grid."""


class ScheduleError(PlanError):
    """One or more layers of a schedule failed to resolve."""

    def __init__(self, failures: list[tuple[list[int], str]]):
        self.failures = failures
        lines = [f"layers {_fmt_layers(layers)}: {cause}" for layers, cause in failures]
        super().__init__("; ".join(lines))

    @property
    def layers(self) -> list[int]:
        return sorted(i for layers, _ in self.failures for i in layers)


def _fmt_layers(layers: list[int]) -> str:
    return ",".join(str(i) for i in layers)


@dataclass(frozen=True)
class GridDims:
    t: int
    h: int
    w: int

    def __post_init__(self):
        for name, v in zip(AXES, self.extents):
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise PlanError(f"grid extent along {name} must be a positive integer, got {v!r}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    @property
    def L(self) -> int:
        return self.t * self.h * self.w

    def flat(self, t: int, h: int, w: int) -> int:
        return (t * self.h + h) * self.w + w


@dataclass(frozen=True)
class WindowShape:
    m_t: int
    m_h: int
    m_w: int

    def __post_init__(self):
        for name, v in zip(AXES, self.extents):
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise PlanError(f"window size along {name} must be a positive integer, got {v!r}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.m_t, self.m_h, self.m_w)

    @property
    def L_b(self) -> int:
        return self.m_t * self.m_h * self.m_w


@dataclass(frozen=True, eq=False)
class ScalePlan:
    """One disjoint tiling of the grid.

    ``blocks[b, j]`` is the flat voxel index in slot ``j`` of block ``b``;
    ``voxel_to_block`` and ``voxel_to_slot`` are the inverse maps.  Blocks are
    ordered lexicographically by their per-axis group ids, slots by their
    per-axis slot ids.
    """

    scale_index: int
    window: WindowShape
    stride: Stride
    counts: tuple[int, int, int]
    blocks: np.ndarray
    voxel_to_block: np.ndarray
    voxel_to_slot: np.ndarray

    @property
    def n_blocks(self) -> int:
        return int(self.blocks.shape[0])

    @property
    def L_b(self) -> int:
        return self.window.L_b

    def same_as(self, other: "ScalePlan") -> bool:
        return (
            self.window == other.window
            and self.stride == other.stride
            and np.array_equal(self.blocks, other.blocks)
        )


def _axis_groups(extent: int, m: int, delta: int, axis: str) -> tuple[np.ndarray, np.ndarray]:
    if m > extent:
        raise PlanError(f"axis {axis}: window {m} exceeds extent {extent}")
    if delta < 1:
        raise PlanError(f"axis {axis}: stride must be >= 1, got {delta}")
    cell = m * delta
    if extent % cell:
        raise PlanError(
            f"axis {axis}: window*stride = {m}*{delta} = {cell} does not divide extent {extent}"
        )
    p = np.arange(extent)
    group = (p // cell) * delta + p % delta
    slot = (p % cell) // delta
    return group, slot


def build_scale_plan(
    dims: GridDims, window: WindowShape | Sequence[int], stride: Sequence[int], scale_index: int = 1
) -> ScalePlan:
    if not isinstance(window, WindowShape):
        window = WindowShape(*window)
    stride = tuple(int(d) for d in stride)
    if len(stride) != 3:
        raise PlanError(f"stride needs 3 entries, got {stride}")
    groups, slots = [], []
    for axis, extent, m, d in zip(AXES, dims.extents, window.extents, stride):
        g, s = _axis_groups(extent, m, d, axis)
        groups.append(g)
        slots.append(s)
    n = tuple(e // m for e, m in zip(dims.extents, window.extents))
    gt, gh, gw = np.meshgrid(*groups, indexing="ij")
    st, sh, sw = np.meshgrid(*slots, indexing="ij")
    block_id = ((gt * n[1] + gh) * n[2] + gw).ravel()
    slot_id = ((st * window.m_h + sh) * window.m_w + sw).ravel()
    blocks = np.empty((n[0] * n[1] * n[2], window.L_b), dtype=np.int64)
    blocks[block_id, slot_id] = np.arange(dims.L)
    for a in (blocks, block_id, slot_id):
        a.setflags(write=False)
    return ScalePlan(scale_index, window, stride, n, blocks, block_id, slot_id)


@dataclass(frozen=True)
class TilingReport:
    ok: bool
    message: str = "ok"

    def __bool__(self) -> bool:
        return self.ok


def validate_tiling(plan: ScalePlan, dims: GridDims) -> TilingReport:
    """Check that each voxel sits in exactly one block of exactly ``L_b`` members.

    ``plan.blocks`` may also be a ragged sequence of rows, so hand-edited
    plans can be checked.  Multiplicity is reported before coverage, and
    coverage before block size.
    """
    L, L_b = dims.L, plan.window.L_b
    dense = isinstance(plan.blocks, np.ndarray) and plan.blocks.ndim == 2
    rows = plan.blocks if dense else [np.asarray(r).ravel() for r in plan.blocks]
    if dense:
        flat = plan.blocks.ravel()
    else:
        flat = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    bad = flat[(flat < 0) | (flat >= L)]
    if bad.size:
        return TilingReport(False, f"voxel index {int(bad[0])} out of range [0, {L})")
    counts = np.bincount(flat, minlength=L)
    dup = np.flatnonzero(counts > 1)
    if dup.size:
        v = int(dup[0])
        owners = [b for b, r in enumerate(rows) if (np.asarray(r) == v).any()]
        return TilingReport(
            False, f"multiplicity: voxel {v} appears {int(counts[v])} times (blocks {owners})"
        )
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        return TilingReport(False, f"coverage: voxel {int(missing[0])} belongs to no block")
    if dense and plan.blocks.shape[1] == L_b:
        return TilingReport(True)
    for b, r in enumerate(rows):
        if len(r) != L_b:
            return TilingReport(False, f"size: block {b} has {len(r)} members, expected {L_b}")
    return TilingReport(True)


# --------------------------------------------------------------------------
# strides


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def boundary_scale_strides(dims: GridDims, window: WindowShape, S: int) -> list[Stride]:
    """Strides for ``S`` scales: voxel-adjacent first, whole-domain last.

    Intermediate scales take the geometric interpolation ``D ** (k / (S-1))``
    between 1 and ``D = extent / m`` on each axis, snapped to the divisor of
    ``D`` nearest in log distance (ties go to the smaller divisor).
    """
    if S < 1:
        raise PlanError(f"scale count must be >= 1, got {S}")
    for axis, extent, m in zip(AXES, dims.extents, window.extents):
        if m > extent or extent % m:
            raise PlanError(f"axis {axis}: window {m} does not divide extent {extent}")
    if S == 1:
        return [(1, 1, 1)]
    spans = [e // m for e, m in zip(dims.extents, window.extents)]
    strides: list[Stride] = []
    for k in range(S):
        row = []
        for D in spans:
            if k == 0:
                row.append(1)
            elif k == S - 1:
                row.append(D)
            else:
                target = math.log(D) * k / (S - 1)
                cands = divisors(D)
                if not cands:  # pragma: no cover - D >= 1 always has divisor 1
                    raise PlanError(f"no valid stride for span {D}")
                row.append(min(cands, key=lambda d: (abs(math.log(d) - target), d)))
        strides.append(tuple(row))
    return strides


# --------------------------------------------------------------------------
# layer configs


@dataclass(frozen=True, eq=False)
class LayerConfig:
    scales: tuple[ScalePlan, ...]
    scale_weights: tuple[float, ...]
    axis_preserving: str | None = None

    @property
    def S(self) -> int:
        return len(self.scales)

    @property
    def window(self) -> WindowShape:
        return self.scales[0].window

    @property
    def normalization(self) -> float:
        # every voxel belongs to one block per scale, so Z is voxel-independent
        return float(sum(self.scale_weights))

    def signature(self) -> tuple:
        return (
            self.window.extents,
            tuple(p.stride for p in self.scales),
            self.scale_weights,
            self.axis_preserving,
        )

    def validate(self, dims: GridDims) -> None:
        if not self.scales:
            raise PlanError("layer config needs at least one scale")
        if len(self.scale_weights) != self.S:
            raise PlanError(f"{len(self.scale_weights)} scale weights for {self.S} scales")
        if any(w < 0 or not math.isfinite(w) for w in self.scale_weights) or self.normalization <= 0:
            raise PlanError(f"scale weights must be finite, >= 0 and not all zero: {self.scale_weights}")
        for p in self.scales:
            if p.window != self.window:
                raise PlanError(f"scale {p.scale_index} window {p.window.extents} differs from {self.window.extents}")
            report = validate_tiling(p, dims)
            if not report:
                raise PlanError(f"scale {p.scale_index}: {report.message}")
        if self.scales[0].stride != (1, 1, 1):
            raise PlanError(f"finest scale must have stride (1,1,1), got {self.scales[0].stride}")
        if self.S > 1:
            last = self.scales[-1]
            for axis, e, m, d in zip(AXES, dims.extents, self.window.extents, last.stride):
                if m * d != e:
                    raise PlanError(f"axis {axis}: coarsest scale covers {m}*{d}={m * d}, grid extent is {e}")
        ap = self.axis_preserving
        if ap not in (None, "t", "hw"):
            raise PlanError(f"axis_preserving must be None, 't' or 'hw', got {ap!r}")
        if ap == "t" and self.window.m_t != dims.t:
            raise PlanError(f"axis-preserving t needs m_t = T = {dims.t}, got {self.window.m_t}")
        if ap == "hw" and (self.window.m_h, self.window.m_w) != (dims.h, dims.w):
            raise PlanError(
                f"axis-preserving hw needs window (H, W) = {(dims.h, dims.w)}, "
                f"got {(self.window.m_h, self.window.m_w)}"
            )


def make_layer_config(
    dims: GridDims,
    window: WindowShape | Sequence[int],
    S: int = 2,
    strides: str | Sequence[Sequence[int]] = "boundary",
    scale_weights: Sequence[float] | None = None,
    axis_preserving: str | None = None,
) -> LayerConfig:
    if not isinstance(window, WindowShape):
        window = WindowShape(*window)
    if isinstance(strides, str):
        if strides != "boundary":
            raise PlanError(f"strides must be 'boundary' or an explicit list, got {strides!r}")
        strides = boundary_scale_strides(dims, window, S)
    elif len(strides) != S:
        raise PlanError(f"{len(strides)} explicit strides given for S={S}")
    plans = tuple(build_scale_plan(dims, window, st, s + 1) for s, st in enumerate(strides))
    weights = tuple(float(w) for w in scale_weights) if scale_weights is not None else (1.0 / S,) * S
    cfg = LayerConfig(plans, weights, axis_preserving)
    cfg.validate(dims)
    return cfg


@dataclass(frozen=True)
class Membership:
    entries: tuple[tuple[int, int], ...]  # (scale index, block id)
    Z: float


def membership(dims: GridDims, config: LayerConfig, voxel: tuple[int, int, int]) -> Membership:
    """All (scale, block) pairs containing ``voxel`` plus the weight normalizer."""
    for axis, v, e in zip(AXES, voxel, dims.extents):
        if not 0 <= v < e:
            raise IndexError(f"voxel coordinate {axis}={v} outside [0, {e})")
    flat = dims.flat(*voxel)
    entries = tuple((p.scale_index, int(p.voxel_to_block[flat])) for p in config.scales)
    Z = sum(config.scale_weights[s - 1] for s, _ in entries)
    return Membership(entries, Z)


# --------------------------------------------------------------------------
# blueprints and schedules

_BLUEPRINT_KEYS = {"window", "blocks", "scales", "strides", "axis_preserving", "scale_weights"}


@dataclass(frozen=True)
class Blueprint:
    """Grid-independent description of one layer's blocking.

    Either ``window`` (tokens per block per axis) or ``blocks`` (block count
    per axis) is given.  ``axis_preserving`` forces the named axes to a single
    block whatever the other fields say.
    """

    window: tuple[int | None, ...] | None = None
    blocks: tuple[int | None, ...] | None = None
    scales: int = 2
    strides: str | tuple[Stride, ...] = "boundary"
    axis_preserving: str | None = None
    scale_weights: tuple[float, ...] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Blueprint":
        unknown = set(d) - _BLUEPRINT_KEYS
        if unknown:
            raise PlanError(f"unknown blueprint keys: {sorted(unknown)}")
        if ("window" in d) == ("blocks" in d):
            raise PlanError("blueprint needs exactly one of 'window' or 'blocks'")
        strides = d.get("strides", "boundary")
        if not isinstance(strides, str):
            strides = tuple(tuple(int(x) for x in st) for st in strides)
        ap = d.get("axis_preserving")
        if ap in ("none", "None"):
            ap = None
        w = d.get("scale_weights")
        return cls(
            window=tuple(d["window"]) if "window" in d else None,
            blocks=tuple(d["blocks"]) if "blocks" in d else None,
            scales=int(d.get("scales", 2)),
            strides=strides,
            axis_preserving=ap,
            scale_weights=tuple(w) if w is not None else None,
        )

    def to_dict(self) -> dict:
        d: dict = {"scales": self.scales, "strides": self.strides if isinstance(self.strides, str) else [list(s) for s in self.strides]}
        if self.window is not None:
            d["window"] = list(self.window)
        else:
            d["blocks"] = list(self.blocks)
        d["axis_preserving"] = self.axis_preserving
        if self.scale_weights is not None:
            d["scale_weights"] = list(self.scale_weights)
        return d

    def window_for(self, dims: GridDims) -> WindowShape:
        spec = self.window if self.window is not None else self.blocks
        if spec is None or len(spec) != 3:
            raise PlanError(f"window/blocks needs 3 entries, got {spec}")
        forced = {"t": {0}, "hw": {1, 2}, None: set()}.get(self.axis_preserving)
        if forced is None:
            raise PlanError(f"axis_preserving must be none, 't' or 'hw', got {self.axis_preserving!r}")
        m = []
        for i, (axis, extent, v) in enumerate(zip(AXES, dims.extents, spec)):
            if i in forced:
                m.append(extent)
                continue
            if v is None:
                raise PlanError(f"axis {axis}: size missing and axis is not preserved")
            v = int(v)
            if self.window is not None:
                m.append(v)
            else:
                if v < 1 or extent % v:
                    raise PlanError(f"axis {axis}: block count {v} does not divide extent {extent}")
                m.append(extent // v)
        return WindowShape(*m)

    def resolve(self, dims: GridDims) -> LayerConfig:
        return make_layer_config(
            dims,
            self.window_for(dims),
            S=self.scales,
            strides=self.strides,
            scale_weights=self.scale_weights,
            axis_preserving=self.axis_preserving,
        )


# fine/remote pair, the same with halved block counts, full-T layer,
# fine/remote pair with a finer ratio, full-HW layer
DEFAULT_GROUP: tuple[Blueprint, ...] = (
    Blueprint(blocks=(2, 4, 4)),
    Blueprint(blocks=(1, 2, 2)),
    Blueprint(blocks=(None, 4, 4), axis_preserving="t"),
    Blueprint(blocks=(4, 4, 4)),
    Blueprint(blocks=(4, None, None), axis_preserving="hw"),
)


@dataclass(frozen=True, eq=False)
class LayerSchedule:
    depth: int
    configs: tuple[LayerConfig, ...]
    group_size: int = GROUP_SIZE

    def __len__(self) -> int:
        return self.depth

    def __getitem__(self, i: int) -> LayerConfig:
        return self.configs[i]


def build_layer_schedule(
    depth: int, group: Sequence[Blueprint], dims: GridDims
) -> LayerSchedule:
    """Resolve a 5-slot blueprint group for ``dims`` and cycle it over ``depth`` layers."""
    if len(group) != GROUP_SIZE:
        raise PlanError(f"a layer group has exactly {GROUP_SIZE} blueprints, got {len(group)}")
    if depth < 0:
        raise PlanError(f"depth must be >= 0, got {depth}")
    resolved: list[LayerConfig | None] = []
    failures: list[tuple[list[int], str]] = []
    for slot, bp in enumerate(group):
        layers = list(range(slot, depth, GROUP_SIZE))
        try:
            resolved.append(bp.resolve(dims))
        except PlanError as exc:
            resolved.append(None)
            if layers:
                failures.append((layers, str(exc)))
    if failures:
        raise ScheduleError(failures)
    configs = tuple(resolved[i % GROUP_SIZE] for i in range(depth))
    return LayerSchedule(depth, configs)


def uniform_schedule(depth: int, config: LayerConfig) -> LayerSchedule:
    return LayerSchedule(depth, (config,) * depth)


def load_blueprints(source: str | Path | list) -> list[Blueprint]:
    """Read a blueprint group from a JSON file path or an already-parsed list."""
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = source
    if isinstance(data, dict):
        data = data.get("group", data)
    if not isinstance(data, list):
        raise PlanError("blueprint group must be a JSON list of 5 objects")
    return [Blueprint.from_dict(d) for d in data]
