"""One weight set, two forward plans.

:func:`transform` wraps fixed per-layer weights in either full attention or a
windowed schedule without touching the arrays.  :func:`distill_toy` fine-tunes
one plan to reproduce the other by plain gradient descent on output MSE.
Weights persist in ``.t3w`` files:

    offset 0   magic  b"T3W1"
    offset 4   uint64 little-endian header length N
    offset 12  N bytes of UTF-8 JSON header
    offset 12+N  payload: raw little-endian scalars, tensors at header offsets
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import AttnWeights, ModelDims, full_attention_backward, full_attention_forward
from .grid import GridDims, LayerSchedule, PlanError
from .t3 import T3Layer, t3_backward, t3_forward
from .tensorlite import resolve_dtype, rng

log = logging.getLogger(__name__)

MAGIC = b"T3W1"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class WeightFormatError(ValueError):
    """A weight manifest is malformed, truncated or inconsistent."""


class TrainingError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


# --------------------------------------------------------------------------
# manifests


def export_weights(layers: Sequence[AttnWeights], dims: ModelDims) -> bytes:
    if len(layers) != dims.depth:
        raise WeightFormatError(f"{len(layers)} layers given for depth {dims.depth}")
    tensors, chunks, offset = [], [], 0
    dtype = layers[0].dtype if layers else np.dtype(np.float32)
    for i, w in enumerate(layers):
        try:
            w.check(dims)
        except ValueError as exc:
            raise WeightFormatError(f"layer {i}: {exc}") from exc
        if w.dtype != dtype:
            raise WeightFormatError(f"layer {i} dtype {w.dtype} differs from {dtype}")
        for name, arr in zip(AttnWeights.NAMES, w):
            raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            tensors.append(
                {
                    "name": f"layers.{i}.{name}",
                    "shape": list(arr.shape),
                    "dtype": _DTYPE_NAMES[arr.dtype],
                    "byte_offset": offset,
                    "byte_length": len(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format": "t3w",
        "version": 1,
        "channels": dims.channels,
        "heads": dims.heads,
        "ffn_width": dims.ffn_width,
        "depth": dims.depth,
        "payload_bytes": offset,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def import_weights(blob: bytes) -> tuple[list[AttnWeights], ModelDims]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise WeightFormatError("not a t3w manifest (bad magic)")
    (n,) = struct.unpack("<Q", blob[4:12])
    if 12 + n > len(blob):
        raise WeightFormatError(f"header length {n} runs past end of data ({len(blob)} bytes)")
    try:
        header = json.loads(blob[12 : 12 + n].decode("utf-8"))
        dims = ModelDims(header["channels"], header["heads"], header["ffn_width"], header["depth"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"invalid header: {exc}") from exc
    payload = memoryview(blob)[12 + n :]
    C = dims.channels
    expected = [f"layers.{i}.{name}" for i in range(dims.depth) for name in AttnWeights.NAMES]
    if [e.get("name") for e in entries] != expected:
        raise WeightFormatError(f"tensor list does not match depth {dims.depth}")
    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_length"], e["name"]) for e in entries)
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise WeightFormatError(f"tensors {name_a} and {name_b} overlap")
    arrays = {}
    for e in entries:
        name = e["name"]
        if e["dtype"] not in ("f32", "f64"):
            raise WeightFormatError(f"{name}: unsupported dtype {e['dtype']!r}")
        dt = resolve_dtype(e["dtype"]).newbyteorder("<")
        if list(e["shape"]) != [C, C]:
            raise WeightFormatError(f"{name}: shape {e['shape']} inconsistent with C={C}")
        start, length = e["byte_offset"], e["byte_length"]
        if length != C * C * dt.itemsize or start < 0:
            raise WeightFormatError(f"{name}: byte span inconsistent with its shape")
        if start + length > len(payload):
            raise WeightFormatError(
                f"{name}: payload truncated (needs bytes {start}..{start + length}, have {len(payload)})"
            )
        arr = np.frombuffer(payload[start : start + length], dtype=dt).reshape(C, C)
        arrays[name] = arr.astype(dt.newbyteorder("="))
    layers = [
        AttnWeights(*(arrays[f"layers.{i}.{name}"] for name in AttnWeights.NAMES))
        for i in range(dims.depth)
    ]
    return layers, dims


def save_weights(path: str | Path, layers: Sequence[AttnWeights], dims: ModelDims) -> None:
    Path(path).write_bytes(export_weights(layers, dims))


def load_weights(path: str | Path) -> tuple[list[AttnWeights], ModelDims]:
    return import_weights(Path(path).read_bytes())


# --------------------------------------------------------------------------
# runnable models


@dataclass(frozen=True)
class AttentionModel:
    """A stack of attention layers sharing nothing but their input/output shape.

    ``schedule is None`` runs full attention; otherwise layer ``i`` runs the
    windowed kernel with ``schedule.configs[i]``.
    """

    weights: tuple[AttnWeights, ...]
    dims: ModelDims
    grid: GridDims
    schedule: LayerSchedule | None = None

    @property
    def mode(self) -> str:
        return "full" if self.schedule is None else "t3"

    def parameter_count(self) -> int:
        return sum(a.size for w in self.weights for a in w)

    def parameter_bytes(self) -> int:
        return sum(a.nbytes for w in self.weights for a in w)

    def _layer_fns(self, i: int, w: AttnWeights):
        if self.schedule is None:
            return (
                lambda x: full_attention_forward(x, w, self.dims),
                lambda x, g: full_attention_backward(x, w, self.dims, g),
            )
        layer = T3Layer(w, self.schedule.configs[i], self.dims, self.grid)
        return (lambda x: t3_forward(x, layer), lambda x, g: t3_backward(x, layer, g))

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, w in enumerate(self.weights):
            x = self._layer_fns(i, w)[0](x)
        return x

    __call__ = forward

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, list[AttnWeights]]:
        fns = [self._layer_fns(i, w) for i, w in enumerate(self.weights)]
        inputs = []
        for fwd, _ in fns:
            inputs.append(x)
            x = fwd(x)
        grads: list[AttnWeights] = []
        g = grad_out
        for (_, bwd), xi in zip(reversed(fns), reversed(inputs)):
            g, gw = bwd(xi, g)
            grads.append(gw)
        return g, grads[::-1]

    def with_weights(self, weights: Sequence[AttnWeights]) -> "AttentionModel":
        return AttentionModel(tuple(weights), self.dims, self.grid, self.schedule)


def transform(
    weights: Sequence[AttnWeights],
    plan: str | LayerSchedule,
    dims: ModelDims,
    grid: GridDims,
) -> AttentionModel:
    """Bind ``weights`` to a forward plan; the arrays are reused, never copied."""
    if len(weights) != dims.depth:
        raise PlanError(f"{len(weights)} weight layers for depth {dims.depth}")
    for w in weights:
        w.check(dims)
    if isinstance(plan, str):
        if plan != "full":
            raise PlanError(f"plan must be 'full' or a LayerSchedule, got {plan!r}")
        return AttentionModel(tuple(weights), dims, grid, None)
    if plan.depth != dims.depth:
        raise PlanError(f"schedule has {plan.depth} layers, model depth is {dims.depth}")
    for i, cfg in enumerate(plan.configs):
        try:
            cfg.validate(grid)
        except PlanError as exc:
            raise PlanError(f"layer {i}: {exc}") from exc
    return AttentionModel(tuple(weights), dims, grid, plan)


# --------------------------------------------------------------------------
# toy distillation


def positional_field(grid: GridDims, channels: int, seed: int) -> np.ndarray:
    """Smooth unit-variance ``(L, C)`` field standing in for video structure.

    Features are sin/cos of each voxel coordinate at the two lowest
    frequencies, standardized, then embedded into ``channels`` by seeded
    orthonormal rows so every positional direction carries equal energy.
    Constant features (axes of extent 1) are dropped.
    """
    coords = np.meshgrid(*(np.arange(e) for e in grid.extents), indexing="ij")
    feats = []
    for p, extent in zip(coords, grid.extents):
        for f in (1, 2):
            feats += [np.sin(np.pi * f * p / extent), np.cos(np.pi * f * p / extent)]
    feats = np.stack(feats, axis=-1).reshape(grid.L, -1)
    std = feats.std(axis=0)
    feats = (feats[:, std > 1e-12] - feats[:, std > 1e-12].mean(axis=0)) / std[std > 1e-12]
    n = feats.shape[1]
    k = max(n, channels)
    q, _ = np.linalg.qr(rng(seed).standard_normal((k, k)))
    # n <= channels: orthonormal rows; otherwise a random orthogonal projection
    field = feats @ q[:n, :channels]
    return field / field.std()


def latent_stream(
    field: np.ndarray,
    seed: int,
    batch: int = 4,
    noise: float = 0.15,
    dtype: str = "f64",
) -> Iterator[np.ndarray]:
    """Endless seeded batches ``(batch, L, C)`` of toy video latents.

    Every sample is ``field`` (see :func:`positional_field`) plus i.i.d.
    Gaussian noise of standard deviation ``noise``.
    """
    gen = rng(seed)
    dt = resolve_dtype(dtype)
    while True:
        yield (field[None] + noise * gen.standard_normal((batch, *field.shape))).astype(dt)


@dataclass
class TrainState:
    weights: list[AttnWeights]
    step: int = 0
    lr: float = 0.0
    loss_history: list[float] = field(default_factory=list)
    eval_initial: float | None = None
    eval_final: float | None = None
    # held-out MSE at steps 0, eval_every, 2*eval_every, ... and at the end
    eval_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def reduction(self) -> float:
        """Final over initial held-out MSE."""
        if not self.eval_initial:
            return 0.0
        return self.eval_final / self.eval_initial


def mse_to_teacher(student: AttentionModel, teacher: AttentionModel, batch: np.ndarray) -> float:
    return float(np.mean([np.mean((student(x) - teacher(x)) ** 2) for x in batch]))


def distill_toy(
    teacher: AttentionModel,
    student: AttentionModel,
    data: Iterator[np.ndarray],
    steps: int,
    lr: float,
    eval_batch: np.ndarray | None = None,
    eval_every: int = 50,
    schedule: str = "constant",
) -> TrainState:
    """Fit ``student`` to ``teacher`` outputs by gradient descent on MSE.

    Each step draws one batch from ``data``; the recorded loss is the batch
    mean of per-sample MSE taken before the update.  ``eval_batch`` (if
    given) is scored before training, every ``eval_every`` steps and after
    the last step.  ``schedule="cosine"`` decays the step size from ``lr``
    to zero over ``steps``.
    """
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr schedule {schedule!r}")
    if (teacher.dims, teacher.grid) != (student.dims, student.grid):
        raise PlanError("teacher and student must share model dims and grid")
    state = TrainState([w.copy() for w in student.weights], lr=lr)
    model = student.with_weights(state.weights)
    if eval_batch is not None:
        state.eval_initial = mse_to_teacher(model, teacher, eval_batch)
        state.eval_history.append((0, state.eval_initial))
    for step in range(steps):
        batch = next(data)
        loss, grads = 0.0, None
        for x in batch:
            diff = model(x) - teacher(x)
            loss += float(np.mean(diff**2)) / len(batch)
            _, gw = model.backward(x, 2.0 * diff / (diff.size * len(batch)))
            grads = gw if grads is None else [a.map(np.add, b) for a, b in zip(grads, gw)]
        if not np.isfinite(loss):
            raise TrainingError(step, loss)
        state.loss_history.append(loss)
        eta = lr if schedule == "constant" else 0.5 * lr * (1.0 + math.cos(math.pi * step / steps))
        state.weights = [w.map(lambda p, g: p - p.dtype.type(eta) * g, g) for w, g in zip(state.weights, grads)]
        model = model.with_weights(state.weights)
        state.step = step + 1
        if step % 50 == 0:
            log.debug("step %d loss %.6g", step, loss)
        if eval_batch is not None and (state.step % eval_every == 0 or state.step == steps):
            state.eval_history.append((state.step, mse_to_teacher(model, teacher, eval_batch)))
    if eval_batch is not None:
        state.eval_final = state.eval_history[-1][1]
    return state
