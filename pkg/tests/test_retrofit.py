import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t3attn.attention import AttnWeights, ModelDims
from t3attn.checks import central_difference, relative_error
from t3attn.grid import GridDims, PlanError, build_layer_schedule, DEFAULT_GROUP, make_layer_config, uniform_schedule
from t3attn.retrofit import (
    MAGIC,
    WeightFormatError,
    distill_toy,
    export_weights,
    import_weights,
    latent_stream,
    load_weights,
    positional_field,
    save_weights,
    transform,
)
from t3attn.tensorlite import randn, rng


def layers(depth, C, dtype, seed=0):
    gen = rng(seed)
    return [AttnWeights.random(C, gen, dtype) for _ in range(depth)]


def same(a, b):
    return all(x.tobytes() == y.tobytes() and x.dtype == y.dtype for wa, wb in zip(a, b) for x, y in zip(wa, wb))


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_round_trip_bitwise(dtype, tmp_path):
    dims = ModelDims(8, 2, 16, 3)
    ws = layers(3, 8, dtype)
    blob = export_weights(ws, dims)
    back, dims2 = import_weights(blob)
    assert dims2 == dims and same(ws, back)
    assert export_weights(back, dims2) == blob
    save_weights(tmp_path / "m.t3w", ws, dims)
    assert (tmp_path / "m.t3w").read_bytes() == blob
    assert same(load_weights(tmp_path / "m.t3w")[0], ws)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.sampled_from(["f32", "f64"]), st.integers(0, 1000))
def test_round_trip_property(depth, C, dtype, seed):
    dims = ModelDims(C, 1, 0, depth)
    ws = layers(depth, C, dtype, seed)
    assert export_weights(import_weights(export_weights(ws, dims))[0], dims) == export_weights(ws, dims)


def test_zero_weights_header():
    dims = ModelDims(2, 1, 0, 1)
    blob = export_weights([AttnWeights.zeros(2)], dims)
    assert blob[:4] == MAGIC
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + n])
    assert header["payload_bytes"] == 4 * 4 * 4
    assert [t["name"] for t in header["tensors"]] == ["layers.0.w_q", "layers.0.w_k", "layers.0.w_v", "layers.0.w_o"]
    assert [t["byte_offset"] for t in header["tensors"]] == [0, 16, 32, 48]
    assert blob[12 + n :] == bytes(64)


def test_little_endian_payload():
    w = AttnWeights(*(np.full((1, 1), v, dtype=np.float32) for v in (1.0, 2.0, 3.0, 4.0)))
    blob = export_weights([w], ModelDims(1))
    assert blob[-16:] == struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)


def test_truncated_payload_names_tensor():
    dims = ModelDims(4, 1, 0, 2)
    blob = export_weights(layers(2, 4, "f32"), dims)
    with pytest.raises(WeightFormatError, match="layers.1.w_o"):
        import_weights(blob[:-10])


def test_corrupt_manifests():
    dims = ModelDims(2, 1, 0, 1)
    blob = export_weights(layers(1, 2, "f64"), dims)
    with pytest.raises(WeightFormatError, match="magic"):
        import_weights(b"XXXX" + blob[4:])
    with pytest.raises(WeightFormatError, match="header length"):
        import_weights(blob[:20])
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + n])
    header["tensors"][1]["byte_offset"] = 8
    head = json.dumps(header).encode()
    with pytest.raises(WeightFormatError, match="overlap"):
        import_weights(MAGIC + struct.pack("<Q", len(head)) + head + blob[12 + n :])
    with pytest.raises(WeightFormatError):
        export_weights(layers(2, 2, "f64"), dims)


def test_transform_never_touches_weights():
    grid = GridDims(4, 8, 8)
    dims = ModelDims(16, 2, 0, 5)
    ws = layers(5, 16, "f32")
    before = export_weights(ws, dims)
    sched = build_layer_schedule(5, DEFAULT_GROUP, grid)
    x = randn(rng(1), (grid.L, 16), "f32")
    for plan in ("full", sched, "full", sched):
        model = transform(ws, plan, dims, grid)
        model(x)
        assert all(a is b for wm, w in zip(model.weights, ws) for a, b in zip(wm, w))
    assert export_weights(ws, dims) == before


def test_parameter_bytes_equal_across_modes():
    grid = GridDims(2, 4, 4)
    dims = ModelDims(8, 2, 0, 2)
    ws = layers(2, 8, "f32")
    full = transform(ws, "full", dims, grid)
    t3 = transform(ws, uniform_schedule(2, make_layer_config(grid, (1, 2, 2))), dims, grid)
    assert full.parameter_bytes() == t3.parameter_bytes() == 2 * 4 * 8 * 8 * 4
    assert full.parameter_count() == t3.parameter_count()
    assert (full.mode, t3.mode) == ("full", "t3")


def test_degenerate_plan_matches_full():
    grid = GridDims(2, 3, 4)
    dims = ModelDims(8, 2, 0, 3)
    ws = layers(3, 8, "f64")
    x = randn(rng(2), (grid.L, 8), "f64")
    full = transform(ws, "full", dims, grid)
    whole = transform(ws, uniform_schedule(3, make_layer_config(grid, grid.extents, 1)), dims, grid)
    np.testing.assert_allclose(full(x), whole(x), atol=1e-12)


def test_transform_errors():
    grid = GridDims(2, 2, 2)
    dims = ModelDims(4, 1, 0, 2)
    with pytest.raises(PlanError):
        transform(layers(1, 4, "f32"), "full", dims, grid)
    with pytest.raises(PlanError):
        transform(layers(2, 4, "f32"), "sparse", dims, grid)
    with pytest.raises(PlanError):
        transform(layers(2, 4, "f32"), uniform_schedule(3, make_layer_config(grid, (1, 2, 2))), dims, grid)


def test_stacked_backward_gradcheck():
    grid = GridDims(2, 2, 2)
    dims = ModelDims(4, 2, 0, 2)
    ws = layers(2, 4, "f64", seed=3)
    sched = uniform_schedule(2, make_layer_config(grid, (1, 2, 2)))
    x = randn(rng(4), (grid.L, 4), "f64")
    G = randn(rng(5), (grid.L, 4), "f64")
    for plan in ("full", sched):
        model = transform(ws, plan, dims, grid)
        dx, grads = model.backward(x, G)
        num = central_difference(lambda: float((model(x) * G).sum()), x)
        assert relative_error(num, dx) <= 1e-6
        num = central_difference(lambda: float((model(x) * G).sum()), ws[0].w_q)
        assert relative_error(num, grads[0].w_q) <= 1e-6


def test_latent_stream_seeded():
    grid = GridDims(2, 2, 4)
    field = positional_field(grid, 4, seed=0)
    assert field.shape == (16, 4) and abs(field.std() - 1) < 1e-12
    assert np.abs(field.mean(axis=0)).max() < 1e-12
    # the embedding is an isometry of the feature span: no positional direction is lost
    # (4 time steps give 3 independent centered features, 8 give 4: rank 3 + 4 + 4)
    assert np.linalg.matrix_rank(positional_field(GridDims(4, 8, 8), 16, seed=0)) == 11
    a = next(latent_stream(field, 1))
    b = next(latent_stream(field, 1))
    assert a.shape == (4, 16, 4) and a.tobytes() == b.tobytes()
    assert not np.array_equal(a, next(latent_stream(field, 2)))


def test_short_distillation_decreases_loss():
    grid = GridDims(2, 4, 4)
    dims = ModelDims(8, 2)
    ws = layers(1, 8, "f64")
    sched = uniform_schedule(1, make_layer_config(grid, (1, 2, 2)))
    field = positional_field(grid, 8, 0)
    state = distill_toy(
        transform(ws, "full", dims, grid),
        transform(ws, sched, dims, grid),
        latent_stream(field, 2),
        steps=40,
        lr=0.3,
        eval_batch=next(latent_stream(field, 1, batch=8)),
        eval_every=50,
    )
    assert state.step == 40 and len(state.loss_history) == 40
    assert state.eval_final < state.eval_initial
    assert [s for s, _ in state.eval_history] == [0, 40]
    assert np.mean(state.loss_history[-10:]) < np.mean(state.loss_history[:10])
    # the student started from the teacher's arrays but trained copies
    assert ws[0].w_q is not state.weights[0].w_q


def test_cosine_schedule_first_step_matches_constant():
    grid, dims = GridDims(2, 4, 4), ModelDims(8, 2)
    ws = layers(1, 8, "f64")
    sched = uniform_schedule(1, make_layer_config(grid, (1, 2, 2)))
    field = positional_field(grid, 8, 0)

    def fit(steps, schedule):
        return distill_toy(transform(ws, "full", dims, grid), transform(ws, sched, dims, grid),
                           latent_stream(field, 2), steps=steps, lr=0.3, schedule=schedule).weights[0]

    assert fit(1, "cosine").w_q.tobytes() == fit(1, "constant").w_q.tobytes()
    assert fit(2, "cosine").w_q.tobytes() != fit(2, "constant").w_q.tobytes()
    with pytest.raises(ValueError, match="schedule"):
        fit(1, "linear")
