import pytest

from t3attn.attention import ModelDims
from t3attn.cost import (
    REFERENCE_RESOLUTIONS,
    WAN_1_3B,
    LatentSpec,
    SpecError,
    fitted_schedule,
    implied_window_budget,
    instrumented_count,
    macs_full,
    macs_t3,
    params_full,
    t3_report,
    token_count,
)
from t3attn.grid import GridDims, PlanError, make_layer_config, uniform_schedule

T = 1e12

# Wan2.1-1.3B reference rows (T MACs): qkv, o, ffn, full attn, full all, windowed attn, windowed all
REFERENCE = {
    (480, 832): (7.0, 2.3, 27.1, 98.9, 140.0, 4.5, 45.5),
    (720, 1280): (16.1, 5.4, 62.4, 526.7, 621.4, 17.0, 111.7),
    (1088, 1920): (36.4, 12.1, 141.5, 2706.2, 2920.7, 77.5, 291.9),
    (2176, 3840): (145.5, 48.5, 566.0, 43299.3, 44157.1, 1006.8, 1864.5),
}


def test_reference_parameters():
    p = params_full(WAN_1_3B)
    assert p["proj_qkv"] == pytest.approx(212.5e6, rel=5e-3)
    assert p["proj_o"] == pytest.approx(70.8e6, rel=5e-3)
    assert p["ffn"] == pytest.approx(826.1e6, rel=5e-3)
    # exact integer values
    assert (p["proj_qkv"], p["proj_o"], p["ffn"]) == (212_336_640, 70_778_880, 825_753_600)


@pytest.mark.parametrize("hw,grid,L", [
    ((480, 832), (21, 30, 52), 32760),
    ((720, 1280), (21, 45, 80), 75600),
    ((1088, 1920), (21, 68, 120), 171360),
    ((2176, 3840), (21, 136, 240), 685440),
])
def test_token_count(hw, grid, L):
    g, n = token_count(LatentSpec(*hw, frames=81))
    assert g.extents == grid and n == L


def test_token_count_errors():
    with pytest.raises(SpecError):
        token_count(LatentSpec(480, 832, frames=80))
    with pytest.raises(SpecError):
        token_count(LatentSpec(488, 832, frames=81))


@pytest.mark.parametrize("res", REFERENCE_RESOLUTIONS, ids=lambda r: r.name)
def test_reference_full_macs(res):
    _, L = token_count(res.latent())
    m = macs_full(L, WAN_1_3B, rest=res.rest_macs)
    qkv, o, ffn, attn, total, _, _ = REFERENCE[(res.height, res.width)]
    assert m["attn"] / T == pytest.approx(attn, rel=0.01)
    assert m["proj_qkv"] / T == pytest.approx(qkv, rel=0.01)
    assert m["proj_o"] / T == pytest.approx(o, rel=0.01)
    assert m["ffn"] / T == pytest.approx(ffn, rel=0.01)
    assert m["total"] / T == pytest.approx(total, rel=0.01)


def test_4k_to_480p_ratio():
    a = macs_full(685440, WAN_1_3B)["attn"]
    b = macs_full(32760, WAN_1_3B)["attn"]
    assert a / b == pytest.approx(437.8, abs=0.05)


def test_full_attn_quadratic():
    dims = ModelDims(16, 2, 32, 3)
    assert macs_full(200, dims)["attn"] == 4 * macs_full(100, dims)["attn"]
    assert macs_full(200, dims)["ffn"] == 2 * macs_full(100, dims)["ffn"]


@pytest.mark.parametrize("S", [1, 2, 3])
def test_t3_attn_linear(S):
    dims = ModelDims(8, 2, 0, 4)
    small, big = GridDims(4, 4, 8), GridDims(4, 4, 16)
    a = macs_t3(uniform_schedule(4, make_layer_config(small, (2, 2, 2), S)), small, dims)
    b = macs_t3(uniform_schedule(4, make_layer_config(big, (2, 2, 2), S)), big, dims)
    assert b["attn"] == 2 * a["attn"]
    assert a["attn"] == 2 * small.L * 8 * S * 8 * 4


def test_t3_reduces_to_full():
    grid = GridDims(2, 3, 4)
    dims = ModelDims(8, 2, 16, 3)
    sched = uniform_schedule(3, make_layer_config(grid, grid.extents, 1))
    assert macs_t3(sched, grid, dims, rest=5) == macs_full(grid.L, dims, rest=5)


def test_macs_t3_depth_mismatch():
    grid = GridDims(2, 2, 2)
    sched = uniform_schedule(2, make_layer_config(grid, (1, 2, 2)))
    with pytest.raises(PlanError):
        macs_t3(sched, grid, ModelDims(4, 1, 0, 3))


def test_instrumented_full_example():
    # L=8, C=4: proj = 4*L*C^2 = 512, attn = 2*L^2*C = 512
    assert instrumented_count(GridDims(2, 2, 2), ModelDims(4, 2)) == {"proj": 512, "attn": 512}


def test_instrumented_t3_example():
    grid = GridDims(2, 2, 2)
    sched = uniform_schedule(1, make_layer_config(grid, (1, 2, 2), 2))
    # two scales of 2*L*L_b*C = 256 each; projections charged once
    assert instrumented_count(grid, ModelDims(4, 1), sched) == {"proj": 512, "attn": 512}


@pytest.mark.parametrize("grid,window,S,heads,depth", [
    (GridDims(2, 4, 4), (1, 2, 2), 2, 2, 2),
    (GridDims(4, 2, 6), (2, 1, 3), 3, 1, 1),
    (GridDims(3, 3, 3), (3, 3, 3), 1, 4, 3),
    (GridDims(2, 2, 8), (1, 1, 1), 2, 2, 1),
])
def test_instrumented_matches_analytic(grid, window, S, heads, depth):
    dims = ModelDims(8, heads, 0, depth)
    sched = uniform_schedule(depth, make_layer_config(grid, window, S))
    analytic = macs_t3(sched, grid, dims)
    measured = instrumented_count(grid, dims, sched)
    assert measured["attn"] == analytic["attn"]
    assert measured["proj"] == analytic["proj_qkv"] + analytic["proj_o"]
    full = macs_full(grid.L, dims)
    assert instrumented_count(grid, dims)["attn"] == full["attn"]


def test_instrumented_doubling():
    dims = ModelDims(4, 1)
    small, big = GridDims(2, 2, 4), GridDims(2, 2, 8)
    s_small = uniform_schedule(1, make_layer_config(small, (1, 2, 2), 2))
    s_big = uniform_schedule(1, make_layer_config(big, (1, 2, 2), 2))
    assert instrumented_count(big, dims, s_big)["attn"] == 2 * instrumented_count(small, dims, s_small)["attn"]
    assert instrumented_count(big, dims)["attn"] == 4 * instrumented_count(small, dims)["attn"]


def test_fitted_480p_schedule():
    res = REFERENCE_RESOLUTIONS[0]
    grid, L = token_count(res.latent())
    sched = fitted_schedule(res)
    rep = t3_report(sched, grid, WAN_1_3B)
    assert rep.macs["attn"] / T == pytest.approx(4.5, rel=0.05)
    assert rep.speedup_attn == pytest.approx(22.0, rel=0.05)
    assert implied_window_budget(L, 4.5e12, WAN_1_3B) == pytest.approx(L / 22, rel=0.01)


@pytest.mark.parametrize("res", REFERENCE_RESOLUTIONS, ids=lambda r: r.name)
def test_fitted_speedups_near_reference(res):
    grid, _ = token_count(res.latent())
    rep = t3_report(fitted_schedule(res), grid, WAN_1_3B)
    assert rep.speedup_attn == pytest.approx(res.reference_speedup, rel=0.05)
    *_, attn, total = REFERENCE[(res.height, res.width)]
    rep = t3_report(fitted_schedule(res), grid, WAN_1_3B, rest_macs=res.rest_macs)
    assert rep.macs["attn"] / T == pytest.approx(attn, rel=0.05)
    assert rep.macs["total"] / T == pytest.approx(total, rel=0.05)
    # linear columns are shared with full attention
    full = macs_full(grid.L, WAN_1_3B)
    assert rep.macs["proj_qkv"] == full["proj_qkv"] and rep.macs["ffn"] == full["ffn"]
