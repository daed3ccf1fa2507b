"""``t3attn`` command line: plan | verify | cost | bench | gradcheck | distill."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import platform
import statistics
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttnWeights, ModelDims, full_attention_forward
from .checks import gradcheck_suite, verify_suite
from .cost import (
    REFERENCE_RESOLUTIONS,
    WAN_1_3B,
    WAN_REST_PARAMS,
    CostReport,
    Resolution,
    attn_macs_t3_layer,
    fitted_schedule,
    full_report,
    macs_full,
    t3_report,
    token_count,
)
from .grid import (
    DEFAULT_GROUP,
    Blueprint,
    GridDims,
    divisors,
    PlanError,
    build_layer_schedule,
    load_blueprints,
    make_layer_config,
    uniform_schedule,
)
from .retrofit import TrainingError, distill_toy, latent_stream, positional_field, transform
from .t3 import T3Layer, t3_forward
from .tensorlite import NumericError, ShapeError, randn, rng

log = logging.getLogger("t3attn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4

CSV_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Options for one CLI run.  Unset fields take per-command defaults."""

    grid: tuple[int, int, int] | None = None
    channels: int | None = None
    heads: int | None = None
    ffn_width: int = 0
    depth: int | None = None
    group: list | str | None = None
    window: tuple[int, int, int] | None = None
    scales: int = 2
    seed: int = 0
    dtype: str = "f32"
    out: str | None = None
    threads: int | None = None
    # command options
    configs: int = 0
    inject_fault: bool = False
    repeats: int = 5
    full_cap: int = 16384
    steps: int = 500
    lr: float = 2.5
    lr_schedule: str = "cosine"
    batch: int = 4
    noise: float = 0.15
    direction: str = "both"
    resolutions: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        for key in ("grid", "window"):
            v = getattr(cfg, key)
            if v is not None:
                if len(v) != 3:
                    raise ConfigError(f"{key} needs 3 entries, got {v}")
                setattr(cfg, key, tuple(int(x) for x in v))
        if cfg.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {cfg.dtype!r}")
        if cfg.direction not in ("both", "full->t3", "t3->full"):
            raise ConfigError(f"direction must be both, full->t3 or t3->full, got {cfg.direction!r}")
        if cfg.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {cfg.lr_schedule!r}")
        return cfg

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def fill(self, **defaults) -> "RunConfig":
        for k, v in defaults.items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        return self

    def grid_dims(self) -> GridDims:
        return GridDims(*self.grid)

    def model_dims(self) -> ModelDims:
        return ModelDims(self.channels, self.heads, self.ffn_width, self.depth)

    def blueprints(self) -> list[Blueprint]:
        """The configured group; a bare ``window`` fills all five slots."""
        if self.group is not None:
            return load_blueprints(self.group)
        if self.window is not None:
            return [Blueprint(window=self.window, scales=self.scales)] * 5
        return list(DEFAULT_GROUP)

    def single_config(self, grid: GridDims):
        if self.window is None:
            raise ConfigError("this command needs 'window'")
        return make_layer_config(grid, self.window, self.scales)


def _emit_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    if not path:
        return
    with open(path, "w", newline="") as fh:
        fh.write(f"# t3attn csv v{CSV_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {path}")


# --------------------------------------------------------------------------
# plan


def cmd_plan(cfg: RunConfig) -> int:
    cfg.fill(grid=(8, 16, 16), channels=16, heads=2, depth=5)
    grid, dims = cfg.grid_dims(), cfg.model_dims()
    schedule = build_layer_schedule(cfg.depth, cfg.blueprints(), grid)
    print(f"grid T,H,W = {grid.extents}  L = {grid.L}  depth = {cfg.depth}  group size = {schedule.group_size}")
    full_attn = 2 * grid.L * grid.L * dims.channels
    for i, lc in enumerate(schedule.configs):
        macs = attn_macs_t3_layer(grid.L, lc, dims.channels)
        ap = f"  axis-preserving={lc.axis_preserving}" if lc.axis_preserving else ""
        print(
            f"layer {i:3d}: window {lc.window.extents}  L_b={lc.window.L_b}  S={lc.S}"
            f"  attn MACs={macs:,} (x{full_attn / macs:.1f} vs full){ap}"
        )
        for p in lc.scales:
            print(
                f"    scale {p.scale_index}: stride {p.stride}  n_t,n_h,n_w={p.counts}"
                f"  N_b={p.n_blocks}  weight={lc.scale_weights[p.scale_index - 1]:g}"
            )
    distinct = len({lc.signature() for lc in schedule.configs})
    print(f"valid: all {cfg.depth} layers ({distinct} distinct configs)")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _random_configs(grid: GridDims, count: int, seed: int):
    gen = rng(seed)
    out = []
    while len(out) < count:
        window = tuple(int(gen.choice(divisors(e))) for e in grid.extents)
        S = int(gen.integers(1, 4))
        if S == 1 and window != grid.extents and gen.random() < 0.5:
            window = grid.extents
        out.append((f"random {window} S={S}", make_layer_config(grid, window, S)))
    return out


def cmd_verify(cfg: RunConfig) -> int:
    cfg.fill(grid=(4, 4, 8), channels=16, heads=4, depth=5)
    grid, dims = cfg.grid_dims(), cfg.model_dims()
    if grid.L > 512:
        raise ConfigError(f"verify needs L <= 512, grid {grid.extents} has L={grid.L}")
    if cfg.window is not None:
        configs = [(f"window {cfg.window} S={cfg.scales}", cfg.single_config(grid))]
    else:
        schedule = build_layer_schedule(min(cfg.depth, 5), cfg.blueprints(), grid)
        configs = [(f"layer {i}", lc) for i, lc in enumerate(schedule.configs)]
    configs += _random_configs(grid, cfg.configs, cfg.seed)
    results = verify_suite(grid, dims, configs, cfg.dtype, cfg.seed, fault=cfg.inject_fault)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed ({cfg.dtype})")
    return EXIT_VERIFY if failed else EXIT_OK


# --------------------------------------------------------------------------
# cost

COST_HEADER = ["resolution", "mode", "L", "rest", "qkv_proj", "o_proj", "ffn", "attn", "all", "attn_speedup", "reference_speedup"]


def _fmt(v: int, unit: float, suffix: str) -> str:
    return f"{v / unit:.1f}{suffix}"


def cmd_cost(cfg: RunConfig) -> int:
    dims = WAN_1_3B if cfg.channels is None else ModelDims(
        cfg.channels, cfg.heads or 1, cfg.ffn_width, cfg.depth or 1
    )
    resolutions = REFERENCE_RESOLUTIONS
    if cfg.resolutions is not None:
        try:
            resolutions = tuple(Resolution(**r) for r in cfg.resolutions)
        except TypeError as exc:
            raise ConfigError(f"bad resolution entry: {exc}") from exc
    rows: list[CostReport] = []
    for res in resolutions:
        grid, _ = token_count(res.latent())
        rows.append(full_report(grid, dims, WAN_REST_PARAMS, res.rest_macs, res.name))
        if cfg.group is not None:
            schedule = build_layer_schedule(dims.depth, cfg.blueprints(), grid)
        elif cfg.window is not None:
            schedule = uniform_schedule(dims.depth, make_layer_config(grid, cfg.window, cfg.scales))
        elif res.reference_speedup is not None:
            schedule = fitted_schedule(res, dims, cfg.scales)
        else:
            continue
        rows.append(t3_report(schedule, grid, dims, WAN_REST_PARAMS, res.rest_macs, res.name))

    p = rows[0].params
    print(f"{'':>12} {'':>5} {'Rest':>9} {'QKV':>9} {'O':>9} {'FFN':>9} {'Attn':>10} {'All':>10}")
    print(
        f"{'Param.':>12} {'':>5} " + " ".join(
            f"{_fmt(p[k], 1e6, 'M'):>9}" for k in ("rest", "proj_qkv", "proj_o", "ffn")
        ) + f" {p['attn']:>10} {_fmt(p['total'], 1e6, 'M'):>10}"
    )
    csv_rows = []
    for r in rows:
        m = r.macs
        cells = " ".join(f"{_fmt(m[k], 1e12, 'T'):>9}" for k in ("rest", "proj_qkv", "proj_o", "ffn"))
        tail = f" {_fmt(m['attn'], 1e12, 'T'):>10} {_fmt(m['total'], 1e12, 'T'):>10}"
        ref = next((x.reference_speedup for x in resolutions if x.name == r.label), None)
        if r.mode == "t3":
            tail += f"  x{r.speedup_attn:.1f}" + (f" (ref x{ref:.1f})" if ref else "")
        print(f"{r.label:>12} {r.mode:>5} {cells}{tail}")
        csv_rows.append(
            [r.label, r.mode, r.L, m["rest"], m["proj_qkv"], m["proj_o"], m["ffn"], m["attn"], m["total"],
             f"{r.speedup_attn:.4f}", ref if r.mode == "t3" and ref else ""]
        )
    csv_rows.insert(0, ["params", "shared", "", p["rest"], p["proj_qkv"], p["proj_o"], p["ffn"], 0, p["total"], "", ""])
    _emit_csv(cfg.out, COST_HEADER, csv_rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


@dataclass
class BenchReport:
    L: int
    full_times: list[float] = field(default_factory=list)
    t3_times: list[float] = field(default_factory=list)
    macs_full_attn: int = 0
    macs_t3_attn: int = 0
    note: str = ""

    @property
    def full_median(self) -> float | None:
        return statistics.median(self.full_times) if self.full_times else None

    @property
    def t3_median(self) -> float:
        return statistics.median(self.t3_times)

    @property
    def speedup(self) -> float | None:
        return None if self.full_median is None else self.full_median / self.t3_median

    @property
    def macs_ratio(self) -> float:
        return self.macs_full_attn / self.macs_t3_attn


def _time(fn, repeats: int) -> list[float]:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def run_bench(grid: GridDims, dims: ModelDims, config, repeats: int = 5, full_cap: int = 16384, seed: int = 0, dtype: str = "f32") -> BenchReport:
    gen = rng(seed)
    x = randn(gen, (grid.L, dims.channels), dtype)
    w = AttnWeights.random(dims.channels, gen, dtype)
    layer = T3Layer(w, config, dims, grid)
    rep = BenchReport(
        grid.L,
        macs_full_attn=macs_full(grid.L, ModelDims(dims.channels, dims.heads))["attn"],
        macs_t3_attn=attn_macs_t3_layer(grid.L, config, dims.channels),
    )
    rep.t3_times = _time(lambda: t3_forward(x, layer), repeats)
    if grid.L <= full_cap:
        rep.full_times = _time(lambda: full_attention_forward(x, w, dims), repeats)
    else:
        rep.note = f"full attention skipped: L={grid.L} exceeds cap {full_cap}"
    if grid.L < 512:
        rep.note = "small L: overhead-dominated, speedup may be < 1"
    return rep


def cmd_bench(cfg: RunConfig) -> int:
    cfg.fill(grid=(8, 32, 32), channels=64, heads=4, depth=1, window=(2, 8, 8))
    if cfg.repeats < 5:
        raise ConfigError(f"bench needs repeats >= 5 for a stable median, got {cfg.repeats}")
    grid, dims = cfg.grid_dims(), cfg.model_dims()
    config = cfg.single_config(grid)
    rep = run_bench(grid, dims, config, cfg.repeats, cfg.full_cap, cfg.seed, cfg.dtype)
    machine = f"{platform.machine()} {platform.processor() or platform.system()}, numpy {np.__version__}"
    print(f"grid {grid.extents}  L={rep.L}  C={dims.channels}  heads={dims.heads}  window {config.window.extents}  S={config.S}")
    print(f"analytic attn MACs: full {rep.macs_full_attn:,}  t3 {rep.macs_t3_attn:,}  ratio x{rep.macs_ratio:.1f}")
    print(f"t3   median {rep.t3_median * 1e3:9.2f} ms over {len(rep.t3_times)} runs")
    if rep.full_median is not None:
        print(f"full median {rep.full_median * 1e3:9.2f} ms over {len(rep.full_times)} runs")
        print(f"measured speedup x{rep.speedup:.2f}")
    if rep.note:
        print(f"note: {rep.note}")
    print(f"machine: {machine}")
    _emit_csv(
        cfg.out,
        ["L", "channels", "mode", "median_s", "runs", "attn_macs", "speedup", "machine"],
        [[rep.L, dims.channels, "t3", rep.t3_median, len(rep.t3_times), rep.macs_t3_attn, rep.speedup or "", machine]]
        + ([[rep.L, dims.channels, "full", rep.full_median, len(rep.full_times), rep.macs_full_attn, 1.0, machine]]
           if rep.full_median is not None else []),
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck

GRAD_TOL = 1e-6


def cmd_gradcheck(cfg: RunConfig) -> int:
    cfg.fill(grid=(2, 2, 4), channels=4, heads=2, depth=1, window=(1, 2, 2))
    if cfg.dtype != "f64":
        print("gradcheck always runs in f64")
    grid, dims = cfg.grid_dims(), cfg.model_dims()
    if grid.L > 48:
        raise ConfigError(f"gradcheck is for tiny grids (L <= 48), got L={grid.L}")
    errors = gradcheck_suite(grid, dims, cfg.single_config(grid), cfg.seed)
    worst = ("", "", 0.0)
    rows = []
    for kernel, errs in errors.items():
        for name, e in errs.items():
            print(f"{kernel:>4} {name:>4}: max relative error {e:.3e}")
            rows.append([kernel, name, e])
            if e > worst[2]:
                worst = (kernel, name, e)
    _emit_csv(cfg.out, ["kernel", "tensor", "rel_error"], rows)
    if worst[2] > GRAD_TOL:
        print(f"FAIL: {worst[0]} {worst[1]} relative error {worst[2]:.3e} > {GRAD_TOL:g}")
        return EXIT_VERIFY
    print(f"PASS: worst {worst[0]} {worst[1]} {worst[2]:.3e} <= {GRAD_TOL:g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# distill


def run_distill(cfg: RunConfig, direction: str):
    grid, dims = cfg.grid_dims(), cfg.model_dims()
    weights = [AttnWeights.random(dims.channels, rng(cfg.seed + i), cfg.dtype) for i in range(dims.depth)]
    schedule = uniform_schedule(dims.depth, cfg.single_config(grid))
    full = transform(weights, "full", dims, grid)
    t3 = transform(weights, schedule, dims, grid)
    teacher, student = (full, t3) if direction == "full->t3" else (t3, full)
    base = positional_field(grid, dims.channels, cfg.seed)
    eval_batch = next(latent_stream(base, cfg.seed + 1, batch=8, noise=cfg.noise, dtype=cfg.dtype))
    data = latent_stream(base, cfg.seed + 2, batch=cfg.batch, noise=cfg.noise, dtype=cfg.dtype)
    return distill_toy(teacher, student, data, cfg.steps, cfg.lr, eval_batch, schedule=cfg.lr_schedule)


def _non_increasing(values: list[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def cmd_distill(cfg: RunConfig) -> int:
    cfg.fill(grid=(4, 8, 8), channels=16, heads=2, depth=1, window=(2, 4, 4))
    directions = ["full->t3", "t3->full"] if cfg.direction == "both" else [cfg.direction]
    rows = []
    for direction in directions:
        state = run_distill(cfg, direction)
        print(
            f"{direction}: {state.step} steps, lr {state.lr:g}, held-out MSE "
            f"{state.eval_initial:.4e} -> {state.eval_final:.4e} (x{state.reduction:.3f})"
        )
        checkpoints = [e for _, e in state.eval_history]
        print(
            "  held-out MSE every 50 steps: " + " ".join(f"{e:.3e}" for e in checkpoints)
            + ("" if _non_increasing(checkpoints) else "  (not monotone)")
        )
        rows += [[direction, i, loss] for i, loss in enumerate(state.loss_history)]
    _emit_csv(cfg.out, ["direction", "step", "loss"], rows)
    return EXIT_OK


# --------------------------------------------------------------------------

COMMANDS = {
    "plan": cmd_plan,
    "verify": cmd_verify,
    "cost": cmd_cost,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "distill": cmd_distill,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--dtype", choices=["f32", "f64"])
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--out", help="CSV output path")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="t3attn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="print and validate a layer schedule")
    p = sub.add_parser("verify", parents=[common], help="oracle-equivalence and tiling suite")
    p.add_argument("--inject-fault", action="store_true", default=None, help="corrupt one gather index")
    p.add_argument("--configs", type=int, help="extra randomized configs to check")
    sub.add_parser("cost", parents=[common], help="parameter/MACs table")
    p = sub.add_parser("bench", parents=[common], help="wall-clock full vs windowed forward")
    p.add_argument("--repeats", type=int)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p = sub.add_parser("distill", parents=[common], help="toy teacher-student re-transform")
    p.add_argument("--steps", type=int)
    p.add_argument("--direction", choices=["both", "full->t3", "t3->full"])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {
        k: v for k, v in vars(args).items()
        if k not in ("config", "command", "verbose")
    }
    try:
        cfg = RunConfig.load(args.config, overrides)
        limits = contextlib.nullcontext()
        if cfg.threads:
            from threadpoolctl import threadpool_limits  # noqa: PLC0415

            limits = threadpool_limits(cfg.threads)
        with limits:
            return COMMANDS[args.command](cfg)
    except (ConfigError, PlanError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
