"""Benchmark settings, excitation signals, closed-loop scenarios and reports.

Each benchmark bundles the plant, the sampling time, the prediction horizon,
the network architecture, the MPC weights and a tracking scenario.  Desk
scale shrinks data and epochs so that a full run fits on a laptop; full
scale restores the reference sizes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import (build_ms_dataset, build_standard_dataset, generate_swingup_dataset,
                      split_dataset)
from .dynamics import IntegratorConfig, integrate_segment, make_system, simulate_zoh
from .mpc import ClosedLoopResult, MpcProblemSpec, run_closed_loop
from .operator_models import save_model
from .training import HyperConfig, TrainReport, train_model


@dataclass(frozen=True)
class Benchmark:
    name: str
    Ts: float
    N: int
    layers: tuple
    p: int
    Q: tuple
    R: tuple
    u_box: tuple | None
    samples: dict            # scale -> number of input samples (or trajectories)
    epochs: dict             # scale -> epochs
    mpc_iters: int = 100
    mpc_tol: float = 1e-4
    layouts: tuple = ("ms", "std")
    batch_size: int | None = None
    extra: dict = field(default_factory=dict)

    def hyper(self, scale: str, seed: int, epochs: int | None = None,
              precision: str = "float32") -> HyperConfig:
        return HyperConfig(l_b=len(self.layers), l_t=len(self.layers), p=self.p,
                           branch_widths=self.layers, trunk_widths=self.layers,
                           epochs=epochs or self.epochs[scale], seed=seed,
                           batch_size=self.batch_size, precision=precision)

    def mpc_spec(self) -> MpcProblemSpec:
        return MpcProblemSpec(self.N, np.diag(self.Q), np.diag(self.R),
                              u_box=None if self.u_box is None else np.array(self.u_box),
                              Ts=self.Ts, max_iter=self.mpc_iters, tol=self.mpc_tol)


BENCHMARKS = {
    "vdp": Benchmark("vdp", 0.1, 10, (40, 40, 40), 20, (100.0,), (1.0,), None,
                     samples={"desk": 2000, "full": 2000}, epochs={"desk": 5000, "full": 40000}),
    "quadtank": Benchmark("quadtank", 5.0, 20, (20, 20), 20, (100.0,) * 4, (1.0, 1.0),
                          ((0.0, 4.0), (0.0, 4.0)),
                          samples={"desk": 2000, "full": 8000}, epochs={"desk": 5000, "full": 40000}),
    "cartpole": Benchmark("cartpole", 0.1, 40, (64, 64), 8, (1.0, 1000.0, 1.0, 1.0, 1.0), (0.01,),
                          ((-20.0, 20.0),),
                          samples={"desk": 200, "full": 1100}, epochs={"desk": 1000, "full": 40000},
                          layouts=("ms",), batch_size=512,
                          extra={"traj_len": 100, "noise_amp": 2.0, "full_layers": (128, 256, 128),
                                 "full_p": 40}),
}


def get_benchmark(name: str, scale: str = "desk") -> Benchmark:
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    if scale not in ("desk", "full"):
        raise ValueError("scale must be 'desk' or 'full'")
    b = BENCHMARKS[name]
    if scale == "full" and "full_layers" in b.extra:
        b = replace(b, layers=b.extra["full_layers"], p=b.extra["full_p"])
    return b


# ---------------------------------------------------------------------------
# excitation

def vdp_excitation(n: int, Ts: float, rng: np.random.Generator, u_max: float = 20.0,
                   cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Piecewise-constant input that keeps ``x1`` roughly within +-2.5.

    Without a restoring term the position drifts under purely random inputs,
    so the samples come from a randomized PD law towards random set-points
    plus dither; the resulting sequence is then replayed open loop.
    """
    sys = make_system("vdp")
    x = np.zeros(2)
    U = np.empty((n, 1))
    hold = 0
    for k in range(n):
        if hold == 0:
            target = rng.uniform(-2.5, 2.5)
            hold = int(rng.integers(5, 40))
            dither = rng.uniform(0.0, 3.0)
            kp, kd = rng.uniform(2.0, 20.0), rng.uniform(1.0, 6.0)
        hold -= 1
        u = kp * (target - x[0]) - kd * x[1] + dither * rng.uniform(-1.0, 1.0)
        U[k, 0] = np.clip(u, -u_max, u_max)
        x = integrate_segment(sys, x, U[k], Ts, cfg)
    return U


def quadtank_excitation(n: int, rng: np.random.Generator, lo: float = 0.0, hi: float = 4.0,
                        min_hold: int = 10, max_hold: int = 40) -> np.ndarray:
    """Independent random steps on both pumps with random hold times."""
    U = np.empty((n, 2))
    for q in range(2):
        k = 0
        while k < n:
            h = int(rng.integers(min_hold, max_hold + 1))
            U[k:k + h, q] = rng.uniform(lo, hi)
            k += h
    return U


def quadtank_equilibrium(u, params=None) -> np.ndarray:
    """Steady tank levels for constant pump inputs ``u``."""
    sys = make_system("quadtank", params)
    p = sys.params
    c = np.sqrt(2.0 * p["g"])
    u1, u2 = np.asarray(u, dtype=float)
    ga, gb = p["gamma_a"], p["gamma_b"]
    h3 = ((1.0 - gb) * u2 / (3600.0 * p["a3"] * c)) ** 2
    h4 = ((1.0 - ga) * u1 / (3600.0 * p["a4"] * c)) ** 2
    h1 = ((ga * u1 + (1.0 - gb) * u2) / (3600.0 * p["a1"] * c)) ** 2
    h2 = ((gb * u2 + (1.0 - ga) * u1) / (3600.0 * p["a2"] * c)) ** 2
    return np.array([h1, h2, h3, h4])


# ---------------------------------------------------------------------------
# data

def benchmark_data(bench: Benchmark, samples: int, seed: int, cfg=IntegratorConfig(),
                   layouts=("ms", "std"), workers: int = 1) -> dict:
    """Both data layouts built from one simulated run (keys ``ms`` / ``std``)."""
    rng = np.random.default_rng(seed)
    if bench.name == "cartpole":
        sys = make_system("cartpole")
        ms = generate_swingup_dataset(sys, samples, bench.extra["traj_len"], bench.N, bench.Ts,
                                      bench.extra["noise_amp"], seed, cfg, workers=workers)
        return {"ms": ms}
    sys = make_system(bench.name)
    if bench.name == "vdp":
        U = vdp_excitation(samples, bench.Ts, rng, cfg=cfg)
        x0 = np.zeros(2)
    else:
        U = quadtank_excitation(samples, rng)
        x0 = quadtank_equilibrium(U[0])
    traj = simulate_zoh(sys, x0, U, bench.Ts, cfg)
    meta = {"system": bench.name, "seed": seed}
    out = {}
    if "ms" in layouts:
        out["ms"] = build_ms_dataset(traj.states, traj.outputs, traj.inputs, bench.N, bench.Ts, meta=meta)
    if "std" in layouts:
        out["std"] = build_standard_dataset(traj.states, traj.outputs, traj.inputs, bench.N,
                                            bench.Ts, meta=meta)
    return out


# ---------------------------------------------------------------------------
# scenarios

@dataclass
class Scenario:
    x0: np.ndarray
    u0: np.ndarray
    steps: int
    reference: object          # schedule [(t, value)] or constant vector


def default_scenario(name: str) -> Scenario:
    if name == "vdp":
        sched = [(0.0, [1.0]), (5.0, [-1.0]), (10.0, [2.0]), (15.0, [0.0]), (20.0, [-1.5])]
        return Scenario(np.zeros(2), np.zeros(1), 250, sched)
    if name == "quadtank":
        # set-points are steady states of nearby constant pump settings
        levels = [quadtank_equilibrium(u) for u in ((2.5, 2.0), (2.0, 2.5), (2.2, 2.2))]
        sched = [(500.0 * i, lv.tolist()) for i, lv in enumerate(levels)]
        return Scenario(quadtank_equilibrium((2.0, 2.0)), np.array([2.0, 2.0]), 300, sched)
    if name == "cartpole":
        return Scenario(np.array([0.0, 0.1, 0.0, 0.0]), np.zeros(1), 50,
                        np.array([0.0, 1.0, 0.0, 0.0, 0.0]))
    raise ValueError(f"unknown scenario {name!r}")


def run_scenario(name: str, model, bench: Benchmark | None = None, scenario: Scenario | None = None,
                 cfg=IntegratorConfig()) -> ClosedLoopResult:
    bench = bench or get_benchmark(name)
    sc = scenario or default_scenario(name)
    plant = make_system(name)
    return run_closed_loop(plant, model, bench.mpc_spec(), sc.x0, sc.steps, sc.reference,
                           u0=sc.u0, cfg=cfg)


# ---------------------------------------------------------------------------
# full pipeline

@dataclass
class LayoutRun:
    layout: str
    model: object
    report: TrainReport
    loop: ClosedLoopResult | None


@dataclass
class BenchmarkRun:
    name: str
    scale: str
    seed: int
    runs: dict
    data_s: float
    config: HyperConfig


def run_benchmark(name: str, seed: int = 0, scale: str = "desk", epochs: int | None = None,
                  samples: int | None = None, layouts=None, control: bool = True,
                  workers: int = 1, precision: str = "float32", log=None) -> BenchmarkRun:
    """Generate data, train each layout on the same split, then run the tracking scenario."""
    bench = get_benchmark(name, scale)
    layouts = tuple(layouts or bench.layouts)
    t0 = time.perf_counter()
    data = benchmark_data(bench, samples or bench.samples[scale], seed, layouts=layouts,
                          workers=workers)
    data_s = time.perf_counter() - t0
    cfg = bench.hyper(scale, seed, epochs, precision)
    runs = {}
    for layout in layouts:
        D_train, D_val = split_dataset(data[layout], 0.8, seed)
        model, report = train_model(layout, cfg, D_train, D_val)
        if log:
            log(f"{name}/{layout}: val loss {report.val_loss:.3e} ({report.wall_s:.0f} s)")
        loop = run_scenario(name, model, bench) if control else None
        if log and loop is not None:
            log(f"{name}/{layout}: AME {loop.ame:.4f}, mean solve {loop.mean_solve_s:.4f} s")
        runs[layout] = LayoutRun(layout, model, report, loop)
    return BenchmarkRun(name, scale, seed, runs, data_s, cfg)


def write_report(run: BenchmarkRun, out_dir, figures: bool = True) -> Path:
    """Models, closed-loop CSV logs, loss histories, figures and a markdown table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(run.runs)
    for layout, lr in run.runs.items():
        save_model(lr.model, out / f"model_{layout}.json")
        np.savetxt(out / f"loss_{layout}.csv", lr.report.history, fmt="%.10g", header="train_loss")
        if lr.loop is not None:
            lr.loop.to_csv(out / f"closed_loop_{layout}.csv")
    title = {"ms": "MS-DeepONet", "std": "Standard DeepONet"}
    lines = [f"# {run.name} benchmark ({run.scale} scale, seed {run.seed})", ""]
    if run.scale == "desk":
        lines += [f"Desk scale: {run.config.epochs} epochs and reduced data; "
                  "absolute losses are not comparable with full-scale training.", ""]
    lines += ["| metric | " + " | ".join(title[c] for c in cols) + " |",
              "|---|" + "---|" * len(cols)]

    def row(label, fn):
        vals = []
        for c in cols:
            try:
                vals.append(fn(run.runs[c]))
            except Exception as exc:  # keep the table even when one stage failed
                vals.append(f"n/a ({type(exc).__name__})")
        lines.append(f"| {label} | " + " | ".join(vals) + " |")

    row("validation loss", lambda r: f"{r.report.val_loss:.4e}")
    row("training loss", lambda r: f"{r.report.train_loss:.4e}")
    row("AME", lambda r: f"{r.loop.ame:.4f}")
    row("mean solve time [s]", lambda r: f"{r.loop.mean_solve_s:.4f}")
    row("training time [s]", lambda r: f"{r.report.wall_s:.1f}")
    row("parameters", lambda r: str(r.report.n_params))
    arch = run.config
    lines += ["", f"Architecture: p={arch.p}, hidden widths {list(arch.branch_widths)}, "
                  f"activation {arch.activation}, lambda={arch.lam}, lr={arch.lr}."]
    errors = [f"- {c}: {r.loop.error}" for c, r in run.runs.items() if r.loop is not None and r.loop.error]
    if errors:
        lines += ["", "Closed-loop failures:"] + errors
    if figures:
        from .plotting import plot_losses, plot_tracking
        loops = {c: r.loop for c, r in run.runs.items() if r.loop is not None}
        if loops:
            plot_tracking(loops, out / "tracking.svg", title=f"{run.name} tracking")
            lines += ["", "![tracking](tracking.svg)"]
        plot_losses({c: r.report.history for c, r in run.runs.items()}, out / "loss.svg")
        lines += ["", "![training loss](loss.svg)"]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    summary = {c: {"val_loss": r.report.val_loss, "train_loss": r.report.train_loss,
                   "ame": None if r.loop is None else r.loop.ame,
                   "mean_solve_s": None if r.loop is None else r.loop.mean_solve_s,
                   "train_s": r.report.wall_s} for c, r in run.runs.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return out / "report.md"
