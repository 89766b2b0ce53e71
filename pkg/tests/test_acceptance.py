"""Acceptance suite: exact identities first, then desk-scale benchmark runs.

Every test records a PASS/FAIL line (shown in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured values.
"""

import time

import numpy as np
import pytest
import scipy.integrate

from conftest import (affine_mpc_qp, central_diff, enumerated_box_qp, random_normalizer,
                      randomize_biases, rel_err)
from deeponet_mpc.datagen import split_dataset
from deeponet_mpc.dynamics import IntegratorConfig, make_system, wrap_angle
from deeponet_mpc.experiments import benchmark_data, get_benchmark, run_benchmark, run_scenario
from deeponet_mpc.mpc import AffinePredictor, MpcProblemSpec, mpc_cost_and_grad, solve_mpc
from deeponet_mpc.neural import ffn_backward, ffn_forward, init_ffn, resample_away_from_kinks
from deeponet_mpc.operator_models import (conditioned_theta, embed_stacked, extract_basis,
                                          init_ms_deeponet, init_std_deeponet, ms_forward,
                                          predict_dataset, random_stacked, std_forward_z)
from deeponet_mpc.training import ablate, ablation_grid, train_model, validation_loss

FD_EPS = 1e-5
FD_TOL = 1e-5

# (N, n_u, n_y, n_z, p, branch widths, trunk widths, activation)
DIM_SWEEP = [
    (1, 1, 1, 1, 1, (3,), (2,), "tanh"),
    (2, 1, 1, 2, 3, (4,), (5,), "tanh"),
    (3, 2, 1, 2, 4, (6, 5), (4,), "tanh"),
    (4, 1, 2, 3, 2, (5,), (3, 3), "relu"),
    (5, 2, 2, 4, 5, (8,), (6,), "tanh"),
    (2, 3, 1, 1, 6, (7, 7), (2,), "relu"),
    (10, 1, 1, 2, 20, (40, 40, 40), (40, 40, 40), "tanh"),
    (6, 1, 3, 5, 3, (4, 6), (5, 7), "tanh"),
    (3, 3, 3, 3, 3, (3,), (3,), "relu"),
    (8, 2, 1, 4, 4, (10,), (10,), "tanh"),
    (1, 4, 2, 2, 7, (9,), (8, 2), "tanh"),
    (7, 1, 2, 1, 2, (2, 2, 2), (3,), "relu"),
    (20, 2, 4, 4, 20, (20, 20), (20, 20), "tanh"),
    (4, 2, 2, 6, 1, (5,), (5,), "tanh"),
    (5, 1, 5, 5, 8, (6,), (9, 9), "relu"),
    (2, 2, 2, 2, 2, (1,), (1,), "tanh"),
    (9, 1, 1, 3, 10, (12, 8), (6, 4), "tanh"),
    (3, 4, 1, 4, 6, (8, 8, 8), (5,), "relu"),
    (6, 2, 3, 2, 5, (7,), (7, 7, 7), "tanh"),
    (4, 3, 2, 8, 4, (6, 3), (2, 6), "tanh"),
    (12, 1, 2, 5, 9, (15,), (11,), "relu"),
    (40, 1, 5, 4, 8, (64, 64), (64, 64), "tanh"),
]


def sweep_models():
    for k, (N, n_u, n_y, n_z, p, bw, tw, act) in enumerate(DIM_SWEEP):
        rng = np.random.default_rng(k)
        m = init_ms_deeponet(N, n_u, n_y, n_z, p, bw, tw, act, k, random_normalizer(n_u, n_z, n_y, rng))
        randomize_biases([m.branch, m.trunk], rng)
        yield m, rng


# ---------------------------------------------------------------------------
# exact, fast criteria

@pytest.mark.acceptance(1)
def test_basis_representation_identity(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for m, rng in sweep_models():
        basis = extract_basis(m)
        for _ in range(100):
            u, x = 2 * rng.standard_normal(m.N * m.n_u), 2 * rng.standard_normal(m.n_z)
            worst = max(worst, np.max(np.abs(basis.predict(u, x) - ms_forward(m, u, x))))
    wall = time.perf_counter() - t0
    ok = len(DIM_SWEEP) >= 20 and worst < 1e-10 and wall < 10.0
    verdict(ok, f"{len(DIM_SWEEP)} dimension sets x 100 samples: max err {worst:.2e}, {wall:.2f} s")
    assert ok


@pytest.mark.acceptance(2)
def test_conditioned_coefficients_identity(verdict):
    worst = 0.0
    for m, rng in sweep_models():
        basis = extract_basis(m)
        for _ in range(100):
            u, x = 2 * rng.standard_normal(m.N * m.n_u), 2 * rng.standard_normal(m.n_z)
            phi_b, _ = basis.feature_stacks(u, x)
            y = conditioned_theta(basis, x) @ np.append(phi_b, 1.0)
            worst = max(worst, np.max(np.abs(y - ms_forward(m, u, x))))
    ok = worst < 1e-10
    verdict(ok, f"max err {worst:.2e}")
    assert ok


@pytest.mark.acceptance(3)
def test_stacked_embedding(verdict):
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        p, n, m, d = (int(v) for v in rng.integers(1, 7, 4))
        act = "tanh" if k % 2 == 0 else "relu"
        sp = random_stacked(p, n, m, d, seed=k, activation=act)
        s = np.tanh if act == "tanh" else (lambda v: np.maximum(v, 0.0))
        model = embed_stacked(sp)
        for _ in range(5):
            u, z = rng.standard_normal(m), rng.standard_normal(d)
            direct = sum(sp.c[a, i] * s(sp.xi[a, i] @ u + sp.theta[a, i]) * s(sp.w[a] @ z + sp.zeta[a])
                         for a in range(p) for i in range(n))
            worst = max(worst, abs(std_forward_z(model, [u], z)[0] - direct))
    ok = worst < 1e-12
    verdict(ok, f"50 single-input single-output instances: max err {worst:.2e}")
    assert ok


def _gradient_errors():
    errs = {}
    rng = np.random.default_rng(7)
    for act in ("tanh", "relu"):
        net = init_ffn([4, 7, 6, 3], act, seed=3)
        randomize_biases([net], rng)
        x = resample_away_from_kinks(net, lambda: rng.standard_normal((5, 4)), margin=1e-3)
        G = rng.standard_normal((5, 3))
        _, tape = ffn_forward(net, x)
        grads, dx = ffn_backward(net, tape, G)
        f = lambda: float(np.sum(G * ffn_forward(net, x)[0]))  # noqa: E731
        errs[f"ffn params ({act})"] = max(rel_err(g, central_diff(f, p, FD_EPS))
                                          for p, g in zip(net.params(), grads))
        errs[f"ffn input ({act})"] = rel_err(dx, central_diff(f, x, FD_EPS))

    ms = init_ms_deeponet(4, 2, 2, 3, 5, (8, 6), (5,), "tanh", 1, random_normalizer(2, 3, 2, rng))
    randomize_biases([ms.branch, ms.trunk], rng)
    Un, Zn, G = rng.standard_normal((6, 8)), rng.standard_normal((6, 3)), rng.standard_normal((6, 8))
    _, cache = ms.core_forward(Un, Zn)
    grads, _ = ms.core_backward(cache, G)
    f = lambda: float(np.sum(G * ms.core_forward(Un, Zn)[0]))  # noqa: E731
    errs["ms params"] = max(rel_err(g, central_diff(f, p, FD_EPS)) for p, g in zip(ms.params(), grads))
    u, x = rng.standard_normal(8), rng.standard_normal(3)
    J = ms.horizon_jacobian(u, x)
    Jfd = np.array([central_diff(lambda: ms_forward(ms, u, x)[r], u, FD_EPS) for r in range(8)])
    errs["ms dy/du"] = rel_err(J, Jfd)

    sd = init_std_deeponet(4, 2, 2, 2, 5, (6,), (5, 5), 0.1, "tanh", 2, random_normalizer(2, 3, 2, rng))
    randomize_biases([*sd.branches, sd.trunk], rng)
    win, inv = rng.standard_normal((3, 2, 4)), np.array([0, 0, 1, 2, 2, 1, 0])
    Zs, Gs = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
    _, cache = sd.core_forward(win, inv, Zs)
    grads, _ = sd.core_backward(cache, Gs)
    f = lambda: float(np.sum(Gs * sd.core_forward(win, inv, Zs)[0]))  # noqa: E731
    errs["std params"] = max(rel_err(g, central_diff(f, p, FD_EPS)) for p, g in zip(sd.params(), grads))
    xs = rng.standard_normal(2)
    J = sd.horizon_jacobian(u, xs)
    Jfd = np.array([central_diff(lambda: sd.horizon_predict(u, xs)[r], u, FD_EPS) for r in range(8)])
    errs["std dy/du"] = rel_err(J, Jfd)

    spec = MpcProblemSpec(4, np.diag([5.0, 1.0]), np.diag([0.3, 0.2]), y_box=[[-0.5, 0.5], [-1.0, 0.2]])
    for name, model, z in (("mpc cost (ms)", ms, x), ("mpc cost (std)", sd, xs)):
        r, up = rng.standard_normal(8), rng.standard_normal(2)
        _, g, _ = mpc_cost_and_grad(model, u, z, r, up, spec.Omega, spec.Psi, spec.y_box, spec.soft_weight)
        f = lambda: mpc_cost_and_grad(model, u, z, r, up, spec.Omega, spec.Psi,  # noqa: E731
                                      spec.y_box, spec.soft_weight, need_grad=False)[0]
        errs[name] = rel_err(g, central_diff(f, u, FD_EPS))
    return errs


@pytest.mark.acceptance(4)
def test_gradient_suite(verdict):
    errs = _gradient_errors()
    worst_name = max(errs, key=errs.get)
    ok = all(v < FD_TOL for v in errs.values())
    verdict(ok, f"{len(errs)} checks, worst {worst_name} rel err {errs[worst_name]:.2e}")
    assert ok, errs


@pytest.mark.acceptance(5)
def test_data_pipeline_oracle(verdict):
    bench = get_benchmark("vdp")
    sys = make_system("vdp")
    tight = IntegratorConfig(rel_tol=1e-12, abs_tol=1e-14)
    data = benchmark_data(bench, 300, seed=0, cfg=tight)
    ms, std = data["ms"], data["std"]
    worst = 0.0
    for i in range(ms.n_columns):
        x = ms.Z[:, i]
        for a in range(bench.N):
            u = ms.U[a, i]
            sol = scipy.integrate.solve_ivp(lambda t, s: sys.rhs(s, np.array([u])), (0.0, bench.Ts), x,
                                            method="DOP853", rtol=1e-13, atol=1e-14)
            x = sol.y[:, -1]
            worst = max(worst, abs(x[0] - ms.Y[a, i]))
    dual = True
    n_y, n_u = ms.n_y, ms.n_u
    steps = std.steps()
    for c in range(std.n_columns):
        i, j = std.window[c], steps[c]
        dual &= np.array_equal(std.Y[:, c], ms.Y[(j - 1) * n_y:j * n_y, i])
        dual &= np.array_equal(std.Z[:-1, c], ms.Z[:, i]) and std.Z[-1, c] == j * bench.Ts
        dual &= all(np.array_equal(std.U[q][:, c], ms.U[q::n_u, i]) for q in range(n_u))
    dual &= std.n_columns == bench.N * ms.n_columns
    ok = worst < 1e-8 and bool(dual)
    verdict(ok, f"{ms.n_columns} columns re-simulated: max err {worst:.2e}; layout duality exact: {bool(dual)}")
    assert ok


@pytest.mark.acceptance(6)
def test_solver_matches_enumerated_qp(verdict):
    worst, cases = 0.0, 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n_u = int(rng.integers(1, 4))
        N = int(rng.integers(1, 6 // n_u + 1))
        n_y = int(rng.integers(1, 3))
        model = AffinePredictor(rng.standard_normal((N * n_y, N * n_u)), rng.standard_normal((N * n_y, 2)),
                                rng.standard_normal(N * n_y), N, n_u, n_y)
        box = np.column_stack([-rng.uniform(0.1, 1, n_u), rng.uniform(0.1, 1, n_u)])
        spec = MpcProblemSpec(N, np.diag(rng.uniform(0.5, 5, n_y)), np.diag(rng.uniform(0.05, 1, n_u)),
                              u_box=box, tol=1e-10, max_iter=5000)
        x, r = rng.standard_normal(2), 2 * rng.standard_normal(N * n_y)
        up = rng.uniform(box[:, 0], box[:, 1])
        H, f = affine_mpc_qp(model.A, model.C, model.d, x, r, up, spec.Omega, spec.Psi, N, n_u)
        u_star = enumerated_box_qp(H, f, np.tile(box[:, 0], N), np.tile(box[:, 1], N))
        worst = max(worst, np.max(np.abs(solve_mpc(model, spec, x, up, r).ubar - u_star)))
        cases += 1
    ok = worst < 1e-6
    verdict(ok, f"{cases} affine problems with n_u*N <= 6: max |u - u_qp| {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# desk-scale benchmark runs (shared between criteria)

VDP_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def vdp_runs():
    t0 = time.perf_counter()
    runs = {s: run_benchmark("vdp", seed=s) for s in VDP_SEEDS}
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def quadtank_run():
    t0 = time.perf_counter()
    run = run_benchmark("quadtank", seed=0, layouts=("ms",))
    return run, time.perf_counter() - t0


@pytest.mark.slow
@pytest.mark.acceptance(7)
def test_vdp_tracking(verdict, vdp_runs):
    runs, wall = vdp_runs
    wins = 0
    parts = []
    for s, run in runs.items():
        a_ms, a_std = run.runs["ms"].loop.ame, run.runs["std"].loop.ame
        good = run.runs["ms"].loop.error is None and a_ms < 0.30 and a_ms <= a_std
        wins += good
        parts.append(f"seed {s}: ms {a_ms:.3f} / std {a_std:.3f}")
    ok = wins >= 2 and wall <= 15 * 60
    verdict(ok, f"{'; '.join(parts)}; {wins}/3 seeds meet both; {wall / 60:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.acceptance(8)
def test_vdp_validation_ordering(verdict, vdp_runs):
    runs, _ = vdp_runs
    wins = 0
    parts = []
    for s, run in runs.items():
        v_ms, v_std = run.runs["ms"].report.val_loss, run.runs["std"].report.val_loss
        wins += v_ms <= v_std
        parts.append(f"seed {s}: ms {v_ms:.2e} / std {v_std:.2e}")
    ok = wins >= 2
    verdict(ok, f"{'; '.join(parts)}; ms <= std for {wins}/3")
    assert ok


@pytest.mark.slow
@pytest.mark.acceptance(9)
def test_quadtank_constraints_and_tracking(verdict, quadtank_run):
    run, wall = quadtank_run
    loop = run.runs["ms"].loop
    u = loop.trajectory.inputs[:-1]
    in_box = bool(np.all(u >= 0.0) and np.all(u <= 4.0))
    ok = loop.error is None and in_box and loop.ame < 0.10 and wall <= 30 * 60
    verdict(ok, f"inputs in [0,4]^2: {in_box}; AME {loop.ame:.4f}; {wall / 60:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.acceptance(10)
def test_real_time_margin(verdict, vdp_runs, quadtank_run):
    loops = [(f"vdp seed {s} {k}", lr.loop, 0.1) for s, run in vdp_runs[0].items()
             for k, lr in run.runs.items()]
    loops.append(("quadtank ms", quadtank_run[0].runs["ms"].loop, 5.0))
    parts, ok = [], True
    for name, loop, Ts in loops:
        ok &= loop.mean_solve_s < Ts
        parts.append(f"{name} {loop.mean_solve_s * 1e3:.1f} ms")
    verdict(ok, "mean solve: " + ", ".join(parts))
    assert ok


@pytest.mark.slow
@pytest.mark.acceptance(11)
def test_ablation_prefix_best_is_monotone(verdict):
    epochs = 500
    bench = get_benchmark("vdp")
    data = benchmark_data(bench, 2000, seed=0, layouts=("ms",))["ms"]
    split = split_dataset(data, 0.8, 0)
    grid = ablation_grid(epochs=epochs, seed=0, precision="float32")
    assert (grid[0].l_b, grid[0].p, grid[0].branch_widths) == (1, 20, (20,))
    full = ablate(grid, data, split=split)
    vals = np.array([r.val_loss for r in full.reports])
    prefix_best = np.minimum.accumulate(vals)
    monotone = bool(np.all(np.diff(prefix_best) <= 0))
    # a configuration trains identically wherever it sits in the grid
    sub = [grid[0], grid[13], grid[26]]
    nested = ablate(sub[::-1], data, split=split)
    same = [r.val_loss for r in nested.reports[::-1]] == [vals[0], vals[13], vals[26]]
    ok = monotone and same and full.failures == {}
    verdict(ok, f"27 configs at {epochs} epochs: best val loss {prefix_best[0]:.2e} -> {prefix_best[-1]:.2e} "
                f"({full.best_report.config_id}); nested grids reproduce entries: {same}")
    assert ok


@pytest.mark.slow
@pytest.mark.acceptance(12)
def test_cartpole_upright_stabilization(verdict):
    bench = get_benchmark("cartpole")
    n_traj = bench.samples["desk"]
    assert n_traj >= 100
    data = benchmark_data(bench, n_traj, seed=0)["ms"]
    D_train, D_val = split_dataset(data, 0.8, 0)
    model, report = train_model("ms", bench.hyper("desk", 0), D_train, D_val)
    # held-out trajectories from an unrelated seed, first predicted step only
    test = benchmark_data(bench, 20, seed=12345)["ms"]
    P = predict_dataset(model, test)
    one_step = validation_loss(test.Y[:test.n_y], P[:test.n_y])
    loop = run_scenario("cartpole", model, bench)
    theta = wrap_angle(loop.trajectory.states[:, 1])
    held = loop.error is None and len(loop.steps) == 50
    upright = held and bool(np.all(np.abs(theta) < 0.5)) and abs(theta[-1]) < 0.2
    ok = one_step < 0.05 and upright
    verdict(ok, f"{n_traj} trajectories: one-step rel err {one_step:.4f}; 5 s from theta=0.1: "
                f"max |theta| {np.max(np.abs(theta)):.3f}, final {abs(theta[-1]):.3f}"
                f"{'' if loop.error is None else ', ' + loop.error}")
    assert ok
