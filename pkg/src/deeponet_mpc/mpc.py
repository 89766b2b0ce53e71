"""Receding-horizon tracking control with a learned multi-step predictor.

The optimizer works on the stacked input ``ubar = col(u_0, .., u_{N-1})``
and only needs a predictor exposing ``horizon_vjp(ubar, x, w)`` (see
``operator_models``); box constraints on ``u`` are handled by projection and
output bounds by a quadratic penalty.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from .dynamics import IntegratorConfig, SystemSpec, Trajectory, integrate_segment


class MpcError(RuntimeError):
    pass


def _as_matrix(M, n=None) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape == (1, 1) and n is not None and n > 1:
        M = M[0, 0] * np.eye(n)
    return M


def _check_pd(M, name):
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


def build_cost(Q, P, R, N: int):
    """``Omega = blockdiag(Q, .., Q, P)`` (N-1 copies of Q) and ``Psi = blockdiag(R, .., R)``."""
    Q, P, R = _as_matrix(Q), _as_matrix(P), _as_matrix(R)
    for M, name in ((Q, "Q"), (P, "P"), (R, "R")):
        _check_pd(M, name)
    if Q.shape != P.shape:
        raise ValueError("Q and P must have the same size")
    if N < 1:
        raise ValueError("horizon must be >= 1")
    Omega = block_diag(*([Q] * (N - 1) + [P]))
    Psi = block_diag(*([R] * N))
    return Omega, Psi


@dataclass
class MpcProblemSpec:
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray | None = None
    u_box: np.ndarray | None = None      # (n_u, 2) rows [lo, hi]
    y_box: np.ndarray | None = None      # (n_y, 2), soft
    Ts: float = 0.1
    max_iter: int = 100
    tol: float = 1e-6
    soft_weight: float = 1e6
    L0: float = 1.0

    def __post_init__(self):
        self.Q = _as_matrix(self.Q)
        self.R = _as_matrix(self.R)
        self.P = self.Q.copy() if self.P is None else _as_matrix(self.P)
        self.Omega, self.Psi = build_cost(self.Q, self.P, self.R, self.N)
        if self.u_box is not None:
            self.u_box = np.atleast_2d(np.asarray(self.u_box, dtype=float))
            if self.u_box.shape != (self.n_u, 2) or np.any(self.u_box[:, 0] > self.u_box[:, 1]):
                raise ValueError("u_box must have one [lo, hi] row per input")
        if self.y_box is not None:
            self.y_box = np.atleast_2d(np.asarray(self.y_box, dtype=float))
            if self.y_box.shape != (self.n_y, 2):
                raise ValueError("y_box must have one [lo, hi] row per output")

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    @property
    def n_y(self) -> int:
        return self.Q.shape[0]

    def project(self, ubar: np.ndarray) -> np.ndarray:
        if self.u_box is None:
            return ubar
        lo = np.tile(self.u_box[:, 0], self.N)
        hi = np.tile(self.u_box[:, 1], self.N)
        return np.minimum(np.maximum(ubar, lo), hi)


def _input_differences(ubar, u_prev, n_u):
    U = ubar.reshape(-1, n_u)
    return np.diff(np.vstack([u_prev[None, :], U]), axis=0).reshape(-1)


def _difference_adjoint(g_d, n_u):
    G = g_d.reshape(-1, n_u)
    out = G.copy()
    out[:-1] -= G[1:]
    return out.reshape(-1)


def mpc_cost_and_grad(model, ubar, x_k, r, u_prev, Omega, Psi, y_box=None,
                      soft_weight: float = 1e6, need_grad: bool = True):
    """``J = (y - r)' Omega (y - r) + du' Psi du`` with ``y = model(ubar, x_k)``.

    ``du`` holds first differences of the input blocks, the first one taken
    against ``u_prev``.  Returns ``(J, dJ/dubar, y)``.
    """
    ubar = np.asarray(ubar, dtype=float).reshape(-1)
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    r = np.asarray(r, dtype=float).reshape(-1)
    n_u = u_prev.size
    d = _input_differences(ubar, u_prev, n_u)
    Pd = Psi @ d
    holder = {}

    def output_weight(y):
        e = y - r
        Oe = Omega @ e
        J = float(e @ Oe)
        w = 2.0 * Oe
        if y_box is not None:
            n_y = y_box.shape[0]
            lo, hi = np.tile(y_box[:, 0], y.size // n_y), np.tile(y_box[:, 1], y.size // n_y)
            over = np.maximum(y - hi, 0.0) - np.maximum(lo - y, 0.0)
            J += soft_weight * float(over @ over)
            w = w + 2.0 * soft_weight * over
        holder["J"] = J
        return w

    if need_grad:
        y, gy = model.horizon_vjp(ubar, x_k, output_weight)
    else:
        y, _ = model.horizon_vjp(ubar, x_k)
        output_weight(y)
        gy = None
    J = holder["J"] + float(d @ Pd)
    if not np.isfinite(J):
        raise MpcError(f"non-finite MPC cost at x={np.asarray(x_k).tolist()}")
    grad = gy + _difference_adjoint(2.0 * Pd, n_u) if need_grad else None
    return J, grad, y


@dataclass
class MpcStep:
    x: np.ndarray
    u_prev: np.ndarray
    ubar: np.ndarray
    ybar: np.ndarray
    cost: float
    iters: int
    solve_s: float
    L: float = 1.0
    converged: bool = False


def _grad_map_norm(spec, u, g):
    return float(np.max(np.abs(spec.project(u - g) - u))) if u.size else 0.0


def solve_mpc(model, spec: MpcProblemSpec, x_k, u_prev, r, warm_start=None,
              L_init: float | None = None) -> MpcStep:
    """Accelerated projected gradient with backtracking on the Lipschitz estimate.

    Momentum restarts whenever the cost goes up; the lowest-cost iterate is
    returned and always satisfies the input box.
    """
    t0 = time.perf_counter()
    u_prev = np.asarray(u_prev, dtype=float).reshape(-1)
    if u_prev.size != spec.n_u or getattr(model, "N", spec.N) != spec.N:
        raise ValueError("model, spec and u_prev disagree on dimensions")
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.size == spec.n_y:
        r = np.tile(r, spec.N)
    u0 = np.tile(u_prev, spec.N) if warm_start is None else np.asarray(warm_start, float).reshape(-1)
    u = spec.project(u0.copy())

    def cost(v, grad=True):
        return mpc_cost_and_grad(model, v, x_k, r, u_prev, spec.Omega, spec.Psi, spec.y_box,
                                 spec.soft_weight, need_grad=grad)

    J, g, y = cost(u)
    gm = _grad_map_norm(spec, u, g)
    best = (J, u.copy(), y, gm)
    L = float(L_init if L_init is not None else spec.L0)
    converged = gm < spec.tol
    u_old, t_m, it = u.copy(), 1.0, 0
    while not converged and it < spec.max_iter:
        it += 1
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_m * t_m))
        v = spec.project(u + ((t_m - 1.0) / t_next) * (u - u_old))
        Jv, gv, _ = cost(v) if t_m > 1.0 else (J, g, y)
        while True:
            u_new = spec.project(v - gv / L)
            step = u_new - v
            J_new, g_new, y_new = cost(u_new)
            ss = step @ step
            if J_new <= Jv + gv @ step + 0.5 * L * ss:
                break
            # when cost differences drown in rounding, test the local Lipschitz bound instead
            if abs(J_new - Jv) <= 1e-10 * max(1.0, abs(Jv)) and (g_new - gv) @ step <= L * ss:
                break
            L *= 2.0
            if L > 1e16:
                raise MpcError("line search failed to find a descent step")
        # restart momentum whenever the cost goes up
        t_m = 1.0 if J_new > J else t_next
        u_old, u = u, u_new
        J, g, y = J_new, g_new, y_new
        gm = _grad_map_norm(spec, u, g)
        # cost values stop resolving progress near the optimum; break such ties
        # with the gradient mapping
        noise = 1e-12 * max(1.0, abs(best[0]))
        if J < best[0] - noise or (J <= best[0] + noise and gm < best[3]):
            best = (J, u.copy(), y, gm)
        converged = gm < spec.tol
        L = max(L * 0.7, 1e-12)
    J_best, u_best, y_best, _ = best
    return MpcStep(np.asarray(x_k, float).copy(), u_prev.copy(), u_best, y_best, J_best, it,
                   time.perf_counter() - t0, L, converged)


# ---------------------------------------------------------------------------
# closed loop

def reference_schedule(schedule, n_y: int | None = None):
    """Piecewise-constant reference from ``[(t_switch, value), ..]`` as a function of time."""
    pts = sorted((float(t), np.atleast_1d(np.asarray(v, dtype=float))) for t, v in schedule)
    if not pts:
        raise ValueError("empty reference schedule")
    if n_y is not None and any(v.size != n_y for _, v in pts):
        raise ValueError("reference values must have n_y entries")
    times = np.array([t for t, _ in pts])

    def ref(t):
        i = int(np.searchsorted(times, t + 1e-12, side="right")) - 1
        return pts[max(i, 0)][1]

    return ref


@dataclass
class ClosedLoopResult:
    trajectory: Trajectory
    steps: list
    y_log: np.ndarray
    r_log: np.ndarray
    ame: float
    mean_solve_s: float
    error: str | None = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tr = self.trajectory
        n_x, n_u, n_y = tr.states.shape[1], tr.inputs.shape[1], self.y_log.shape[1]
        header = (["k", "t", "solve_s", "iters", "J"] + [f"x{i + 1}" for i in range(n_x)]
                  + [f"u_applied{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)]
                  + [f"r{i + 1}" for i in range(n_y)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, st in enumerate(self.steps):
                row = [k, repr(float(tr.times[k])), repr(st.solve_s), st.iters, repr(st.cost)]
                row += [repr(float(v)) for v in tr.states[k]]
                row += [repr(float(v)) for v in tr.inputs[k]]
                row += [repr(float(v)) for v in self.y_log[k]]
                row += [repr(float(v)) for v in self.r_log[k]]
                w.writerow(row)
        return path


def ame(y_log, r_log) -> float:
    """Mean absolute tracking error over all steps and output channels."""
    y_log = np.atleast_2d(np.asarray(y_log, dtype=float))
    r_log = np.atleast_2d(np.asarray(r_log, dtype=float))
    if y_log.shape != r_log.shape:
        raise ValueError("y and r logs differ in shape")
    if y_log.size == 0:
        raise ValueError("empty log")
    return float(np.mean(np.abs(y_log - r_log)))


def shift_warm_start(ubar: np.ndarray, n_u: int) -> np.ndarray:
    """Drop the first block and repeat the last one."""
    U = ubar.reshape(-1, n_u)
    return np.vstack([U[1:], U[-1:]]).reshape(-1)


def run_closed_loop(plant: SystemSpec, model, spec: MpcProblemSpec, x0, steps: int, reference,
                    u0=None, cfg: IntegratorConfig = IntegratorConfig(), state_fn=None,
                    measure=None) -> ClosedLoopResult:
    """Measure, solve, apply the first input block by zero-order hold, repeat.

    ``reference`` is a function of time, a ``[(t_switch, value)]`` schedule or
    a constant vector.  ``state_fn(x, history)`` maps the plant state to the
    predictor's trunk input (default: the state itself); ``measure`` maps the
    state to the tracked output (default: the plant output map).
    """
    if callable(reference):
        ref = reference
    elif isinstance(reference, (list, tuple)) and reference and isinstance(reference[0], (list, tuple)) \
            and len(reference[0]) == 2 and np.ndim(reference[0][0]) == 0:
        ref = reference_schedule(reference, spec.n_y)
    else:
        const = np.atleast_1d(np.asarray(reference, dtype=float))
        ref = lambda t: const  # noqa: E731
    measure = measure or plant.output_map
    x = np.asarray(x0, dtype=float).copy()
    u_prev = np.zeros(plant.n_u) if u0 is None else np.atleast_1d(np.asarray(u0, dtype=float)).copy()
    xs, us, ys, rs, log = [x.copy()], [], [], [], []
    history = {"u": [], "y": [np.asarray(measure(x), float)]}
    warm, L, error = None, None, None
    Ts = spec.Ts
    for k in range(steps):
        t = k * Ts
        r_k = np.asarray(ref(t), dtype=float)
        z = state_fn(x, history) if state_fn is not None else x
        try:
            st = solve_mpc(model, spec, z, u_prev, r_k, warm_start=warm, L_init=L)
        except (MpcError, FloatingPointError) as exc:
            error = f"step {k}: {exc}"
            break
        u_k = st.ubar[:plant.n_u].copy()
        try:
            x_next = integrate_segment(plant, x, u_k, Ts, cfg)
        except Exception as exc:  # integration failure ends the run with a partial log
            error = f"step {k}: {exc}"
            break
        log.append(st)
        us.append(u_k)
        ys.append(np.asarray(measure(x), float))
        rs.append(r_k)
        history["u"].append(u_k)
        x = x_next
        history["y"].append(np.asarray(measure(x), float))
        xs.append(x.copy())
        u_prev = u_k
        warm = shift_warm_start(st.ubar, plant.n_u)
        L = st.L
    n = len(us)
    states = np.array(xs[:n + 1])
    inputs = np.vstack([np.array(us).reshape(n, plant.n_u), np.full((1, plant.n_u), np.nan)])
    outputs = np.array([plant.output_map(s) for s in states])
    traj = Trajectory(np.arange(n + 1) * Ts, states, inputs, outputs)
    n_meas = history["y"][0].size
    y_log = np.array(ys).reshape(n, n_meas)
    r_log = np.array(rs).reshape(n, -1) if n else np.zeros((0, n_meas))
    score = ame(y_log, r_log) if n else float("nan")
    mean_solve = float(np.mean([s.solve_s for s in log])) if log else float("nan")
    return ClosedLoopResult(traj, log, y_log, r_log, score, mean_solve, error)


# ---------------------------------------------------------------------------
# affine predictor (for testing against quadratic programs)

@dataclass
class AffinePredictor:
    """``y = A ubar + C x + d``; a stand-in predictor with exact quadratic cost."""

    A: np.ndarray
    C: np.ndarray
    d: np.ndarray
    N: int
    n_u: int
    n_y: int
    layout: str = field(default="ms")

    def horizon_vjp(self, ubar, x, w=None):
        y = self.A @ np.asarray(ubar, float).reshape(-1) + self.C @ np.asarray(x, float).reshape(-1) + self.d
        if w is None:
            return y, None
        if callable(w):
            w = w(y)
        return y, self.A.T @ np.asarray(w, dtype=float)

    def horizon_predict(self, ubar, x):
        return self.horizon_vjp(ubar, x)[0]
