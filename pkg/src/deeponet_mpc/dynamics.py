"""Benchmark plants, adaptive Runge-Kutta integration and zero-order-hold simulation.

Three continuous-time plants are registered: the forced van der Pol
oscillator (``vdp``), the quadruple tank process (``quadtank``) and the
pendulum on a cart (``cartpole``).  They serve both as the data-generating
truth and as the closed-loop plant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
import scipy.linalg


class DomainError(ValueError):
    """Raised when a right-hand side is evaluated outside its domain."""


class IntegrationError(RuntimeError):
    """Raised when the adaptive integrator cannot make progress."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.17g}")
        self.t = t


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_x: int
    n_u: int
    n_y: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    output_map: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    params: Mapping[str, float] = field(default_factory=dict)
    u_box: np.ndarray | None = None

    def __post_init__(self):
        if min(self.n_x, self.n_u, self.n_y) < 1:
            raise ValueError("state, input and output dimensions must be >= 1")


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_step: float = math.inf
    max_steps: int = 100_000
    method: str = "RK5(4)"

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("integrator tolerances must be positive")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")


@dataclass
class Trajectory:
    """Sampled run of a plant.

    ``inputs[k]`` is the value held on ``[t_k, t_{k+1})``; the final row has
    no following interval and is NaN.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        m = len(self.times)
        if not (len(self.states) == len(self.inputs) == len(self.outputs) == m):
            raise ValueError("trajectory row counts differ")
        if m > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def to_csv(self, path) -> None:
        n_x = self.states.shape[1]
        n_u = self.inputs.shape[1]
        n_y = self.outputs.shape[1]
        header = (["t"] + [f"x{i + 1}" for i in range(n_x)]
                  + [f"u{i + 1}" for i in range(n_u)] + [f"y{i + 1}" for i in range(n_y)])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in np.column_stack([self.times, self.states, self.inputs, self.outputs]):
                writer.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path) as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n_x = sum(h.startswith("x") for h in header)
        n_u = sum(h.startswith("u") for h in header)
        return cls(data[:, 0], data[:, 1:1 + n_x], data[:, 1 + n_x:1 + n_x + n_u],
                   data[:, 1 + n_x + n_u:])


# ---------------------------------------------------------------------------
# plant definitions

# negative tank levels within this band are treated as integration jitter
LEVEL_TOL = 1e-9

DEFAULT_PARAMS = {
    "vdp": {"mu": 1.0},
    "quadtank": {"S_c": 0.06, "a1": 1.31e-4, "a2": 1.51e-4, "a3": 9.27e-5, "a4": 8.82e-5,
                 "gamma_a": 0.3, "gamma_b": 0.4, "g": 9.81},
    "cartpole": {"M": 2.4, "m": 0.23, "l": 0.18, "g": 9.81},
}

DEFAULT_U_BOX = {
    "vdp": None,
    "quadtank": [[0.0, 4.0], [0.0, 4.0]],
    "cartpole": [[-20.0, 20.0]],
}


def _vdp(p):
    mu = p["mu"]

    def rhs(x, u):
        x1, x2 = x[0], x[1]
        # no -x1 restoring term: every (x1, 0) is an equilibrium for u = 0
        return np.array([x2, mu * (1.0 - x1 * x1) * x2 + u[0]])

    def output_map(x):
        return np.array([x[0]])

    return rhs, output_map, (2, 1, 1)


def _sqrt_level(h):
    if h < 0.0:
        if h < -LEVEL_TOL:
            raise DomainError(f"negative tank level {h!r}")
        return 0.0
    return math.sqrt(h)


def _quadtank(p):
    S, g = p["S_c"], p["g"]
    a1, a2, a3, a4 = p["a1"], p["a2"], p["a3"], p["a4"]
    ga, gb = p["gamma_a"], p["gamma_b"]
    c = math.sqrt(2.0 * g)

    def rhs(x, u):
        q1, q2, q3, q4 = (c * _sqrt_level(h) for h in (x[0], x[1], x[2], x[3]))
        u1, u2 = u[0], u[1]
        return np.array([
            (-a1 * q1 + a3 * q3) / S + ga * u1 / (3600.0 * S),
            (-a2 * q2 + a4 * q4) / S + gb * u2 / (3600.0 * S),
            -a3 * q3 / S + (1.0 - gb) * u2 / (3600.0 * S),
            -a4 * q4 / S + (1.0 - ga) * u1 / (3600.0 * S),
        ])

    def output_map(x):
        return np.array(x, dtype=float)

    return rhs, output_map, (4, 2, 4)


def _cartpole(p):
    M, m, l, g = p["M"], p["m"], p["l"], p["g"]
    mt = M + m

    def rhs(x, u):
        th, xd, thd = x[1], x[2], x[3]
        s, c = math.sin(th), math.cos(th)
        f = u[0]
        den = 1.0 - 3.0 * m * c * c / (4.0 * mt)
        xdd = (f / mt - 3.0 * m * g * s * c / (4.0 * mt) + m * l * thd * thd * s / mt) / den
        thdd = (3.0 * g * s / (4.0 * l) - 3.0 * f * c / (4.0 * l * mt)
                - 3.0 * m * thd * thd * s * c / (4.0 * mt)) / den
        return np.array([xd, thd, xdd, thdd])

    def output_map(x):
        return np.array([x[0], math.cos(x[1]), math.sin(x[1]), x[2], x[3]])

    return rhs, output_map, (4, 1, 5)


_BUILDERS = {"vdp": _vdp, "quadtank": _quadtank, "cartpole": _cartpole}


def make_system(name: str, overrides: Mapping[str, float] | None = None) -> SystemSpec:
    """Build a registered plant with the benchmark parameters.

    ``overrides`` may replace any declared parameter; unknown names raise.
    """
    if name not in _BUILDERS:
        raise ValueError(f"unknown system {name!r}; expected one of {sorted(_BUILDERS)}")
    params = dict(DEFAULT_PARAMS[name])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(f"unknown parameter {key!r} for system {name!r}")
        params[key] = float(value)
    rhs, output_map, (n_x, n_u, n_y) = _BUILDERS[name](params)
    box = DEFAULT_U_BOX[name]
    return SystemSpec(name, n_x, n_u, n_y, rhs, output_map, MappingProxyType(params),
                      None if box is None else np.array(box, dtype=float))


def eval_rhs(sys: SystemSpec, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (sys.n_x,) or u.shape != (sys.n_u,):
        raise ValueError(f"expected x of size {sys.n_x} and u of size {sys.n_u}")
    return sys.rhs(x, u)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th and embedded 4th order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _initial_step(f, y0, f0, cfg, t_end):
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_end, cfg.max_step)
    try:
        f1 = f(y0 + h0 * f0)
    except DomainError:
        return h0 * 1e-3
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, t_end, cfg.max_step)


def rk45_solve(f, y0, t_end: float, cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Integrate ``y' = f(y)`` from 0 to ``t_end`` with adaptive DOPRI5 steps.

    A stage that leaves the domain of ``f`` counts as a rejected step.
    """
    y = np.array(y0, dtype=float)
    t = 0.0
    try:
        k1 = f(y)
    except DomainError as exc:
        raise IntegrationError(f"initial state outside domain ({exc})", t) from exc
    if not np.all(np.isfinite(k1)):
        raise IntegrationError("non-finite derivative", t)
    h = _initial_step(f, y, k1, cfg, t_end)
    steps = 0
    while t < t_end:
        if steps >= cfg.max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
        steps += 1
        h = min(h, cfg.max_step)
        last = t + h >= t_end * (1 - 1e-14)
        if last:
            h = t_end - t
        if h <= 1e-14 * max(abs(t), 1.0):
            raise IntegrationError("step size underflow", t)
        k = [k1]
        try:
            for s in range(1, 7):
                ys = y + h * sum(a * ki for a, ki in zip(_A[s], k) if a != 0.0)
                k.append(f(ys))
        except DomainError:
            h *= 0.5
            continue
        y_new = ys  # seventh stage sits at the 5th order solution
        K = np.array(k)
        if not np.all(np.isfinite(K)):
            h *= 0.5
            continue
        err = h * (_E @ K)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if err_norm <= 1.0:
            t = t_end if last else t + h
            y = y_new
            k1 = k[6]
            factor = 10.0 if err_norm == 0.0 else min(10.0, 0.9 * err_norm ** -0.2)
            h *= factor
        else:
            h *= max(0.2, 0.9 * err_norm ** -0.2)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite state", t)
    return y


def integrate_segment(sys: SystemSpec, x0, u_const, dt: float,
                      cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """State after holding ``u_const`` for ``dt`` seconds from ``x0``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u_const, dtype=float).reshape(sys.n_u)
    return rk45_solve(lambda x: sys.rhs(x, u), np.asarray(x0, dtype=float), float(dt), cfg)


def simulate_zoh(sys: SystemSpec, x0, u_seq, Ts: float,
                 cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Apply ``u_seq[k]`` on ``[k Ts, (k+1) Ts)`` for k = 0..K-1 and sample every ``Ts``."""
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, sys.n_u)
    K = len(u_seq)
    if K < 1:
        raise ValueError("need at least one input sample")
    states = np.empty((K + 1, sys.n_x))
    states[0] = np.asarray(x0, dtype=float)
    for k in range(K):
        states[k + 1] = integrate_segment(sys, states[k], u_seq[k], Ts, cfg)
    inputs = np.vstack([u_seq, np.full((1, sys.n_u), np.nan)])
    outputs = np.array([sys.output_map(x) for x in states])
    return Trajectory(Ts * np.arange(K + 1), states, inputs, outputs)


# ---------------------------------------------------------------------------
# energy-based swing-up for the cart-pendulum

def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def upright_lqr_gain(sys: SystemSpec, Ts: float, q=(1.0, 10.0, 1.0, 1.0), r=1.0) -> np.ndarray:
    """Discrete LQR gain for the ZOH-sampled linearization about the upright rest state."""
    x_eq = np.zeros(4)
    eps = 1e-6
    A = np.zeros((4, 4))
    for i in range(4):
        d = np.zeros(4)
        d[i] = eps
        A[:, i] = (sys.rhs(x_eq + d, [0.0]) - sys.rhs(x_eq - d, [0.0])) / (2 * eps)
    B = ((sys.rhs(x_eq, [eps]) - sys.rhs(x_eq, [-eps])) / (2 * eps)).reshape(4, 1)
    blk = np.zeros((5, 5))
    blk[:4, :4] = A * Ts
    blk[:4, 4:] = B * Ts
    Phi = scipy.linalg.expm(blk)
    Ad, Bd = Phi[:4, :4], Phi[:4, 4:]
    Qm, Rm = np.diag(q), np.atleast_2d(r)
    X = scipy.linalg.solve_discrete_are(Ad, Bd, Qm, Rm)
    return np.linalg.solve(Rm + Bd.T @ X @ Bd, Bd.T @ X @ Ad).ravel()


SWINGUP_GAINS = {
    "k_energy": 0.08,     # energy pumping gain on cart acceleration
    "k_pos": 1.0,         # cart recentering, position
    "k_vel": 1.5,         # cart recentering, velocity
    "pump_floor": 0.05,   # minimum |theta_dot cos(theta)| used by the pump
    "catch_angle": 0.4,   # |theta| below which the linear feedback takes over
    "Ts": 0.1,            # sample time the catching LQR is designed for
}


def swingup_controller(sys: SystemSpec, x, gains: Mapping[str, float] | None = None,
                       lqr_gain: np.ndarray | None = None) -> np.ndarray:
    """Energy-shaping swing-up force with a linear catch near the upright state.

    The pendulum energy is pumped towards the upright level through the cart
    acceleration, a PD term keeps the cart near the origin, and a discrete LQR
    (designed for the controller sample time) stabilizes once ``|theta|`` is
    small.  The result is clipped to the plant input box.
    """
    if sys.name != "cartpole":
        raise ValueError("swing-up controller requires the cartpole system")
    g_ = dict(SWINGUP_GAINS)
    g_.update(gains or {})
    p = sys.params
    pos, th, vel, thd = (float(v) for v in x)
    th_w = float(wrap_angle(th))
    if abs(th_w) < g_["catch_angle"]:
        K = lqr_gain if lqr_gain is not None else _cached_lqr(sys, g_["Ts"])
        u = -float(K @ np.array([pos, th_w, vel, thd]))
    else:
        w0_sq = 3.0 * p["g"] / (4.0 * p["l"])
        energy = 0.5 * thd * thd + w0_sq * (math.cos(th) - 1.0)
        pump = thd * math.cos(th)
        # floor keeps the pump alive when starting at rest in the hanging position
        if abs(pump) < g_["pump_floor"]:
            pump = math.copysign(g_["pump_floor"], pump)
        acc = g_["k_energy"] * energy * pump - g_["k_pos"] * pos - g_["k_vel"] * vel
        u = (p["M"] + p["m"]) * acc
    lo, hi = sys.u_box[0] if sys.u_box is not None else (-math.inf, math.inf)
    return np.array([min(max(u, lo), hi)])


_LQR_CACHE: dict = {}


def _cached_lqr(sys: SystemSpec, Ts: float) -> np.ndarray:
    key = (tuple(sorted(sys.params.items())), Ts)
    if key not in _LQR_CACHE:
        _LQR_CACHE[key] = upright_lqr_gain(sys, Ts)
    return _LQR_CACHE[key]


def simulate_swingup(sys: SystemSpec, x0, steps: int, Ts: float, noise_amp: float = 0.0,
                     rng: np.random.Generator | None = None,
                     cfg: IntegratorConfig = IntegratorConfig(),
                     gains: Mapping[str, float] | None = None) -> Trajectory:
    """Closed-loop swing-up run with the controller sampled every ``Ts``.

    ``noise_amp`` adds zero-mean uniform noise of that amplitude to every
    input before clipping; the recorded inputs are the ones applied.
    """
    lo, hi = sys.u_box[0]
    states = np.empty((steps + 1, 4))
    inputs = np.full((steps + 1, 1), np.nan)
    states[0] = np.asarray(x0, dtype=float)
    for k in range(steps):
        u = swingup_controller(sys, states[k], gains)[0]
        if noise_amp > 0:
            u += rng.uniform(-noise_amp, noise_amp)
        inputs[k, 0] = min(max(u, lo), hi)
        states[k + 1] = integrate_segment(sys, states[k], inputs[k], Ts, cfg)
    outputs = np.array([sys.output_map(x) for x in states])
    return Trajectory(Ts * np.arange(steps + 1), states, inputs, outputs)
