"""Hankel data matrices, dataset layouts, splitting and normalization.

Two layouts are produced from the same sampled run:

* ``ms`` (multi-step): one column per window start ``i`` holding the whole
  input window ``col(u(i), .., u(i+N-1))``, the whole output window
  ``col(y(i+1), .., y(i+N))`` and the state ``x(i)``.
* ``std`` (standard DeepONet): ``N`` columns per window start, one per
  prediction step ``j``, with target ``y(i+j)`` and trunk input ``(x(i), j Ts)``.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import (IntegratorConfig, SystemSpec, Trajectory, make_system,
                       simulate_swingup, simulate_zoh, wrap_angle)

SCALE_FLOOR = 1e-8


def hankel(z, i: int, N: int, T: int) -> np.ndarray:
    """Block Hankel matrix with ``N`` block rows and ``T`` columns starting at sample ``i``.

    ``z`` has one sample per row (shape ``(S,)`` or ``(S, r)``); block ``(a, b)``
    of the result is ``z(i + a + b)``.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    S, r = z.shape
    if N < 1 or T < 1 or i < 0:
        raise ValueError("need N >= 1, T >= 1 and i >= 0")
    if i + N + T - 1 > S:
        raise ValueError(f"hankel needs {i + N + T - 1} samples, got {S}")
    H = np.empty((N * r, T))
    for a in range(N):
        H[a * r:(a + 1) * r] = z[i + a:i + a + T].T
    return H


# ---------------------------------------------------------------------------
# datasets

@dataclass
class MsDataset:
    U: np.ndarray   # (N*n_u, T)
    Y: np.ndarray   # (N*n_y, T)
    Z: np.ndarray   # (n_z, T)
    Ts: float
    N: int
    n_u: int
    n_y: int
    meta: dict = field(default_factory=dict)
    layout = "ms"

    def __post_init__(self):
        T = self.U.shape[1]
        if self.Y.shape[1] != T or self.Z.shape[1] != T:
            raise ValueError("U, Y and Z must have the same number of columns")
        if self.U.shape[0] != self.N * self.n_u or self.Y.shape[0] != self.N * self.n_y:
            raise ValueError("row counts do not match N, n_u and n_y")

    @property
    def n_columns(self) -> int:
        return self.U.shape[1]

    @property
    def n_z(self) -> int:
        return self.Z.shape[0]

    def take(self, cols) -> "MsDataset":
        cols = np.asarray(cols)
        return replace(self, U=self.U[:, cols], Y=self.Y[:, cols], Z=self.Z[:, cols],
                       meta=dict(self.meta))


@dataclass
class StdDataset:
    Y: np.ndarray        # (n_y, C)
    Z: np.ndarray        # (n_x + 1, C); last row is j*Ts
    U: list              # n_u arrays of shape (N, C)
    window: np.ndarray   # (C,) window start index of every column
    Ts: float
    N: int
    meta: dict = field(default_factory=dict)
    layout = "std"

    def __post_init__(self):
        C = self.Y.shape[1]
        if self.Z.shape[1] != C or len(self.window) != C:
            raise ValueError("Y, Z and window must have the same number of columns")
        for Uq in self.U:
            if Uq.shape != (self.N, C):
                raise ValueError("every U_j must have shape (N, columns)")

    @property
    def n_columns(self) -> int:
        return self.Y.shape[1]

    @property
    def n_u(self) -> int:
        return len(self.U)

    @property
    def n_y(self) -> int:
        return self.Y.shape[0]

    @property
    def n_x(self) -> int:
        return self.Z.shape[0] - 1

    def steps(self) -> np.ndarray:
        """Prediction step ``j`` (1-based) of every column."""
        return np.rint(self.Z[-1] / self.Ts).astype(int)

    def take(self, cols) -> "StdDataset":
        cols = np.asarray(cols)
        return replace(self, Y=self.Y[:, cols], Z=self.Z[:, cols],
                       U=[Uq[:, cols] for Uq in self.U], window=self.window[cols],
                       meta=dict(self.meta))

    def groups(self):
        """Unique windows and the column -> window-row map used to share branch evaluations."""
        uniq, inverse = np.unique(self.window, return_inverse=True)
        first = np.zeros(len(uniq), dtype=int)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        windows = np.stack([Uq[:, first].T for Uq in self.U], axis=1)  # (G, n_u, N)
        return windows, inverse


def _as_rows(a, width=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if width is not None and a.shape[1] != width:
        raise ValueError(f"expected {width} channels, got {a.shape[1]}")
    return a


def shifted_io_state(U, Y, t_ini: int, i: int) -> np.ndarray:
    """``col(u(i-1), .., u(i-t_ini), y(i), .., y(i-t_ini+1))`` used in place of a measured state."""
    U, Y = _as_rows(U), _as_rows(Y)
    if i < t_ini:
        raise ValueError("not enough history for the shifted input/output state")
    us = [U[i - 1 - s] for s in range(t_ini)]
    ys = [Y[i - s] for s in range(t_ini)]
    return np.concatenate(us + ys)


def build_ms_dataset(X, Y, U, N: int, Ts: float, state: str = "x", t_ini: int = 1,
                     meta: dict | None = None) -> MsDataset:
    """Multi-step layout from samples ``x(0..K)``, ``y(0..K)`` and inputs ``u(0..K-1)``.

    ``U`` may carry a trailing NaN row (as in a ``Trajectory``); only the
    first ``K`` rows are used.
    """
    X, Y, U = _as_rows(X), _as_rows(Y), _as_rows(U)
    K = len(X) - 1
    if len(Y) != K + 1 or len(U) < K:
        raise ValueError("need K+1 state/output samples and K input samples")
    U = U[:K]
    T = K - N + 1
    if T < 1:
        raise ValueError(f"{K} input samples cannot fill a window of length {N}")
    if state == "x":
        Uh = hankel(U, 0, N, T)
        Yh = hankel(Y, 1, N, T)
        Zh = hankel(X, 0, 1, T)
    elif state == "io":
        T -= t_ini
        if T < 1:
            raise ValueError("not enough samples for the requested t_ini")
        Uh = hankel(U, t_ini, N, T)
        Yh = hankel(Y, t_ini + 1, N, T)
        Zh = np.column_stack([shifted_io_state(U, Y, t_ini, i) for i in range(t_ini, t_ini + T)])
    else:
        raise ValueError(f"unknown state encoding {state!r}")
    info = {"state": state, "t_ini": t_ini if state == "io" else None}
    info.update(meta or {})
    return MsDataset(Uh, Yh, Zh, float(Ts), N, U.shape[1], Y.shape[1], info)


def build_standard_dataset(X, Y, U, N: int, Ts: float, meta: dict | None = None) -> StdDataset:
    """Standard DeepONet layout: ``N`` columns per window, one per step ``j = 1..N``."""
    X, Y, U = _as_rows(X), _as_rows(Y), _as_rows(U)
    K = len(X) - 1
    if len(Y) != K + 1 or len(U) < K:
        raise ValueError("need K+1 state/output samples and K input samples")
    U = U[:K]
    T = K - N + 1
    if T < 1:
        raise ValueError(f"{K} input samples cannot fill a window of length {N}")
    win = np.repeat(np.arange(T), N)
    j = np.tile(np.arange(1, N + 1), T)
    Yc = Y[win + j].T
    Zc = np.vstack([X[win].T, (j * Ts)[None, :]])
    Uc = [hankel(U[:, q], 0, N, T)[:, win] for q in range(U.shape[1])]
    return StdDataset(Yc, Zc, Uc, win, float(Ts), N, dict(meta or {}))


def generate_open_loop(sys: SystemSpec, x0, U, N: int, Ts: float,
                       cfg: IntegratorConfig = IntegratorConfig(), layout: str = "ms",
                       meta: dict | None = None):
    """Run the plant under the zero-order-hold input ``U`` and build the data matrices.

    ``U`` holds ``T + N - 1`` samples so that ``T`` windows are produced.
    """
    U = _as_rows(U, sys.n_u)
    if len(U) < N:
        raise ValueError(f"need at least N={N} input samples, got {len(U)}")
    traj = simulate_zoh(sys, x0, U, Ts, cfg)
    info = {"system": sys.name}
    info.update(meta or {})
    if layout == "ms":
        return build_ms_dataset(traj.states, traj.outputs, traj.inputs, N, Ts, meta=info)
    if layout == "std":
        return build_standard_dataset(traj.states, traj.outputs, traj.inputs, N, Ts, meta=info)
    raise ValueError(f"unknown layout {layout!r}")


def concat_ms(datasets) -> MsDataset:
    first = datasets[0]
    return replace(first, U=np.hstack([d.U for d in datasets]), Y=np.hstack([d.Y for d in datasets]),
                   Z=np.hstack([d.Z for d in datasets]), meta=dict(first.meta))


# ---------------------------------------------------------------------------
# swing-up data

SWINGUP_X0 = (0.0, np.pi, 0.0, 0.0)


def _swingup_attempt(args):
    params, traj_len, Ts, noise_amp, seed, attempt, cfg = args
    sys = make_system("cartpole", params)
    rng = np.random.default_rng([seed, attempt])
    return simulate_swingup(sys, SWINGUP_X0, traj_len - 1, Ts, noise_amp, rng, cfg)


def collect_swingup_trajectories(sys: SystemSpec, n_traj: int, traj_len: int, Ts: float,
                                 noise_amp: float, seed: int, cfg=IntegratorConfig(),
                                 theta_tol: float = 0.2, workers: int = 1):
    """Successful swing-up runs of ``traj_len`` samples each, plus the discard count.

    A run whose final ``|theta|`` is not below ``theta_tol`` is discarded and
    replaced by a fresh attempt; more discards than ``n_traj`` is an error.
    """
    if sys.name != "cartpole" or sys.n_y != 5:
        raise ValueError("swing-up data needs the cartpole with its 5-channel measurement")
    kept, discarded, attempt = [], 0, 0
    params = dict(sys.params)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(kept) < n_traj:
            batch = range(attempt, attempt + (n_traj - len(kept)))
            attempt += len(batch)
            jobs = [(params, traj_len, Ts, noise_amp, seed, a, cfg) for a in batch]
            runs = list(pool.map(_swingup_attempt, jobs)) if pool else [_swingup_attempt(j) for j in jobs]
            for tr in runs:
                if abs(float(wrap_angle(tr.states[-1, 1]))) < theta_tol:
                    kept.append(tr)
                else:
                    discarded += 1
            if discarded > n_traj:
                raise RuntimeError(f"swing-up discard rate above 50% ({discarded} of {attempt})")
    finally:
        if pool:
            pool.shutdown()
    return kept, discarded


def generate_swingup_dataset(sys: SystemSpec, n_traj: int, traj_len: int, N: int, Ts: float,
                             noise_amp: float, seed: int, cfg=IntegratorConfig(),
                             workers: int = 1, return_trajectories: bool = False):
    """Concatenate per-trajectory Hankel blocks of closed-loop swing-up runs.

    Each trajectory of ``traj_len`` samples contributes ``traj_len - N``
    windows; no window straddles two trajectories.
    """
    trajs, discarded = collect_swingup_trajectories(sys, n_traj, traj_len, Ts, noise_amp, seed,
                                                    cfg, workers=workers)
    meta = {"system": sys.name, "seed": seed, "n_traj": n_traj, "traj_len": traj_len,
            "noise_amp": noise_amp, "discarded": discarded}
    blocks = [build_ms_dataset(tr.states, tr.outputs, tr.inputs, N, Ts, meta=meta) for tr in trajs]
    data = concat_ms(blocks)
    return (data, trajs) if return_trajectories else data


# ---------------------------------------------------------------------------
# splitting

def split_dataset(D, train_fraction: float = 0.8, seed: int = 0):
    """Seeded random partition into training and validation parts.

    The ``std`` layout is split by window so that both layouts built from the
    same run see the same windows in each part.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if isinstance(D, StdDataset):
        wins = np.unique(D.window)
        n = len(wins)
    else:
        n = D.n_columns
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train > n - 1:
        raise ValueError(f"too few columns ({n}) to split with fraction {train_fraction}")
    perm = rng.permutation(n)
    tr, va = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if isinstance(D, StdDataset):
        in_train = np.isin(D.window, wins[tr])
        return D.take(np.flatnonzero(in_train)), D.take(np.flatnonzero(~in_train))
    return D.take(tr), D.take(va)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class Normalizer:
    """Per-channel affine maps ``(v - shift) / scale``.

    Vectors are laid out channel-fastest, so element ``k`` of a stacked
    window belongs to channel ``k % n_channels``.
    """

    u_shift: np.ndarray
    u_scale: np.ndarray
    z_shift: np.ndarray
    z_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray

    def __post_init__(self):
        for name in ("u", "z", "y"):
            shift = np.asarray(getattr(self, f"{name}_shift"), dtype=float).reshape(-1)
            scale = np.asarray(getattr(self, f"{name}_scale"), dtype=float).reshape(-1)
            if np.any(scale <= 0):
                raise ValueError("normalizer scales must be positive")
            object.__setattr__(self, f"{name}_shift", shift)
            object.__setattr__(self, f"{name}_scale", scale)

    @classmethod
    def identity(cls, n_u: int, n_z: int, n_y: int) -> "Normalizer":
        return cls(np.zeros(n_u), np.ones(n_u), np.zeros(n_z), np.ones(n_z),
                   np.zeros(n_y), np.ones(n_y))

    def _tiled(self, kind, length):
        shift, scale = getattr(self, f"{kind}_shift"), getattr(self, f"{kind}_scale")
        reps, rem = divmod(length, len(shift))
        if rem:
            raise ValueError(f"length {length} is not a multiple of {len(shift)} {kind}-channels")
        return np.tile(shift, reps), np.tile(scale, reps)

    def apply(self, kind: str, v):
        v = np.asarray(v, dtype=float)
        shift, scale = self._tiled(kind, v.shape[-1])
        return (v - shift) / scale

    def invert(self, kind: str, v):
        v = np.asarray(v, dtype=float)
        shift, scale = self._tiled(kind, v.shape[-1])
        return v * scale + shift

    def scale_of(self, kind: str, length: int) -> np.ndarray:
        return self._tiled(kind, length)[1]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("u_shift", "u_scale", "z_shift", "z_scale", "y_shift", "y_scale")}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(**{k: np.array(v, dtype=float) for k, v in d.items()})


def _channel_stats(values_by_channel):
    shift = np.array([np.mean(v) for v in values_by_channel])
    scale = np.array([np.std(v) for v in values_by_channel])
    return shift, np.maximum(scale, SCALE_FLOOR)


def fit_normalizer(D) -> Normalizer:
    """z-score statistics per physical channel of a (training) dataset."""
    if D.n_columns < 1:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    if isinstance(D, StdDataset):
        us, usc = _channel_stats([Uq for Uq in D.U])
        ys, ysc = _channel_stats(list(D.Y))
        zs, zsc = _channel_stats(list(D.Z))
    else:
        us, usc = _channel_stats([D.U[q::D.n_u] for q in range(D.n_u)])
        ys, ysc = _channel_stats([D.Y[q::D.n_y] for q in range(D.n_y)])
        zs, zsc = _channel_stats(list(D.Z))
    return Normalizer(us, usc, zs, zsc, ys, ysc)


def apply_normalizer(norm: Normalizer, D):
    """Dataset with branch inputs, trunk inputs and targets normalized."""
    if isinstance(D, StdDataset):
        U = [(Uq - norm.u_shift[q]) / norm.u_scale[q] for q, Uq in enumerate(D.U)]
        return replace(D, Y=norm.apply("y", D.Y.T).T, Z=norm.apply("z", D.Z.T).T, U=U)
    return replace(D, U=norm.apply("u", D.U.T).T, Y=norm.apply("y", D.Y.T).T,
                   Z=norm.apply("z", D.Z.T).T)


def invert_normalizer(norm: Normalizer, D):
    if isinstance(D, StdDataset):
        U = [Uq * norm.u_scale[q] + norm.u_shift[q] for q, Uq in enumerate(D.U)]
        return replace(D, Y=norm.invert("y", D.Y.T).T, Z=norm.invert("z", D.Z.T).T, U=U)
    return replace(D, U=norm.invert("u", D.U.T).T, Y=norm.invert("y", D.Y.T).T,
                   Z=norm.invert("z", D.Z.T).T)


# ---------------------------------------------------------------------------
# dataset container on disk

_HEADERS = {
    ("ms", "U"): "U: row block a holds u(i+a) for a = 0..N-1 (channels fastest); column = window start i",
    ("ms", "Y"): "Y: row block a holds y(i+a+1) for a = 0..N-1 (channels fastest); column = window start i",
    ("ms", "Z"): "Z: trunk input of window i (state x(i) or shifted input/output state); column = window i",
    ("std", "U"): "U: n_u stacked blocks of N rows, block q holds u_q(i..i+N-1); column = (window i, step j)",
    ("std", "Y"): "Y: y(i+j) per output channel; column = (window i, step j)",
    ("std", "Z"): "Z: rows x(i) then j*Ts; column = (window i, step j)",
}


def save_dataset(D, directory, normalizer: Normalizer | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout = D.layout
    U = D.U if layout == "ms" else np.vstack(D.U)
    for name, arr in (("U", U), ("Y", D.Y), ("Z", D.Z)):
        np.savetxt(directory / f"{name}.csv", arr, fmt="%.17g", delimiter=",",
                   header=f"{_HEADERS[(layout, name)]}\nshape {arr.shape[0]}x{arr.shape[1]}")
    meta = {"layout": layout, "N": D.N, "Ts": D.Ts, "system": D.meta.get("system"),
            "seed": D.meta.get("seed"), "extra": D.meta}
    if layout == "ms":
        meta.update(n_u=D.n_u, n_y=D.n_y)
    else:
        meta.update(n_u=D.n_u, window=D.window.tolist())
    norm = normalizer if normalizer is not None else fit_normalizer(D)
    meta["normalizer"] = norm.to_dict()
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, default=_json_default)
    return directory


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_dataset(directory):
    directory = Path(directory)
    if not (directory / "meta.json").exists():
        raise FileNotFoundError(f"no dataset at {directory}")
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    arrs = {n: np.loadtxt(directory / f"{n}.csv", delimiter=",", ndmin=2) for n in ("U", "Y", "Z")}
    extra = meta.get("extra", {})
    if meta["layout"] == "ms":
        return MsDataset(arrs["U"], arrs["Y"], arrs["Z"], meta["Ts"], meta["N"], meta["n_u"],
                         meta["n_y"], extra)
    N, n_u = meta["N"], meta["n_u"]
    U = [arrs["U"][q * N:(q + 1) * N] for q in range(n_u)]
    return StdDataset(arrs["Y"], arrs["Z"], U, np.array(meta["window"], dtype=int), meta["Ts"],
                      N, extra)


def default_output_root() -> Path:
    return Path(os.environ.get("DEEPONET_MPC_OUT", "runs"))
