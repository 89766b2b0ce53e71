"""Multi-step and standard (multi-branch, unstacked) DeepONet predictors.

Both models map a horizon of inputs ``u_vec = col(u(k), .., u(k+N-1))`` and
an initial state to ``col(y(k+1), .., y(k+N))``; stacked vectors are laid out
step-major with the channel index running fastest, so entry ``r`` of the
output is channel ``r % n_y`` of step ``r // n_y + 1``.

Networks operate on normalized data; the ``horizon_*`` methods and the
module-level ``*_forward`` helpers accept raw units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import MsDataset, Normalizer, StdDataset
from .neural import Ffn, ffn_backward, ffn_forward, init_ffn


def _hidden_part(net: Ffn) -> Ffn:
    if len(net.weights) < 2:
        raise ValueError("network needs at least one hidden layer")
    return Ffn(net.weights[:-1], net.biases[:-1], net.activation, linear_output=False)


def _ffn_to_dict(net: Ffn) -> dict:
    return {"weights": [W.tolist() for W in net.weights],
            "biases": [b.tolist() for b in net.biases],
            "linear_output": net.linear_output}


def _ffn_from_dict(d: dict, activation: str) -> Ffn:
    return Ffn([np.array(W, dtype=float) for W in d["weights"]],
               [np.array(b, dtype=float) for b in d["biases"]],
               activation, d.get("linear_output", True))


# ---------------------------------------------------------------------------
# multi-step DeepONet

@dataclass
class MsDeepONet:
    """Branch on the whole input window, trunk on the state, one product layer.

    The branch output of length ``p*N*n_y`` is read as a matrix ``B`` of shape
    ``(N*n_y, p)`` (row-major), so ``y_r = sum_i B[r, i] t_i``.
    """

    branch: Ffn
    trunk: Ffn
    p: int
    N: int
    n_u: int
    n_y: int
    normalizer: Normalizer
    config_id: str = ""
    layout = "ms"

    def __post_init__(self):
        if self.branch.dims[0] != self.N * self.n_u:
            raise ValueError("branch input must have N*n_u entries")
        if self.branch.dims[-1] != self.p * self.N * self.n_y:
            raise ValueError("branch output must have p*N*n_y entries")
        if self.trunk.dims[-1] != self.p:
            raise ValueError("trunk output must have p entries")
        if not (self.branch.linear_output and self.trunk.linear_output):
            raise ValueError("output layers must be linear")

    @property
    def n_z(self) -> int:
        return self.trunk.dims[0]

    @property
    def n_b(self) -> int:
        return self.branch.dims[-2]

    @property
    def n_t(self) -> int:
        return self.trunk.dims[-2]

    @property
    def activation(self) -> str:
        return self.branch.activation

    def params(self) -> list:
        return self.branch.params() + self.trunk.params()

    @property
    def n_params(self) -> int:
        return self.branch.n_params + self.trunk.n_params

    # normalized core -----------------------------------------------------
    def core_forward(self, Un, Zn):
        """``Un`` (B, N*n_u), ``Zn`` (B, n_z) normalized -> (B, N*n_y) normalized outputs."""
        Bo, tb = ffn_forward(self.branch, Un)
        To, tt = ffn_forward(self.trunk, Zn)
        Bm = Bo.reshape(len(Bo), self.N * self.n_y, self.p)
        Y = np.einsum("brp,bp->br", Bm, To)
        return Y, (Bm, To, tb, tt)

    def core_backward(self, cache, G, need_input: bool = False):
        """Gradients of ``sum(G * Y)``; returns ``(grads aligned with params(), dUn)``."""
        Bm, To, tb, tt = cache
        dB = G[:, :, None] * To[:, None, :]
        dT = np.einsum("br,brp->bp", G, Bm)
        gb, dU = ffn_backward(self.branch, tb, dB.reshape(len(G), -1), need_input=need_input)
        gt, _ = ffn_backward(self.trunk, tt, dT, need_input=False)
        return gb + gt, dU

    # raw-unit interface --------------------------------------------------
    def horizon_vjp(self, u_vec, x, w=None):
        """Predicted outputs in raw units and, if ``w`` is given, ``d(w . y)/du_vec``.

        ``w`` may be a callable of the prediction, so a cost gradient needs a
        single forward pass.
        """
        u_vec = np.asarray(u_vec, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(-1)
        if u_vec.size != self.N * self.n_u or x.size != self.n_z:
            raise ValueError("dimension mismatch for u_vec or x")
        nm = self.normalizer
        Yn, cache = self.core_forward(nm.apply("u", u_vec)[None], nm.apply("z", x)[None])
        y = nm.invert("y", Yn[0])
        if w is None:
            return y, None
        if callable(w):
            w = w(y)
        G = (np.asarray(w, dtype=float) * nm.scale_of("y", y.size))[None]
        _, dUn = self.core_backward(cache, G, need_input=True)
        return y, dUn[0] / nm.scale_of("u", u_vec.size)

    def horizon_predict(self, u_vec, x):
        return self.horizon_vjp(u_vec, x)[0]

    def horizon_jacobian(self, u_vec, x):
        y = self.horizon_predict(u_vec, x)
        return np.array([self.horizon_vjp(u_vec, x, e)[1] for e in np.eye(y.size)])


def init_ms_deeponet(N: int, n_u: int, n_y: int, n_z: int, p: int, branch_widths,
                     trunk_widths, activation: str = "tanh", seed=0,
                     normalizer: Normalizer | None = None, config_id: str = "") -> MsDeepONet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    branch = init_ffn([N * n_u, *branch_widths, p * N * n_y], activation, rng)
    trunk = init_ffn([n_z, *trunk_widths, p], activation, rng)
    norm = normalizer if normalizer is not None else Normalizer.identity(n_u, n_z, n_y)
    return MsDeepONet(branch, trunk, p, N, n_u, n_y, norm, config_id)


def ms_forward(model: MsDeepONet, u_vec, x) -> np.ndarray:
    """Raw-unit prediction ``col(y(1), .., y(N))`` for one window."""
    return model.horizon_predict(u_vec, x)


def ms_forward_batch(model: MsDeepONet, U, Z) -> np.ndarray:
    """Column-wise raw prediction: ``U`` (N*n_u, T), ``Z`` (n_z, T) -> (N*n_y, T)."""
    nm = model.normalizer
    Yn, _ = model.core_forward(nm.apply("u", np.asarray(U, float).T), nm.apply("z", np.asarray(Z, float).T))
    return nm.invert("y", Yn).T


def ms_gradients(model: MsDeepONet, u_vec, x, upstream):
    """Gradients of ``upstream . ms_forward(u_vec, x)`` w.r.t. parameters and ``u_vec``.

    Parameter gradients refer to the normalized-space network weights.
    """
    nm = model.normalizer
    u_vec = np.asarray(u_vec, dtype=float).reshape(-1)
    Yn, cache = model.core_forward(nm.apply("u", u_vec)[None], nm.apply("z", np.asarray(x, float))[None])
    G = (np.asarray(upstream, dtype=float) * nm.scale_of("y", Yn.shape[1]))[None]
    grads, dUn = model.core_backward(cache, G, need_input=True)
    return grads, dUn[0] / nm.scale_of("u", u_vec.size)


# ---------------------------------------------------------------------------
# standard (multi-branch) DeepONet

@dataclass
class StandardDeepONet:
    """One branch per input channel, outputs multiplied channel-wise, trunk on ``(x0, j Ts)``.

    Branch ``l`` maps the window ``u_l(k..k+N-1)`` to ``p*n_y`` values read as
    a matrix of shape ``(n_y, p)`` (row-major).
    """

    branches: list
    trunk: Ffn
    p: int
    N: int
    n_y: int
    Ts: float
    normalizer: Normalizer
    config_id: str = ""
    layout = "std"

    def __post_init__(self):
        for net in self.branches:
            if net.dims[0] != self.N or net.dims[-1] != self.p * self.n_y:
                raise ValueError("each branch maps N inputs to p*n_y outputs")
        if self.trunk.dims[-1] != self.p:
            raise ValueError("trunk output must have p entries")

    @property
    def n_u(self) -> int:
        return len(self.branches)

    @property
    def n_x(self) -> int:
        return self.trunk.dims[0] - 1

    @property
    def activation(self) -> str:
        return self.trunk.activation

    def params(self) -> list:
        out = []
        for net in self.branches:
            out += net.params()
        return out + self.trunk.params()

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.branches) + self.trunk.n_params

    # normalized core -----------------------------------------------------
    def core_forward(self, windows, inv, Zn):
        """``windows`` (G, n_u, N) normalized, ``inv`` (C,) column -> window, ``Zn`` (C, n_x+1)."""
        outs, tapes = [], []
        for l, net in enumerate(self.branches):
            o, t = ffn_forward(net, windows[:, l, :])
            outs.append(o.reshape(len(o), self.n_y, self.p))
            tapes.append(t)
        prod = outs[0].copy()
        for o in outs[1:]:
            prod = prod * o
        To, tt = ffn_forward(self.trunk, Zn)
        Y = np.einsum("cjp,cp->cj", prod[inv], To)
        return Y, (outs, prod, tapes, To, tt, inv)

    def core_backward(self, cache, G, need_input: bool = False):
        """Gradients of ``sum(G * Y)``; ``dwindows`` has shape (G, n_u, N)."""
        outs, prod, tapes, To, tt, inv = cache
        dT = np.einsum("cj,cjp->cp", G, prod[inv])
        dprod = _group_sum(G[:, :, None] * To[:, None, :], inv, len(prod))
        grads, dwin = [], []
        for l, net in enumerate(self.branches):
            others = np.ones_like(prod)
            for m, o in enumerate(outs):
                if m != l:
                    others = others * o
            g, dU = ffn_backward(net, tapes[l], (dprod * others).reshape(len(prod), -1),
                                 need_input=need_input)
            grads += g
            dwin.append(dU)
        gt, _ = ffn_backward(self.trunk, tt, dT, need_input=False)
        dwindows = np.stack(dwin, axis=1) if need_input else None
        return grads + gt, dwindows

    # raw-unit interface --------------------------------------------------
    def _trunk_inputs(self, x):
        j = np.arange(1, self.N + 1)
        return np.column_stack([np.tile(x, (self.N, 1)), j * self.Ts])

    def horizon_vjp(self, u_vec, x, w=None):
        u_vec = np.asarray(u_vec, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(-1)
        if u_vec.size != self.N * self.n_u or x.size != self.n_x:
            raise ValueError("dimension mismatch for u_vec or x")
        nm = self.normalizer
        win = nm.apply("u", u_vec).reshape(self.N, self.n_u).T[None]
        Zn = nm.apply("z", self._trunk_inputs(x))
        Yn, cache = self.core_forward(win, np.zeros(self.N, dtype=int), Zn)
        y = nm.invert("y", Yn).reshape(-1)
        if w is None:
            return y, None
        if callable(w):
            w = w(y)
        G = np.asarray(w, dtype=float).reshape(self.N, self.n_y) * nm.y_scale
        _, dwin = self.core_backward(cache, G, need_input=True)
        return y, dwin[0].T.reshape(-1) / nm.scale_of("u", u_vec.size)

    def horizon_predict(self, u_vec, x):
        return self.horizon_vjp(u_vec, x)[0]

    def horizon_jacobian(self, u_vec, x):
        y = self.horizon_predict(u_vec, x)
        return np.array([self.horizon_vjp(u_vec, x, e)[1] for e in np.eye(y.size)])


def _group_sum(values, inv, n_groups):
    """Sum rows of ``values`` that share a group index (fast path for sorted ``inv``)."""
    if len(inv) and np.all(inv[1:] >= inv[:-1]) and inv[0] == 0 and inv[-1] == n_groups - 1 \
            and np.all(inv[1:] - inv[:-1] <= 1):
        starts = np.flatnonzero(np.r_[True, inv[1:] != inv[:-1]])
        return np.add.reduceat(values, starts, axis=0)
    out = np.zeros((n_groups,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, inv, values)
    return out


def init_std_deeponet(N: int, n_u: int, n_y: int, n_x: int, p: int, branch_widths,
                      trunk_widths, Ts: float, activation: str = "tanh", seed=0,
                      normalizer: Normalizer | None = None, config_id: str = "") -> StandardDeepONet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    branches = [init_ffn([N, *branch_widths, p * n_y], activation, rng) for _ in range(n_u)]
    trunk = init_ffn([n_x + 1, *trunk_widths, p], activation, rng)
    norm = normalizer if normalizer is not None else Normalizer.identity(n_u, n_x + 1, n_y)
    return StandardDeepONet(branches, trunk, p, N, n_y, float(Ts), norm, config_id)


def std_forward_z(model: StandardDeepONet, u_channels, z) -> np.ndarray:
    """Raw prediction for explicit trunk input ``z`` (any length ``n_x + 1``)."""
    nm = model.normalizer
    win = np.array([(np.asarray(c, float) - nm.u_shift[q]) / nm.u_scale[q]
                    for q, c in enumerate(u_channels)])
    if win.shape != (model.n_u, model.N):
        raise ValueError(f"expected {model.n_u} channels of length {model.N}")
    Zn = nm.apply("z", np.asarray(z, float).reshape(1, -1))
    Yn, _ = model.core_forward(win[None], np.zeros(1, dtype=int), Zn)
    return nm.invert("y", Yn[0])


def std_forward(model: StandardDeepONet, u_channels, x0, j: int) -> np.ndarray:
    """Raw prediction of ``y(j Ts)`` from ``n_u`` input windows and ``x0``."""
    if not 1 <= j <= model.N:
        raise ValueError(f"step j={j} outside 1..{model.N}")
    z = np.append(np.asarray(x0, dtype=float).reshape(-1), j * model.Ts)
    return std_forward_z(model, u_channels, z)


# ---------------------------------------------------------------------------
# dataset-level evaluation

def normalized_inputs(model, D):
    """Normalized network inputs and targets for a dataset of matching layout."""
    nm = model.normalizer
    if isinstance(D, StdDataset):
        if model.layout != "std":
            raise ValueError("standard dataset needs a standard model")
        windows, inv = D.groups()
        win_n = (windows - nm.u_shift[None, :, None]) / nm.u_scale[None, :, None]
        return (win_n, inv, nm.apply("z", D.Z.T)), nm.apply("y", D.Y.T)
    if model.layout != "ms":
        raise ValueError("multi-step dataset needs a multi-step model")
    return (nm.apply("u", D.U.T), nm.apply("z", D.Z.T)), nm.apply("y", D.Y.T)


def predict_dataset(model, D) -> np.ndarray:
    """Raw predictions laid out like ``D.Y``."""
    inputs, _ = normalized_inputs(model, D)
    Yn, _ = model.core_forward(*inputs)
    return model.normalizer.invert("y", Yn).T


# ---------------------------------------------------------------------------
# basis representation

@dataclass
class BasisModel:
    """``y = theta @ col(phi_b (x) phi_t, phi_b, phi_t, 1)`` in raw output units."""

    theta: np.ndarray
    branch_hidden: Ffn
    trunk_hidden: Ffn
    normalizer: Normalizer

    @property
    def n_b(self) -> int:
        return self.branch_hidden.dims[-1]

    @property
    def n_t(self) -> int:
        return self.trunk_hidden.dims[-1]

    def feature_stacks(self, u_vec, x):
        nm = self.normalizer
        u_vec = np.asarray(u_vec, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(-1)
        phi_b = ffn_forward(self.branch_hidden, nm.apply("u", u_vec)[None])[0][0]
        phi_t = ffn_forward(self.trunk_hidden, nm.apply("z", x)[None])[0][0]
        return phi_b, phi_t

    def features(self, u_vec, x) -> np.ndarray:
        phi_b, phi_t = self.feature_stacks(u_vec, x)
        return np.concatenate([np.kron(phi_b, phi_t), phi_b, phi_t, [1.0]])

    def predict(self, u_vec, x) -> np.ndarray:
        return self.theta @ self.features(u_vec, x)


def extract_basis(model: MsDeepONet) -> BasisModel:
    """Coefficient matrix of the network output in the product-feature basis.

    Row ``r`` is ``[vec(W_r^T W_t) | zeta^T W_r | xi_r^T W_t | xi_r^T zeta]``
    with ``vec`` taken row-major to match ``kron(phi_b, phi_t)``; the output
    de-normalization is folded into the rows and the constant column.
    """
    Wb, bb = model.branch.weights[-1], model.branch.biases[-1]
    Wt, zeta = model.trunk.weights[-1], model.trunk.biases[-1]
    p, R = model.p, model.N * model.n_y
    n_b, n_t = Wb.shape[1], Wt.shape[1]
    theta = np.empty((R, n_b * n_t + n_b + n_t + 1))
    for r in range(R):
        W_r = Wb[r * p:(r + 1) * p]
        xi_r = bb[r * p:(r + 1) * p]
        theta[r] = np.concatenate([(W_r.T @ Wt).reshape(-1), zeta @ W_r, xi_r @ Wt, [xi_r @ zeta]])
    nm = model.normalizer
    theta *= nm.scale_of("y", R)[:, None]
    theta[:, -1] += np.tile(nm.y_shift, model.N)
    return BasisModel(theta, _hidden_part(model.branch), _hidden_part(model.trunk), nm)


def basis_features(model, u_vec, x) -> np.ndarray:
    basis = model if isinstance(model, BasisModel) else extract_basis(model)
    return basis.features(u_vec, x)


def conditioning_matrix(phi_t: np.ndarray, n_b: int) -> np.ndarray:
    """Maps ``col(phi_b, 1)`` to the full feature vector for a fixed ``phi_t``."""
    n_t = phi_t.size
    M = np.zeros((n_b * n_t + n_b + n_t + 1, n_b + 1))
    M[:n_b * n_t, :n_b] = np.kron(np.eye(n_b), phi_t[:, None])
    M[n_b * n_t:n_b * n_t + n_b, :n_b] = np.eye(n_b)
    M[n_b * n_t + n_b:-1, n_b] = phi_t
    M[-1, n_b] = 1.0
    return M


def conditioned_theta(model, x) -> np.ndarray:
    """``Theta(x)`` of shape (N*n_y, n_b+1) with ``Theta(x) @ col(phi_b(u), 1) = y``."""
    basis = model if isinstance(model, BasisModel) else extract_basis(model)
    x = np.asarray(x, dtype=float).reshape(-1)
    phi_t = ffn_forward(basis.trunk_hidden, basis.normalizer.apply("z", x)[None])[0][0]
    return basis.theta @ conditioning_matrix(phi_t, basis.n_b)


# ---------------------------------------------------------------------------
# single-hidden-layer stacked form and its embedding

@dataclass
class StackedParams:
    """``sum_k sum_i c[k,i] s(xi[k,i] . u + theta[k,i]) s(w[k] . z + zeta[k])``."""

    c: np.ndarray       # (p, n)
    xi: np.ndarray      # (p, n, m)
    theta: np.ndarray   # (p, n)
    w: np.ndarray       # (p, d)
    zeta: np.ndarray    # (p,)
    activation: str = "tanh"

    def __post_init__(self):
        p, n = self.c.shape
        if self.xi.shape[:2] != (p, n) or self.theta.shape != (p, n):
            raise ValueError("c, xi and theta disagree on (p, n)")
        if self.w.shape[0] != p or self.zeta.shape != (p,):
            raise ValueError("w and zeta must have p rows")

    @property
    def dims(self):
        p, n, m = self.xi.shape
        return p, n, m, self.w.shape[1]


def random_stacked(p: int, n: int, m: int, d: int, seed=0, activation="tanh") -> StackedParams:
    rng = np.random.default_rng(seed)
    return StackedParams(rng.standard_normal((p, n)), rng.standard_normal((p, n, m)),
                         rng.standard_normal((p, n)), rng.standard_normal((p, d)),
                         rng.standard_normal(p), activation)


def stacked_output(sp: StackedParams, u, z) -> float:
    """Direct double-sum evaluation."""
    from .neural import ACTIVATIONS
    s = ACTIVATIONS[sp.activation][0]
    p, n, m, d = sp.dims
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    total = 0.0
    for k in range(p):
        tk = s(np.dot(sp.w[k], z) + sp.zeta[k])
        for i in range(n):
            total += sp.c[k, i] * s(np.dot(sp.xi[k, i], u) + sp.theta[k, i]) * tk
    return float(total)


def embed_stacked(sp: StackedParams, Ts: float = 1.0) -> StandardDeepONet:
    """Single-output, single-input standard DeepONet reproducing ``stacked_output``.

    Branch: one hidden layer of ``n*p`` neurons (neuron ``k*n + i`` carries
    ``xi[k, i]``, ``theta[k, i]``) and an output layer whose row ``k`` only
    sees block ``k``, with zero bias.  Trunk: one hidden layer of ``p``
    neurons followed by an identity output layer with zero bias.
    """
    p, n, m, d = sp.dims
    W1 = sp.xi.reshape(p * n, m).copy()
    b1 = sp.theta.reshape(p * n).copy()
    W2 = np.zeros((p, p * n))
    for k in range(p):
        W2[k, k * n:(k + 1) * n] = sp.c[k]
    branch = Ffn([W1, W2], [b1, np.zeros(p)], sp.activation, linear_output=True)
    trunk = Ffn([sp.w.copy(), np.eye(p)], [sp.zeta.copy(), np.zeros(p)], sp.activation,
                linear_output=True)
    norm = Normalizer.identity(1, d, 1)
    return StandardDeepONet([branch], trunk, p, m, 1, float(Ts), norm, "embedded")


# ---------------------------------------------------------------------------
# model files

def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"layout": model.layout, "activation": model.activation, "p": model.p, "N": model.N,
           "n_u": model.n_u, "n_y": model.n_y, "config_id": model.config_id,
           "trunk": _ffn_to_dict(model.trunk), "normalizer": model.normalizer.to_dict()}
    if model.layout == "ms":
        doc["n_z"] = model.n_z
        doc["branch"] = _ffn_to_dict(model.branch)
    else:
        doc["n_x"] = model.n_x
        doc["Ts"] = model.Ts
        doc["branches"] = [_ffn_to_dict(b) for b in model.branches]
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    act = doc["activation"]
    norm = Normalizer.from_dict(doc["normalizer"])
    trunk = _ffn_from_dict(doc["trunk"], act)
    if doc["layout"] == "ms":
        return MsDeepONet(_ffn_from_dict(doc["branch"], act), trunk, doc["p"], doc["N"],
                          doc["n_u"], doc["n_y"], norm, doc.get("config_id", ""))
    if doc["layout"] == "std":
        return StandardDeepONet([_ffn_from_dict(b, act) for b in doc["branches"]], trunk,
                                doc["p"], doc["N"], doc["n_y"], doc["Ts"], norm,
                                doc.get("config_id", ""))
    raise ValueError(f"unknown model layout {doc['layout']!r}")
