"""Small feedforward networks with hand-written reverse mode and Adam.

Batches are row-major: an input batch has shape ``(B, d0)`` and layer ``i``
computes ``h @ W_i.T + b_i`` with ``W_i`` of shape ``(d_{i+1}, d_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TapeError(RuntimeError):
    pass


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0.0).astype(z.dtype)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass
class Ffn:
    """Dense stack. With ``linear_output`` the last layer skips the activation."""

    weights: list
    biases: list
    activation: str = "tanh"
    linear_output: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: bias does not match weight rows")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: dimension chain broken")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class Tape:
    inputs: list          # layer inputs h_0..h_{L-1}
    pre: list             # pre-activations z_1..z_L
    post: list            # layer outputs
    used: bool = field(default=False)


def init_ffn(dims, activation: str = "tanh", seed=0, linear_output: bool = True) -> Ffn:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"bad layer dims {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return Ffn(weights, biases, activation, linear_output)


def ffn_forward(net: Ffn, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate a batch; arithmetic runs in the dtype of the first weight matrix."""
    dtype = net.weights[0].dtype
    h = np.asarray(batch, dtype=dtype)
    if h.ndim != 2 or h.shape[1] != net.dims[0]:
        raise ValueError(f"batch must have shape (B, {net.dims[0]}), got {h.shape}")
    act = ACTIVATIONS[net.activation][0]
    keep_pre = net.activation != "tanh"
    L = len(net.weights)
    tape = Tape([], [], [])
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        tape.inputs.append(h)
        z = h @ W.T
        z += b
        if i == L - 1 and net.linear_output:
            h = z
        elif keep_pre:
            h = act(z)
        else:
            h = np.tanh(z, out=z)
        tape.pre.append(z if keep_pre or h is not z else None)
        tape.post.append(h)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network output")
    return h, tape


def ffn_backward(net: Ffn, tape: Tape, upstream: np.ndarray, need_input: bool = True):
    """Gradients of ``sum(upstream * output)``.

    Returns ``(grads, d_input)`` where ``grads`` follows ``net.params()``.
    """
    if tape.used:
        raise TapeError("tape already consumed by a backward pass")
    tape.used = True
    tanh = net.activation == "tanh"
    dact = ACTIVATIONS[net.activation][1]
    L = len(net.weights)
    g = np.asarray(upstream, dtype=net.weights[0].dtype)
    grads = [None] * (2 * L)
    for i in range(L - 1, -1, -1):
        if not (i == L - 1 and net.linear_output):
            if tanh:
                a = tape.post[i]
                d = a * a
                np.subtract(1.0, d, out=d)
                d *= g
                g = d
            else:
                g = g * dact(tape.pre[i], tape.post[i])
        grads[2 * i] = g.T @ tape.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ net.weights[i]
    return grads, (g if need_input else None)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_check(net: Ffn, batch: np.ndarray, eps: float = 1e-5,
                      upstream: np.ndarray | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Covers every parameter and the batch input.  For relu nets, call sites
    should keep inputs away from kinks (see ``resample_away_from_kinks``).
    """
    batch = np.array(batch, dtype=float)
    out, tape = ffn_forward(net, batch)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal(out.shape)
    grads, dx = ffn_backward(net, tape, upstream)

    def f():
        return float(np.sum(upstream * ffn_forward(net, batch)[0]))

    worst = 0.0
    for p, g in list(zip(net.params(), grads)) + [(batch, dx)]:
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            fp = f()
            flat[k] = old - eps
            fm = f()
            flat[k] = old
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(gflat[k] - fd) / (abs(gflat[k]) + abs(fd) + 1e-12))
    return worst


def resample_away_from_kinks(net: Ffn, sampler, margin: float = 1e-3, max_tries: int = 1000):
    """Draw batches from ``sampler()`` until every pre-activation has ``|z| >= margin``."""
    if net.activation != "relu":
        return sampler()
    for _ in range(max_tries):
        batch = sampler()
        _, tape = ffn_forward(net, batch)
        hidden = tape.pre if not net.linear_output else tape.pre[:-1]
        if all(np.min(np.abs(z)) >= margin for z in hidden) if hidden else True:
            return batch
    raise RuntimeError("could not sample a batch away from relu kinks")
