"""Regularized relative least-squares training and grid-search ablation."""

from __future__ import annotations

import csv
import itertools
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import MsDataset, StdDataset, fit_normalizer, split_dataset
from .neural import AdamState, adam_step
from .operator_models import (init_ms_deeponet, init_std_deeponet, normalized_inputs,
                              predict_dataset)


@dataclass(frozen=True)
class HyperConfig:
    """Architecture and optimizer settings for one grid entry.

    ``seed`` is a master seed; the weights are initialized from a seed derived
    from it and the architecture, so a configuration trains identically no
    matter where it sits in a grid.
    """

    l_b: int = 2
    l_t: int = 2
    p: int = 20
    branch_widths: tuple = (20, 20)
    trunk_widths: tuple = (20, 20)
    activation: str = "tanh"
    lam: float = 1e-6
    lr: float = 1e-3
    epochs: int = 40000
    seed: int = 0
    batch_size: int | None = None
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "branch_widths", tuple(int(w) for w in self.branch_widths))
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if min(self.l_b, self.l_t, self.p, self.epochs) < 1:
            raise ValueError("layer counts, p and epochs must be >= 1")
        if len(self.branch_widths) != self.l_b or len(self.trunk_widths) != self.l_t:
            raise ValueError("width lists must have l_b and l_t entries")
        if min(self.branch_widths + self.trunk_widths) < 1:
            raise ValueError("hidden widths must be >= 1")
        if self.lam < 0 or self.lr <= 0:
            raise ValueError("need lam >= 0 and lr > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")

    @classmethod
    def uniform(cls, layers: int, width: int, p: int, **kw) -> "HyperConfig":
        return cls(l_b=layers, l_t=layers, p=p, branch_widths=(width,) * layers,
                   trunk_widths=(width,) * layers, **kw)

    @property
    def config_id(self) -> str:
        b = "-".join(map(str, self.branch_widths))
        t = "-".join(map(str, self.trunk_widths))
        return f"p{self.p}_b{b}_t{t}_{self.activation}"

    def derived_seed(self) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(self.config_id.encode())) % (2 ** 32)


def ablation_grid(layers=(1, 2, 3), ps=(20, 30, 40), widths=(20, 30, 40), **kw) -> list:
    """Full factorial grid, layer count outermost."""
    return [HyperConfig.uniform(l, w, p, **kw) for l, p, w in itertools.product(layers, ps, widths)]


@dataclass
class TrainReport:
    config_id: str
    history: np.ndarray
    train_loss: float
    val_loss: float
    wall_s: float
    n_params: int
    diverged: bool = False
    epochs_run: int = 0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d


# ---------------------------------------------------------------------------
# losses

def loss(Y, Yhat, params=(), lam: float = 0.0) -> float:
    """``||Y - Yhat||^2 / ||Y||^2 + lam * sum ||theta||^2`` with Frobenius norms."""
    Y = np.asarray(Y, dtype=float)
    Yhat = np.asarray(Yhat, dtype=float)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    denom = float(np.sum(Y * Y))
    if denom == 0.0:
        raise ValueError("targets are identically zero")
    reg = sum(float(np.sum(p * p)) for p in params) if lam else 0.0
    return float(np.sum((Y - Yhat) ** 2)) / denom + lam * reg


def validation_loss(Y_val, Yhat_val) -> float:
    if np.asarray(Y_val).size == 0:
        raise ValueError("empty validation set")
    return loss(Y_val, Yhat_val, (), 0.0)


# ---------------------------------------------------------------------------
# training

def _check_layout(layout, D):
    want = StdDataset if layout == "std" else MsDataset
    if layout not in ("ms", "std") or not isinstance(D, want):
        raise ValueError(f"layout {layout!r} does not match dataset {type(D).__name__}")


def init_model(layout: str, config: HyperConfig, D, normalizer=None):
    norm = normalizer if normalizer is not None else fit_normalizer(D)
    seed = config.derived_seed()
    if layout == "ms":
        return init_ms_deeponet(D.N, D.n_u, D.n_y, D.n_z, config.p, config.branch_widths,
                                config.trunk_widths, config.activation, seed, norm, config.config_id)
    return init_std_deeponet(D.N, D.n_u, D.n_y, D.n_x, config.p, config.branch_widths,
                             config.trunk_widths, D.Ts, config.activation, seed, norm,
                             config.config_id)


def _networks(model):
    return [model.branch, model.trunk] if model.layout == "ms" else [*model.branches, model.trunk]


def cast_model(model, dtype):
    """Convert all weights in place (training may run in single precision)."""
    for net in _networks(model):
        net.weights[:] = [W.astype(dtype) for W in net.weights]
        net.biases[:] = [b.astype(dtype) for b in net.biases]
    return model


def _batches(layout, inputs, target, batch_size, rng):
    """Yield ``(inputs, target)`` mini-batches; the std layout is batched by window."""
    if batch_size is None:
        yield inputs, target
        return
    if layout == "ms":
        Un, Zn = inputs
        order = rng.permutation(len(Un))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield (Un[idx], Zn[idx]), target[idx]
        return
    windows, inv, Zn = inputs
    order = rng.permutation(len(windows))
    for s in range(0, len(order), batch_size):
        wsel = order[s:s + batch_size]
        remap = np.full(len(windows), -1)
        remap[wsel] = np.arange(len(wsel))
        cols = np.flatnonzero(remap[inv] >= 0)
        yield (windows[wsel], remap[inv[cols]], Zn[cols]), target[cols]


def train_model(layout: str, config: HyperConfig, D_train, D_val=None, normalizer=None,
                model=None, progress=None):
    """Adam on the regularized relative loss in normalized units.

    Returns ``(model, TrainReport)``.  The reported validation loss is the
    unregularized relative error in raw units on ``D_val`` (NaN without one).
    A non-finite loss or gradient stops training and restores the last
    finite parameters.
    """
    _check_layout(layout, D_train)
    if model is None:
        model = init_model(layout, config, D_train, normalizer)
    inputs, target = normalized_inputs(model, D_train)
    dtype = np.dtype(config.precision)
    cast_model(model, dtype)
    inputs = tuple(a if a.dtype.kind == "i" else a.astype(dtype) for a in inputs)
    target = target.astype(dtype)
    params = model.params()
    state = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.derived_seed() + 1)
    history = np.full(config.epochs, np.nan)
    backup = [p.copy() for p in params]
    diverged = False
    t0 = time.perf_counter()
    epoch = 0
    for epoch in range(config.epochs):
        batch_losses = []
        try:
            with np.errstate(over="raise", invalid="raise"):
                for inp, tgt in _batches(layout, inputs, target, config.batch_size, rng):
                    Yn, cache = model.core_forward(*inp)
                    denom = float(np.sum(tgt * tgt))
                    resid = Yn - tgt
                    reg = sum(float(np.sum(p * p)) for p in params)
                    J = float(np.sum(resid * resid)) / denom + config.lam * reg
                    if not np.isfinite(J):
                        raise FloatingPointError("non-finite loss")
                    grads, _ = model.core_backward(cache, 2.0 * resid / denom)
                    if config.lam:
                        grads = [g + 2.0 * config.lam * p for g, p in zip(grads, params)]
                    for b, p in zip(backup, params):
                        b[...] = p
                    adam_step(params, grads, state)
                    batch_losses.append(J)
        except FloatingPointError:
            for b, p in zip(backup, params):
                p[...] = b
            diverged = True
            break
        history[epoch] = np.mean(batch_losses)
        if progress is not None:
            progress(epoch, history[epoch])
    epochs_run = epoch + (0 if diverged else 1)
    wall = time.perf_counter() - t0
    cast_model(model, np.float64)
    params = model.params()
    inputs, target = normalized_inputs(model, D_train)
    Yn, _ = model.core_forward(*inputs)
    train_J = loss(target, Yn, params, config.lam)
    val_J = validation_loss(D_val.Y, predict_dataset(model, D_val)) if D_val is not None else float("nan")
    report = TrainReport(config.config_id, history[:epochs_run], train_J, val_J, wall,
                         model.n_params, diverged, epochs_run)
    return model, report


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationResult:
    best_index: int
    best_model: object
    reports: list
    failures: dict = field(default_factory=dict)

    @property
    def best_report(self) -> TrainReport:
        return self.reports[self.best_index]


def _train_entry(args):
    layout, entry, D_train, D_val = args
    try:
        if isinstance(entry, HyperConfig):
            return train_model(layout, entry, D_train, D_val)
        model = entry
        val = validation_loss(D_val.Y, predict_dataset(model, D_val))
        return model, TrainReport(model.config_id or "pretrained", np.zeros(0), float("nan"), val,
                                  0.0, model.n_params, False, 0)
    except Exception as exc:  # reported per config, not fatal for the grid
        return None, repr(exc)


def select_best(reports) -> int:
    """Argmin of validation loss; ties go to fewer parameters, then lower grid index."""
    keys = [(r.val_loss, r.n_params, i) for i, r in enumerate(reports)
            if r is not None and np.isfinite(r.val_loss)]
    if not keys:
        raise RuntimeError("no configuration produced a finite validation loss")
    return min(keys)[2]


def ablate(grid, D, layout: str | None = None, train_fraction: float = 0.8, split_seed: int = 0,
           workers: int = 1, report_path=None, split=None) -> AblationResult:
    """Train every grid entry on a common split and keep the best on validation.

    Entries are ``HyperConfig`` objects or already-trained models (scored
    without further training).  ``split`` overrides the internal split with a
    ready ``(D_train, D_val)`` pair.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty ablation grid")
    layout = layout or D.layout
    D_train, D_val = split if split is not None else split_dataset(D, train_fraction, split_seed)
    jobs = [(layout, entry, D_train, D_val) for entry in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_entry, jobs))
    else:
        results = [_train_entry(j) for j in jobs]
    reports, models, failures = [], [], {}
    for i, (model, rep) in enumerate(results):
        if model is None:
            failures[i] = rep
            reports.append(None)
        else:
            reports.append(rep)
        models.append(model)
    best = select_best(reports)
    result = AblationResult(best, models[best], reports, failures)
    if report_path is not None:
        write_ablation_csv(grid, reports, report_path)
    return result


def write_ablation_csv(grid, reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "l_b", "l_t", "p", "widths", "train_loss", "val_loss", "wall_s"])
        for entry, rep in zip(grid, reports):
            if isinstance(entry, HyperConfig):
                meta = [entry.config_id, entry.l_b, entry.l_t, entry.p,
                        "/".join(map(str, entry.branch_widths))]
            else:
                meta = [getattr(entry, "config_id", "pretrained"), "", "", entry.p, ""]
            if rep is None:
                w.writerow(meta + ["failed", "failed", ""])
            else:
                w.writerow(meta + [repr(rep.train_loss), repr(rep.val_loss), f"{rep.wall_s:.3f}"])
    return path
