import numpy as np
import pytest

from deeponet_mpc.datagen import build_ms_dataset, build_standard_dataset, split_dataset
from deeponet_mpc.operator_models import predict_dataset
from deeponet_mpc.training import (HyperConfig, ablate, ablation_grid, cast_model, init_model,
                                   loss, select_best, train_model, validation_loss,
                                   write_ablation_csv, _batches)


def toy_data(K=60, seed=0):
    """Linear toy system so that small nets fit it quickly."""
    rng = np.random.default_rng(seed)
    U = rng.uniform(-1, 1, (K, 1))
    X = np.zeros((K + 1, 2))
    for k in range(K):
        X[k + 1] = [0.9 * X[k, 0] + 0.1 * X[k, 1], 0.8 * X[k, 1] + U[k, 0]]
    Y = X[:, :1] + 0.5
    return X, Y, U


def small(epochs=200, **kw):
    return HyperConfig.uniform(1, 8, 4, epochs=epochs, lr=1e-2, **kw)


def test_loss_formula():
    Y = np.array([[1.0, 2.0], [3.0, 4.0]])
    Yh = np.array([[1.0, 1.0], [3.0, 5.0]])
    p = [np.array([1.0, 2.0])]
    assert loss(Y, Yh) == pytest.approx(2.0 / 30.0)
    assert loss(Y, Yh, p, 0.1) == pytest.approx(2.0 / 30.0 + 0.1 * 5.0)
    with pytest.raises(ValueError):
        loss(np.zeros((2, 2)), Yh)
    with pytest.raises(ValueError):
        validation_loss(np.zeros((0, 2)), np.zeros((0, 2)))


def test_config_validation_and_ids():
    c = HyperConfig.uniform(2, 30, 20)
    assert c.config_id == "p20_b30-30_t30-30_tanh"
    with pytest.raises(ValueError):
        HyperConfig(l_b=2, branch_widths=(3,))
    with pytest.raises(ValueError):
        HyperConfig(precision="float16")
    assert c.derived_seed() == HyperConfig.uniform(2, 30, 20).derived_seed()
    assert c.derived_seed() != HyperConfig.uniform(2, 30, 20, seed=1).derived_seed()


def test_grid_order_and_size():
    g = ablation_grid()
    assert len(g) == 27
    assert (g[0].l_b, g[0].p, g[0].branch_widths[0]) == (1, 20, 20)
    assert (g[1].l_b, g[1].p, g[1].branch_widths[0]) == (1, 20, 30)
    assert len({c.config_id for c in g}) == 27


@pytest.mark.parametrize("layout", ["ms", "std"])
def test_training_reduces_loss_and_reports_consistently(layout):
    X, Y, U = toy_data()
    D = (build_ms_dataset if layout == "ms" else build_standard_dataset)(X, Y, U, 4, 0.1)
    tr, va = split_dataset(D, 0.8, 0)
    model, rep = train_model(layout, small(300), tr, va)
    assert rep.epochs_run == 300 and not rep.diverged
    assert rep.history[-1] < 0.2 * rep.history[0]
    assert rep.val_loss == pytest.approx(validation_loss(va.Y, predict_dataset(model, va)))
    assert rep.n_params == model.n_params
    assert all(p.dtype == np.float64 for p in model.params())


def test_training_is_deterministic_and_position_independent():
    X, Y, U = toy_data()
    D = build_ms_dataset(X, Y, U, 4, 0.1)
    tr, va = split_dataset(D, 0.8, 0)
    a, _ = train_model("ms", small(50), tr, va)
    b, _ = train_model("ms", small(50), tr, va)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)
    grid1 = [small(30)]
    grid2 = [HyperConfig.uniform(1, 6, 3, epochs=30, lr=1e-2), small(30)]
    r1 = ablate(grid1, D, split=(tr, va))
    r2 = ablate(grid2, D, split=(tr, va))
    assert r1.reports[0].val_loss == r2.reports[1].val_loss


def test_float32_training_returns_float64_model():
    X, Y, U = toy_data()
    D = build_ms_dataset(X, Y, U, 4, 0.1)
    model, rep = train_model("ms", small(100, precision="float32"), D)
    assert all(p.dtype == np.float64 for p in model.params())
    assert np.isnan(rep.val_loss) and rep.history[-1] < rep.history[0]


def test_divergence_restores_finite_parameters(monkeypatch):
    import deeponet_mpc.training as training
    X, Y, U = toy_data()
    D = build_ms_dataset(X, Y, U, 4, 0.1)
    real_step = training.adam_step
    calls = []

    def poisoned_step(params, grads, state):
        real_step(params, grads, state)
        calls.append(1)
        if len(calls) == 3:
            params[0][0, 0] = np.inf

    monkeypatch.setattr(training, "adam_step", poisoned_step)
    with np.errstate(all="ignore"):
        model, rep = train_model("ms", small(50), D)
    assert rep.diverged and rep.epochs_run == 3
    assert all(np.all(np.isfinite(p)) for p in model.params())


def test_minibatches_cover_every_column_once():
    X, Y, U = toy_data()
    D = build_standard_dataset(X, Y, U, 4, 0.1)
    model = init_model("std", small(), D)
    from deeponet_mpc.operator_models import normalized_inputs
    inputs, target = normalized_inputs(model, D)
    seen = []
    for (win, inv, Zn), tgt in _batches("std", inputs, target, 7, np.random.default_rng(0)):
        assert inv.max() < len(win) and len(Zn) == len(tgt)
        seen.append(tgt)
    assert sum(len(t) for t in seen) == D.n_columns
    np.testing.assert_allclose(np.sort(np.vstack(seen), axis=0), np.sort(target, axis=0))


def test_minibatch_training_runs_for_both_layouts():
    X, Y, U = toy_data()
    for builder, layout in ((build_ms_dataset, "ms"), (build_standard_dataset, "std")):
        D = builder(X, Y, U, 4, 0.1)
        _, rep = train_model(layout, small(20, batch_size=16), D)
        assert rep.history[-1] < rep.history[0]


def test_layout_mismatch_raises():
    X, Y, U = toy_data()
    with pytest.raises(ValueError):
        train_model("std", small(), build_ms_dataset(X, Y, U, 4, 0.1))


def test_select_best_tie_breaks():
    from deeponet_mpc.training import TrainReport
    mk = lambda v, n: TrainReport("c", np.zeros(0), 0.0, v, 0.0, n)  # noqa: E731
    assert select_best([mk(0.2, 10), mk(0.1, 50), mk(0.1, 20), None]) == 2
    assert select_best([mk(0.1, 20), mk(0.1, 20)]) == 0
    with pytest.raises(RuntimeError):
        select_best([mk(float("nan"), 1)])


def test_ablation_scores_pretrained_models_and_writes_csv(tmp_path):
    X, Y, U = toy_data()
    D = build_ms_dataset(X, Y, U, 4, 0.1)
    tr, va = split_dataset(D, 0.8, 0)
    trained, _ = train_model("ms", small(200), tr, va)
    untrained = init_model("ms", small(), tr)
    res = ablate([untrained, trained, small(5)], D, split=(tr, va), report_path=tmp_path / "a.csv")
    assert res.best_index == 1 and res.best_model is trained
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0].startswith("config_id,l_b,l_t,p,widths") and len(rows) == 4


def test_ablation_records_failed_entries(tmp_path):
    X, Y, U = toy_data()
    D = build_ms_dataset(X, Y, U, 4, 0.1)
    tr, va = split_dataset(D, 0.8, 0)
    broken = init_model("ms", small(), tr)
    broken.branch.weights[0] = np.zeros((8, 5))  # wrong input width: scoring fails
    res = ablate([broken, small(5)], D, split=(tr, va))
    assert 0 in res.failures and res.best_index == 1
    path = write_ablation_csv([broken, small(5)], res.reports, tmp_path / "b.csv")
    assert "failed" in path.read_text()


def test_cast_model_round_trip():
    X, Y, U = toy_data()
    m = init_model("ms", small(), build_ms_dataset(X, Y, U, 4, 0.1))
    before = [p.copy() for p in m.params()]
    cast_model(m, np.float32)
    assert all(p.dtype == np.float32 for p in m.params())
    cast_model(m, np.float64)
    for a, b in zip(before, m.params()):
        np.testing.assert_allclose(a, b, rtol=1e-6)
