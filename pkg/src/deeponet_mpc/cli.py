"""Command-line front end: generate, train, ablate, mpc, reproduce.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  The default output
root is taken from ``$DEEPONET_MPC_OUT`` (falling back to ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .datagen import default_output_root, load_dataset, save_dataset
from .dynamics import make_system
from .mpc import MpcProblemSpec, run_closed_loop
from .operator_models import load_model, save_model
from .training import HyperConfig, ablate

log = logging.getLogger("deeponet_mpc")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else default_output_root() / default_name


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> Path:
    bench = ex.get_benchmark(args.system)
    if args.ts is not None or args.horizon is not None:
        bench = replace(bench, Ts=args.ts or bench.Ts, N=args.horizon or bench.N)
    if args.system == "cartpole" and args.layout != "ms":
        raise ValueError("swing-up data is only produced in the ms layout")
    samples = args.samples or bench.samples["desk"]
    data = ex.benchmark_data(bench, samples, args.seed, layouts=(args.layout,), workers=args.workers)
    D = data[args.layout]
    out = _out_dir(args, f"data_{args.system}_{args.layout}")
    save_dataset(D, out)
    U = D.U if args.layout == "ms" else np.vstack(D.U)
    print(f"U: {U.shape[0]}x{U.shape[1]}, Y: {D.Y.shape[0]}x{D.Y.shape[1]}, "
          f"Z: {D.Z.shape[0]}x{D.Z.shape[1]} -> {out}")
    return out


def _hyper_from_args(args, layers, width, p) -> HyperConfig:
    return HyperConfig.uniform(layers, width, p, activation=args.activation, lam=args.lam,
                               lr=args.lr, epochs=args.epochs, seed=args.seed,
                               batch_size=args.batch_size, precision=args.precision)


def _run_grid(args, grid, out: Path):
    D = load_dataset(args.data)
    res = ablate(grid, D, train_fraction=args.train_fraction, split_seed=args.seed,
                 workers=args.workers, report_path=out / "ablation.csv")
    best = res.best_report
    model_path = save_model(res.best_model, out / "model.json")
    np.savetxt(out / "loss.csv", best.history, fmt="%.10g", header="train_loss")
    print(f"best config {best.config_id}: val loss {best.val_loss:.6e}, "
          f"train loss {best.train_loss:.6e} -> {model_path}")
    for i, msg in res.failures.items():
        print(f"config {i} failed: {msg}", file=sys.stderr)
    return res


def cmd_train(args):
    out = _out_dir(args, "train")
    grid = [_hyper_from_args(args, args.layers, args.width, args.p)]
    return _run_grid(args, grid, out)


def cmd_ablate(args):
    out = _out_dir(args, "ablate")
    grid = [_hyper_from_args(args, l, w, p)
            for l in args.layers for p in args.p for w in args.widths]
    res = _run_grid(args, grid, out)
    if not args.no_plots:
        from .plotting import plot_ablation
        rows = [(r.config_id, r.val_loss) for r in res.reports if r is not None]
        plot_ablation(rows, out / "ablation.svg")
    return res


def _scenario_from_config(cfg: dict, model):
    name = cfg.get("system")
    bench = ex.get_benchmark(name) if name in ex.BENCHMARKS else None
    base = ex.default_scenario(name) if bench is not None else None
    N = int(cfg.get("N", getattr(model, "N", None) or bench.N))
    Q = np.diag(cfg.get("Q", bench.Q if bench else [1.0] * model.n_y))
    R = np.diag(cfg.get("R", bench.R if bench else [1.0] * model.n_u))
    P = np.diag(cfg["P"]) if "P" in cfg else None
    u_box = cfg.get("u_box", bench.u_box if bench else None)
    solver = cfg.get("solver", {})
    spec = MpcProblemSpec(N, Q, R, P, u_box=u_box, y_box=cfg.get("y_box"),
                          Ts=float(cfg.get("Ts", bench.Ts if bench else 0.1)),
                          max_iter=int(solver.get("max_iter", bench.mpc_iters if bench else 100)),
                          tol=float(solver.get("tol", bench.mpc_tol if bench else 1e-4)))
    plant = make_system(name, cfg.get("params"))
    x0 = np.asarray(cfg.get("x0", base.x0 if base else np.zeros(plant.n_x)), dtype=float)
    u0 = np.asarray(cfg.get("u0", base.u0 if base else np.zeros(plant.n_u)), dtype=float)
    steps = int(cfg.get("steps", base.steps if base else 100))
    ref = cfg.get("reference", base.reference if base else None)
    if ref is None:
        raise ValueError("scenario needs a reference")
    if isinstance(ref, list) and ref and isinstance(ref[0], list) and len(ref[0]) == 2 \
            and isinstance(ref[0][1], list):
        ref = [(float(t), v) for t, v in ref]
    return plant, spec, x0, u0, steps, ref


def cmd_mpc(args):
    model = load_model(args.model)
    cfg = {}
    if args.scenario:
        cfg = json.loads(Path(args.scenario).read_text())
    if args.system:
        cfg["system"] = args.system
    if "system" not in cfg:
        raise ValueError("give --system or a scenario file with a 'system' entry")
    if args.steps:
        cfg["steps"] = args.steps
    plant, spec, x0, u0, steps, ref = _scenario_from_config(cfg, model)
    res = run_closed_loop(plant, model, spec, x0, steps, ref, u0=u0)
    out = _out_dir(args, f"mpc_{cfg['system']}")
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "closed_loop.csv")
    summary = {"ame": res.ame, "mean_solve_s": res.mean_solve_s, "steps": len(res.steps),
               "Ts": spec.Ts, "error": res.error}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    if not args.no_plots and res.steps:
        from .plotting import plot_tracking
        plot_tracking({model.layout: res}, out / "tracking.svg", title=cfg["system"])
    print(f"AME: {res.ame:.6f}  mean solve time: {res.mean_solve_s:.6f} s  "
          f"steps: {len(res.steps)} -> {out}")
    if res.error:
        raise RuntimeError(f"closed loop stopped early: {res.error}")
    return res


def cmd_reproduce(args):
    out = _out_dir(args, f"reproduce_{args.example}")
    run = ex.run_benchmark(args.example, seed=args.seed, scale=args.scale, epochs=args.epochs,
                           samples=args.samples, workers=args.workers, log=print)
    report = ex.write_report(run, out, figures=not args.no_plots)
    print(f"report -> {report}")
    return report


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="JSON file with default option values")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--no-plots", action="store_true", help="skip SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deeponet-mpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a benchmark and write data matrices")
    g.add_argument("--system", required=True, choices=sorted(ex.BENCHMARKS))
    g.add_argument("--samples", type=int, default=None,
                   help="input samples (cartpole: number of trajectories)")
    g.add_argument("--ts", type=float, default=None)
    g.add_argument("--horizon", type=int, default=None)
    g.add_argument("--layout", choices=("ms", "std"), default="ms")
    g.set_defaults(func=cmd_generate)

    def training_flags(sp):
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--epochs", type=int, default=5000)
        sp.add_argument("--lam", type=float, default=1e-6)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
        sp.add_argument("--batch-size", type=int, default=None)
        sp.add_argument("--precision", choices=("float64", "float32"), default="float64")
        sp.add_argument("--train-fraction", type=float, default=0.8)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    training_flags(t)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--width", type=int, default=20)
    t.add_argument("--p", type=int, default=20)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", parents=[common], help="grid search over architectures")
    training_flags(a)
    a.add_argument("--layers", type=_int_list, default=[1, 2, 3])
    a.add_argument("--p", type=_int_list, default=[20, 30, 40])
    a.add_argument("--widths", type=_int_list, default=[20, 30, 40])
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("mpc", parents=[common], help="closed-loop control with a saved model")
    m.add_argument("--model", required=True)
    m.add_argument("--scenario", default=None, help="scenario JSON file")
    m.add_argument("--system", default=None, choices=sorted(ex.BENCHMARKS))
    m.add_argument("--steps", type=int, default=None)
    m.set_defaults(func=cmd_mpc)

    r = sub.add_parser("reproduce", parents=[common], help="full benchmark pipeline with a report")
    r.add_argument("--example", required=True, choices=sorted(ex.BENCHMARKS))
    r.add_argument("--scale", choices=("desk", "full"), default="desk")
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--samples", type=int, default=None)
    r.set_defaults(func=cmd_reproduce)
    return p


def _apply_config(parser, argv):
    """Parse with defaults taken from ``--config``; explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if known.config and command:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sub = choices[command]
        known_dests = {a.dest for a in sub._actions}
        unknown = set(cfg) - known_dests
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        for action in sub._actions:  # the config may satisfy required flags
            if action.dest in cfg:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
