"""Command-line entry point: ``sgncde <command> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure
(divergence, solver breakdown).
"""

import argparse
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SCENARIO_FLAGS = {
    "variant": ("--variant", str, "torque scenario (free, linear_control, config_dependent, damped)"),
    "duration_s": ("--duration", float, "trajectory length in seconds"),
    "sample_hz": ("--hz", float, "observation rate in Hz"),
    "dt": ("--dt", float, "integrator step in seconds"),
    "noise_sigma": ("--noise", float, "tangent-space noise std (rad)"),
    "drop_prob": ("--drop", float, "probability of dropping an observation"),
    "jitter": ("--jitter", float, "max timestamp jitter in seconds"),
}
EXPERIMENT_FLAGS = {
    "n_train": ("--n-train", int, "training trajectories"),
    "n_val": ("--n-val", int, "validation trajectories"),
    "n_test": ("--n-test", int, "test trajectories"),
    "windows_per_traj": ("--windows", int, "(history, future) windows per trajectory"),
    "history": ("--history-len", int, "observed samples per history"),
    "horizon": ("--horizon", int, "forecast steps"),
    "epochs": ("--epochs", int, "training epochs"),
    "batch_size": ("--batch-size", int, "mini-batch size"),
    "lr": ("--lr", float, "Adam learning rate"),
    "rk4_steps": ("--rk4-steps", int, "RK4 sub-steps per sample gap (training)"),
    "eval_solver": ("--eval-solver", str, "solver for validation/test: dopri45 or rk4"),
    "latent": ("--latent", int, "CDE latent width"),
    "hidden": ("--hidden", int, "CDE hidden width"),
    "window": ("--window", int, "SG half window n"),
    "gru_hidden": ("--gru-hidden", int, "GRU hidden width"),
    "gru_layers": ("--gru-layers", int, "GRU layers"),
}


def _add_shared(p, out_help):
    p.add_argument("--seed", type=int, default=None, help="base random seed (default 0)")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/worker threads (set before numerics load)")


def _add_flags(p, table):
    for key, (flag, typ, text) in table.items():
        p.add_argument(flag, dest=key, type=typ, default=None, help=text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgncde", description="Rotation forecasting on SO(3) with SG-filtered neural CDEs.",
        epilog="Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate rigid-body trajectories to CSV")
    _add_shared(p, "output directory for clean_<seed>.csv and observed_<seed>.csv")
    _add_flags(p, SCENARIO_FLAGS)
    p.add_argument("--count", type=int, default=1, help="number of trajectories (seeds seed..)")

    p = sub.add_parser("filter", help="fit the SG control path to a trajectory CSV")
    _add_shared(p, "output CSV: t, quaternion of the filtered path, RGE to the raw sample")
    p.add_argument("--input", required=True, help="trajectory CSV (t,qw,qx,qy,qz)")
    p.add_argument("--window", type=int, default=5, help="SG half window n (>= 1)")
    p.add_argument("--extrapolate", type=float, default=0.2,
                   help="seconds of extrapolation shown in the plot")
    p.add_argument("--checkpoint", default=None, help="use SG weights of a trained SG-nCDE")
    p.add_argument("--svg", default=None, help="optional SVG plot path")

    for name, text in (("train", "train a forecaster on simulated data"),
                       ("evaluate", "evaluate one model on the test split"),
                       ("compare", "train and evaluate every model on every scenario")):
        p = sub.add_parser(name, help=text)
        _add_shared(p, "output directory")
        _add_flags(p, SCENARIO_FLAGS)
        _add_flags(p, EXPERIMENT_FLAGS)
        if name == "train":
            p.add_argument("--model", default=None, choices=("sgncde", "gru", "hermite"),
                           help="model to train (default sgncde)")
            p.add_argument("--resume", default=None,
                           help="checkpoint to continue; data and model flags are then fixed")
        elif name == "evaluate":
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--checkpoint", help="trained model checkpoint")
            g.add_argument("--model", choices=("oracle", "identity", "constant_velocity"),
                           help="reference model")
            p.add_argument("--dump", action="store_true", help="also write raw predictions")
        else:
            p.add_argument("--models", default=None, help="comma-separated model list")
            p.add_argument("--variants", default=None, help="comma-separated scenario list")
            p.add_argument("--dump", action="store_true", help="also write raw predictions")

    p = sub.add_parser("forecast", help="forecast future rotations from a history CSV")
    _add_shared(p, "output trajectory CSV with one row per query time")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="trained model checkpoint")
    g.add_argument("--model", choices=("identity", "constant_velocity"), help="reference model")
    p.add_argument("--history", required=True, help="history trajectory CSV")
    p.add_argument("--horizon", type=int, default=8, help="number of query times")
    q = p.add_mutually_exclusive_group()
    q.add_argument("--step", type=float, default=None,
                   help="query spacing in seconds after the last sample (default 1/40)")
    q.add_argument("--query-times", default=None, help="explicit comma-separated query times")
    p.add_argument("--solver", default="dopri45", choices=("dopri45", "rk4"),
                   help="integrator for CDE models")
    return parser


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _values(args, table):
    return {k: getattr(args, k) for k in table if getattr(args, k, None) is not None}


def _spec(args, base=None):
    from .harness import ExperimentSpec
    from .io import read_key_values

    values = dict(base or {})
    if args.config:
        values.update(read_key_values(args.config))
    values.update(_values(args, SCENARIO_FLAGS))
    values.update(_values(args, EXPERIMENT_FLAGS))
    if getattr(args, "variant", None) is not None:
        values.pop("variants", None)
    for key in ("models", "variants"):
        if getattr(args, key, None):
            values[key] = getattr(args, key)
            if key == "variants":
                values.pop("variant", None)
    if args.seed is not None:
        values["seed"] = args.seed
    return ExperimentSpec.from_mapping(values)


def cmd_simulate(args):
    from dataclasses import replace

    from .dynamics import ScenarioConfig, simulate_batch
    from .errors import ConfigError
    from .io import read_key_values
    from .trajectory import save_trajectory_csv

    values = read_key_values(args.config) if args.config else {}
    values.update(_values(args, SCENARIO_FLAGS))
    cfg = ScenarioConfig.from_mapping(values)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    results = simulate_batch([cfg.with_seed(cfg.seed + i) for i in range(args.count)])
    for res in results:
        s = res.config.seed
        save_trajectory_csv(os.path.join(args.out, f"clean_{s}.csv"), res.clean)
        save_trajectory_csv(os.path.join(args.out, f"observed_{s}.csv"), res.observed)
    print(f"wrote {2 * len(results)} files to {args.out}")


def cmd_filter(args):
    import numpy as np

    from . import so3
    from .errors import ConfigError
    from .io import atomic_write_text
    from .plots import svg_figure
    from .sgfilter import fit_path
    from .trajectory import load_trajectory_csv

    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    if args.extrapolate < 0:
        raise ConfigError("--extrapolate must be >= 0")
    traj = load_trajectory_csv(args.input)
    weights = None
    if args.checkpoint:
        from .forecaster import load_model

        model, _, _ = load_model(args.checkpoint)
        if model.kind != "sgncde":
            raise ConfigError("--checkpoint must hold an SG-nCDE model")
        weights = model.sg_weights
        if weights.half_window != args.window:
            raise ConfigError(f"checkpoint window is {weights.half_window}, --window {args.window}")
    path = fit_path(traj, args.window, weights)
    phi = np.stack([path.value(t) for t in traj.times])
    rge = so3.geodesic_error(phi, traj.rotations)
    q = so3.rotation_to_quat(phi)
    lines = ["t,qw,qx,qy,qz,rge_raw"]
    lines += [",".join(repr(float(v)) for v in (t, *qq, e)) for t, qq, e in zip(traj.times, q, rge)]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    if args.svg:
        t0, tN = path.support
        dense = np.linspace(t0, tN + args.extrapolate, 400)
        ref = traj.rotations[0].T
        filt = so3.log_so3(np.stack([path.value(t) for t in dense]) @ ref)
        raw = so3.log_so3(traj.rotations @ ref)
        series = []
        for i, axis in enumerate("xyz"):
            series.append((f"raw {axis}", traj.times, raw[:, i], False))
            series.append((f"SG {axis}", dense, filt[:, i], True))
        panels = [
            {"title": "Log coordinates relative to the first sample", "series": series,
             "xlabel": "t [s]", "ylabel": "rad", "marker_x": tN},
            {"title": "RGE of filtered path to raw samples",
             "series": [("RGE", traj.times, np.degrees(rge), False)],
             "xlabel": "t [s]", "ylabel": "deg"},
        ]
        atomic_write_text(args.svg, svg_figure(panels))
    print(f"max RGE to raw samples: {np.degrees(rge.max()):.4f} deg")


def _write_curve(path, history):
    import numpy as np

    from .io import atomic_write_text

    lines = ["epoch,train_loss,train_rge_deg,val_rge_deg"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{float(np.degrees(r.train_rge))!r},"
                     f"{float(np.degrees(r.val_rge))!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_train(args):
    import numpy as np

    from .errors import ConfigError
    from .forecaster import (BestEpoch, history_from_meta, load_best, load_model,
                             restore_optimizer, save_model, train)
    from .harness import ExperimentSpec, _train_options, build_dataset
    from .models import build_model

    ckpt = os.path.join(args.out, "model.npz")
    curve = os.path.join(args.out, "loss_curve.csv")
    if args.resume:
        fixed = _values(args, SCENARIO_FLAGS) | {k: v for k, v in _values(args, EXPERIMENT_FLAGS)
                                                 .items() if k != "epochs"}
        if fixed or args.config or args.model or args.seed is not None:
            raise ConfigError("--resume takes its data and model from the checkpoint; "
                              "only --epochs and --out may be given")
        model, meta, adam = load_model(args.resume, best=False)
        if "experiment" not in meta:
            raise ConfigError(f"{args.resume} was not written by 'sgncde train'")
        values = dict(meta["experiment"])
        if args.epochs is not None:
            values["epochs"] = args.epochs
        spec = ExperimentSpec.from_mapping(values)
        history = history_from_meta(meta)
        opt = restore_optimizer(model, spec.training, adam)
        best = load_best(args.resume)
    else:
        spec = _spec(args)
        kind = args.model or "sgncde"
        spec = ExperimentSpec.from_mapping(dict(spec.to_mapping(), models=kind))
        model = build_model(kind, **_train_options(spec, kind))
        history, opt, best = [], None, BestEpoch()
    data = build_dataset(spec, 0)
    extra = {"experiment": spec.to_mapping()}
    records = list(history)

    def save(optimizer):
        save_model(ckpt, model, spec.training, optimizer, records, extra, best)
        _write_curve(curve, records)

    def on_epoch(rec, optimizer):
        records.append(rec)
        best.update(model, rec)
        save(optimizer)
        print(f"epoch {rec.epoch}: loss {rec.train_loss:.5f} train {np.degrees(rec.train_rge):.3f} "
              f"deg val {np.degrees(rec.val_rge):.3f} deg", flush=True)

    train(model, data["train"].pairs, spec.training, data["val"].pairs, optimizer=opt,
          start_epoch=len(history), history=history, on_epoch=on_epoch)
    if len(records) == len(history):
        save(opt)


def _reference_or_checkpoint(args):
    from .forecaster import load_model
    from .models import build_model

    if getattr(args, "checkpoint", None):
        model, meta, _ = load_model(args.checkpoint)
        return model, meta
    return build_model(args.model), None


def cmd_forecast(args):
    import numpy as np

    from .batching import ForecastRequest
    from .errors import ConfigError
    from .forecaster import forecast
    from .trajectory import RotationTrajectory, load_trajectory_csv, save_trajectory_csv

    hist = load_trajectory_csv(args.history)
    if len(hist) < 2:
        raise ConfigError("history needs at least two samples")
    if args.query_times:
        try:
            q = np.array([float(x) for x in args.query_times.split(",")])
        except ValueError:
            raise ConfigError("--query-times must be comma-separated numbers") from None
    else:
        if args.horizon < 1:
            raise ConfigError("--horizon must be >= 1")
        step = 1 / 40 if args.step is None else args.step
        if step <= 0:
            raise ConfigError("--step must be positive")
        q = hist.times[-1] + step * np.arange(1, args.horizon + 1)
    model, _ = _reference_or_checkpoint(args)
    pred = np.stack(forecast(model, ForecastRequest(hist, q), mode=args.solver))
    save_trajectory_csv(args.out, RotationTrajectory(q, pred))
    print(f"wrote {len(q)} forecasts to {args.out}")


def _write_tables(out, rows, ranking=None, evals=(), dump=False):
    from .harness import dump_predictions, rows_to_csv, rows_to_text
    from .io import atomic_write_text

    atomic_write_text(os.path.join(out, "results.csv"), rows_to_csv(rows))
    text = rows_to_text(rows, ranking)
    atomic_write_text(os.path.join(out, "results.txt"), text)
    if dump:
        for ev in evals:
            dump_predictions(ev, os.path.join(out, "predictions"))
    print(text, end="")


def cmd_evaluate(args):
    from .harness import build_dataset, evaluate, scenario_name

    model, meta = _reference_or_checkpoint(args)
    spec = _spec(args, base=(meta or {}).get("experiment"))
    rows, evals = [], []
    for i, scen in enumerate(spec.scenarios):
        data = build_dataset(spec, i)
        row, ev = evaluate(model, data["test"], spec.training.eval_solver,
                           spec.training.solver_options(), scenario_name(scen))
        rows.append(row)
        evals.append(ev)
    _write_tables(args.out, rows, None, evals, args.dump)


def cmd_compare(args):
    from .harness import compare

    spec = _spec(args)
    rows, evals, ranking = compare(spec, log=lambda s: print(s, file=sys.stderr, flush=True))
    _write_tables(args.out, rows, ranking, evals, args.dump)


COMMANDS = {"simulate": cmd_simulate, "filter": cmd_filter, "train": cmd_train,
            "forecast": cmd_forecast, "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        _limit_threads(args.threads)
    from .errors import (ConfigError, DivergenceError, InvalidInputError, OutOfSupportError,
                         SgncdeError)

    try:
        COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged (batch {exc.batch_id}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, InvalidInputError, OutOfSupportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SgncdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
