"""Command-line entry point: data generation, training, evaluation,
Lyapunov analysis, and SVG plot emission.

Every subcommand writes a run.json echoing its fully resolved configuration
(defaults included) into the output directory; re-running a subcommand with
--from-config run.json reproduces the run. Exit codes: 0 success, 2 usage
error, 1 runtime/numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import continuous, evalharness, koopman, svgplot, systems
from .errors import KoopflowError
from .util import fmt_float

HISTORY_COLUMNS = (
    "stage", "epoch", "split", "total",
    "pred_0", "pred_1", "pred_5", "lin_1", "lin_5", "pred_roll", "lin_roll", "orth",
)


def _write_run_json(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": config}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_from_config(parser, args, command: str) -> dict | None:
    if not getattr(args, "from_config", None):
        return None
    path = Path(args.from_config)
    if not path.is_file():
        parser.error(f"--from-config: no such file {path}")
    doc = json.loads(path.read_text())
    if doc.get("command") != command:
        parser.error(f"--from-config: {path} holds a {doc.get('command')!r} run, not {command!r}")
    config = dict(doc["config"])
    if getattr(args, "out", None):
        config["out"] = args.out
    return config


# ---------------------------------------------------------------------------
# generate


def _cmd_generate(parser, args) -> int:
    config = _load_from_config(parser, args, "generate")
    if config is None:
        if args.subsample_from:
            config = {
                "mode": "subsample",
                "source": args.subsample_from,
                "factor": args.factor,
                "out": args.out,
            }
            if args.factor is None:
                parser.error("--subsample-from requires --factor")
        else:
            if args.system is None:
                parser.error("--system is required (or use --subsample-from)")
            if (args.duration is None) == (args.steps is None):
                parser.error("give exactly one of --duration and --steps")
            config = {
                "mode": "simulate",
                "system": args.system,
                "dt": args.dt,
                "duration": args.duration,
                "steps": args.steps,
                "train": args.train,
                "val": args.val,
                "test": args.test,
                "seed": args.seed,
                "substeps": args.substeps,
                "out": args.out,
            }
    out_dir = Path(config["out"])

    if config["mode"] == "subsample":
        src = Path(config["source"])
        if not (src / "meta.json").is_file():
            parser.error(f"no dataset at {src}")
        _write_run_json(out_dir, "generate", config)
        dataset = systems.load_dataset(src)
        dataset = systems.subsample_dataset(dataset, int(config["factor"]))
    else:
        _write_run_json(out_dir, "generate", config)
        gen_config = systems.GenerateConfig(
            system=config["system"],
            dt=float(config["dt"]),
            duration=config["duration"],
            n_samples=config["steps"],
            counts=(int(config["train"]), int(config["val"]), int(config["test"])),
            seed=int(config["seed"]),
            substeps=int(config["substeps"]),
        )
        dataset = systems.generate_dataset(gen_config)
    systems.save_dataset(dataset, out_dir)
    counts = {name: len(trs) for name, trs in dataset.splits.items()}
    t_len = dataset.meta.get("n_samples")
    print(f"dataset: {dataset.system}, dt={dataset.meta['dt']}, T={t_len}, "
          f"trajectories={counts}")
    return 0


# ---------------------------------------------------------------------------
# train


def _parse_hidden(spec: str) -> tuple:
    try:
        dims = tuple(int(p) for p in spec.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad hidden spec {spec!r}, expected e.g. 256,128")
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("hidden widths must be positive")
    return dims


def _write_history_csv(history, path: Path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for rec in history:
        row = {
            "stage": str(rec.stage),
            "epoch": str(rec.epoch),
            "split": rec.split,
            "total": fmt_float(rec.total),
        }
        for name, value in rec.terms.items():
            row[name] = fmt_float(value)
        lines.append(",".join(row.get(col, "") for col in HISTORY_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


def _cmd_train(parser, args) -> int:
    config = _load_from_config(parser, args, "train")
    if config is None:
        beta1, beta2 = args.beta1, args.beta2
        if args.ablate_orth:
            beta1 = beta2 = 0.0
        if (args.baseline_delta is None) != (args.baseline_beta is None):
            parser.error("--baseline-delta and --baseline-beta go together")
        config = {
            "dataset": args.dataset,
            "out": args.out,
            "d": args.d,
            "hidden": list(args.hidden),
            "stage1_epochs": args.stage1_epochs,
            "stage2_epochs": args.stage2_epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "beta1": beta1,
            "beta2": beta2,
            "horizon_cap": args.horizon_cap,
            "baseline_delta": args.baseline_delta,
            "baseline_beta": args.baseline_beta,
            "stage1_batches_per_epoch": args.stage1_batches_per_epoch,
            "input_norm": not args.no_input_norm,
            "seed": args.seed,
        }
    data_dir = Path(config["dataset"])
    if not (data_dir / "meta.json").is_file():
        parser.error(f"no dataset at {data_dir}")
    out_dir = Path(config["out"])
    _write_run_json(out_dir, "train", config)

    dataset = systems.load_dataset(data_dir)
    baseline = None
    if config["baseline_delta"] is not None:
        baseline = (float(config["baseline_delta"]), float(config["baseline_beta"]))
    train_config = koopman.TrainConfig(
        d=int(config["d"]),
        hidden=tuple(config["hidden"]),
        stage1_epochs=int(config["stage1_epochs"]),
        stage2_epochs=int(config["stage2_epochs"]),
        lr=float(config["lr"]),
        batch_size=int(config["batch_size"]),
        beta1=float(config["beta1"]),
        beta2=float(config["beta2"]),
        horizon_cap=int(config["horizon_cap"]),
        baseline_variant=baseline,
        stage1_batches_per_epoch=(
            None if config["stage1_batches_per_epoch"] is None
            else int(config["stage1_batches_per_epoch"])
        ),
        input_norm=bool(config["input_norm"]),
        seed=int(config["seed"]),
    )
    model, history = koopman.train_two_stage(dataset, train_config)
    ckpt_path = out_dir / "model.ckpt"
    koopman.save_checkpoint(model, ckpt_path)
    _write_history_csv(history, out_dir / "history.csv")

    final = [rec for rec in history if rec.split == "train"]
    if final:
        print(f"final train loss: {final[-1].total:.6g} (stage {final[-1].stage})")
    try:
        gen = continuous.extract_generator(model, dataset.dt)
        continuous.save_generator(gen, out_dir / "model.gen.json")
        print(f"generator extracted: round-trip residual {gen.roundtrip_residual:.3e}")
    except KoopflowError as exc:
        print(f"warning: generator extraction failed ({exc}); "
              f"continuous-time prediction unavailable for this checkpoint", file=sys.stderr)
    print(f"checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_model_and_generator(parser, ckpt: Path, source_dt):
    if not ckpt.is_file():
        parser.error(f"no checkpoint at {ckpt}")
    model = koopman.load_checkpoint(ckpt)
    gen_path = ckpt.with_suffix(".gen.json")
    gen = continuous.load_generator(gen_path) if gen_path.is_file() else None
    if gen is None and source_dt is not None:
        gen = continuous.extract_generator(model, float(source_dt))
    return model, gen


def _cmd_eval(parser, args) -> int:
    config = _load_from_config(parser, args, "eval")
    if config is None:
        config = {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "method": args.method,
            "eval_dt": args.eval_dt,
            "source_dt": args.source_dt,
            "out": args.out,
        }
    data_dir = Path(config["dataset"])
    if not (data_dir / "meta.json").is_file():
        parser.error(f"no dataset at {data_dir}")
    out_dir = Path(config["out"])
    _write_run_json(out_dir, "eval", config)

    ckpt = Path(config["checkpoint"])
    model, gen = _load_model_and_generator(parser, ckpt, config["source_dt"])
    source_dt = None
    if gen is not None:
        source_dt = gen.source_dt
    elif config["source_dt"] is not None:
        source_dt = float(config["source_dt"])
    if config["method"] == "continuous" and gen is None:
        parser.error("continuous method needs a generator sidecar or --source-dt")
    if source_dt is None:
        parser.error(f"{config['method']} method needs a generator sidecar or --source-dt")

    dataset = systems.load_dataset(data_dir)
    report = evalharness.evaluate_model(
        model, gen, dataset, config["method"], float(config["eval_dt"]),
        source_dt=source_dt, model_id=str(ckpt), dataset_id=str(data_dir),
    )
    evalharness.emit_report(report, out_dir / "report.json")
    evalharness.emit_curves(report, out_dir / "curves")
    failures = [p for p in report.per_trajectory if "error" in p]
    for p in failures:
        print(f"trajectory {p['index']} failed: {p['error']}", file=sys.stderr)
    if report.aggregate_mse is None:
        print("aggregate MSE: undefined (no trajectory evaluated)", file=sys.stderr)
        return 1
    print(f"aggregate MSE ({config['method']}, eval_dt={config['eval_dt']}): "
          f"{report.aggregate_mse:.6g}")
    return 0


# ---------------------------------------------------------------------------
# lyapunov


def _parse_vector(spec: str) -> np.ndarray:
    return np.array([float(p) for p in spec.split(",")])


def _cmd_lyapunov(parser, args) -> int:
    config = _load_from_config(parser, args, "lyapunov")
    if config is None:
        config = {
            "flow": args.flow,
            "x0": args.x0,
            "steps": args.steps,
            "discard": args.discard,
            "interval": args.interval,
            "dt": args.dt,
            "substeps": args.substeps,
            "jacobian_step": args.jacobian_step,
            "out": args.out,
        }

    flow_spec = config["flow"]
    dt = config["dt"]
    if flow_spec == "true:lorenz63":
        flow = evalharness.OdeFlow(rhs=systems.lorenz_rhs, jacobian=systems.lorenz_jacobian, dim=3)
        x0 = _parse_vector(config["x0"]) if config["x0"] else np.array([1.0, 1.0, 20.0])
        dt = 0.01 if dt is None else float(dt)
    elif flow_spec.startswith("linear:"):
        rates = _parse_vector(flow_spec[len("linear:"):])
        mat = np.diag(rates)
        flow = evalharness.OdeFlow(rhs=lambda s: mat @ s, jacobian=lambda s: mat, dim=rates.size)
        x0 = _parse_vector(config["x0"]) if config["x0"] else np.ones(rates.size)
        dt = 0.01 if dt is None else float(dt)
    elif flow_spec.startswith("model:"):
        ckpt = Path(flow_spec[len("model:"):])
        model, gen = _load_model_and_generator(parser, ckpt, None)
        if gen is None:
            parser.error(f"model flow needs a generator sidecar next to {ckpt}")
        dt = gen.source_dt if dt is None else float(dt)
        flow = evalharness.learned_map_flow(model, gen, dt)
        if config["x0"] is None:
            parser.error("model flows need an explicit --x0")
        x0 = _parse_vector(config["x0"])
    else:
        parser.error(f"unknown flow {flow_spec!r} "
                     "(expected true:lorenz63, linear:<rates>, or model:<checkpoint>)")

    lyap_config = evalharness.LyapunovConfig(
        steps=int(config["steps"]),
        discard=int(config["discard"]),
        interval=int(config["interval"]),
        dt=float(dt),
        substeps=int(config["substeps"]),
        jacobian_step=float(config["jacobian_step"]),
    )
    exponents = evalharness.lyapunov_spectrum(flow, x0, lyap_config)
    print("lyapunov exponents (descending): "
          + ", ".join(f"{v:.4f}" for v in exponents))
    print(f"estimator: steps={lyap_config.steps} discard={lyap_config.discard} "
          f"interval={lyap_config.interval} dt={lyap_config.dt}")
    if config["out"]:
        out_dir = Path(config["out"])
        config["dt"] = float(dt)
        _write_run_json(out_dir, "lyapunov", config)
        doc = {"exponents": [float(v) for v in exponents],
               "config": {"steps": lyap_config.steps, "discard": lyap_config.discard,
                          "interval": lyap_config.interval, "dt": lyap_config.dt,
                          "substeps": lyap_config.substeps,
                          "jacobian_step": lyap_config.jacobian_step}}
        (out_dir / "lyapunov.json").write_text(json.dumps(doc, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# plot


def _cmd_plot(parser, args) -> int:
    config = _load_from_config(parser, args, "plot")
    if config is None:
        config = {
            "kind": args.kind,
            "truth": args.truth,
            "pred": args.pred,
            "curve": args.curve,
            "traj": args.traj,
            "x_component": args.x_component,
            "y_component": args.y_component,
            "log10": args.log10,
            "out": args.out,
        }
    out_dir = Path(config["out"])
    _write_run_json(out_dir, "plot", config)
    kind = config["kind"]

    if kind == "overlay":
        if not config["truth"] or not config["pred"]:
            parser.error("overlay needs --truth and --pred CSVs")
        truth = systems.load_trajectory_csv(Path(config["truth"]))
        pred = systems.load_trajectory_csv(Path(config["pred"]))
        written = []
        for j in range(truth.obs_dim):
            path = out_dir / f"overlay_x{j + 1}.svg"
            svgplot.line_plot(
                path,
                [("truth", truth.times(), truth.states[:, j]),
                 ("prediction", pred.times(), pred.states[:, j])],
                title=f"component x{j + 1}", xlabel="t", ylabel=f"x{j + 1}",
            )
            written.append(path)
        print(f"wrote {len(written)} overlay SVGs to {out_dir}")
        return 0
    if kind == "error-curve":
        if not config["curve"]:
            parser.error("error-curve needs --curve CSV")
        rows = Path(config["curve"]).read_text().strip().split("\n")[1:]
        data = np.array([[float(c) for c in r.split(",")] for r in rows])
        path = out_dir / "error_curve.svg"
        svgplot.line_plot(path, [("mse", data[:, 0], data[:, 1])],
                          title="per-timestep squared error", xlabel="t", ylabel="mse",
                          log10=bool(config["log10"]))
        print(f"wrote {path}")
        return 0
    if kind == "phase":
        if not config["traj"]:
            parser.error("phase needs --traj CSV")
        traj = systems.load_trajectory_csv(Path(config["traj"]))
        i, j = int(config["x_component"]), int(config["y_component"])
        for c in (i, j):
            if not 1 <= c <= traj.obs_dim:
                parser.error(f"component {c} out of range 1..{traj.obs_dim}")
        path = out_dir / f"phase_x{i}_x{j}.svg"
        svgplot.phase_portrait(path, traj.states[:, i - 1], traj.states[:, j - 1],
                               title=f"x{i} vs x{j} projection",
                               xlabel=f"x{i}", ylabel=f"x{j}")
        print(f"wrote {path}")
        return 0
    parser.error(f"unknown plot kind {kind!r}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koopflow",
        description="Continuous-time Koopman autoencoder toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate or decimate a dataset")
    p.add_argument("--system", choices=["pendulum", "fluidflow", "lorenz63"])
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--duration", type=float)
    p.add_argument("--steps", type=int, help="trajectory length in samples (T)")
    p.add_argument("--train", type=int, default=100)
    p.add_argument("--val", type=int, default=25)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--substeps", type=int, default=10)
    p.add_argument("--subsample-from", help="decimate an existing dataset directory")
    p.add_argument("--factor", type=int, help="decimation factor for --subsample-from")
    p.add_argument("--out", required=True)
    p.add_argument("--from-config")
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("train", help="two-stage training on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--hidden", type=_parse_hidden, default=(256, 128))
    p.add_argument("--stage1-epochs", type=int, default=100)
    p.add_argument("--stage2-epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--beta1", type=float, default=10.0)
    p.add_argument("--beta2", type=float, default=10.0)
    p.add_argument("--ablate-orth", action="store_true",
                   help="set both orthogonality weights to 0")
    p.add_argument("--horizon-cap", type=int, default=200)
    p.add_argument("--baseline-delta", type=float,
                   help="enable the geometrically discounted long-term loss")
    p.add_argument("--baseline-beta", type=float)
    p.add_argument("--stage1-batches-per-epoch", type=int)
    p.add_argument("--no-input-norm", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-config")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="forecast the test split and report MSE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="ground-truth dataset directory")
    p.add_argument("--method", choices=["continuous", "latent-interp", "discrete"],
                   default="continuous")
    p.add_argument("--eval-dt", type=float, required=True)
    p.add_argument("--source-dt", type=float,
                   help="training sampling period (when no generator sidecar exists)")
    p.add_argument("--out", required=True)
    p.add_argument("--from-config")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("lyapunov", help="Benettin Lyapunov-exponent estimation")
    p.add_argument("--flow", required=True,
                   help="true:lorenz63, linear:<r1,r2,...>, or model:<checkpoint>")
    p.add_argument("--x0", help="comma-separated initial state")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--discard", type=int, default=10_000)
    p.add_argument("--interval", type=int, default=10)
    p.add_argument("--dt", type=float)
    p.add_argument("--substeps", type=int, default=1)
    p.add_argument("--jacobian-step", type=float, default=1e-5)
    p.add_argument("--out")
    p.add_argument("--from-config")
    p.set_defaults(handler=_cmd_lyapunov)

    p = sub.add_parser("plot", help="emit SVG figures from CSV files")
    p.add_argument("--kind", choices=["overlay", "error-curve", "phase"], required=True)
    p.add_argument("--truth")
    p.add_argument("--pred")
    p.add_argument("--curve")
    p.add_argument("--traj")
    p.add_argument("--x-component", type=int, default=1)
    p.add_argument("--y-component", type=int, default=3)
    p.add_argument("--log10", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--from-config")
    p.set_defaults(handler=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(parser, args)
    except KoopflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
