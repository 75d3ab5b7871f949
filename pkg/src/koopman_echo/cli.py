"""Command line interface: ``koopman-echo {simulate,train,predict,run,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError
from .experiments import (
    ExperimentError,
    export_trace,
    model_trace,
    read_trace,
    reference_trace,
    run_photon_echo,
    run_sweep,
    stage,
    train_model,
    write_table,
)
from .koopman import load_model, save_model
from .metrics import evaluate

log = logging.getLogger("koopman_echo")


def _load_config(args):
    cfg = config_mod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(model__seed=args.seed)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _load_config(args)
    trace = reference_trace(cfg, args.threads)
    with stage("output"):
        export_trace(trace, _out_dir(args.out) / "reference.csv")


def cmd_train(args):
    cfg = _load_config(args)
    model = train_model(cfg)
    with stage("output"):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_model(model, out)


def cmd_predict(args):
    cfg = _load_config(args)
    with stage("load model"):
        model = load_model(args.model)
    trace = model_trace(cfg, model, args.threads)
    with stage("output"):
        out = _out_dir(args.out)
        export_trace(trace, out / "prediction.csv")
    if args.reference:
        with stage("metrics"):
            ref = read_trace(args.reference, cfg.ensemble.count, cfg.time_grid())
            report = evaluate(ref, trace, tuple(cfg.metrics.echo_window))
            (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
            print(json.dumps(report.as_dict()))


def cmd_run(args):
    cfg = _load_config(args)
    result = run_photon_echo(cfg, args.out, args.threads)
    print(json.dumps(result.report.as_dict()))


def cmd_sweep(args):
    cfg = _load_config(args)
    if cfg.sweep is None:
        raise ConfigError(f"{args.config} has no [sweep] section")
    columns, rows = run_sweep(cfg, args.threads)
    with stage("output"):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_table(rows, columns, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koopman-echo",
        description="Photon-echo reference simulations and bilinear Koopman surrogates.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, out_help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override model.seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads across detuning blocks (results do not depend on it)")
        p.set_defaults(func=func)
        return p

    add("simulate", cmd_simulate, "reference ensemble simulation", "output directory")
    add("train", cmd_train, "train and save a surrogate model", "model file")
    p = add("predict", cmd_predict, "ensemble prediction with a saved model", "output directory")
    p.add_argument("--model", required=True, help="model file written by 'train'")
    p.add_argument("--reference", help="reference.csv to compare against")
    add("run", cmd_run, "full photon-echo experiment", "output directory")
    add("sweep", cmd_sweep, "range / m / convergence sweep from [sweep]", "CSV table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"koopman-echo: config error: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"koopman-echo: error in {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
