"""Command-line entry points.

Exit codes: 0 on success, 1 for configuration errors, 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, NumericalError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="resmatch",
                                     description="Generative parameterizations + ensemble history matching")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training dataset file")
    p.add_argument("--case", choices=["categorical", "continuous"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--grid", default="32x32", help="WxH, e.g. 32x32")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--labeled", action="store_true", help="attach classifier labels")

    p = sub.add_parser("train", help="train a generative model")
    p.add_argument("--model", choices=["dcgan", "dcvae", "vaegan"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="experiment config YAML (model section used)")
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--classifier", default=None, help="trained classifier directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="train the reservoir feature classifier")
    p.add_argument("--data", required=True, help="labeled dataset file")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=77)
    p.add_argument("--out", required=True)

    p = sub.add_parser("assimilate", help="run ensemble smoother history matching")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="model directory, or 'identity'")

    p = sub.add_parser("metrics", help="compute generated-sample quality metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="emit figures and CSV summaries for a run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="full pipeline: data, train, assimilate, metrics, report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("compare", help="compare finished runs of different models")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2


def _parse_grid(text: str):
    from ..fields import Grid

    try:
        w, h = text.lower().split("x")
        return Grid(nx=int(w), ny=int(h))
    except ValueError as err:
        raise ConfigError(f"bad --grid {text!r} (expected WxH)") from err


def _dispatch(args) -> int:
    if args.command == "gen-data":
        from ..fields import generate_dataset, save_dataset

        grid = _parse_grid(args.grid)
        ds = generate_dataset(grid, args.case, args.count, args.seed, with_labels=args.labeled)
        save_dataset(ds, args.out)
        print(f"wrote {ds.count} {args.case} fields to {args.out}")
        return 0

    if args.command == "train":
        from ..fields import load_dataset
        from ..generative import build_model, config_for, save_model, train
        from .runner import load_classifier

        ds = load_dataset(args.data)
        if args.config:
            from .config import load_config

            cfg = load_config(args.config).model
            if cfg.kind != args.model:
                raise ConfigError(f"config model kind {cfg.kind!r} != --model {args.model!r}")
        else:
            cfg = config_for(args.model)
        feature_model = load_classifier(args.classifier) if args.classifier else None
        model = build_model(args.model, ds.grid.shape, cfg, seed=args.seed, bounds=ds.bounds)
        model, trace = train(model, ds, val_fraction=0.1, seed=args.seed + 1,
                             feature_model=feature_model, log=print)
        save_model(model, args.out, trace)
        print(f"saved model bundle to {args.out}")
        return 0

    if args.command == "train-classifier":
        from ..fields import load_dataset
        from ..metrics import train_reservoir_classifier
        from ..nn import save_network

        ds = load_dataset(args.data)
        model, info = train_reservoir_classifier(ds, epochs=args.epochs, seed=args.seed)
        save_network(model.net, args.out, metadata={
            "feature_layer": model.feature_layer, "n_classes": model.n_classes,
            "bounds": list(model.bounds), **info,
        })
        print(f"classifier accuracy {info['val_accuracy']:.3f} (baseline {info['majority_baseline']:.3f})")
        return 0

    if args.command in ("assimilate", "metrics", "report", "run"):
        from .config import load_config
        from . import runner

        cfg = load_config(args.config)
        out = Path(args.out)
        if args.command == "run":
            log = None if args.quiet else print
            runner.run_experiment(cfg, out, log=log)
            print(f"run complete: {out}")
            return 0
        manifest = runner.RunManifest(out, cfg)
        ds_path = runner.stage_dataset(cfg, out, manifest)
        if args.command == "assimilate":
            model_dir = None
            if getattr(args, "model", None) and args.model != "identity":
                model_dir = Path(args.model)
                if not model_dir.exists():
                    raise ConfigError(f"model directory not found: {model_dir}")
            elif cfg.mda.param == "latent":
                model_dir = out / "model"
                if not model_dir.exists():
                    raise ConfigError(f"model directory not found: {model_dir} "
                                      "(train first or pass --model)")
            runner.stage_assimilate(cfg, out, manifest, ds_path, model_dir)
            return 0
        if args.command == "metrics":
            classifier_dir = out / "classifier"
            model_dir = out / "model"
            runner.stage_metrics(cfg, out, manifest, ds_path,
                                 model_dir if model_dir.exists() else None,
                                 classifier_dir if classifier_dir.exists() else None)
            return 0
        runner.stage_report(cfg, out, manifest)
        return 0

    if args.command == "compare":
        from .runner import compare_models

        result = compare_models(args.runs, args.out)
        print(f"wrote comparison to {args.out}; best per column: {result['best']}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
