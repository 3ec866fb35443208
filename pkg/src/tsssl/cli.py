"""Command line entry point: ``tsssl {pretrain,finetune,sweep,report,selftest}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as X
from . import nn
from .errors import ConfigError, DataError, TrainingError, TsSSLError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


def _load_config(args) -> X.ExperimentConfig:
    cfg = X.ExperimentConfig.load(args.config) if args.config else X.ExperimentConfig()
    if args.dataset:
        cfg = replace(cfg, data=replace(cfg.data, source=args.dataset))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    data = X.prepare_data(cfg.data)
    models = [args.model] if args.model else list(cfg.models)
    for model in models:
        for seed in cfg.seeds:
            _, meta = X.ensure_pretrained(Path(args.out), model, seed, cfg, data)
            print(f"{model} seed {seed}: {meta['epochs']} epochs, best epoch {meta['best_epoch']}, "
                  f"{meta['seconds']:.2f} s -> {X.pretrain_dir(Path(args.out), model, seed)}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .evaluate import evaluate, finetune

    cfg = _load_config(args)
    data = X.prepare_data(cfg.data)
    seed = cfg.seeds[0]
    ratio = args.ratio if args.ratio is not None else cfg.label_ratios[0]
    if args.encoder:
        encoder = nn.ParameterSet.load(args.encoder)
    else:
        encoder = nn.init_params(cfg.arch.encoder(data.pretrain.n_channels), seed)
    from .data import label_ratio_subset

    labeled = label_ratio_subset(data.pretrain, ratio, seed)
    res = finetune(encoder, labeled, data.valid, cfg.finetune_config(ratio), seed, cfg.arch)
    report = evaluate(res.encoder, res.classifier, data.test, cfg.arch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.encoder.save(out / "encoder.npz")
    res.classifier.save(out / "classifier.npz")
    X.write_curve_csv(out / "valid_f1.csv", res.f1_history, "f1")
    (out / "metrics.json").write_text(json.dumps(report.means(), indent=1) + "\n", encoding="utf-8")
    for k, v in report.means().items():
        print(f"{k:>9}: {v:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    records = X.run_experiment(cfg, args.out, workers=args.workers)
    paths = X.write_outputs(records, args.out)
    failed = [r for r in records if not r.ok]
    print(f"{len(records)} cells, {len(failed)} failed; report at {paths['report']}")
    print(Path(paths["timing"]).read_text(encoding="utf-8"), end="")
    for r in failed:
        print(f"  failed {r.key}: {r.error}", file=sys.stderr)
    return EXIT_TRAINING if failed else EXIT_OK


def cmd_report(args) -> int:
    records = X.load_records(args.out)
    if not records:
        raise DataError(f"no run records under {args.out}")
    paths = X.write_outputs(records, args.out)
    print(Path(paths["report"]).read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(verbose=True) else EXIT_TRAINING


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--out", default="runs_out", help="output directory")
        p.add_argument("--dataset", choices=("synthetic", "csv"), help="override data.source")
        if seed:
            p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pretrain", help="pretrain encoders and save checkpoints")
    common(p)
    p.add_argument("--model", choices=X.MODELS)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one encoder and evaluate on the test split")
    common(p)
    p.add_argument("--encoder", help="encoder checkpoint (.npz); random init when omitted")
    p.add_argument("--ratio", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="run the full protocol grid (resumable)")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="rebuild report/curves/timing from saved records")
    p.add_argument("--out", default="runs_out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except TsSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
