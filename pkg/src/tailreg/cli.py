"""Command-line interface.

Subcommands: gen, train, eval, sweep, plot, verify.
Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataset as ds
from . import runconfig
from .evaluation import report, run_inference, save_detections
from .exceptions import ConfigError, DigestMismatchError, TrainingDivergedError
from .experiments import (EXPERIMENT_PRESETS, ExperimentSpec, load_sweep,
                          run_experiment, verify_outputs)
from .heads import load_bank, parse_head_spec, save_bank
from .training import bias_ratio, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tailreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--preset", default="lt60", choices=ds.DATASET_PRESETS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scale-report", type=Path, default=None,
                   help="also write the per-class train/val mean-scale CSV")

    p = sub.add_parser("train", help="train one head variant on a dataset file")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--head", required=True,
                   help="specific | agnostic | cab:A | cluster:K:num|scale | merge:r,c,f")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("joint", "regression_only_gt"), default=None)

    p = sub.add_parser("eval", help="evaluate a trained bank on a dataset's val split")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--joint", action="store_true",
                   help="score with the trained classifier instead of GT labels")

    p = sub.add_parser("sweep", help="run a (variant x seed) experiment grid")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--table", choices=sorted(EXPERIMENT_PRESETS), default=None,
                   help="use a named experiment preset's variant list")
    p.add_argument("--preset", default=None, help="dataset preset (default lt60)")
    p.add_argument("--seeds", default=None, help="comma list, default 1,2,3")
    p.add_argument("--heads", default=None, help="comma list of head variant tokens")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("plot", help="render figures and CSV tables for a finished sweep")
    p.add_argument("--sweep", type=Path, required=True)
    p.add_argument("--dest", type=Path, default=None)

    p = sub.add_parser("verify", help="audit artifact digests of a sweep directory")
    p.add_argument("--sweep", type=Path, required=True)
    return parser


def _cmd_gen(args) -> int:
    config = ds.preset_config(args.preset, args.seed)
    data = ds.generate(config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_dataset(data, args.out)
    if args.scale_report is not None:
        ds.write_scale_report_csv(ds.class_scale_report(data), args.scale_report)
    print(f"wrote {args.out} ({len(data.train)} train / {len(data.val)} val instances)")
    return 0


def _load_values(path: Path | None) -> dict[str, str]:
    return runconfig.load_config_file(path) if path is not None else {"version": "1"}


def _cmd_train(args) -> int:
    spec = parse_head_spec(args.head)
    data = ds.load_dataset(args.dataset)
    values = _load_values(args.config)
    cfg = runconfig.train_config_from(values, seed=args.seed,
                                      overrides={"epochs": args.epochs, "mode": args.mode})
    bank, ledger = train(data, spec, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, args.out / "bank.json")
    ledger.to_csv(args.out / "ledger_train.csv", "train")
    ledger.to_csv(args.out / "ledger_val.csv", "val")
    (args.out / "resolved.cfg").write_text(runconfig.render_train_config(cfg))
    ratio = bias_ratio(ledger)
    ratio_text = "n/a" if ratio is None else f"{ratio:.3f}"
    print(f"trained {spec.token()} for {cfg.epochs} epochs; bias_ratio={ratio_text}; "
          f"bank digest {bank.trained_digest[:12]}")
    return 0


def _cmd_eval(args) -> int:
    data = ds.load_dataset(args.dataset)
    bank = load_bank(args.bank)
    values = _load_values(args.config)
    cfg = runconfig.eval_config_from(values, overrides={"oracle": "false" if args.joint else None})
    partition = ds.partition_by_frequency(data)
    detections = run_inference(bank, bank.classifier, data.val, cfg)
    rep = report(bank, data, cfg, partition, detections=detections)
    args.out.mkdir(parents=True, exist_ok=True)
    save_detections(detections, args.out / "detections.csv")
    rep.write_json(args.out / "report.json")
    rep.write_csv(args.out / "report.csv")
    (args.out / "resolved.cfg").write_text(runconfig.render_eval_config(cfg))
    groups = {g: (None if v is None else round(100 * v, 2)) for g, v in rep.ap_per_group.items()}
    print(f"AP={100 * rep.ap:.2f} groups={groups} detections={rep.detection_count}")
    return 0


def _cmd_sweep(args) -> int:
    values = _load_values(args.config)
    fields = runconfig.sweep_fields_from(values)
    heads = tuple(runconfig.split_head_tokens(args.heads)) if args.heads else fields["heads"]
    if heads is None and args.table is not None:
        heads = EXPERIMENT_PRESETS[args.table]
    if heads is None:
        raise UsageError("sweep needs --heads, --table, or a 'heads' config entry")
    out = args.out or (Path(fields["out"]) if fields["out"] else None)
    if out is None:
        raise UsageError("sweep needs --out or an 'out' config entry")
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else fields["seeds"]
    preset = args.preset or fields["preset"]

    spec = ExperimentSpec(
        preset=preset,
        seeds=seeds,
        variants=heads,
        train=runconfig.train_config_from(values, overrides={"epochs": args.epochs}),
        eval=runconfig.eval_config_from(values),
        out_dir=Path(out),
    )
    result = run_experiment(spec, log=lambda s: print(s, file=sys.stderr))
    for token, metrics in result.aggregates().items():
        ap_mean, ap_std = metrics["ap"]
        print(f"{token}: AP {100 * ap_mean:.2f} +- {100 * ap_std:.2f} over {len(seeds)} seeds")
    print(f"summary: {spec.out_dir / 'sweep_summary.csv'}")
    return 0


def _cmd_plot(args) -> int:
    from .plots import emit_plots  # deferred: pulls in matplotlib

    result = load_sweep(args.sweep)
    written = emit_plots(result, args.dest)
    print(f"wrote {len(written)} plot artifacts to {args.dest or (args.sweep / 'plots')}")
    return 0


def _cmd_verify(args) -> int:
    problems = verify_outputs(args.sweep)
    if problems:
        for p in problems:
            print(f"FAIL {p}", file=sys.stderr)
        return 2
    print("all digests verified")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "plot": _cmd_plot,
    "verify": _cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, DigestMismatchError, TrainingDivergedError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
