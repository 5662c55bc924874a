"""Experiment orchestration: generate -> train -> evaluate per (variant, seed).

Every cell persists its artifacts with sha256 digests under
``<out>/<variant>/<seed>/`` and is skipped on rerun when the digests still
verify. Datasets are keyed by seed alone and shared by all variants of that
seed (paired comparisons), stored once under ``<out>/_datasets/``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataset as ds
from .evaluation import EvalConfig, EvalReport, load_report, report, run_inference, save_detections
from .exceptions import ConfigError
from .heads import HeadSpec, parse_head_spec, save_bank
from .runconfig import render_config
from .training import TrainConfig, train

SWEEP_MANIFEST = "sweep.json"
CELL_MANIFEST = "cell.json"

#: Metrics aggregated across seeds for every variant.
AGGREGATE_METRICS = ("ap", "ap_rare", "ap_common", "ap_frequent", "bias_ratio")


@dataclass(frozen=True)
class ExperimentSpec:
    preset: str
    seeds: tuple[int, ...]
    variants: tuple[str, ...]
    train: TrainConfig
    eval: EvalConfig
    out_dir: Path

    def validate(self) -> list[HeadSpec]:
        if not self.seeds:
            raise ConfigError("spec needs at least one seed")
        if not self.variants:
            raise ConfigError("spec needs at least one head variant")
        parsed = [parse_head_spec(tok) for tok in self.variants]
        ds.preset_config(self.preset, 0)  # raises on unknown preset
        self.train.validate()
        self.eval.validate()
        return parsed


@dataclass(eq=False)
class CellResult:
    variant: str
    seed: int
    report: EvalReport
    ledger_digest: str
    bank_digest: str
    cell_dir: Path
    skipped: bool
    wall_time_s: float = 0.0


@dataclass(eq=False)
class SweepResult:
    spec: ExperimentSpec
    cells: list[CellResult]

    def cell(self, variant: str, seed: int) -> CellResult:
        token = parse_head_spec(variant).token()
        for c in self.cells:
            if c.variant == token and c.seed == seed:
                return c
        raise KeyError(f"no cell for ({variant}, {seed})")

    def variant_reports(self, variant: str) -> list[EvalReport]:
        token = parse_head_spec(variant).token()
        return [c.report for c in self.cells if c.variant == token]

    def aggregates(self) -> dict[str, dict[str, tuple[float | None, float | None]]]:
        """Per-variant (mean, population stddev) across seeds for each metric."""
        out: dict[str, dict[str, tuple[float | None, float | None]]] = {}
        for token in dict.fromkeys(c.variant for c in self.cells):
            reports = [c.report for c in self.cells if c.variant == token]
            metrics: dict[str, tuple[float | None, float | None]] = {}
            for name in AGGREGATE_METRICS:
                values = [_metric(r, name) for r in reports]
                values = [v for v in values if v is not None]
                if values:
                    metrics[name] = (float(np.mean(values)), float(np.std(values)))
                else:
                    metrics[name] = (None, None)
            out[token] = metrics
        return out


def _metric(r: EvalReport, name: str) -> float | None:
    if name == "ap":
        return r.ap
    if name == "bias_ratio":
        return r.bias_ratio
    return r.ap_per_group.get(name.removeprefix("ap_"))


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_path(out_dir: Path, preset: str, seed: int) -> Path:
    return out_dir / "_datasets" / f"{preset}-seed{seed}.jsonl"


def _ensure_dataset(out_dir: Path, preset: str, seed: int,
                    cache: dict[int, ds.SyntheticDataset], log: Callable[[str], None]):
    path = _dataset_path(out_dir, preset, seed)
    if seed not in cache:
        if path.exists():
            cache[seed] = ds.load_dataset(path)
        else:
            log(f"generating dataset {preset} seed={seed}")
            data = ds.generate(ds.preset_config(preset, seed))
            path.parent.mkdir(parents=True, exist_ok=True)
            ds.save_dataset(data, path)
            cache[seed] = data
    return cache[seed], path


def _verify_manifest(directory: Path, manifest: dict) -> bool:
    for name, digest in manifest.get("artifacts", {}).items():
        target = directory / name
        if not target.exists() or file_digest(target) != digest:
            return False
    return True


def run_cell(spec: ExperimentSpec, head: HeadSpec, seed: int,
             data: ds.SyntheticDataset, dataset_path: Path,
             log: Callable[[str], None]) -> CellResult:
    token = head.token()
    cell_dir = spec.out_dir / head.slug() / str(seed)
    manifest_path = cell_dir / CELL_MANIFEST

    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if _verify_manifest(cell_dir, manifest) and manifest.get("dataset_sha256") == file_digest(dataset_path):
            log(f"cell {token} seed={seed}: digests verified, skipping")
            rep = load_report(cell_dir / "report.json")
            return CellResult(variant=token, seed=seed, report=rep,
                              ledger_digest=manifest["ledger_digest"],
                              bank_digest=manifest["bank_digest"],
                              cell_dir=cell_dir, skipped=True,
                              wall_time_s=manifest.get("wall_time_s", 0.0))

    log(f"cell {token} seed={seed}: training")
    started = time.perf_counter()
    cell_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = replace(spec.train, seed=seed)
    bank, ledger = train(data, head, train_cfg)
    partition = ledger.partition

    detections = run_inference(bank, bank.classifier, data.val, spec.eval)
    rep = report(bank, data, spec.eval, partition, ledger=ledger, detections=detections)
    wall_time = time.perf_counter() - started

    save_bank(bank, cell_dir / "bank.json")
    ledger.to_csv(cell_dir / "ledger_train.csv", "train")
    ledger.to_csv(cell_dir / "ledger_val.csv", "val")
    save_detections(detections, cell_dir / "detections.csv")
    rep.write_json(cell_dir / "report.json")
    rep.write_csv(cell_dir / "report.csv")
    (cell_dir / "resolved.cfg").write_text(render_config(
        train_cfg, spec.eval, spec.preset, (seed,), (token,), str(spec.out_dir)))

    artifacts = {name: file_digest(cell_dir / name)
                 for name in ("bank.json", "ledger_train.csv", "ledger_val.csv",
                              "detections.csv", "report.json", "report.csv",
                              "resolved.cfg")}
    manifest = {
        "variant": token,
        "seed": seed,
        "preset": spec.preset,
        "dataset_sha256": file_digest(dataset_path),
        "ledger_digest": ledger.digest(),
        "bank_digest": bank.trained_digest,
        "artifacts": artifacts,
        "wall_time_s": wall_time,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return CellResult(variant=token, seed=seed, report=rep, ledger_digest=ledger.digest(),
                      bank_digest=bank.trained_digest, cell_dir=cell_dir, skipped=False,
                      wall_time_s=wall_time)


def run_experiment(spec: ExperimentSpec, log: Callable[[str], None] = lambda s: None) -> SweepResult:
    """Execute every (variant, seed) cell, skipping cells whose artifact
    digests verify, then write the sweep summary and resolved config."""
    heads = spec.validate()
    spec.out_dir.mkdir(parents=True, exist_ok=True)

    cache: dict[int, ds.SyntheticDataset] = {}
    cells: list[CellResult] = []
    for head in heads:
        for seed in spec.seeds:
            data, path = _ensure_dataset(spec.out_dir, spec.preset, seed, cache, log)
            cells.append(run_cell(spec, head, seed, data, path, log))

    result = SweepResult(spec=spec, cells=cells)
    _write_sweep_outputs(result)
    return result


def _write_sweep_outputs(result: SweepResult) -> None:
    spec = result.spec
    (spec.out_dir / "resolved.cfg").write_text(render_config(
        spec.train, spec.eval, spec.preset, spec.seeds, spec.variants, str(spec.out_dir)))

    aggregates = result.aggregates()
    lines = ["variant,seeds,ap_mean,ap_std,ap_rare_mean,ap_rare_std,ap_common_mean,ap_common_std,"
             "ap_frequent_mean,ap_frequent_std,bias_ratio_mean,bias_ratio_std"]
    for token, metrics in aggregates.items():
        n = len(result.variant_reports(token))
        cols = [token, str(n)]
        for name in AGGREGATE_METRICS:
            mean, std = metrics[name]
            scale = 100.0 if name.startswith("ap") else 1.0
            cols.append("" if mean is None else repr(scale * mean))
            cols.append("" if std is None else repr(scale * std))
        lines.append(",".join(cols))
    (spec.out_dir / "sweep_summary.csv").write_text("\n".join(lines) + "\n")

    doc = {
        "preset": spec.preset,
        "seeds": list(spec.seeds),
        "variants": list(spec.variants),
        "datasets": {
            str(seed): file_digest(_dataset_path(spec.out_dir, spec.preset, seed))
            for seed in spec.seeds
        },
        "cells": [
            {
                "variant": c.variant,
                "seed": c.seed,
                "dir": str(c.cell_dir.relative_to(spec.out_dir)),
                "bank_digest": c.bank_digest,
                "ledger_digest": c.ledger_digest,
            }
            for c in result.cells
        ],
        "aggregates": {
            token: {name: list(pair) for name, pair in metrics.items()}
            for token, metrics in aggregates.items()
        },
    }
    (spec.out_dir / SWEEP_MANIFEST).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_sweep(out_dir: str | Path, spec: ExperimentSpec | None = None) -> SweepResult:
    """Rebuild a SweepResult from persisted artifacts (for plotting/verify)."""
    out_dir = Path(out_dir)
    doc = json.loads((out_dir / SWEEP_MANIFEST).read_text())
    cells = []
    for entry in doc["cells"]:
        cell_dir = out_dir / entry["dir"]
        cells.append(CellResult(
            variant=entry["variant"],
            seed=entry["seed"],
            report=load_report(cell_dir / "report.json"),
            ledger_digest=entry["ledger_digest"],
            bank_digest=entry["bank_digest"],
            cell_dir=cell_dir,
            skipped=True,
        ))
    if spec is None:
        from .runconfig import eval_config_from, load_config_file, train_config_from
        values = load_config_file(out_dir / "resolved.cfg")
        spec = ExperimentSpec(
            preset=doc["preset"],
            seeds=tuple(doc["seeds"]),
            variants=tuple(doc["variants"]),
            train=train_config_from(values),
            eval=eval_config_from(values),
            out_dir=out_dir,
        )
    return SweepResult(spec=spec, cells=cells)


def verify_outputs(out_dir: str | Path) -> list[str]:
    """Digest audit of a sweep directory; returns a list of problems."""
    out_dir = Path(out_dir)
    problems: list[str] = []
    manifest_path = out_dir / SWEEP_MANIFEST
    if not manifest_path.exists():
        return [f"missing {SWEEP_MANIFEST} in {out_dir}"]
    doc = json.loads(manifest_path.read_text())

    for seed, digest in doc.get("datasets", {}).items():
        path = _dataset_path(out_dir, doc["preset"], int(seed))
        if not path.exists():
            problems.append(f"missing dataset {path}")
        elif file_digest(path) != digest:
            problems.append(f"dataset digest mismatch: {path}")

    for entry in doc.get("cells", []):
        cell_dir = out_dir / entry["dir"]
        cell_manifest = cell_dir / CELL_MANIFEST
        if not cell_manifest.exists():
            problems.append(f"missing {cell_manifest}")
            continue
        cm = json.loads(cell_manifest.read_text())
        for name, digest in cm.get("artifacts", {}).items():
            target = cell_dir / name
            if not target.exists():
                problems.append(f"missing artifact {target}")
            elif file_digest(target) != digest:
                problems.append(f"artifact digest mismatch: {target}")
        if cm.get("bank_digest") != entry.get("bank_digest"):
            problems.append(f"bank digest disagrees with sweep manifest: {cell_dir}")

    plots_manifest = out_dir / "plots" / "plots_manifest.json"
    if plots_manifest.exists():
        pm = json.loads(plots_manifest.read_text())
        for name, digest in pm.get("artifacts", {}).items():
            target = out_dir / "plots" / name
            if not target.exists():
                problems.append(f"missing plot {target}")
            elif file_digest(target) != digest:
                problems.append(f"plot digest mismatch: {target}")
    return problems


# ---------------------------------------------------------------------------
# experiment presets mirroring the structure of the summary tables

EXPERIMENT_PRESETS: dict[str, tuple[str, ...]] = {
    # specific vs agnostic under the GT-class oracle
    "table1": ("specific", "agnostic"),
    # blend-weight grid; 0 and 1 are the degenerate endpoints
    "table3a": ("cab:0", "cab:0.2", "cab:0.5", "cab:0.8", "cab:1"),
    # baseline + clustering grid (two sizes x two sort keys)
    "table3b": ("specific", "cluster:5:num", "cluster:5:scale", "cluster:10:num", "cluster:10:scale"),
    # baseline + merge rows
    "table3c": ("specific", "merge:r", "merge:c", "merge:rc", "merge:rcf"),
}


def preset_spec(name: str, out_dir: str | Path, seeds: tuple[int, ...] = (1, 2, 3),
                epochs: int = 30, dataset_preset: str = "lt60") -> ExperimentSpec:
    if name not in EXPERIMENT_PRESETS:
        raise ConfigError(f"unknown experiment preset {name!r}; known: {sorted(EXPERIMENT_PRESETS)}")
    return ExperimentSpec(
        preset=dataset_preset,
        seeds=seeds,
        variants=EXPERIMENT_PRESETS[name],
        train=TrainConfig(epochs=epochs),
        eval=EvalConfig(),
        out_dir=Path(out_dir),
    )
