"""Static plot artifacts for a finished sweep.

Each figure is rendered to SVG next to a CSV holding the exact values it was
drawn from; the CSV's sha256 is embedded in the SVG metadata so consumers can
check that both came from the same in-memory table. Output is byte-stable:
SVG ids are salted with a fixed string and no timestamps are written.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .dataset import GROUPS
from .experiments import SweepResult, file_digest
from .heads import parse_head_spec
from .training import read_ledger_csv

plt.rcParams["svg.hashsalt"] = "tailreg"

_GROUP_COLORS = {"rare": "tab:red", "common": "tab:orange", "frequent": "tab:blue"}

CSV_DIGEST_KEY = "tailreg-source-csv-sha256"


def _save_svg(fig, path: Path, csv_digest: str) -> None:
    fig.savefig(path, format="svg",
                metadata={"Date": None, "Description": f"{CSV_DIGEST_KEY}:{csv_digest}"})
    plt.close(fig)


def _write_pair(csv_lines: list[str], dest: Path, stem: str, render) -> list[Path]:
    """Write ``stem.csv`` then render ``stem.svg`` from the same table."""
    csv_path = dest / f"{stem}.csv"
    csv_bytes = ("\n".join(csv_lines) + "\n").encode()
    csv_path.write_bytes(csv_bytes)
    digest = hashlib.sha256(csv_bytes).hexdigest()
    fig = render()
    _save_svg(fig, dest / f"{stem}.svg", digest)
    return [csv_path, dest / f"{stem}.svg"]


def svg_source_digest(path: str | Path) -> str | None:
    """The CSV digest recorded inside an SVG produced by this module."""
    text = Path(path).read_text()
    marker = f"{CSV_DIGEST_KEY}:"
    pos = text.find(marker)
    if pos < 0:
        return None
    start = pos + len(marker)
    return text[start:start + 64]


# ---------------------------------------------------------------------------
# table builders

def _group_curves(result: SweepResult, variant: str) -> dict[str, dict[str, list[float]]]:
    """Mean-over-seeds loss per (split, group, epoch) from the persisted ledgers."""
    token = parse_head_spec(variant).token()
    cells = [c for c in result.cells if c.variant == token]
    curves: dict[str, dict[str, list[float]]] = {}
    for split in ("train", "val"):
        acc: dict[str, dict[int, list[float]]] = {g: defaultdict(list) for g in GROUPS}
        for cell in cells:
            rows = read_ledger_csv(cell.cell_dir / f"ledger_{split}.csv")
            sums: dict[tuple[str, int], float] = defaultdict(float)
            counts: dict[tuple[str, int], int] = defaultdict(int)
            for epoch, _, group, mean, n in rows:
                sums[(group, epoch)] += mean * n
                counts[(group, epoch)] += n
            for (group, epoch), total in sums.items():
                acc[group][epoch].append(total / counts[(group, epoch)])
        curves[split] = {
            g: [sum(v) / len(v) for _, v in sorted(epochs.items())]
            for g, epochs in acc.items() if epochs
        }
    return curves


def _final_class_losses(result: SweepResult, variant: str) -> dict[int, tuple[str, float]]:
    """Mean-over-seeds final-epoch val loss per class: class -> (group, loss)."""
    token = parse_head_spec(variant).token()
    per_class: dict[int, list[float]] = defaultdict(list)
    groups: dict[int, str] = {}
    for cell in result.cells:
        if cell.variant != token:
            continue
        rows = read_ledger_csv(cell.cell_dir / "ledger_val.csv")
        last_epoch = max(r[0] for r in rows)
        for epoch, class_id, group, mean, _ in rows:
            if epoch == last_epoch:
                per_class[class_id].append(mean)
                groups[class_id] = group
    return {c: (groups[c], sum(v) / len(v)) for c, v in per_class.items()}


def _pick_baseline_and_remedy(result: SweepResult) -> tuple[str, str]:
    tokens = list(dict.fromkeys(c.variant for c in result.cells))
    baseline = "specific" if "specific" in tokens else tokens[0]
    remedy = next((t for t in tokens if t.startswith("cab:") and t not in ("cab:0", "cab:1")), None)
    if remedy is None:
        remedy = next((t for t in tokens if t != baseline), baseline)
    return baseline, remedy


# ---------------------------------------------------------------------------
# figures

def _plot_loss_curves(result: SweepResult, dest: Path) -> list[Path]:
    written: list[Path] = []
    for token in dict.fromkeys(c.variant for c in result.cells):
        curves = _group_curves(result, token)
        lines = ["epoch,group,train_loss,val_loss"]
        for group in GROUPS:
            train = curves["train"].get(group)
            val = curves["val"].get(group)
            if train is None or val is None:
                continue
            for e, (tl, vl) in enumerate(zip(train, val), start=1):
                lines.append(f"{e},{group},{tl!r},{vl!r}")

        def render(curves=curves, token=token):
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
            for ax, split in zip(axes, ("train", "val")):
                for group in GROUPS:
                    series = curves[split].get(group)
                    if series:
                        ax.plot(range(1, len(series) + 1), series,
                                label=group, color=_GROUP_COLORS[group])
                ax.set_xlabel("epoch")
                ax.set_title(f"{split} regression loss")
            axes[0].set_ylabel("mean smooth-L1")
            axes[0].legend()
            fig.suptitle(f"per-group regression loss, {token}")
            fig.tight_layout()
            return fig

        slug = parse_head_spec(token).slug()
        written += _write_pair(lines, dest, f"loss_curves_{slug}", render)
    return written


def _plot_flatten_bars(result: SweepResult, dest: Path) -> list[Path]:
    baseline, remedy = _pick_baseline_and_remedy(result)
    base = _final_class_losses(result, baseline)
    rem = _final_class_losses(result, remedy)
    order = sorted(base, key=lambda c: -base[c][1])
    lines = [f"class_id,group,loss_{parse_head_spec(baseline).slug()},loss_{parse_head_spec(remedy).slug()}"]
    for c in order:
        group, b = base[c]
        r = rem.get(c, (group, float("nan")))[1]
        lines.append(f"{c},{group},{b!r},{r!r}")

    def render():
        xs = range(len(order))
        fig, ax = plt.subplots(figsize=(9, 3.5))
        ax.bar(xs, [base[c][1] for c in order], width=0.9, alpha=0.6, label=baseline)
        ax.bar(xs, [rem.get(c, (None, float("nan")))[1] for c in order], width=0.5,
               alpha=0.9, label=remedy)
        ax.set_xlabel("classes, sorted by baseline final val loss")
        ax.set_ylabel("final val regression loss")
        ax.set_title("per-class loss before/after the shared branch")
        ax.legend()
        fig.tight_layout()
        return fig

    return _write_pair(lines, dest, "flatten_bars", render)


def _plot_ap_profile(result: SweepResult, dest: Path) -> list[Path]:
    baseline, remedy = _pick_baseline_and_remedy(result)

    def mean_profile(token: str) -> dict[float, float]:
        reports = result.variant_reports(token)
        thresholds = sorted(reports[0].ap_per_threshold)
        return {t: 100.0 * sum(r.ap_per_threshold[t] for r in reports) / len(reports)
                for t in thresholds}

    base = mean_profile(baseline)
    rem = mean_profile(remedy)
    lines = ["iou_threshold,ap_baseline,ap_remedy,delta"]
    for t in base:
        lines.append(f"{t!r},{base[t]!r},{rem[t]!r},{rem[t] - base[t]!r}")

    def render():
        thresholds = list(base)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar([f"{int(round(100 * t))}" for t in thresholds],
               [rem[t] - base[t] for t in thresholds], color="tab:green")
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel("IoU threshold (x100)")
        ax.set_ylabel(f"AP gain, {remedy} over {baseline}")
        ax.set_title("AP50-AP95 improvement")
        fig.tight_layout()
        return fig

    return _write_pair(lines, dest, "ap_profile", render)


def emit_plots(result: SweepResult, dest: str | Path | None = None) -> list[Path]:
    """Render all plot artifacts (SVG + CSV) and their digest manifest."""
    dest = Path(dest) if dest is not None else result.spec.out_dir / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    written = _plot_loss_curves(result, dest)
    written += _plot_flatten_bars(result, dest)
    written += _plot_ap_profile(result, dest)
    manifest = {"artifacts": {p.name: file_digest(p) for p in written}}
    (dest / "plots_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return written
