"""Detection evaluation: AP at IoU thresholds, per-frequency-group AP, and
the ground-truth-class oracle protocol.

Matching is COCO-style greedy: detections of one class, sorted by descending
score, each claim the highest-IoU still-unmatched ground-truth box of the
same image at or above the threshold. AP is the 101-point interpolated area
under the precision-recall curve. In oracle mode predicted class labels are
replaced by ground-truth labels (before per-class NMS) to isolate
regression quality; oracle detections carry score 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import CANVAS_SIZE, FrequencyPartition, Instance, SyntheticDataset
from .exceptions import ConfigError
from .geometry import Box, decode_delta, iou, nms
from .heads import HeadBank, classify, predict, softmax
from .training import TrainLedger, bias_ratio

DEFAULT_IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections_per_image: int = 100
    oracle_gt_class: bool = True

    def validate(self) -> None:
        if not self.iou_thresholds:
            raise ConfigError("iou_thresholds must be non-empty")
        if any(not 0.0 < t < 1.0 for t in self.iou_thresholds):
            raise ConfigError(f"iou_thresholds must lie in (0, 1), got {self.iou_thresholds}")
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise ConfigError("iou_thresholds must be sorted ascending")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ConfigError(f"nms_threshold must lie in (0, 1), got {self.nms_threshold}")
        if self.max_detections_per_image < 1:
            raise ConfigError(f"max_detections_per_image must be >= 1, got {self.max_detections_per_image}")


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    box: Box


def run_inference(bank: HeadBank, classifier, instances: Sequence[Instance],
                  cfg: EvalConfig) -> list[Detection]:
    """Decode one detection candidate per (proposal, class) pair, then apply
    per-class NMS and the per-image detection cap. Deterministic."""
    cfg.validate()
    if bank.trained_digest is None:
        raise ValueError("bank has not been trained (trained_digest is absent)")
    if not cfg.oracle_gt_class and classifier is None:
        raise ValueError("non-oracle evaluation requires a classifier")

    by_image: dict[int, list[Instance]] = {}
    for inst in instances:
        by_image.setdefault(inst.image_id, []).append(inst)

    image_size = (CANVAS_SIZE, CANVAS_SIZE)
    out: list[Detection] = []
    for image_id in sorted(by_image):
        candidates: list[tuple[int, float, Box, int]] = []  # (class, score, box, seq)
        seq = 0
        for inst in by_image[image_id]:
            if cfg.oracle_gt_class:
                scored = [(inst.class_id, 1.0)]
            else:
                probs = softmax(classify(classifier, inst.feature))
                scored = [(c, float(p)) for c, p in enumerate(probs)]
            for class_id, score in scored:
                if score < cfg.score_threshold:
                    continue
                delta = predict(bank, class_id, inst.feature)
                box = decode_delta(inst.proposal_box, delta, image_size=image_size)
                candidates.append((class_id, score, box, seq))
                seq += 1

        kept: list[tuple[int, float, Box, int]] = []
        for class_id in sorted({c[0] for c in candidates}):
            group = [c for c in candidates if c[0] == class_id]
            keep_idx = nms([(c[2], c[1]) for c in group], cfg.nms_threshold)
            kept.extend(group[i] for i in keep_idx)
        kept.sort(key=lambda c: (-c[1], c[3]))
        for class_id, score, box, _ in kept[:cfg.max_detections_per_image]:
            out.append(Detection(image_id=image_id, class_id=class_id, score=score, box=box))
    return out


# ---------------------------------------------------------------------------
# average precision

def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from per-detection TP/FP flags in rank order."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision achievable at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def average_precision(detections: Sequence[Detection], gt_instances: Sequence[Instance],
                      iou_threshold: float) -> dict[int, float]:
    """Per-class AP at one IoU threshold.

    Classes without any ground truth are excluded (their AP is undefined).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    gt_by_class: dict[int, dict[int, list[Box]]] = {}
    for inst in gt_instances:
        gt_by_class.setdefault(inst.class_id, {}).setdefault(inst.image_id, []).append(inst.gt_box)

    dets_by_class: dict[int, list[tuple[int, Detection]]] = {}
    for seq, det in enumerate(detections):
        dets_by_class.setdefault(det.class_id, []).append((seq, det))

    result: dict[int, float] = {}
    for class_id in sorted(gt_by_class):
        per_image_gt = gt_by_class[class_id]
        num_gt = sum(len(v) for v in per_image_gt.values())
        dets = sorted(dets_by_class.get(class_id, ()), key=lambda s: (-s[1].score, s[0]))
        matched: set[tuple[int, int]] = set()
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, (_, det) in enumerate(dets):
            best_iou, best_gt = 0.0, -1
            for g, gt_box in enumerate(per_image_gt.get(det.image_id, ())):
                if (det.image_id, g) in matched:
                    continue
                overlap = iou(det.box, gt_box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best_iou, best_gt = overlap, g
            if best_gt >= 0:
                matched.add((det.image_id, best_gt))
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        result[class_id] = _interpolated_ap(tp, fp, num_gt)
    return result


# ---------------------------------------------------------------------------
# report

@dataclass(eq=False)
class EvalReport:
    """AP summary: overall, per IoU threshold, per class, per frequency group.

    AP values are stored in [0, 1]; the CSV mirror multiplies by 100 for
    table parity.
    """

    ap: float
    ap_per_threshold: dict[float, float]
    ap_per_class: dict[int, float]
    ap_per_group: dict[str, float | None]
    excluded_classes: tuple[int, ...]
    detection_count: int
    gt_count: int
    oracle: bool
    bias_ratio: float | None = None
    variant: str | None = None

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap_per_threshold": {repr(k): v for k, v in self.ap_per_threshold.items()},
            "ap_per_class": {str(k): v for k, v in self.ap_per_class.items()},
            "ap_per_group": self.ap_per_group,
            "excluded_classes": list(self.excluded_classes),
            "detection_count": self.detection_count,
            "gt_count": self.gt_count,
            "oracle": self.oracle,
            "bias_ratio": self.bias_ratio,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            ap=doc["ap"],
            ap_per_threshold={float(k): v for k, v in doc["ap_per_threshold"].items()},
            ap_per_class={int(k): v for k, v in doc["ap_per_class"].items()},
            ap_per_group=doc["ap_per_group"],
            excluded_classes=tuple(doc["excluded_classes"]),
            detection_count=doc["detection_count"],
            gt_count=doc["gt_count"],
            oracle=doc["oracle"],
            bias_ratio=doc.get("bias_ratio"),
            variant=doc.get("variant"),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")

    def csv_bytes(self) -> bytes:
        def x100(v):
            return "" if v is None else repr(100.0 * v)
        header = "variant,ap,ap_rare,ap_common,ap_frequent,bias_ratio"
        row = ",".join([
            self.variant or "",
            x100(self.ap),
            x100(self.ap_per_group.get("rare")),
            x100(self.ap_per_group.get("common")),
            x100(self.ap_per_group.get("frequent")),
            "" if self.bias_ratio is None else repr(self.bias_ratio),
        ])
        return (header + "\n" + row + "\n").encode()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_bytes(self.csv_bytes())


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def report(bank: HeadBank, dataset: SyntheticDataset, eval_cfg: EvalConfig,
           partition: FrequencyPartition, ledger: TrainLedger | None = None,
           detections: Sequence[Detection] | None = None) -> EvalReport:
    """Evaluate a trained bank on the val split and assemble all metrics.

    Group AP is the unweighted mean of member-class APs; classes with zero
    ground truth in the split are excluded from every mean and listed.
    """
    eval_cfg.validate()
    if detections is None:
        detections = run_inference(bank, bank.classifier, dataset.val, eval_cfg)

    per_threshold_class: dict[float, dict[int, float]] = {}
    for thr in eval_cfg.iou_thresholds:
        per_threshold_class[thr] = average_precision(detections, dataset.val, thr)

    present = sorted(next(iter(per_threshold_class.values())).keys()) if per_threshold_class else []
    excluded = tuple(c for c in range(dataset.num_classes) if c not in present)

    ap_per_class = {
        c: float(np.mean([per_threshold_class[t][c] for t in eval_cfg.iou_thresholds]))
        for c in present
    }
    ap_per_threshold = {
        t: float(np.mean([aps[c] for c in present])) if present else 0.0
        for t, aps in per_threshold_class.items()
    }
    overall = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0

    ap_per_group: dict[str, float | None] = {}
    for group in ("rare", "common", "frequent"):
        members = [c for c in partition.classes_in(group) if c in ap_per_class]
        ap_per_group[group] = float(np.mean([ap_per_class[c] for c in members])) if members else None

    return EvalReport(
        ap=overall,
        ap_per_threshold=ap_per_threshold,
        ap_per_class=ap_per_class,
        ap_per_group=ap_per_group,
        excluded_classes=excluded,
        detection_count=len(detections),
        gt_count=len(dataset.val),
        oracle=eval_cfg.oracle_gt_class,
        bias_ratio=bias_ratio(ledger) if ledger is not None else None,
        variant=bank.spec.token(),
    )


# ---------------------------------------------------------------------------
# detections file: line-delimited (image_id, class_id, score, x1, y1, x2, y2)

_DETECTIONS_HEADER = "image_id,class_id,score,x1,y1,x2,y2"


def detections_bytes(detections: Iterable[Detection]) -> bytes:
    lines = [_DETECTIONS_HEADER]
    for d in detections:
        b = d.box
        lines.append(f"{d.image_id},{d.class_id},{d.score!r},{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}")
    return ("\n".join(lines) + "\n").encode()


def save_detections(detections: Iterable[Detection], path: str | Path) -> None:
    Path(path).write_bytes(detections_bytes(detections))


def load_detections(path: str | Path) -> list[Detection]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _DETECTIONS_HEADER:
        raise ValueError(f"{path} is not a detections file")
    out = []
    for line in lines[1:]:
        image_id, class_id, score, x1, y1, x2, y2 = line.split(",")
        out.append(Detection(image_id=int(image_id), class_id=int(class_id), score=float(score),
                             box=Box(float(x1), float(y1), float(x2), float(y2))))
    return out
