"""Synthetic long-tailed detection benchmarks.

Generates instance collections whose statistics mirror the phenomena under
study: power-law class image-frequency, per-class object scales with a
train-to-val shift that grows toward the tail, proposals as jittered
ground-truth boxes, and proposal features produced by a per-class affine
model of the true regression offset. The feature model is the knob that
controls how much rare classes can gain from sharing a regression head:
each class's offset-to-feature map is ``w * shared + (1 - w) * private``
with ``w = shared_map_weight``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, DigestMismatchError
from .geometry import Box, Delta, encode_delta

#: Square image extent, pixels. Every ground-truth box lies fully inside.
CANVAS_SIZE = 640.0

#: Image-count cutoffs for the rare / common / frequent split.
DEFAULT_FREQUENCY_THRESHOLDS = (10, 100)

GROUPS = ("rare", "common", "frequent")

# Log-normal spread of a box side around its class mean scale.
_SIDE_SPREAD = 0.2

# Std of the class-private map/offset draws relative to the shared draw
# (std 1.0). Kept well below 1 so a single pooled regressor is nearly
# balanced across classes (its misfit stays close to the noise floor for
# rare and frequent alike), while class-private structure still gives
# converged class-specific heads an edge on well-sampled classes.
_PRIVATE_SCALE = 0.2

_DATASET_FORMAT = "tailreg.dataset"
_DATASET_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int
    images_per_split: tuple[int, int]  # (train, val)
    frequency_exponent: float
    scale_means: tuple[float, ...]     # per-class mean object side length, px
    scale_shift_rare: float            # additive train->val mean-scale delta at the tail
    feature_dim: int
    shared_map_weight: float
    noise_sigma: float
    proposal_jitter_sigma: float
    seed: int

    def validate(self) -> None:
        if self.num_classes < 3:
            raise ConfigError(f"num_classes must be >= 3, got {self.num_classes}")
        if len(self.images_per_split) != 2 or any(n < 1 for n in self.images_per_split):
            raise ConfigError(f"images_per_split must be two positive counts, got {self.images_per_split}")
        if not self.frequency_exponent > 0:
            raise ConfigError(f"frequency_exponent must be > 0, got {self.frequency_exponent}")
        if len(self.scale_means) != self.num_classes:
            raise ConfigError(
                f"scale_means must have one entry per class ({self.num_classes}), got {len(self.scale_means)}")
        if any(not s > 0 for s in self.scale_means):
            raise ConfigError("scale_means must all be positive")
        if max(self.scale_means) + self.scale_shift_rare > CANVAS_SIZE / 2:
            raise ConfigError("scale_means plus scale_shift_rare must leave room inside the canvas")
        if self.scale_shift_rare < 0:
            raise ConfigError(f"scale_shift_rare must be >= 0, got {self.scale_shift_rare}")
        if self.feature_dim < 4:
            raise ConfigError(f"feature_dim must be >= 4, got {self.feature_dim}")
        if not 0.0 <= self.shared_map_weight <= 1.0:
            raise ConfigError(f"shared_map_weight must lie in [0, 1], got {self.shared_map_weight}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.proposal_jitter_sigma < 0:
            raise ConfigError(f"proposal_jitter_sigma must be >= 0, got {self.proposal_jitter_sigma}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def default_scale_means(num_classes: int, low: float = 40.0, span: float = 72.0) -> tuple[float, ...]:
    """Per-class mean scales spread over [low, low+span] in a fixed
    low-discrepancy order, so scale rank is decorrelated from frequency rank."""
    phi = 0.6180339887498949
    return tuple(low + span * ((i * phi) % 1.0) for i in range(num_classes))


@dataclass(eq=False)
class Instance:
    """One annotated object: its box, the jittered proposal standing in for
    an RPN output, the proposal feature, and the regression target."""

    image_id: int
    class_id: int
    gt_box: Box
    proposal_box: Box
    feature: np.ndarray
    target_delta: Delta


@dataclass(eq=False)
class SyntheticDataset:
    config: DatasetConfig
    train: list[Instance]
    val: list[Instance]

    def split(self, name: str) -> list[Instance]:
        if name == "train":
            return self.train
        if name == "val":
            return self.val
        raise ValueError(f"unknown split {name!r}")

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def image_counts(self, split: str = "train") -> np.ndarray:
        """Distinct images containing each class."""
        seen: list[set[int]] = [set() for _ in range(self.num_classes)]
        for inst in self.split(split):
            seen[inst.class_id].add(inst.image_id)
        return np.array([len(s) for s in seen], dtype=np.int64)

    def instance_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for inst in self.split(split):
            counts[inst.class_id] += 1
        return counts

    def mean_scales(self, split: str = "train") -> np.ndarray:
        """Mean sqrt(box area) per class; NaN for classes absent from the split."""
        sums = np.zeros(self.num_classes)
        counts = np.zeros(self.num_classes)
        for inst in self.split(split):
            sums[inst.class_id] += inst.gt_box.scale
            counts[inst.class_id] += 1
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    def class_stats(self) -> list[tuple[float, float]]:
        """(instance_count, mean_scale) per class on the train split, the
        sort keys used by head clustering."""
        counts = self.instance_counts("train")
        scales = self.mean_scales("train")
        return [(float(c), float(s)) for c, s in zip(counts, scales)]


def _image_counts_for_split(num_images: int, num_classes: int, exponent: float) -> np.ndarray:
    """Deterministic per-class image counts following rank^(-exponent).

    The top-ranked class appears in half the split's images; every class
    appears at least once.
    """
    amplitude = num_images / 2.0
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    raw = amplitude * ranks ** (-exponent)
    return np.clip(np.round(raw).astype(np.int64), 1, num_images)


def generate(config: DatasetConfig) -> SyntheticDataset:
    """Generate a dataset deterministically from ``config.seed``.

    Feature model: ``feature = M_c @ target_delta + b_c + eps`` with
    ``M_c = w * M0 + (1 - w) * M_c_priv`` (same blend for ``b_c``) and
    isotropic noise ``eps`` of std ``noise_sigma``. With zero noise and
    ``w = 1`` the feature-to-offset map is exactly affine and shared by all
    classes. Proposals jitter ground-truth centers by
    ``proposal_jitter_sigma`` box-widths and sizes by the same log-scale
    factor. Val mean scales of tail classes are shifted by
    ``scale_shift_rare * (rank / (C - 1))**2``.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    C, d, w = config.num_classes, config.feature_dim, config.shared_map_weight

    map_shared = rng.normal(size=(d, 4))
    bias_shared = rng.normal(size=d)
    map_priv = rng.normal(scale=_PRIVATE_SCALE, size=(C, d, 4))
    bias_priv = rng.normal(scale=_PRIVATE_SCALE, size=(C, d))
    map_class = w * map_shared[None, :, :] + (1.0 - w) * map_priv
    bias_class = w * bias_shared[None, :] + (1.0 - w) * bias_priv

    splits: list[list[Instance]] = []
    for split_idx, num_images in enumerate(config.images_per_split):
        counts = _image_counts_for_split(num_images, C, config.frequency_exponent)
        instances: list[Instance] = []
        for c in range(C):
            scale = config.scale_means[c]
            if split_idx == 1 and config.scale_shift_rare > 0:
                scale += config.scale_shift_rare * (c / (C - 1)) ** 2
            image_ids = np.sort(rng.choice(num_images, size=counts[c], replace=False))
            for img in image_ids:
                instances.append(_draw_instance(rng, config, int(img), c, scale,
                                                map_class[c], bias_class[c]))
        instances.sort(key=lambda inst: (inst.image_id, inst.class_id))
        splits.append(instances)

    return SyntheticDataset(config=config, train=splits[0], val=splits[1])


def _draw_instance(rng, config, image_id, class_id, scale, m_c, b_c) -> Instance:
    z = rng.normal(size=2)
    bw = float(np.clip(scale * math.exp(_SIDE_SPREAD * z[0]), 2.0, CANVAS_SIZE - 2.0))
    bh = float(np.clip(scale * math.exp(_SIDE_SPREAD * z[1]), 2.0, CANVAS_SIZE - 2.0))
    cx = rng.uniform(bw / 2, CANVAS_SIZE - bw / 2)
    cy = rng.uniform(bh / 2, CANVAS_SIZE - bh / 2)
    gt = Box.from_center(cx, cy, bw, bh)

    sigma = config.proposal_jitter_sigma
    if sigma > 0:
        jz = rng.normal(size=4)
        proposal = Box.from_center(
            cx + bw * sigma * jz[0],
            cy + bh * sigma * jz[1],
            bw * math.exp(sigma * jz[2]),
            bh * math.exp(sigma * jz[3]),
        )
    else:
        proposal = gt

    delta = encode_delta(proposal, gt)
    feature = m_c @ np.asarray(delta.as_tuple()) + b_c
    if config.noise_sigma > 0:
        feature = feature + config.noise_sigma * rng.normal(size=config.feature_dim)
    return Instance(image_id=image_id, class_id=class_id, gt_box=gt,
                    proposal_box=proposal, feature=feature, target_delta=delta)


# ---------------------------------------------------------------------------
# frequency partition

@dataclass(frozen=True)
class FrequencyPartition:
    """Class-to-group assignment by image frequency: rare [0, t1],
    common [t1+1, t2], frequent (t2, inf)."""

    groups: tuple[str, ...]
    thresholds: tuple[int, int]

    @property
    def num_classes(self) -> int:
        return len(self.groups)

    def group_of(self, class_id: int) -> str:
        return self.groups[class_id]

    def classes_in(self, group: str) -> tuple[int, ...]:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        return tuple(c for c, g in enumerate(self.groups) if g == group)


def partition_from_counts(counts: Sequence[int],
                          thresholds: tuple[int, int] = DEFAULT_FREQUENCY_THRESHOLDS) -> FrequencyPartition:
    t1, t2 = thresholds
    if not 0 < t1 < t2:
        raise ConfigError(f"thresholds must satisfy 0 < t1 < t2, got {thresholds}")
    groups = tuple("rare" if n <= t1 else "common" if n <= t2 else "frequent" for n in counts)
    return FrequencyPartition(groups=groups, thresholds=(t1, t2))


def partition_by_frequency(dataset: SyntheticDataset,
                           thresholds: tuple[int, int] = DEFAULT_FREQUENCY_THRESHOLDS,
                           split: str = "train") -> FrequencyPartition:
    """Partition classes by how many distinct images contain them.

    Uses the train split unless ``split="val"`` is requested for
    partition-shift analysis.
    """
    if not dataset.split(split):
        raise ValueError(f"cannot partition an empty {split} split")
    return partition_from_counts(dataset.image_counts(split), thresholds)


# ---------------------------------------------------------------------------
# scale report

@dataclass(frozen=True)
class ScaleRow:
    class_id: int
    train_mean_scale: float | None
    val_mean_scale: float | None
    delta: float | None  # -(train - val); None when either split lacks the class


def class_scale_report(dataset: SyntheticDataset) -> list[ScaleRow]:
    """Per-class mean sqrt(area) on each split, plus the val-minus-train delta."""
    train = dataset.mean_scales("train")
    val = dataset.mean_scales("val")
    rows = []
    for c in range(dataset.num_classes):
        t = None if math.isnan(train[c]) else float(train[c])
        v = None if math.isnan(val[c]) else float(val[c])
        delta = None if t is None or v is None else v - t
        rows.append(ScaleRow(class_id=c, train_mean_scale=t, val_mean_scale=v, delta=delta))
    return rows


def write_scale_report_csv(rows: Iterable[ScaleRow], path: str | Path) -> None:
    lines = ["class_id,train_mean_scale,val_mean_scale,delta"]
    for r in rows:
        fmt = lambda x: "" if x is None else repr(x)
        lines.append(f"{r.class_id},{fmt(r.train_mean_scale)},{fmt(r.val_mean_scale)},{fmt(r.delta)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# serialization: versioned line-delimited records

def config_to_dict(config: DatasetConfig) -> dict:
    return {
        "num_classes": config.num_classes,
        "images_per_split": list(config.images_per_split),
        "frequency_exponent": config.frequency_exponent,
        "scale_means": list(config.scale_means),
        "scale_shift_rare": config.scale_shift_rare,
        "feature_dim": config.feature_dim,
        "shared_map_weight": config.shared_map_weight,
        "noise_sigma": config.noise_sigma,
        "proposal_jitter_sigma": config.proposal_jitter_sigma,
        "seed": config.seed,
    }


def config_from_dict(doc: dict) -> DatasetConfig:
    return DatasetConfig(
        num_classes=doc["num_classes"],
        images_per_split=tuple(doc["images_per_split"]),
        frequency_exponent=doc["frequency_exponent"],
        scale_means=tuple(doc["scale_means"]),
        scale_shift_rare=doc["scale_shift_rare"],
        feature_dim=doc["feature_dim"],
        shared_map_weight=doc["shared_map_weight"],
        noise_sigma=doc["noise_sigma"],
        proposal_jitter_sigma=doc["proposal_jitter_sigma"],
        seed=doc["seed"],
    )


def _instance_record(split: str, inst: Instance) -> str:
    doc = {
        "split": split,
        "image_id": inst.image_id,
        "class_id": inst.class_id,
        "gt": list(inst.gt_box.as_tuple()),
        "proposal": list(inst.proposal_box.as_tuple()),
        "delta": list(inst.target_delta.as_tuple()),
        "feature": [float(x) for x in inst.feature],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def serialize_dataset(dataset: SyntheticDataset) -> bytes:
    """Header line (config echo + body digest) followed by one record per
    instance. Byte-identical for equal (config, seed)."""
    body_lines = [_instance_record("train", i) for i in dataset.train]
    body_lines += [_instance_record("val", i) for i in dataset.val]
    body = ("\n".join(body_lines) + "\n").encode()
    header = {
        "format": _DATASET_FORMAT,
        "version": _DATASET_VERSION,
        "config": config_to_dict(dataset.config),
        "instances": [len(dataset.train), len(dataset.val)],
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode() + body


def save_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    Path(path).write_bytes(serialize_dataset(dataset))


def load_dataset(path: str | Path, verify: bool = True) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    header_line, _, body = raw.partition(b"\n")
    header = json.loads(header_line)
    if header.get("format") != _DATASET_FORMAT or header.get("version") != _DATASET_VERSION:
        raise ValueError(f"{path}: not a version-{_DATASET_VERSION} {_DATASET_FORMAT} file")
    if verify and hashlib.sha256(body).hexdigest() != header["body_sha256"]:
        raise DigestMismatchError(f"{path}: body does not match recorded digest")
    config = config_from_dict(header["config"])
    train: list[Instance] = []
    val: list[Instance] = []
    for line in body.decode().splitlines():
        doc = json.loads(line)
        inst = Instance(
            image_id=doc["image_id"],
            class_id=doc["class_id"],
            gt_box=Box(*doc["gt"]),
            proposal_box=Box(*doc["proposal"]),
            feature=np.asarray(doc["feature"], dtype=np.float64),
            target_delta=Delta(*doc["delta"]),
        )
        (train if doc["split"] == "train" else val).append(inst)
    expected = header["instances"]
    if [len(train), len(val)] != expected:
        raise ValueError(f"{path}: instance counts {[len(train), len(val)]} disagree with header {expected}")
    return SyntheticDataset(config=config, train=train, val=val)


# ---------------------------------------------------------------------------
# presets

def preset_config(name: str, seed: int) -> DatasetConfig:
    """Named benchmark presets; ``lt60`` is the default acceptance benchmark."""
    if name == "lt60":
        return DatasetConfig(
            num_classes=60,
            images_per_split=(2000, 500),
            frequency_exponent=1.2,
            scale_means=default_scale_means(60),
            scale_shift_rare=8.0,
            feature_dim=16,
            shared_map_weight=0.85,
            noise_sigma=0.05,
            proposal_jitter_sigma=0.15,
            seed=seed,
        )
    if name == "lt60-clean":
        return replace(preset_config("lt60", seed), noise_sigma=0.0, proposal_jitter_sigma=0.0,
                       scale_shift_rare=0.0)
    if name == "tiny":
        return DatasetConfig(
            num_classes=12,
            images_per_split=(240, 120),
            frequency_exponent=1.2,
            scale_means=default_scale_means(12),
            scale_shift_rare=4.0,
            feature_dim=8,
            shared_map_weight=0.85,
            noise_sigma=0.05,
            proposal_jitter_sigma=0.15,
            seed=seed,
        )
    if name == "tiny-clean":
        return replace(preset_config("tiny", seed), noise_sigma=0.0, proposal_jitter_sigma=0.0,
                       scale_shift_rare=0.0)
    raise ConfigError(f"unknown dataset preset {name!r}; known: lt60, lt60-clean, tiny, tiny-clean")


DATASET_PRESETS = ("lt60", "lt60-clean", "tiny", "tiny-clean")
