"""Regression-head variants and the linear classifier.

A :class:`HeadBank` owns the weight matrices of one regression-head layout.
Five layouts are supported: one head per class (``specific``), a single
shared head (``agnostic``), a trained blend of both (``cab``, with blend
weight alpha), heads shared within groups of statistically adjacent classes
(``cluster``), and heads collapsed within frequency groups (``merge``).
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .exceptions import ConfigError
from .geometry import Delta

if TYPE_CHECKING:
    from .dataset import FrequencyPartition

VARIANTS = ("specific", "agnostic", "cab", "cluster", "merge")

MERGE_LETTERS = {"r": "rare", "c": "common", "f": "frequent"}

#: Gaussian std for freshly drawn weight matrices; biases start at zero.
INIT_SIGMA = 0.01

_BANK_FORMAT = "tailreg.headbank"
_BANK_VERSION = 1


@dataclass(frozen=True)
class HeadSpec:
    """Parsed head-variant token, e.g. ``cab:0.5`` or ``cluster:10:num``."""

    kind: str
    alpha: float | None = None
    cluster_k: int | None = None
    cluster_key: str | None = None
    merge_groups: tuple[str, ...] = ()

    def token(self) -> str:
        if self.kind == "cab":
            return f"cab:{self.alpha:g}"
        if self.kind == "cluster":
            key = "num" if self.cluster_key == "instance_count" else "scale"
            return f"cluster:{self.cluster_k}:{key}"
        if self.kind == "merge":
            letters = "".join(l for l, name in MERGE_LETTERS.items() if name in self.merge_groups)
            return f"merge:{letters}"
        return self.kind

    def slug(self) -> str:
        """Filesystem-safe name for output directories."""
        return self.token().replace(":", "-").replace(",", "")


def parse_head_spec(token: str) -> HeadSpec:
    """Parse a head-variant token; raises :class:`ConfigError` naming it."""
    parts = token.strip().split(":")
    kind = parts[0]
    try:
        if kind == "specific" or kind == "agnostic":
            if len(parts) != 1:
                raise ValueError("no arguments expected")
            return HeadSpec(kind=kind)
        if kind == "cab":
            if len(parts) != 2:
                raise ValueError("expected cab:ALPHA")
            alpha = float(parts[1])
            if not 0.0 <= alpha <= 1.0:
                raise ValueError("alpha must lie in [0, 1]")
            return HeadSpec(kind="cab", alpha=alpha)
        if kind == "cluster":
            if len(parts) != 3:
                raise ValueError("expected cluster:K:KEY")
            k = int(parts[1])
            if k < 1:
                raise ValueError("K must be positive")
            key = {"num": "instance_count", "scale": "mean_scale",
                   "instance_count": "instance_count", "mean_scale": "mean_scale"}.get(parts[2])
            if key is None:
                raise ValueError("KEY must be 'num' or 'scale'")
            return HeadSpec(kind="cluster", cluster_k=k, cluster_key=key)
        if kind == "merge":
            if len(parts) != 2:
                raise ValueError("expected merge:GROUPS")
            letters = parts[1].replace(",", "")
            if any(l not in MERGE_LETTERS for l in letters):
                raise ValueError("groups must be letters from {r, c, f}")
            groups = tuple(name for l, name in MERGE_LETTERS.items() if l in letters)
            return HeadSpec(kind="merge", merge_groups=groups)
        raise ValueError(f"unknown variant kind {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"bad head variant token {token!r}: {exc}") from None


@dataclass(frozen=True)
class ClusterConfig:
    """How to group classes for shared cluster heads.

    Classes are sorted descending by ``sort_key`` (ties broken by ascending
    class id) and split into ``k`` contiguous groups whose sizes differ by at
    most one; earlier groups take the remainder.
    """

    k: int
    sort_key: str = "instance_count"

    def validate(self, num_classes: int) -> None:
        if not 1 <= self.k <= num_classes:
            raise ConfigError(f"cluster k must lie in [1, {num_classes}], got {self.k}")
        if self.sort_key not in ("instance_count", "mean_scale"):
            raise ConfigError(f"cluster sort_key must be instance_count or mean_scale, got {self.sort_key!r}")


def cluster_heads(stats: Sequence[tuple[float, float]], cfg: ClusterConfig) -> np.ndarray:
    """Map each class to one of ``cfg.k`` shared heads.

    ``stats`` holds one ``(instance_count, mean_scale)`` pair per class.
    Returns an int array of head indices, one per class.
    """
    num_classes = len(stats)
    cfg.validate(num_classes)
    column = 0 if cfg.sort_key == "instance_count" else 1
    order = sorted(range(num_classes), key=lambda c: (-stats[c][column], c))
    base, rem = divmod(num_classes, cfg.k)
    mapping = np.empty(num_classes, dtype=np.int64)
    pos = 0
    for head in range(cfg.k):
        size = base + (1 if head < rem else 0)
        for c in order[pos:pos + size]:
            mapping[c] = head
        pos += size
    return mapping


def merge_heads(partition: "FrequencyPartition", groups_to_merge: Sequence[str]) -> np.ndarray:
    """Collapse all classes of the named frequency groups into ONE shared head.

    Classes outside the merged groups keep private heads. An empty merge set
    yields the identity mapping (equivalent to the specific layout).
    """
    merge_set = set(groups_to_merge)
    unknown = merge_set - set(MERGE_LETTERS.values())
    if unknown:
        raise ConfigError(f"unknown merge groups {sorted(unknown)}")
    mapping = np.empty(partition.num_classes, dtype=np.int64)
    shared = -1
    next_head = 0
    for c in range(partition.num_classes):
        if partition.group_of(c) in merge_set:
            if shared < 0:
                shared = next_head
                next_head += 1
            mapping[c] = shared
        else:
            mapping[c] = next_head
            next_head += 1
    return mapping


@dataclass(eq=False)
class LinearClassifier:
    """Plain affine classifier over proposal features."""

    weights: np.ndarray  # (C, d)
    bias: np.ndarray     # (C,)


def classify(classifier: LinearClassifier, feature: np.ndarray) -> np.ndarray:
    """Per-class scores for one feature vector (softmax applied downstream)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (classifier.weights.shape[1],):
        raise ValueError(
            f"feature length {feature.shape} does not match classifier dim {classifier.weights.shape[1]}")
    return classifier.weights @ feature + classifier.bias


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class HeadBank:
    """Weights of one regression-head layout plus the class-to-head mapping.

    ``weights[h]`` is the (4, d) matrix of head ``h``; ``biases[h]`` its
    4-vector. For the ``cab`` variant the shared branch is stored separately
    in ``agnostic_weight``/``agnostic_bias`` and blended at every forward
    pass. Banks are immutable during prediction; only the trainer mutates
    them, single-writer.
    """

    spec: HeadSpec
    num_classes: int
    feature_dim: int
    class_to_head: np.ndarray
    weights: np.ndarray
    biases: np.ndarray
    agnostic_weight: np.ndarray | None = None
    agnostic_bias: np.ndarray | None = None
    classifier: LinearClassifier | None = None
    trained_digest: str | None = None

    @property
    def head_count(self) -> int:
        return self.weights.shape[0]

    @property
    def alpha(self) -> float | None:
        return self.spec.alpha


def initialize_bank(
    spec: HeadSpec,
    num_classes: int,
    feature_dim: int,
    rng: np.random.Generator,
    class_to_head: np.ndarray | None = None,
    init_sigma: float = INIT_SIGMA,
) -> HeadBank:
    """Build a bank with freshly drawn weights.

    The draw order is pinned: one (4, d) matrix per class first, then one
    shared matrix. Heads serving a single class start from that class's
    draw; heads serving several classes (agnostic, cluster, merge) start
    from the shared draw. This makes cab:0 match the specific bank and
    cab:1 match the fully merged bank at initialization, independent of
    variant.
    """
    per_class = rng.normal(0.0, init_sigma, size=(num_classes, 4, feature_dim))
    shared = rng.normal(0.0, init_sigma, size=(4, feature_dim))

    if spec.kind in ("specific", "cab"):
        mapping = np.arange(num_classes, dtype=np.int64)
    elif spec.kind == "agnostic":
        mapping = np.zeros(num_classes, dtype=np.int64)
    else:
        if class_to_head is None:
            raise ConfigError(f"{spec.kind} bank requires a class_to_head mapping")
        mapping = np.asarray(class_to_head, dtype=np.int64).copy()
        if mapping.shape != (num_classes,):
            raise ConfigError("class_to_head must map every class")

    head_count = int(mapping.max()) + 1
    weights = np.empty((head_count, 4, feature_dim))
    for h in range(head_count):
        members = np.flatnonzero(mapping == h)
        if members.size == 0:
            raise ConfigError(f"head {h} has no classes; mapping must be surjective")
        weights[h] = per_class[members[0]] if members.size == 1 else shared
    biases = np.zeros((head_count, 4))

    bank = HeadBank(
        spec=spec,
        num_classes=num_classes,
        feature_dim=feature_dim,
        class_to_head=mapping,
        weights=weights,
        biases=biases,
    )
    if spec.kind == "cab":
        bank.agnostic_weight = shared.copy()
        bank.agnostic_bias = np.zeros(4)
    return bank


def effective_weight(bank: HeadBank, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """The (W, b) actually applied for ``class_id``.

    cab blends ``alpha * W0 + (1 - alpha) * W_i`` (bias identically); the
    endpoints alpha=0 and alpha=1 return the stored arrays themselves so the
    equivalences with the specific and fully merged layouts are bit-exact.
    """
    if not 0 <= class_id < bank.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {bank.num_classes})")
    head = bank.class_to_head[class_id]
    if bank.spec.kind != "cab":
        return bank.weights[head], bank.biases[head]
    alpha = bank.spec.alpha
    if alpha == 0.0:
        return bank.weights[head], bank.biases[head]
    if alpha == 1.0:
        return bank.agnostic_weight, bank.agnostic_bias
    w = alpha * bank.agnostic_weight + (1.0 - alpha) * bank.weights[head]
    b = alpha * bank.agnostic_bias + (1.0 - alpha) * bank.biases[head]
    return w, b


def predict(bank: HeadBank, class_id: int, feature: np.ndarray) -> Delta:
    """Affine regression offset for one proposal feature."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (bank.feature_dim,):
        raise ValueError(f"feature shape {feature.shape} does not match bank dim {bank.feature_dim}")
    w, b = effective_weight(bank, class_id)
    out = w @ feature + b
    return Delta(float(out[0]), float(out[1]), float(out[2]), float(out[3]))


# ---------------------------------------------------------------------------
# serialization

def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(obj["shape"]).copy()


def bank_to_dict(bank: HeadBank) -> dict:
    doc = {
        "format": _BANK_FORMAT,
        "version": _BANK_VERSION,
        "variant": bank.spec.token(),
        "num_classes": bank.num_classes,
        "feature_dim": bank.feature_dim,
        "class_to_head": [int(h) for h in bank.class_to_head],
        "weights": _encode_array(bank.weights),
        "biases": _encode_array(bank.biases),
        "trained_digest": bank.trained_digest,
    }
    if bank.agnostic_weight is not None:
        doc["agnostic_weight"] = _encode_array(bank.agnostic_weight)
        doc["agnostic_bias"] = _encode_array(bank.agnostic_bias)
    if bank.classifier is not None:
        doc["classifier_weights"] = _encode_array(bank.classifier.weights)
        doc["classifier_bias"] = _encode_array(bank.classifier.bias)
    return doc


def bank_from_dict(doc: dict) -> HeadBank:
    if doc.get("format") != _BANK_FORMAT or doc.get("version") != _BANK_VERSION:
        raise ValueError(f"not a version-{_BANK_VERSION} {_BANK_FORMAT} document")
    bank = HeadBank(
        spec=parse_head_spec(doc["variant"]),
        num_classes=doc["num_classes"],
        feature_dim=doc["feature_dim"],
        class_to_head=np.asarray(doc["class_to_head"], dtype=np.int64),
        weights=_decode_array(doc["weights"]),
        biases=_decode_array(doc["biases"]),
        trained_digest=doc.get("trained_digest"),
    )
    if "agnostic_weight" in doc:
        bank.agnostic_weight = _decode_array(doc["agnostic_weight"])
        bank.agnostic_bias = _decode_array(doc["agnostic_bias"])
    if "classifier_weights" in doc:
        bank.classifier = LinearClassifier(
            weights=_decode_array(doc["classifier_weights"]),
            bias=_decode_array(doc["classifier_bias"]),
        )
    return bank


def bank_digest(bank: HeadBank) -> str:
    """sha256 over the canonical serialized weights (digest field excluded)."""
    doc = bank_to_dict(bank)
    doc.pop("trained_digest", None)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_bank(bank: HeadBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank), sort_keys=True, separators=(",", ":")) + "\n")


def load_bank(path: str | Path) -> HeadBank:
    return bank_from_dict(json.loads(Path(path).read_text()))
