"""Loss functions, closed-form gradients, and the deterministic SGD loop.

Regression heads are affine, so gradients of the smooth-L1 objective are
exact outer products; no autograd framework is involved. The trainer keeps
a per-epoch, per-class ledger of mean regression loss on both splits, the
raw material for loss-balance diagnostics and the bias ratio.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FrequencyPartition, Instance, SyntheticDataset, partition_by_frequency
from .exceptions import ConfigError, TrainingDivergedError
from .geometry import Delta
from .heads import (ClusterConfig, HeadBank, HeadSpec, LinearClassifier, bank_digest,
                    cluster_heads, initialize_bank, merge_heads, parse_head_spec)

MODES = ("joint", "regression_only_gt")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 16
    learning_rate: float = 0.02
    warmup_steps: int = 100
    momentum: float = 0.9
    seed: int = 0
    mode: str = "regression_only_gt"
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lambda_cls > 0 or not self.lambda_reg > 0:
            raise ConfigError("loss balance weights lambda_cls and lambda_reg must be positive")


# ---------------------------------------------------------------------------
# losses

def smooth_l1(residual: Delta | Sequence[float], beta: float = 1.0) -> float:
    """Smooth-L1 of a 4-vector residual, summed over coordinates.

    Per coordinate: 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    values = residual.as_tuple() if isinstance(residual, Delta) else tuple(residual)
    total = 0.0
    for x in values:
        if not math.isfinite(x):
            raise ValueError("residual must be finite")
        ax = abs(x)
        total += 0.5 * x * x / beta if ax < beta else ax - 0.5 * beta
    return total


def _smooth_l1_rows(resid: np.ndarray, beta: float) -> np.ndarray:
    """Per-row smooth-L1 over the 4 coordinates of an (N, 4) residual array."""
    ax = np.abs(resid)
    per = np.where(ax < beta, 0.5 * resid * resid / beta, ax - 0.5 * beta)
    return per.sum(axis=1)


def _smooth_l1_grad_rows(resid: np.ndarray, beta: float) -> np.ndarray:
    ax = np.abs(resid)
    return np.where(ax < beta, resid / beta, np.sign(resid))


# ---------------------------------------------------------------------------
# forward / backward primitives shared by the trainer and grad_head

def _forward_stack(bank: HeadBank) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(weight stack, bias stack, class-to-stack-index) for the current bank.

    The cab endpoints avoid any arithmetic so their training trajectories are
    bit-identical to the specific (alpha=0) and fully merged (alpha=1) banks.
    """
    if bank.spec.kind != "cab" or bank.spec.alpha == 0.0:
        return bank.weights, bank.biases, bank.class_to_head
    if bank.spec.alpha == 1.0:
        return (bank.agnostic_weight[None, :, :], bank.agnostic_bias[None, :],
                np.zeros(bank.num_classes, dtype=np.int64))
    a = bank.spec.alpha
    stack_w = a * bank.agnostic_weight[None, :, :] + (1.0 - a) * bank.weights
    stack_b = a * bank.agnostic_bias[None, :] + (1.0 - a) * bank.biases
    return stack_w, stack_b, bank.class_to_head


def _predict_rows(stack_w, stack_b, head_idx, features) -> np.ndarray:
    w = stack_w[head_idx]
    return np.einsum("nij,nj->ni", w, features) + stack_b[head_idx]


def _accumulate(grad_rows: np.ndarray, features: np.ndarray, head_idx: np.ndarray,
                head_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-sample affine gradients into per-head weight/bias gradients."""
    d = features.shape[1]
    dw = np.zeros((head_count, 4, d))
    db = np.zeros((head_count, 4))
    for h in np.unique(head_idx):
        mask = head_idx == h
        g = grad_rows[mask]
        dw[h] = g.T @ features[mask]
        db[h] = g.sum(axis=0)
    return dw, db


@dataclass(eq=False)
class BankGradients:
    """Gradients of the mean batch regression loss w.r.t. every bank parameter."""

    weights: np.ndarray
    biases: np.ndarray
    agnostic_weight: np.ndarray | None = None
    agnostic_bias: np.ndarray | None = None


def _batch_arrays(batch: Sequence[tuple[int, np.ndarray, Delta]]):
    ids = np.array([b[0] for b in batch], dtype=np.int64)
    feats = np.stack([np.asarray(b[1], dtype=np.float64) for b in batch])
    targets = np.array([b[2].as_tuple() if isinstance(b[2], Delta) else tuple(b[2]) for b in batch])
    return ids, feats, targets


def batch_from_instances(instances: Sequence[Instance]):
    """(class_ids, features, targets) arrays for a list of instances."""
    ids = np.array([i.class_id for i in instances], dtype=np.int64)
    feats = np.stack([i.feature for i in instances])
    targets = np.array([i.target_delta.as_tuple() for i in instances])
    return ids, feats, targets


def mean_regression_loss(bank: HeadBank, batch: Sequence[tuple[int, np.ndarray, Delta]],
                         beta: float = 1.0) -> float:
    """Mean smooth-L1 regression loss of a batch; the quantity grad_head differentiates."""
    ids, feats, targets = _batch_arrays(batch)
    stack_w, stack_b, class_map = _forward_stack(bank)
    preds = _predict_rows(stack_w, stack_b, class_map[ids], feats)
    return float(_smooth_l1_rows(preds - targets, beta).mean())


def grad_head(bank: HeadBank, batch: Sequence[tuple[int, np.ndarray, Delta]],
              beta: float = 1.0) -> BankGradients:
    """Exact gradients of the mean batch regression loss.

    For cab, the shared branch accumulates alpha-scaled contributions from
    every sample while each class branch receives only its own samples,
    scaled by (1 - alpha). The endpoints route gradients exclusively to one
    side, leaving the other side exactly zero.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    ids, feats, targets = _batch_arrays(batch)
    if np.any((ids < 0) | (ids >= bank.num_classes)):
        raise ValueError("batch contains invalid class ids")
    stack_w, stack_b, class_map = _forward_stack(bank)
    head_idx = class_map[ids]
    preds = _predict_rows(stack_w, stack_b, head_idx, feats)
    g_rows = _smooth_l1_grad_rows(preds - targets, beta) / len(batch)

    grads = BankGradients(weights=np.zeros_like(bank.weights), biases=np.zeros_like(bank.biases))
    if bank.spec.kind == "cab":
        grads.agnostic_weight = np.zeros_like(bank.agnostic_weight)
        grads.agnostic_bias = np.zeros_like(bank.agnostic_bias)
        alpha = bank.spec.alpha
        if alpha > 0.0:
            dw0, db0 = _accumulate(g_rows, feats, np.zeros(len(batch), dtype=np.int64), 1)
            grads.agnostic_weight[:] = dw0[0] if alpha == 1.0 else alpha * dw0[0]
            grads.agnostic_bias[:] = db0[0] if alpha == 1.0 else alpha * db0[0]
        if alpha < 1.0:
            dw, db = _accumulate(g_rows, feats, bank.class_to_head[ids], bank.head_count)
            grads.weights[:] = dw if alpha == 0.0 else (1.0 - alpha) * dw
            grads.biases[:] = db if alpha == 0.0 else (1.0 - alpha) * db
    else:
        dw, db = _accumulate(g_rows, feats, head_idx, bank.head_count)
        grads.weights[:] = dw
        grads.biases[:] = db
    return grads


# ---------------------------------------------------------------------------
# training ledger

@dataclass(eq=False)
class TrainLedger:
    """Per-epoch, per-class mean regression loss on both splits.

    Loss sums are accumulated as samples are visited (train) or in a
    full pass with frozen weights at each epoch end (val). Group aggregates
    are always recomputed from the per-class sums, so they are exactly the
    sample-weighted means of their member classes.
    """

    num_classes: int
    partition: FrequencyPartition
    train_loss_sum: np.ndarray  # (E, C)
    train_counts: np.ndarray    # (C,)
    val_loss_sum: np.ndarray    # (E, C)
    val_counts: np.ndarray      # (C,)
    weights_digest: str
    cls_loss_sum: np.ndarray | None = None  # (E, C), joint mode only

    @property
    def epochs(self) -> int:
        return self.train_loss_sum.shape[0]

    def _sums_counts(self, split: str):
        if split == "train":
            return self.train_loss_sum, self.train_counts
        if split == "val":
            return self.val_loss_sum, self.val_counts
        raise ValueError(f"unknown split {split!r}")

    def class_mean(self, split: str = "train") -> np.ndarray:
        """(epochs, classes) mean loss; NaN where a class has no samples."""
        sums, counts = self._sums_counts(split)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts[None, :] > 0, sums / np.maximum(counts[None, :], 1), np.nan)

    def group_curve(self, group: str, split: str = "val",
                    partition: FrequencyPartition | None = None) -> np.ndarray:
        """Sample-weighted mean loss of a frequency group, per epoch."""
        part = partition or self.partition
        members = list(part.classes_in(group))
        sums, counts = self._sums_counts(split)
        total = counts[members].sum()
        if total == 0:
            return np.full(self.epochs, np.nan)
        return sums[:, members].sum(axis=1) / total

    def final_group_mean(self, group: str, split: str = "val",
                         partition: FrequencyPartition | None = None) -> float | None:
        value = self.group_curve(group, split, partition)[-1]
        return None if math.isnan(value) else float(value)

    def csv_bytes(self, split: str = "train") -> bytes:
        sums, counts = self._sums_counts(split)
        lines = ["epoch,class_id,group,mean_reg_loss,n_samples"]
        for e in range(self.epochs):
            for c in range(self.num_classes):
                if counts[c] == 0:
                    continue
                mean = float(sums[e, c] / counts[c])
                lines.append(f"{e + 1},{c},{self.partition.group_of(c)},{mean!r},{int(counts[c])}")
        return ("\n".join(lines) + "\n").encode()

    def to_csv(self, path: str | Path, split: str = "train") -> None:
        Path(path).write_bytes(self.csv_bytes(split))

    def digest(self) -> str:
        return hashlib.sha256(self.csv_bytes("train") + self.csv_bytes("val")).hexdigest()


def read_ledger_csv(path: str | Path) -> list[tuple[int, int, str, float, int]]:
    """Rows of (epoch, class_id, group, mean_reg_loss, n_samples)."""
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch,class_id,group,mean_reg_loss,n_samples":
        raise ValueError(f"{path} is not a ledger CSV")
    for line in lines[1:]:
        epoch, class_id, group, mean, n = line.split(",")
        rows.append((int(epoch), int(class_id), group, float(mean), int(n)))
    return rows


def bias_ratio(ledger: TrainLedger, partition: FrequencyPartition | None = None) -> float | None:
    """Final-epoch val regression loss of rare classes over frequent classes.

    The scalar summary of the regression bias; None when either group is
    empty in the val split.
    """
    rare = ledger.final_group_mean("rare", "val", partition)
    frequent = ledger.final_group_mean("frequent", "val", partition)
    if rare is None or frequent is None or frequent == 0.0:
        return None
    return rare / frequent


# ---------------------------------------------------------------------------
# the SGD loop

def _lr_at(step: int, config: TrainConfig) -> float:
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    return config.learning_rate


def _sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
              lr: float, momentum: float) -> None:
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


def build_bank_for_dataset(spec: HeadSpec, dataset: SyntheticDataset,
                           rng: np.random.Generator) -> HeadBank:
    """Initialize a bank, deriving cluster/merge mappings from train-split statistics."""
    mapping = None
    if spec.kind == "cluster":
        mapping = cluster_heads(dataset.class_stats(),
                                ClusterConfig(k=spec.cluster_k, sort_key=spec.cluster_key))
    elif spec.kind == "merge":
        mapping = merge_heads(partition_by_frequency(dataset), spec.merge_groups)
    return initialize_bank(spec, dataset.num_classes, dataset.config.feature_dim, rng,
                           class_to_head=mapping)


def train(dataset: SyntheticDataset, spec: HeadSpec | str,
          config: TrainConfig) -> tuple[HeadBank, TrainLedger]:
    """Train one head bank on the dataset's train split.

    Deterministic given ``config.seed``: initialization and shuffling use
    independent fixed streams. In ``regression_only_gt`` mode the classifier
    is absent and head selection always uses ground-truth class ids; in
    ``joint`` mode a linear softmax classifier trains alongside (the two
    parameter sets share no terms, so the regression trajectory is
    identical in both modes).
    """
    config.validate()
    if isinstance(spec, str):
        spec = parse_head_spec(spec)
    if not dataset.train or not dataset.val:
        raise ValueError("dataset must contain non-empty train and val splits")

    C = dataset.num_classes
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    bank = build_bank_for_dataset(spec, dataset, init_rng)
    joint = config.mode == "joint"
    if joint:
        bank.classifier = LinearClassifier(
            weights=init_rng.normal(0.0, 0.01, size=(C, dataset.config.feature_dim)),
            bias=np.zeros(C),
        )

    ids, feats, targets = batch_from_instances(dataset.train)
    val_ids, val_feats, val_targets = batch_from_instances(dataset.val)
    n = len(ids)
    train_counts = np.bincount(ids, minlength=C).astype(np.int64)
    val_counts = np.bincount(val_ids, minlength=C).astype(np.int64)

    vel_w = np.zeros_like(bank.weights)
    vel_b = np.zeros_like(bank.biases)
    vel_aw = np.zeros_like(bank.agnostic_weight) if bank.agnostic_weight is not None else None
    vel_ab = np.zeros_like(bank.agnostic_bias) if bank.agnostic_bias is not None else None
    if joint:
        vel_cw = np.zeros_like(bank.classifier.weights)
        vel_cb = np.zeros_like(bank.classifier.bias)

    epochs = config.epochs
    train_loss_sum = np.zeros((epochs, C))
    val_loss_sum = np.zeros((epochs, C))
    cls_loss_sum = np.zeros((epochs, C)) if joint else None

    alpha = spec.alpha if spec.kind == "cab" else None
    step = 0
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = perm[start:start + config.batch_size]
            b_ids, b_feats, b_targets = ids[sel], feats[sel], targets[sel]
            bsize = len(sel)
            lr = _lr_at(step, config)

            stack_w, stack_b, class_map = _forward_stack(bank)
            head_idx = class_map[b_ids]
            preds = _predict_rows(stack_w, stack_b, head_idx, b_feats)
            resid = preds - b_targets
            np.add.at(train_loss_sum[epoch], b_ids, _smooth_l1_rows(resid, 1.0))

            g_rows = _smooth_l1_grad_rows(resid, 1.0) * (config.lambda_reg / bsize)
            if alpha is None or alpha == 0.0:
                dw, db = _accumulate(g_rows, b_feats, bank.class_to_head[b_ids], bank.head_count)
                _sgd_step(bank.weights, dw, vel_w, lr, config.momentum)
                _sgd_step(bank.biases, db, vel_b, lr, config.momentum)
            elif alpha == 1.0:
                dw0, db0 = _accumulate(g_rows, b_feats, np.zeros(bsize, dtype=np.int64), 1)
                _sgd_step(bank.agnostic_weight, dw0[0], vel_aw, lr, config.momentum)
                _sgd_step(bank.agnostic_bias, db0[0], vel_ab, lr, config.momentum)
            else:
                dw0, db0 = _accumulate(g_rows, b_feats, np.zeros(bsize, dtype=np.int64), 1)
                dw, db = _accumulate(g_rows, b_feats, bank.class_to_head[b_ids], bank.head_count)
                _sgd_step(bank.agnostic_weight, alpha * dw0[0], vel_aw, lr, config.momentum)
                _sgd_step(bank.agnostic_bias, alpha * db0[0], vel_ab, lr, config.momentum)
                _sgd_step(bank.weights, (1.0 - alpha) * dw, vel_w, lr, config.momentum)
                _sgd_step(bank.biases, (1.0 - alpha) * db, vel_b, lr, config.momentum)

            if joint:
                logits = b_feats @ bank.classifier.weights.T + bank.classifier.bias
                logits -= logits.max(axis=1, keepdims=True)
                expl = np.exp(logits)
                probs = expl / expl.sum(axis=1, keepdims=True)
                ce = -np.log(np.maximum(probs[np.arange(bsize), b_ids], 1e-300))
                np.add.at(cls_loss_sum[epoch], b_ids, ce)
                probs[np.arange(bsize), b_ids] -= 1.0
                g_cls = probs * (config.lambda_cls / bsize)
                _sgd_step(bank.classifier.weights, g_cls.T @ b_feats, vel_cw, lr, config.momentum)
                _sgd_step(bank.classifier.bias, g_cls.sum(axis=0), vel_cb, lr, config.momentum)

            step += 1

        epoch_mean = train_loss_sum[epoch].sum() / n
        if not math.isfinite(epoch_mean):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch + 1}")

        stack_w, stack_b, class_map = _forward_stack(bank)
        val_preds = _predict_rows(stack_w, stack_b, class_map[val_ids], val_feats)
        np.add.at(val_loss_sum[epoch], val_ids, _smooth_l1_rows(val_preds - val_targets, 1.0))

    bank.trained_digest = bank_digest(bank)
    ledger = TrainLedger(
        num_classes=C,
        partition=partition_by_frequency(dataset),
        train_loss_sum=train_loss_sum,
        train_counts=train_counts,
        val_loss_sum=val_loss_sum,
        val_counts=val_counts,
        weights_digest=bank.trained_digest,
        cls_loss_sum=cls_loss_sum,
    )
    return bank, ledger
