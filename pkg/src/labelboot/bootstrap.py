"""Stage 1: early-stopped training with null labels and the clean/noisy split.

The classifier is trained for a short, fixed schedule on strong-augmented
images with the null label at the second input, predicting the noisy
labels (with MixUp).  Confidences then come from dropout-enabled
averaged prediction over weak augmentations.  The split allocates
per-transition quotas from the estimated (noisy, predicted) joint
proportion matrix, so rare noise transitions stay represented, and
additionally admits every record above the confidence guarantee
threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentPolicy, augment_batch, mixup_batch
from .data import TrainingView
from .metrics import MetricsLogger
from .models import Classifier, one_hot, predict_averaged, soft_cross_entropy
from .noise import TransitionMatrix
from .seeding import SeedStreams
from .train_utils import check_finite, epoch_batches, make_sgd, multistep_lr, set_lr

QUOTA_CONVENTIONS = ("fraction", "literal")


@dataclass
class BootstrapConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.02
    lr_milestones: tuple[int, ...] = (5, 50)  # x0.1 at each
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mixup_alpha: float = 0.2
    train_augment: str = "strong"  # strong|weak|none
    eval_augment: str = "weak"  # weak|none
    n_eval_augs: int = 25
    selection_fraction: float = 0.1  # K: minimum fraction of samples to select
    confidence_guarantee: float = 0.99  # tau: always-select threshold
    top_confident_fraction: float = 0.9
    quota_convention: str = "fraction"
    log_every: int = 50

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 0:
            problems.append("bootstrap.epochs must be >= 0")
        if not 0.0 < self.selection_fraction <= 1.0:
            problems.append("bootstrap.K must lie in (0,1]")
        if not 0.0 < self.confidence_guarantee <= 1.0:
            problems.append("bootstrap.tau must lie in (0,1]")
        if not 0.0 < self.top_confident_fraction <= 1.0:
            problems.append("bootstrap.top_confident_fraction must lie in (0,1]")
        if self.train_augment not in ("strong", "weak", "none"):
            problems.append("bootstrap.train_augment must be strong|weak|none")
        if self.eval_augment not in ("weak", "none"):
            problems.append("bootstrap.eval_augment must be weak|none")
        if self.n_eval_augs < 1:
            problems.append("bootstrap.n_eval_augs must be >= 1")
        if self.quota_convention not in QUOTA_CONVENTIONS:
            problems.append(f"bootstrap.quota_convention must be one of {QUOTA_CONVENTIONS}")
        if self.mixup_alpha <= 0:
            problems.append("bootstrap.mixup_alpha must be > 0")
        return problems


@dataclass(frozen=True)
class ConfidenceRecord:
    """Averaged prediction for one training sample."""

    index: int
    predicted_dist: np.ndarray
    confidence: float
    predicted_class: int


@dataclass(frozen=True)
class SplitResult:
    """Partition of training indices into the confident clean set and the rest.

    Clean entries carry (index, noisy label, predicted class); the
    predicted class is the label treated as ground truth downstream.
    """

    clean: tuple[tuple[int, int, int], ...]
    noisy: tuple[tuple[int, int], ...]

    @property
    def clean_indices(self) -> np.ndarray:
        return np.array([c[0] for c in self.clean], dtype=np.int64)

    @property
    def clean_labels(self) -> np.ndarray:
        return np.array([c[2] for c in self.clean], dtype=np.int64)

    @property
    def noisy_indices(self) -> np.ndarray:
        return np.array([u[0] for u in self.noisy], dtype=np.int64)


# ---------------------------------------------------------------------------
# Training


def train_bootstrap(
    view: TrainingView,
    model: Classifier,
    config: BootstrapConfig,
    streams: SeedStreams,
    metrics: MetricsLogger | None = None,
) -> Classifier:
    """Cross-entropy on (augmented image, null label) -> noisy label, with MixUp."""
    if model.config.variant == "modified" and model.config.num_classes != view.num_classes:
        raise ValueError("model num_classes does not match dataset")
    metrics = metrics or MetricsLogger(None)
    images = view.images
    targets_all = one_hot(view.noisy_labels, view.num_classes)
    null_vecs_all = model.null_vector().unsqueeze(0).expand(len(view), -1)
    policy = AugmentPolicy.for_image_size(
        config.train_augment if config.train_augment != "none" else "weak", images.shape[1]
    )
    opt = make_sgd(model.parameters(), config.lr, config.momentum, config.weight_decay)
    torch.manual_seed(streams.derive("bootstrap", "torch"))
    model.train()
    step = 0
    for epoch in range(config.epochs):
        set_lr(opt, multistep_lr(config.lr, config.lr_milestones, config.lr_gamma, epoch))
        ep = streams.child("bootstrap", "epoch", epoch)
        order_rng = ep.numpy("order")
        aug_rng = ep.generator("aug")
        mix_rng = ep.generator("mixup")
        for batch_idx in epoch_batches(len(view), config.batch_size, order_rng):
            if len(batch_idx) < 2:
                continue
            idx = torch.as_tensor(batch_idx.copy())
            batch = augment_batch(images[idx], config.train_augment, aug_rng, policy)
            mixed_images, mixed_targets, mixed_nulls, _ = mixup_batch(
                batch, targets_all[idx], null_vecs_all[idx], config.mixup_alpha, mix_rng
            )
            logits = model.logits(mixed_images, mixed_nulls)
            loss = soft_cross_entropy(logits, mixed_targets).mean()
            check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % config.log_every == 0:
                metrics.log(stage="bootstrap", step=step, epoch=epoch, loss=float(loss.detach()))
    model.eval()
    return model


def score_confidences(
    model: Classifier,
    view: TrainingView,
    n_eval_augs: int,
    streams: SeedStreams,
    eval_augment: str = "weak",
    batch_size: int = 512,
    dropout: bool = True,
) -> list[ConfidenceRecord]:
    """Averaged null-label prediction for every sample, ordered by index.

    Dropout noise is enabled (batch-norm statistics stay frozen) unless
    turned off; ties in the argmax break toward the lowest class index.
    """
    rng = streams.generator("score")
    dists = []
    for start in range(0, len(view), batch_size):
        batch = view.images[start : start + batch_size]
        dists.append(
            predict_averaged(
                model, batch, None, n_augs=n_eval_augs, rng=rng,
                dropout=dropout, augment=eval_augment,
            )
        )
    probs = torch.cat(dists).numpy().astype(np.float64)
    records = []
    for i in range(probs.shape[0]):
        dist = probs[i]
        cls = int(dist.argmax())  # argmax returns the lowest index on ties
        records.append(ConfidenceRecord(i, dist, float(dist[cls]), cls))
    return records


# ---------------------------------------------------------------------------
# Transition estimation and selection


def _ordered(records: Sequence[ConfidenceRecord]) -> list[ConfidenceRecord]:
    # Confidence descending; dataset index (ascending) breaks ties.
    return sorted(records, key=lambda r: (-r.confidence, r.index))


def estimate_transition_matrix(
    records: Sequence[ConfidenceRecord],
    noisy_labels: Sequence[int] | np.ndarray,
    top_confident_fraction: float = 0.9,
) -> TransitionMatrix:
    """Count (noisy label, predicted class) pairs over the most confident records.

    Per predicted class, the top ``ceil(fraction * n)`` records by
    confidence are kept; counts are normalised by the total kept.
    """
    if not 0.0 < top_confident_fraction <= 1.0:
        raise ValueError("top_confident_fraction must lie in (0,1]")
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    num_classes = records[0].predicted_dist.shape[0]
    counts = np.zeros((num_classes, num_classes), dtype=np.float64)
    kept_total = 0
    by_class: dict[int, list[ConfidenceRecord]] = {}
    for r in records:
        by_class.setdefault(r.predicted_class, []).append(r)
    for cls, rs in by_class.items():
        keep = math.ceil(top_confident_fraction * len(rs))
        for r in _ordered(rs)[:keep]:
            counts[noisy_labels[r.index], cls] += 1.0
            kept_total += 1
    return TransitionMatrix(counts / kept_total)


def _transition_quota(
    t_entry: float, selection_fraction: float, dataset_size: int, num_classes: int, convention: str
) -> int:
    if t_entry <= 0.0:
        return 0
    if convention == "fraction":
        return math.ceil(selection_fraction * dataset_size * t_entry)
    if convention == "literal":
        return math.ceil(selection_fraction * num_classes * t_entry * dataset_size)
    raise ValueError(f"unknown quota convention {convention!r}")


def _build_split(
    records: Sequence[ConfidenceRecord],
    noisy_labels: np.ndarray,
    selected: set[int],
) -> SplitResult:
    clean, noisy = [], []
    for r in sorted(records, key=lambda r: r.index):
        if r.index in selected:
            clean.append((r.index, int(noisy_labels[r.index]), r.predicted_class))
        else:
            noisy.append((r.index, int(noisy_labels[r.index])))
    return SplitResult(tuple(clean), tuple(noisy))


def noise_balanced_select(
    records: Sequence[ConfidenceRecord],
    noisy_labels: Sequence[int] | np.ndarray,
    transition: TransitionMatrix,
    selection_fraction: float,
    confidence_guarantee: float,
    dataset_size: int,
    quota_convention: str = "fraction",
) -> SplitResult:
    """Per-transition quotas proportional to T, plus the tau guarantee.

    For each (noisy i, predicted j) cell the quota is
    ``ceil(K * |D| * T_ij)`` most confident records (all of them when the
    cell is smaller); every record with confidence strictly above tau is
    selected regardless.
    """
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    cells: dict[tuple[int, int], list[ConfidenceRecord]] = {}
    for r in records:
        cells.setdefault((int(noisy_labels[r.index]), r.predicted_class), []).append(r)
    selected: set[int] = set()
    for (i, j), rs in cells.items():
        quota = _transition_quota(
            float(transition.entries[i, j]),
            selection_fraction,
            dataset_size,
            transition.num_classes,
            quota_convention,
        )
        for r in _ordered(rs)[:quota]:
            selected.add(r.index)
    for r in records:
        if r.confidence > confidence_guarantee:
            selected.add(r.index)
    return _build_split(records, noisy_labels, selected)


def class_balanced_select(
    records: Sequence[ConfidenceRecord],
    noisy_labels: Sequence[int] | np.ndarray,
    selection_fraction: float,
    confidence_guarantee: float,
    dataset_size: int,
) -> SplitResult:
    """Equal per-predicted-class quotas (the conventional balancing)."""
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    num_classes = records[0].predicted_dist.shape[0]
    quota = math.ceil(selection_fraction * dataset_size / num_classes)
    by_class: dict[int, list[ConfidenceRecord]] = {}
    for r in records:
        by_class.setdefault(r.predicted_class, []).append(r)
    selected: set[int] = set()
    for rs in by_class.values():
        for r in _ordered(rs)[:quota]:
            selected.add(r.index)
    for r in records:
        if r.confidence > confidence_guarantee:
            selected.add(r.index)
    return _build_split(records, noisy_labels, selected)


# ---------------------------------------------------------------------------
# Persistence (resumable at stage 2)


def save_split_csv(
    split: SplitResult, records: Sequence[ConfidenceRecord], path: str | Path
) -> None:
    by_index = {r.index: r for r in records}
    clean_idx = set(split.clean_indices.tolist())
    rows = [(i, n, by_index[i].predicted_class, by_index[i].confidence, i in clean_idx)
            for i, n in [(c[0], c[1]) for c in split.clean] + list(split.noisy)]
    rows.sort()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "noisy_label", "predicted_label", "confidence", "in_clean"])
        for index, noisy, pred, conf, in_clean in rows:
            writer.writerow([index, noisy, pred, f"{conf:.10f}", int(in_clean)])


def load_split_csv(path: str | Path) -> tuple[SplitResult, dict[int, float]]:
    """Rebuild the split (and the confidence map) from its CSV artifact."""
    clean, noisy, confidences = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            index = int(row["index"])
            confidences[index] = float(row["confidence"])
            if int(row["in_clean"]):
                clean.append((index, int(row["noisy_label"]), int(row["predicted_label"])))
            else:
                noisy.append((index, int(row["noisy_label"])))
    return SplitResult(tuple(clean), tuple(noisy)), confidences


def save_records_csv(records: Sequence[ConfidenceRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "predicted_class", "confidence"])
        for r in records:
            writer.writerow([r.index, r.predicted_class, f"{r.confidence:.10f}"])
