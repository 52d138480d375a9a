"""Stage 2: label-dropping FixMatch over the clean/noisy split, then relabelling.

Supervised branch: weak-augmented clean images with their noisy label
randomly dropped half the time, trained toward the bootstrap-predicted
labels.  Unsupervised branch: pseudo-labels from the EMA model on
weak-augmented images with the noisy label *always* attached (never
dropped — no gradient flows there), thresholded on confidence, then
consistency cross-entropy on strong-augmented images whose noisy label
is again dropped half the time.  The live model warm-starts from the
bootstrap stage; the EMA copy is what relabels the dataset afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPolicy, strong_augment_batch, weak_augment_batch
from .bootstrap import SplitResult
from .data import TrainingView
from .errors import ConfigError
from .metrics import MetricsLogger
from .models import (
    Classifier,
    LabelInput,
    ema_update,
    make_ema_model,
    one_hot,
    predict_averaged,
    soft_cross_entropy,
)
from .seeding import SeedStreams
from .train_utils import InfiniteSampler, check_finite, cosine_lr, make_sgd, set_lr


@dataclass
class SSLConfig:
    iterations: int = 100_000
    clean_batch: int = 64
    unlabeled_ratio: int = 3  # noisy batch = ratio * clean_batch
    threshold: float = 0.95  # kappa: pseudo-label acceptance
    temperature: float = 0.5  # sharpening before thresholding
    unlabeled_loss_weight: float = 1.0
    ema_momentum: float = 0.999
    drop_prob: float = 0.5
    n_pseudo_augs: int = 1  # weak augmentations per pseudo-label step
    n_relabel_augs: int = 25
    lr: float = 0.02
    lr_floor: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    log_every: int = 100

    def validate(self) -> list[str]:
        problems = []
        if self.iterations < 0:
            problems.append("ssl.iterations must be >= 0")
        if not 0.0 < self.threshold <= 1.0:
            problems.append("ssl.threshold must lie in (0,1]")
        if not 0.0 <= self.drop_prob <= 1.0:
            problems.append("ssl.drop_prob must lie in [0,1]")
        if self.temperature <= 0:
            problems.append("ssl.temperature must be > 0")
        if self.clean_batch < 2:
            problems.append("ssl.clean_batch must be >= 2")
        if self.unlabeled_ratio < 0:
            problems.append("ssl.unlabeled_ratio must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            problems.append("ssl.ema_momentum must lie in [0,1]")
        return problems


@dataclass(frozen=True)
class PseudoLabelRecord:
    index: int
    soft: np.ndarray  # sharpened averaged prediction
    accepted: bool  # max(soft) > threshold
    hard: np.ndarray  # one-hot argmax of soft


# ---------------------------------------------------------------------------
# Label dropping and sharpening


def label_drop(label: LabelInput, drop_prob: float, rng: torch.Generator) -> LabelInput:
    """Return the null label with probability ``drop_prob``, else the input."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop_prob must lie in [0,1], got {drop_prob}")
    if bool(torch.rand((), generator=rng) < drop_prob):
        return LabelInput(torch.zeros_like(label.vector), is_null=True)
    return label


def drop_label_vectors(
    vectors: torch.Tensor, null_vec: torch.Tensor, drop_prob: float, rng: torch.Generator
) -> torch.Tensor:
    """Per-row label dropping over a (N, num_classes) batch."""
    mask = torch.rand(vectors.shape[0], generator=rng) < drop_prob
    return torch.where(mask.unsqueeze(1), null_vec.unsqueeze(0), vectors)


def sharpen(dist: torch.Tensor, temperature: float) -> torch.Tensor:
    """Raise to 1/T and renormalise; T < 1 peaks the distribution, argmax kept."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if temperature == 1.0:
        return dist
    powered = dist.clamp_min(0) ** (1.0 / temperature)
    return powered / powered.sum(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# Pseudo-labels


@torch.no_grad()
def _pseudo_batch(
    ema_model: Classifier,
    images: torch.Tensor,
    noisy_vectors: torch.Tensor,
    config: SSLConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(sharpened soft labels, accepted mask, hard one-hot) for a batch."""
    raw = predict_averaged(
        ema_model,
        images,
        noisy_vectors,
        n_augs=config.n_pseudo_augs,
        rng=rng,
        dropout=False,
        augment="weak",
    )
    soft = sharpen(raw, config.temperature)
    conf, hard_idx = soft.max(dim=1)
    accepted = conf > config.threshold
    hard = one_hot(hard_idx.numpy(), soft.shape[1])
    return soft, accepted, hard


def make_pseudo_label(
    ema_model: Classifier,
    image: torch.Tensor,
    noisy_label: int | torch.Tensor,
    config: SSLConfig,
    rng: torch.Generator,
    index: int = 0,
) -> PseudoLabelRecord:
    """Pseudo-label one sample; the noisy label is always attached here."""
    if isinstance(noisy_label, int):
        vec = one_hot([noisy_label], ema_model.config.num_classes)
    else:
        vec = torch.as_tensor(noisy_label, dtype=torch.float32).reshape(1, -1)
    soft, accepted, hard = _pseudo_batch(ema_model, image.unsqueeze(0), vec, config, rng)
    return PseudoLabelRecord(
        index=index,
        soft=soft[0].numpy().astype(np.float64),
        accepted=bool(accepted[0]),
        hard=hard[0].numpy().astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Training


def ssl_step(
    model: Classifier,
    ema_model: Classifier,
    clean_batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    noisy_batch: tuple[torch.Tensor, torch.Tensor] | None,
    config: SSLConfig,
    streams: SeedStreams,
    opt: torch.optim.Optimizer,
    policy: AugmentPolicy | None = None,
) -> dict:
    """One optimisation step; returns the loss breakdown.

    ``clean_batch`` is (images, noisy label vectors, target distributions);
    ``noisy_batch`` is (images, noisy label vectors) or ``None`` for a
    supervised-only step.  Every RNG site draws from its own named
    stream, so a step with zero accepted pseudo-labels updates the
    parameters bit-identically to the supervised-only step.
    """
    clean_images, clean_noisy_vecs, clean_targets = clean_batch
    if policy is None:
        policy = AugmentPolicy.for_image_size("strong", clean_images.shape[1])
    null_vec = model.null_vector()

    # Supervised branch: weak augmentation, label dropping.
    g_aug = streams.generator("clean", "aug")
    sup_images = weak_augment_batch(clean_images, g_aug, pad=policy.crop_padding)
    g_drop = streams.generator("clean", "drop")
    sup_labels = drop_label_vectors(clean_noisy_vecs, null_vec, config.drop_prob, g_drop)

    unsup_inputs = None
    accepted = hard = None
    if noisy_batch is not None and noisy_batch[0].shape[0] > 0:
        noisy_images, noisy_vecs = noisy_batch
        # Pseudo-label branch: EMA model, noisy labels kept, never dropped,
        # no gradients.
        g_pseudo = streams.generator("pseudo", "aug")
        _, accepted, hard = _pseudo_batch(ema_model, noisy_images, noisy_vecs, config, g_pseudo)
        # Consistency branch: strong augmentation, label dropping.
        g_strong = streams.generator("unsup", "aug")
        strong_images = strong_augment_batch(noisy_images, g_strong, policy)
        g_udrop = streams.generator("unsup", "drop")
        unsup_labels = drop_label_vectors(noisy_vecs, null_vec, config.drop_prob, g_udrop)
        unsup_inputs = (strong_images, unsup_labels)

    model.train()
    step = getattr(opt, "_labelboot_step", 0)
    sup_loss = soft_cross_entropy(model.logits(sup_images, sup_labels), clean_targets).mean()
    check_finite(sup_loss, step, "supervised loss")
    if unsup_inputs is not None:
        strong_images, unsup_labels = unsup_inputs
        per_sample = soft_cross_entropy(model.logits(strong_images, unsup_labels), hard)
        # Masked sum over accepted records, normalised by the full batch size.
        unsup_loss = (per_sample * accepted.float()).sum() / strong_images.shape[0]
        check_finite(unsup_loss, step, "unsupervised loss")
        accept_rate = float(accepted.float().mean())
    else:
        unsup_loss = torch.zeros(())
        accept_rate = 0.0
    total = sup_loss + config.unlabeled_loss_weight * unsup_loss
    opt.zero_grad()
    total.backward()
    opt.step()
    opt._labelboot_step = step + 1
    ema_update(ema_model, model, config.ema_momentum)
    return {
        "sup_loss": float(sup_loss.detach()),
        "unsup_loss": float(unsup_loss.detach()),
        "total_loss": float(total.detach()),
        "accept_rate": accept_rate,
    }


def run_ssl(
    split: SplitResult,
    view: TrainingView,
    model: Classifier,
    config: SSLConfig,
    streams: SeedStreams,
    metrics: MetricsLogger | None = None,
) -> Classifier:
    """Iterate ssl_step with cycling samplers over the split; returns the EMA model.

    The live model is the bootstrap output and is trained in place (no
    reinitialisation); with ``iterations=0`` the EMA copy equals it.
    """
    if len(split.clean) == 0:
        raise ConfigError("SSL requires a non-empty clean set")
    metrics = metrics or MetricsLogger(None)
    ema_model = make_ema_model(model)
    if config.iterations == 0:
        return ema_model
    images = view.images
    noisy_vecs_all = one_hot(view.noisy_labels, view.num_classes)
    clean_indices = split.clean_indices
    clean_targets_all = one_hot(split.clean_labels, view.num_classes)
    policy = AugmentPolicy.for_image_size("strong", images.shape[1])
    clean_sampler = InfiniteSampler(
        np.arange(len(clean_indices)), config.clean_batch, streams.numpy("ssl", "sampler", "clean")
    )
    noisy_indices = split.noisy_indices
    unlabeled_batch = config.unlabeled_ratio * config.clean_batch
    noisy_sampler = (
        InfiniteSampler(noisy_indices, unlabeled_batch, streams.numpy("ssl", "sampler", "noisy"))
        if len(noisy_indices) > 0 and unlabeled_batch > 0
        else None
    )
    opt = make_sgd(model.parameters(), config.lr, config.momentum, config.weight_decay)
    torch.manual_seed(streams.derive("ssl", "torch"))
    for t in range(config.iterations):
        set_lr(opt, cosine_lr(config.lr, config.lr_floor, t, config.iterations))
        pos = clean_sampler.next_batch()
        idx = torch.as_tensor(clean_indices[pos])
        clean_batch = (images[idx], noisy_vecs_all[idx], clean_targets_all[torch.as_tensor(pos)])
        if noisy_sampler is not None:
            nidx = torch.as_tensor(noisy_sampler.next_batch())
            noisy_batch = (images[nidx], noisy_vecs_all[nidx])
        else:
            noisy_batch = None
        stats = ssl_step(
            model, ema_model, clean_batch, noisy_batch, config,
            streams.child("ssl", "step", t), opt, policy,
        )
        if (t + 1) % config.log_every == 0 or t + 1 == config.iterations:
            metrics.log(stage="ssl", step=t + 1, lr=cosine_lr(config.lr, config.lr_floor, t, config.iterations), **stats)
    model.eval()
    ema_model.eval()
    return ema_model


# ---------------------------------------------------------------------------
# Whole-dataset relabelling


@dataclass
class RelabeledDataset:
    """Training set augmented with the model's soft relabelling.

    ``soft[i]`` is the averaged prediction with the noisy label attached;
    ``hard[i]`` its argmax.  Images/noisy labels alias the source view.
    """

    view: TrainingView
    soft: np.ndarray  # (N, num_classes) float64
    hard: np.ndarray  # (N,) int64
    confidence: np.ndarray  # (N,) float64

    def __len__(self) -> int:
        return len(self.view)

    @property
    def num_classes(self) -> int:
        return self.view.num_classes


def relabel_dataset(
    ema_model: Classifier,
    view: TrainingView,
    config: SSLConfig,
    streams: SeedStreams,
    batch_size: int = 512,
) -> RelabeledDataset:
    """Averaged dropout-enabled prediction (noisy label attached) for all samples."""
    rng = streams.generator("relabel")
    noisy_vecs = one_hot(view.noisy_labels, view.num_classes)
    outs = []
    for start in range(0, len(view), batch_size):
        outs.append(
            predict_averaged(
                ema_model,
                view.images[start : start + batch_size],
                noisy_vecs[start : start + batch_size],
                n_augs=config.n_relabel_augs,
                rng=rng,
                dropout=True,
                augment="weak",
            )
        )
    soft = torch.cat(outs).numpy().astype(np.float64)
    hard = soft.argmax(axis=1).astype(np.int64)
    confidence = soft.max(axis=1)
    return RelabeledDataset(view, soft, hard, confidence)


def save_relabel(relabeled: RelabeledDataset, csv_path: str | Path, soft_path: str | Path) -> None:
    """CSV of hard relabels plus a binary sidecar of the soft distributions."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "noisy_label", "relabel_argmax", "relabel_confidence"])
        for i in range(len(relabeled)):
            writer.writerow(
                [i, int(relabeled.view.noisy_labels[i]), int(relabeled.hard[i]),
                 f"{relabeled.confidence[i]:.10f}"]
            )
    np.save(soft_path, relabeled.soft)


def load_relabel(view: TrainingView, soft_path: str | Path) -> RelabeledDataset:
    soft = np.load(soft_path)
    if soft.shape != (len(view), view.num_classes):
        raise ValueError("soft relabel sidecar does not match the dataset")
    return RelabeledDataset(view, soft, soft.argmax(axis=1).astype(np.int64), soft.max(axis=1))
