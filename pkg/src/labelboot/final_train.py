"""Stage 3: supervised training on the relabelled dataset.

Each batch is strong-augmented, then MixUp combines images, hard
relabel targets, and noisy-label vectors with one shared lambda and
pairing permutation; *after* mixing, the mixed noisy-label vector is
replaced by the null label for half the samples.  By default the model
restarts from a fresh initialisation (the schedules differ from the SSL
stage); ``warm_start=True`` continues from the given parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .augment import AugmentPolicy, augment_batch, mixup_batch
from .fixmatch import RelabeledDataset, drop_label_vectors
from .metrics import MetricsLogger
from .models import Classifier, one_hot, soft_cross_entropy
from .seeding import SeedStreams
from .train_utils import check_finite, cosine_lr, epoch_batches, make_sgd, set_lr


@dataclass
class FinalConfig:
    epochs: int = 300
    batch_size: int = 128
    mixup_alpha: float = 1.0
    drop_prob: float = 0.5
    label_smoothing: float = 0.0  # 0.1 for Webvision-style runs
    use_soft_targets: bool = False
    warm_start: bool = False
    lr: float = 0.02
    lr_floor: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    log_every: int = 50

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 0:
            problems.append("final.epochs must be >= 0")
        if self.mixup_alpha <= 0:
            problems.append("final.mixup_alpha must be > 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            problems.append("final.drop_prob must lie in [0,1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            problems.append("final.label_smoothing must lie in [0,1)")
        if self.batch_size < 2:
            problems.append("final.batch_size must be >= 2")
        return problems


def smooth_labels(targets: torch.Tensor, epsilon: float) -> torch.Tensor:
    """(1 - eps) * target + eps / num_classes, elementwise."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0,1), got {epsilon}")
    if epsilon == 0.0:
        return targets
    return (1.0 - epsilon) * targets + epsilon / targets.shape[-1]


def train_final(
    relabeled: RelabeledDataset,
    model: Classifier,
    config: FinalConfig,
    streams: SeedStreams,
    metrics: MetricsLogger | None = None,
) -> Classifier:
    """Strong augmentation + MixUp + post-MixUp label dropping on relabels."""
    metrics = metrics or MetricsLogger(None)
    view = relabeled.view
    images = view.images
    if config.use_soft_targets:
        targets_all = torch.as_tensor(relabeled.soft, dtype=torch.float32)
    else:
        targets_all = one_hot(relabeled.hard, view.num_classes)
    noisy_vecs_all = one_hot(view.noisy_labels, view.num_classes)
    null_vec = model.null_vector()
    policy = AugmentPolicy.for_image_size("strong", images.shape[1])
    opt = make_sgd(model.parameters(), config.lr, config.momentum, config.weight_decay)
    torch.manual_seed(streams.derive("final", "torch"))
    model.train()
    step = 0
    for epoch in range(config.epochs):
        set_lr(opt, cosine_lr(config.lr, config.lr_floor, epoch, config.epochs))
        ep = streams.child("final", "epoch", epoch)
        order_rng = ep.numpy("order")
        aug_rng = ep.generator("aug")
        for b, batch_idx in enumerate(epoch_batches(len(view), config.batch_size, order_rng)):
            if len(batch_idx) < 2:
                continue
            idx = torch.as_tensor(batch_idx.copy())
            batch = augment_batch(images[idx], "strong", aug_rng, policy)
            # MixUp pairs first; the label-drop stream is requested only
            # afterwards, so drop randomness follows pairing randomness.
            g_mix = ep.generator("batch", b, "mixup")
            mixed_images, mixed_targets, mixed_noisy, _ = mixup_batch(
                batch, targets_all[idx], noisy_vecs_all[idx], config.mixup_alpha, g_mix
            )
            g_drop = ep.generator("batch", b, "drop")
            label_inputs = drop_label_vectors(mixed_noisy, null_vec, config.drop_prob, g_drop)
            logits = model.logits(mixed_images, label_inputs)
            loss = soft_cross_entropy(
                logits, smooth_labels(mixed_targets, config.label_smoothing)
            ).mean()
            check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step % config.log_every == 0:
                metrics.log(stage="final", step=step, epoch=epoch, loss=float(loss.detach()))
    model.eval()
    return model
