"""Contrastive self-supervised pretraining of the backbone.

Trains on two independently strong-augmented views per image with the
normalised-temperature cross-entropy over cosine similarities.  The
projection head is discarded afterwards; only backbone parameters
survive.  No label of any kind is read — the entry point accepts an
images-only view.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentPolicy, strong_augment_batch
from .data import UnlabeledView
from .metrics import MetricsLogger
from .models import Classifier
from .seeding import SeedStreams
from .train_utils import check_finite, epoch_batches, make_sgd, multistep_lr, set_lr


@dataclass
class ContrastiveConfig:
    enabled: bool = True
    temperature: float = 0.5
    proj_dim: int = 128
    batch_size: int = 256
    epochs: int = 20
    lr: float = 0.5
    lr_milestones: tuple[int, ...] = ()  # full-scale runs decay x0.1 at 700/800/900 of 1000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    color_jitter: float = 0.4
    pretrained_path: str | None = None
    log_every: int = 20

    def validate(self) -> list[str]:
        problems = []
        if self.temperature <= 0:
            problems.append("pretrain.temperature must be > 0")
        if self.epochs < 0:
            problems.append("pretrain.epochs must be >= 0")
        if self.batch_size < 2:
            problems.append("pretrain.batch_size must be >= 2")
        return problems


def nt_xent_loss(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent over 2N embeddings arranged as positive pairs (i, i+N).

    Embeddings are L2-normalised internally, so the loss depends only on
    directions (invariant to global rotation and positive scaling).
    """
    two_n = embeddings.shape[0]
    if two_n % 2 != 0 or two_n < 4:
        raise ValueError("need 2N embeddings with N >= 2 (no negatives otherwise)")
    n = two_n // 2
    z = F.normalize(embeddings, dim=1)
    sim = z @ z.T / temperature
    sim.fill_diagonal_(float("-inf"))  # self-pairs excluded
    positives = torch.cat([torch.arange(n, two_n), torch.arange(0, n)])
    return F.cross_entropy(sim, positives)


class _ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


def _jitter_batch(images: torch.Tensor, strength: float, rng: torch.Generator) -> torch.Tensor:
    """Cheap tensor-side brightness/contrast/saturation jitter per image."""
    if strength <= 0:
        return images
    n = images.shape[0]
    lo, hi = 1.0 - strength, 1.0 + strength
    b = torch.empty(n, 1, 1, 1).uniform_(lo, hi, generator=rng)
    c = torch.empty(n, 1, 1, 1).uniform_(lo, hi, generator=rng)
    s = torch.empty(n, 1, 1, 1).uniform_(lo, hi, generator=rng)
    out = images * b
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * c + mean
    gray = out.mean(dim=3, keepdim=True)
    out = gray + (out - gray) * s
    return out.clamp_(0.0, 1.0)


def pretrain(
    view: UnlabeledView,
    config: ContrastiveConfig,
    model: Classifier,
    streams: SeedStreams,
    metrics: MetricsLogger | None = None,
) -> nn.Module:
    """Train (or load) the backbone; returns it with the head discarded.

    ``enabled=False`` leaves the fresh initialisation untouched and logs
    zero steps; ``pretrained_path`` loads backbone parameters verbatim
    instead of training.
    """
    metrics = metrics or MetricsLogger(None)
    backbone = model.backbone
    if config.pretrained_path:
        payload = torch.load(config.pretrained_path, map_location="cpu", weights_only=False)
        state = payload.get("backbone_state", payload)
        backbone.load_state_dict(state)
        metrics.log(stage="pretrain", event="loaded", path=str(config.pretrained_path))
        return backbone
    if not config.enabled or config.epochs == 0:
        metrics.log(stage="pretrain", event="skipped", steps=0)
        return backbone
    images = view.images
    policy = AugmentPolicy.for_image_size("strong", images.shape[1])
    proj = _ProjectionHead(backbone.feature_dim, config.proj_dim)
    opt = make_sgd(
        list(backbone.parameters()) + list(proj.parameters()),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    torch.manual_seed(streams.derive("pretrain", "torch"))
    backbone.train()
    proj.train()
    step = 0
    for epoch in range(config.epochs):
        set_lr(opt, multistep_lr(config.lr, config.lr_milestones, 0.1, epoch))
        ep = streams.child("pretrain", "epoch", epoch)
        order_rng = ep.numpy("order")
        aug_rng = ep.generator("aug")
        jit_rng = ep.generator("jitter")
        epoch_loss, epoch_batches_n = 0.0, 0
        for batch_idx in epoch_batches(images.shape[0], config.batch_size, order_rng):
            if len(batch_idx) < 2:
                continue
            raw = images[torch.as_tensor(batch_idx.copy())]
            view_a = _jitter_batch(strong_augment_batch(raw, aug_rng, policy), config.color_jitter, jit_rng)
            view_b = _jitter_batch(strong_augment_batch(raw, aug_rng, policy), config.color_jitter, jit_rng)
            feats = backbone(torch.cat([view_a, view_b]).permute(0, 3, 1, 2))
            loss = nt_xent_loss(proj(feats), config.temperature)
            check_finite(loss, step, "contrastive loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            epoch_batches_n += 1
            step += 1
            if step % config.log_every == 0:
                metrics.log(stage="pretrain", step=step, loss=float(loss.detach()))
        metrics.log(
            stage="pretrain", epoch=epoch, mean_loss=epoch_loss / max(epoch_batches_n, 1)
        )
    backbone.eval()
    return backbone


def save_backbone(backbone: nn.Module, path) -> None:
    torch.save({"format_version": 1, "backbone_state": backbone.state_dict()}, path)
