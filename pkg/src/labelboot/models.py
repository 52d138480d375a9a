"""Label-conditioned classifier and its plain variant.

The "modified" variant consumes an image and a label vector: image
features and the label vector are each linearly projected to
``proj_dim``, concatenated, passed through one hidden layer, batch
normalisation, and a softmax head.  Dropout follows every projection
except the classifier head.  The "normal" variant is the same stack
without the label branch and ignores its label input entirely.

Dropout during inference is controlled by an override flag that is
independent of train/eval mode: averaged prediction runs with dropout
noise active while batch-norm statistics stay frozen.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import weak_augment_batch

CHECKPOINT_VERSION = 1

NULL_KINDS = ("zeros", "ones", "uniform")


@dataclass(frozen=True)
class LabelInput:
    """A label vector fed to the model's second input; may be the null label."""

    vector: torch.Tensor  # (num_classes,) float32, entries in [0, 1]
    is_null: bool = False


def null_vector(num_classes: int, kind: str = "zeros") -> torch.Tensor:
    if kind == "zeros":
        return torch.zeros(num_classes)
    if kind == "ones":
        return torch.ones(num_classes)
    if kind == "uniform":
        return torch.full((num_classes,), 1.0 / num_classes)
    raise ValueError(f"null_kind must be one of {NULL_KINDS}, got {kind!r}")


def one_hot(labels: Iterable[int] | np.ndarray | torch.Tensor, num_classes: int) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    return F.one_hot(idx, num_classes).to(torch.float32)


@dataclass
class ModelConfig:
    variant: str = "modified"  # normal|modified
    backbone: str = "small32"
    num_classes: int = 10
    proj_dim: int = 128
    hidden_dim: int = 128
    dropout_p: float = 0.2
    null_kind: str = "zeros"

    def validate(self) -> list[str]:
        problems = []
        if self.variant not in ("normal", "modified"):
            problems.append("model.variant must be 'normal' or 'modified'")
        if self.backbone not in BACKBONES:
            problems.append(f"model.backbone must be one of {sorted(BACKBONES)}")
        if self.num_classes < 2:
            problems.append("model.num_classes must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append("model.dropout_p must lie in [0,1)")
        if self.null_kind not in NULL_KINDS:
            problems.append(f"model.null_kind must be one of {NULL_KINDS}")
        return problems


def null_label(config: ModelConfig) -> LabelInput:
    """The configured stand-in for 'no noisy label available'."""
    return LabelInput(null_vector(config.num_classes, config.null_kind), is_null=True)


# ---------------------------------------------------------------------------
# Backbones


class ConvStack(nn.Module):
    """Conv-BN-ReLU-pool blocks, global average pooling, linear feature head."""

    def __init__(self, channels: tuple[int, ...], feature_dim: int = 512):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for c in channels:
            layers += [
                nn.Conv2d(c_in, c, 3, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = c
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c_in, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (N, C, H, W) -> (N, D)
        h = self.pool(self.blocks(x)).flatten(1)
        return self.fc(h)


BACKBONES: dict[str, Callable[[], ConvStack]] = {
    # Desk-scale default (~310k parameters).
    "small32": lambda: ConvStack((32, 64, 128, 128), feature_dim=512),
    # Thin variant for tight CPU budgets (~90k parameters).
    "tiny32": lambda: ConvStack((16, 32, 64), feature_dim=512),
    # For 64x64 inputs (one extra pooling stage).
    "small64": lambda: ConvStack((32, 64, 128, 128, 128), feature_dim=512),
}


def register_backbone(name: str, builder: Callable[[], nn.Module]) -> None:
    """Plug in an external feature extractor (must expose ``feature_dim``)."""
    BACKBONES[name] = builder


def build_backbone(name: str) -> nn.Module:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name]()


# ---------------------------------------------------------------------------
# Classifier


class SwitchableDropout(nn.Module):
    """Dropout whose activity can be forced on/off independently of mode.

    ``override=None`` follows ``self.training`` (plain dropout);
    ``override=True/False`` forces the noise on or off regardless.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.override: bool | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        active = self.training if self.override is None else self.override
        return F.dropout(x, self.p, training=active)

    def extra_repr(self) -> str:
        return f"p={self.p}, override={self.override}"


class LabelConditionedHead(nn.Module):
    """Projection/concatenation head mapping (features, label vector) to logits."""

    def __init__(
        self,
        feature_dim: int,
        num_classes: int,
        proj_dim: int = 128,
        hidden_dim: int = 128,
        dropout_p: float = 0.2,
        use_label: bool = True,
    ):
        super().__init__()
        self.use_label = use_label
        self.image_proj = nn.Linear(feature_dim, proj_dim)
        self.image_drop = SwitchableDropout(dropout_p)
        if use_label:
            self.label_proj = nn.Linear(num_classes, proj_dim)
            self.label_drop = SwitchableDropout(dropout_p)
            hidden_in = 2 * proj_dim
        else:
            hidden_in = proj_dim
        self.hidden = nn.Linear(hidden_in, hidden_dim)
        self.hidden_drop = SwitchableDropout(dropout_p)
        self.bn = nn.BatchNorm1d(hidden_dim)
        self.head = nn.Linear(hidden_dim, num_classes)

    def forward(self, features: torch.Tensor, label_vectors: torch.Tensor | None) -> torch.Tensor:
        h = self.image_drop(F.relu(self.image_proj(features)))
        if self.use_label:
            if label_vectors is None:
                raise ValueError("modified head requires a label vector input")
            l = self.label_drop(F.relu(self.label_proj(label_vectors)))
            h = torch.cat([h, l], dim=1)
        h = self.hidden_drop(F.relu(self.hidden(h)))
        return self.head(self.bn(h))


class Classifier(nn.Module):
    """Backbone + head; forward returns a probability distribution.

    Accepts images as (N, H, W, C) or a single (H, W, C) tensor in
    [0, 1]; label vectors as (N, num_classes), a single vector, a
    :class:`LabelInput`, or ``None`` for the configured null label.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        problems = config.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.config = config
        self.backbone = build_backbone(config.backbone)
        self.head = LabelConditionedHead(
            feature_dim=self.backbone.feature_dim,
            num_classes=config.num_classes,
            proj_dim=config.proj_dim,
            hidden_dim=config.hidden_dim,
            dropout_p=config.dropout_p,
            use_label=(config.variant == "modified"),
        )

    # -- label plumbing -----------------------------------------------------

    def null_vector(self) -> torch.Tensor:
        return null_vector(self.config.num_classes, self.config.null_kind)

    def _coerce_labels(self, label_input, batch: int) -> torch.Tensor:
        if label_input is None:
            vec = self.null_vector()
        elif isinstance(label_input, LabelInput):
            vec = label_input.vector
        else:
            vec = torch.as_tensor(label_input, dtype=torch.float32)
        if vec.ndim == 1:
            vec = vec.unsqueeze(0).expand(batch, -1)
        if vec.shape != (batch, self.config.num_classes):
            raise ValueError(
                f"label vectors must be ({batch}, {self.config.num_classes}), got {tuple(vec.shape)}"
            )
        return vec

    @staticmethod
    def _coerce_images(images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or images.shape[-1] not in (1, 3):
            raise ValueError(f"images must be (N, H, W, C), got {tuple(images.shape)}")
        return images.permute(0, 3, 1, 2)

    # -- forward paths ------------------------------------------------------

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(self._coerce_images(images))

    def logits(self, images: torch.Tensor, label_input=None) -> torch.Tensor:
        x = self._coerce_images(images)
        labels = self._coerce_labels(label_input, x.shape[0]) if self.head.use_label else None
        return self.head(self.backbone(x), labels)

    def forward(self, images: torch.Tensor, label_input=None) -> torch.Tensor:
        return F.softmax(self.logits(images, label_input), dim=1)

    # -- dropout override ---------------------------------------------------

    def set_dropout_override(self, value: bool | None) -> None:
        for m in self.modules():
            if isinstance(m, SwitchableDropout):
                m.override = value

    @property
    def dropout_active(self) -> bool:
        for m in self.modules():
            if isinstance(m, SwitchableDropout):
                return m.training if m.override is None else m.override
        return False


def soft_cross_entropy(logits: torch.Tensor, target_dists: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy against (possibly soft) target distributions."""
    return -(target_dists * F.log_softmax(logits, dim=1)).sum(dim=1)


# ---------------------------------------------------------------------------
# EMA


@torch.no_grad()
def ema_update(ema_model, live_model, momentum: float):
    """ema <- momentum * ema + (1 - momentum) * live, parameter-wise.

    Accepts two ``nn.Module``s (float buffers such as batch-norm running
    statistics are copied from the live model) or two iterables of
    tensors.  Returns the updated EMA object.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0,1], got {momentum}")
    if isinstance(ema_model, nn.Module):
        ema_params = dict(ema_model.named_parameters())
        for name, live in live_model.named_parameters():
            if ema_params[name].shape != live.shape:
                raise RuntimeError(f"parameter shape mismatch at {name}")
            ema_params[name].mul_(momentum).add_(live, alpha=1.0 - momentum)
        ema_buffers = dict(ema_model.named_buffers())
        for name, live in live_model.named_buffers():
            ema_buffers[name].copy_(live)
    else:
        for ema, live in zip(ema_model, live_model, strict=True):
            if ema.shape != live.shape:
                raise RuntimeError("parameter shape mismatch")
            ema.mul_(momentum).add_(live, alpha=1.0 - momentum)
    return ema_model


def make_ema_model(model: Classifier) -> Classifier:
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    return ema


# ---------------------------------------------------------------------------
# Multi-augmentation dropout-enabled prediction


@torch.no_grad()
def predict_averaged(
    model: Classifier,
    images: torch.Tensor,
    label_input=None,
    n_augs: int = 25,
    rng: torch.Generator | None = None,
    dropout: bool = True,
    augment: str = "weak",
    pad: int | None = None,
) -> torch.Tensor:
    """Mean class distribution over ``n_augs`` augmented dropout forwards.

    Runs in eval mode (batch-norm statistics frozen) with dropout noise
    forced on unless ``dropout=False``.  ``augment`` is ``"weak"`` or
    ``"none"``.  Deterministic given the generator state.
    """
    if n_augs < 1:
        raise ValueError("n_augs must be >= 1")
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    if pad is None:
        pad = max(1, round(4 * images.shape[1] / 32))
    was_training = model.training
    model.eval()
    model.set_dropout_override(True if dropout else False)
    try:
        acc = torch.zeros(images.shape[0], model.config.num_classes)
        for _ in range(n_augs):
            if augment == "weak":
                batch = weak_augment_batch(images, rng, pad=pad)
            elif augment == "none":
                batch = images
            else:
                raise ValueError(f"augment must be 'weak' or 'none', got {augment!r}")
            if dropout:
                # Dropout draws come from the global RNG; derive its seed from
                # the caller's generator so the result is a pure function of it.
                noise_seed = int(torch.randint(0, 2**63 - 1, (), generator=rng))
                with torch.random.fork_rng():
                    torch.manual_seed(noise_seed)
                    acc += model(batch, label_input)
            else:
                acc += model(batch, label_input)
    finally:
        model.set_dropout_override(None)
        model.train(was_training)
    probs = acc / n_augs
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    model: Classifier,
    path: str | Path,
    stage: str,
    extra: dict | None = None,
) -> None:
    """Single-archive checkpoint: parameters, config, RNG state, stage tag."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, restore_rng: bool = False) -> tuple[Classifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = Classifier(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng_state"])
    meta = {"stage": payload["stage"], "extra": payload["extra"]}
    return model, meta
