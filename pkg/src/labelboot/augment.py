"""Weak and strong stochastic image augmentation, plus MixUp.

Weak augmentation is horizontal flip + reflection-pad-and-crop, done
with pure tensor ops so it can run batched in the evaluation-averaging
loops.  Strong augmentation samples one sub-policy from a fixed,
versioned table of colour/geometric PIL operations (shipped as a JSON
asset) and then applies the weak transform.  Images are (H, W, C)
float32 in [0, 1] throughout; every operation preserves shape and
clips back into range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageEnhance, ImageOps

DEFAULT_POLICY_ASSET = "strong_policy_cifar_v1.json"
_POLICY_BASE_SIZE = 32  # pixel magnitudes in the table are calibrated for 32x32


def load_policy_table(path: str | Path | None = None) -> list[list[tuple[str, float, int]]]:
    """Load the strong-augmentation sub-policy table (the packaged one by default)."""
    if path is None:
        text = resources.files("labelboot.assets").joinpath(DEFAULT_POLICY_ASSET).read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    payload = json.loads(text)
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported policy table version {payload.get('format_version')}")
    return [
        [(str(name), float(prob), int(level)) for name, prob, level in sub]
        for sub in payload["subpolicies"]
    ]


@dataclass(frozen=True)
class AugmentPolicy:
    """Parameters of one augmentation regime (weak / strong / none)."""

    kind: str = "weak"  # weak|strong|none
    crop_padding: int = 4
    flip_prob: float = 0.5
    subpolicies: list = field(default_factory=list)

    @classmethod
    def for_image_size(cls, kind: str, image_size: int = 32) -> "AugmentPolicy":
        """Defaults per image size; crop padding scales with resolution."""
        padding = max(1, round(4 * image_size / 32))
        subs = load_policy_table() if kind == "strong" else []
        return cls(kind=kind, crop_padding=padding, subpolicies=subs)


# ---------------------------------------------------------------------------
# Weak augmentation


def weak_augment(
    image: torch.Tensor,
    rng: torch.Generator,
    pad: int = 4,
    flip_prob: float = 0.5,
    flip: bool | None = None,
    crop_offset: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Horizontal flip (prob ``flip_prob``) then reflection-pad + random crop.

    ``flip``/``crop_offset`` force the outcome instead of sampling it;
    a no-flip, centre-crop call returns the input exactly.
    """
    if flip is None:
        flip = bool(torch.rand((), generator=rng) < flip_prob)
    if flip:
        image = image.flip(1)
    if pad <= 0:
        return image
    if crop_offset is None:
        offs = torch.randint(0, 2 * pad + 1, (2,), generator=rng)
        top, left = int(offs[0]), int(offs[1])
    else:
        top, left = crop_offset
    h, w = image.shape[0], image.shape[1]
    padded = F.pad(image.permute(2, 0, 1).unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    out = padded[0, :, top : top + h, left : left + w].permute(1, 2, 0)
    return out.contiguous()


def weak_augment_batch(
    images: torch.Tensor,
    rng: torch.Generator,
    pad: int = 4,
    flip_prob: float = 0.5,
) -> torch.Tensor:
    """Batched weak augmentation over (N, H, W, C); independent per image."""
    n, h, w, _ = images.shape
    flips = torch.rand(n, generator=rng) < flip_prob
    out = images.clone()
    if flips.any():
        out[flips] = out[flips].flip(2)
    if pad <= 0:
        return out
    offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=rng)
    padded = F.pad(out.permute(0, 3, 1, 2), (pad, pad, pad, pad), mode="reflect")
    cropped = torch.empty_like(images)
    for i, (top, left) in enumerate(offsets.tolist()):
        cropped[i] = padded[i, :, top : top + h, left : left + w].permute(1, 2, 0)
    return cropped


# ---------------------------------------------------------------------------
# Strong augmentation (PIL colour/geometric op table)

_PARAMETER_MAX = 10


def _float_level(level: int, maxval: float) -> float:
    return float(level) * maxval / _PARAMETER_MAX


def _int_level(level: int, maxval: int) -> int:
    return int(level * maxval / _PARAMETER_MAX)


def _signed(value: float, rng: torch.Generator) -> float:
    return -value if torch.rand((), generator=rng) < 0.5 else value


def _apply_op(img: Image.Image, name: str, level: int, rng: torch.Generator) -> Image.Image:
    size = img.size[0]
    scale = size / _POLICY_BASE_SIZE
    if name == "ShearX":
        m = _signed(_float_level(level, 0.3), rng)
        return img.transform(img.size, Image.AFFINE, (1, m, 0, 0, 1, 0), Image.BILINEAR)
    if name == "ShearY":
        m = _signed(_float_level(level, 0.3), rng)
        return img.transform(img.size, Image.AFFINE, (1, 0, 0, m, 1, 0), Image.BILINEAR)
    if name == "TranslateX":
        m = _signed(_float_level(level, 10) * scale, rng)
        return img.transform(img.size, Image.AFFINE, (1, 0, m, 0, 1, 0), Image.BILINEAR)
    if name == "TranslateY":
        m = _signed(_float_level(level, 10) * scale, rng)
        return img.transform(img.size, Image.AFFINE, (1, 0, 0, 0, 1, m), Image.BILINEAR)
    if name == "Rotate":
        deg = _signed(_float_level(level, 30), rng)
        return img.rotate(deg, resample=Image.BILINEAR)
    if name == "AutoContrast":
        return ImageOps.autocontrast(img)
    if name == "Invert":
        return ImageOps.invert(img)
    if name == "Equalize":
        return ImageOps.equalize(img)
    if name == "Solarize":
        return ImageOps.solarize(img, 256 - _int_level(level, 256))
    if name == "Posterize":
        return ImageOps.posterize(img, 8 - _int_level(level, 4))
    if name == "Contrast":
        return ImageEnhance.Contrast(img).enhance(1.0 + _signed(_float_level(level, 0.9), rng))
    if name == "Color":
        return ImageEnhance.Color(img).enhance(1.0 + _signed(_float_level(level, 0.9), rng))
    if name == "Brightness":
        return ImageEnhance.Brightness(img).enhance(1.0 + _signed(_float_level(level, 0.9), rng))
    if name == "Sharpness":
        return ImageEnhance.Sharpness(img).enhance(1.0 + _signed(_float_level(level, 0.9), rng))
    if name == "Cutout":
        side = round(_int_level(level, 20) * scale)
        if side <= 0:
            return img
        arr = np.asarray(img).copy()
        h, w = arr.shape[0], arr.shape[1]
        cy = int(torch.randint(0, h, (), generator=rng))
        cx = int(torch.randint(0, w, (), generator=rng))
        half = side // 2
        arr[max(0, cy - half) : cy + half + 1, max(0, cx - half) : cx + half + 1] = 127
        return Image.fromarray(arr)
    raise ValueError(f"unknown augmentation op {name!r}")


def apply_policy_ops(
    image: torch.Tensor,
    rng: torch.Generator,
    subpolicies: list[list[tuple[str, float, int]]],
) -> torch.Tensor:
    """Sample one sub-policy and apply its ops, each with its probability."""
    if not subpolicies:
        return image
    idx = int(torch.randint(0, len(subpolicies), (), generator=rng))
    arr = (image.numpy() * 255.0).round().astype(np.uint8)
    img = Image.fromarray(arr)
    changed = False
    for name, prob, level in subpolicies[idx]:
        if torch.rand((), generator=rng) < prob:
            img = _apply_op(img, name, level, rng)
            changed = True
    if not changed:
        return image
    out = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)
    return out.clamp_(0.0, 1.0)


def strong_augment(
    image: torch.Tensor,
    rng: torch.Generator,
    policy: AugmentPolicy | None = None,
) -> torch.Tensor:
    """Policy ops then flip + pad-and-crop; output stays in [0, 1]."""
    if policy is None:
        policy = AugmentPolicy.for_image_size("strong", image.shape[0])
    out = apply_policy_ops(image, rng, policy.subpolicies)
    return weak_augment(out, rng, pad=policy.crop_padding, flip_prob=policy.flip_prob)


def strong_augment_batch(
    images: torch.Tensor,
    rng: torch.Generator,
    policy: AugmentPolicy | None = None,
) -> torch.Tensor:
    if policy is None:
        policy = AugmentPolicy.for_image_size("strong", images.shape[1])
    return torch.stack([strong_augment(img, rng, policy) for img in images])


def augment_batch(images: torch.Tensor, kind: str, rng: torch.Generator, policy: AugmentPolicy | None = None) -> torch.Tensor:
    """Dispatch on augmentation kind ('none' returns the input unchanged)."""
    if kind == "none":
        return images
    if kind == "weak":
        pad = policy.crop_padding if policy else max(1, round(4 * images.shape[1] / 32))
        flip_prob = policy.flip_prob if policy else 0.5
        return weak_augment_batch(images, rng, pad=pad, flip_prob=flip_prob)
    if kind == "strong":
        return strong_augment_batch(images, rng, policy)
    raise ValueError(f"unknown augmentation kind {kind!r}")


# ---------------------------------------------------------------------------
# MixUp


def mixup_batch(
    images: torch.Tensor,
    targets: torch.Tensor,
    noisy_vectors: torch.Tensor,
    alpha: float,
    rng: torch.Generator,
    lam: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, float]:
    """Convexly combine a batch with a permuted copy of itself.

    One lambda ~ Beta(alpha, alpha) and one uniformly sampled pairing
    permutation are shared by the whole batch; images, target
    distributions, and noisy-label vectors are all mixed with the same
    coefficients.  ``lam`` overrides the Beta draw when given.
    """
    if images.shape[0] == 0:
        raise ValueError("mixup_batch requires a non-empty batch")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    sums = targets.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
        raise ValueError("target labels must be probability vectors (rows summing to 1)")
    if lam is None:
        beta_seed = int(torch.randint(0, 2**63 - 1, (), generator=rng))
        lam = float(np.random.default_rng(beta_seed).beta(alpha, alpha))
    perm = torch.randperm(images.shape[0], generator=rng)
    mixed_images = lam * images + (1.0 - lam) * images[perm]
    mixed_targets = lam * targets + (1.0 - lam) * targets[perm]
    mixed_noisy = lam * noisy_vectors + (1.0 - lam) * noisy_vectors[perm]
    return mixed_images, mixed_targets, mixed_noisy, lam
