"""Synthetic template image datasets for benchmarks and tests.

Classes are distinguished by spatial structure (stripe orientation,
checkerboards, rings, ...) while sharing one colour palette, so global
colour statistics carry little class signal; a classifier has to learn
the arrangement.  Every sample adds per-pixel Gaussian noise plus
brightness jitter, which keeps the task non-trivial to memorise.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import NoisyDataset

# Two-colour palette shared by all classes.
_PALETTE = np.array(
    [
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
        [0.8, 0.3, 0.8],
        [0.2, 0.8, 0.8],
    ],
    dtype=np.float32,
)


def _pattern(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Scalar field in [0, 1] of shape (size, size) for one sample."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float32) / size
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if class_index == 0:  # horizontal stripes
        v = np.sin(2 * np.pi * freq * y + phase)
    elif class_index == 1:  # vertical stripes
        v = np.sin(2 * np.pi * freq * x + phase)
    elif class_index == 2:  # checkerboard
        phase2 = rng.uniform(0.0, 2.0 * np.pi)
        v = np.sin(2 * np.pi * freq * x + phase) * np.sin(2 * np.pi * freq * y + phase2)
    elif class_index == 3:  # concentric rings
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        v = np.sin(2 * np.pi * freq * 2.0 * r + phase)
    elif class_index == 4:  # diagonal stripes
        v = np.sin(2 * np.pi * freq * (x + y) / np.sqrt(2) + phase)
    elif class_index == 5:  # anti-diagonal stripes
        v = np.sin(2 * np.pi * freq * (x - y) / np.sqrt(2) + phase)
    else:
        raise ValueError(f"no template defined for class {class_index}")
    return 0.5 * (1.0 + v)


def make_template_dataset(
    num_classes: int = 4,
    size: int = 3000,
    image_size: int = 32,
    seed: int = 0,
    noise_sigma: float = 0.02,
    split_tag: str = "train",
) -> NoisyDataset:
    """Balanced dataset of template images; noisy labels start clean."""
    if not 2 <= num_classes <= 6:
        raise ValueError("template dataset supports 2..6 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(size) % num_classes
    rng.shuffle(labels)
    images = np.empty((size, image_size, image_size, 3), dtype=np.float32)
    for i, label in enumerate(labels):
        c0, c1 = _PALETTE[rng.choice(len(_PALETTE), size=2, replace=False)]
        v = _pattern(int(label), image_size, rng)[..., None]
        img = c0 + v * (c1 - c0)
        img *= rng.uniform(0.8, 1.2)  # brightness jitter
        img += rng.normal(0.0, noise_sigma, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return NoisyDataset(
        torch.from_numpy(images),
        labels.copy(),
        num_classes,
        true_labels=labels,
        split_tag=split_tag,
    )


def confusable_pair_mapping(num_classes: int) -> dict[int, int]:
    """Pairwise class swap map (0<->1, 2<->3, ...); odd tail maps to itself."""
    mapping = {}
    for a in range(0, num_classes - 1, 2):
        mapping[a] = a + 1
        mapping[a + 1] = a
    if num_classes % 2 == 1:
        mapping[num_classes - 1] = num_classes - 1
    return mapping
