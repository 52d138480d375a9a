"""Dataset containers and on-disk ingestion.

Images live as float32 tensors of shape (N, H, W, C) with values in
[0, 1].  True labels, when present, are evaluation-only: training code
receives a :class:`TrainingView` (images + noisy labels) or an
:class:`UnlabeledView` (images only), neither of which exposes the
ground truth.  The oracle functions that do need truth demand the full
:class:`NoisyDataset` and raise ``OracleUnavailableError`` when it is
missing.

Two interchangeable on-disk layouts are supported:

* a class-directory tree ``<root>/<split>/<class_index>/<id>.png``
* a binary blob with a ``manifest.json`` describing shape, count and
  the label arrays (created by :func:`save_blob_dataset`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataFormatError, OracleUnavailableError

_BLOB_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LabeledExample:
    """One training example; ``true_label`` is the hidden evaluation oracle."""

    image: torch.Tensor  # (H, W, C) float32 in [0, 1]
    noisy_label: int
    true_label: int | None = None


class UnlabeledView:
    """Images-only view handed to code that must not read any labels."""

    def __init__(self, images: torch.Tensor):
        self.images = images

    def __len__(self) -> int:
        return self.images.shape[0]


class TrainingView:
    """Images + noisy labels; the ground truth is deliberately absent."""

    def __init__(self, images: torch.Tensor, noisy_labels: np.ndarray, num_classes: int):
        self.images = images
        self.noisy_labels = noisy_labels
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled_view(self) -> UnlabeledView:
        return UnlabeledView(self.images)


class NoisyDataset:
    """Ordered image dataset with noisy labels and optional hidden truth.

    Indices are positional (0..N-1) and stable for the lifetime of the
    run; relabelling and split artifacts address examples by index.
    """

    def __init__(
        self,
        images: torch.Tensor,
        noisy_labels: Sequence[int] | np.ndarray,
        num_classes: int,
        true_labels: Sequence[int] | np.ndarray | None = None,
        split_tag: str = "train",
    ):
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {tuple(images.shape)}")
        images = images.to(torch.float32)
        if not torch.isfinite(images).all():
            raise ValueError("images contain non-finite values")
        noisy = np.asarray(noisy_labels, dtype=np.int64)
        if noisy.shape != (images.shape[0],):
            raise ValueError("noisy_labels length does not match image count")
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if noisy.min(initial=0) < 0 or noisy.max(initial=0) >= num_classes:
            raise ValueError("noisy label outside class range")
        if true_labels is not None:
            true = np.asarray(true_labels, dtype=np.int64)
            if true.shape != noisy.shape:
                raise ValueError("true_labels length does not match image count")
            if true.min(initial=0) < 0 or true.max(initial=0) >= num_classes:
                raise ValueError("true label outside class range")
        else:
            true = None
        self.images = images
        self.noisy_labels = noisy
        self._true_labels = true
        self.num_classes = num_classes
        self.split_tag = split_tag

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> LabeledExample:
        true = None if self._true_labels is None else int(self._true_labels[index])
        return LabeledExample(self.images[index], int(self.noisy_labels[index]), true)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    @property
    def has_true_labels(self) -> bool:
        return self._true_labels is not None

    def true_labels_oracle(self) -> np.ndarray:
        """Ground-truth labels, for evaluation only."""
        if self._true_labels is None:
            raise OracleUnavailableError(
                f"dataset '{self.split_tag}' carries no true labels"
            )
        return self._true_labels

    def training_view(self) -> TrainingView:
        return TrainingView(self.images, self.noisy_labels, self.num_classes)

    def unlabeled_view(self) -> UnlabeledView:
        return UnlabeledView(self.images)

    def with_noisy_labels(self, noisy_labels: Sequence[int] | np.ndarray) -> "NoisyDataset":
        """Copy of this dataset with the noisy labels replaced."""
        return NoisyDataset(
            self.images, noisy_labels, self.num_classes, self._true_labels, self.split_tag
        )


# ---------------------------------------------------------------------------
# Directory-tree layout


def load_directory_dataset(root: str | Path, split: str, num_classes: int | None = None) -> NoisyDataset:
    """Load ``<root>/<split>/<class_index>/<id>.png``; dir name is the noisy label."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DataFormatError(f"split directory not found: {split_dir}")
    class_dirs = sorted(
        (d for d in split_dir.iterdir() if d.is_dir() and d.name.isdigit()),
        key=lambda d: int(d.name),
    )
    if not class_dirs:
        raise DataFormatError(f"no class directories under {split_dir}")
    images, labels = [], []
    for d in class_dirs:
        label = int(d.name)
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            images.append(torch.from_numpy(arr))
            labels.append(label)
    if not images:
        raise DataFormatError(f"no images found under {split_dir}")
    n_classes = num_classes if num_classes is not None else int(class_dirs[-1].name) + 1
    stacked = torch.stack(images)
    return NoisyDataset(stacked, labels, n_classes, split_tag=split)


def save_directory_dataset(dataset: NoisyDataset, root: str | Path) -> None:
    """Write the class-directory layout; labels written are the noisy labels."""
    split_dir = Path(root) / dataset.split_tag
    for i in range(len(dataset)):
        label = int(dataset.noisy_labels[i])
        d = split_dir / str(label)
        d.mkdir(parents=True, exist_ok=True)
        arr = (dataset.images[i].numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(d / f"{i:06d}.png")


# ---------------------------------------------------------------------------
# Blob + manifest layout


def save_blob_dataset(dataset: NoisyDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = (dataset.images.numpy() * 255.0).round().astype(np.uint8)
    data.tofile(directory / "images.bin")
    manifest = {
        "format_version": _BLOB_FORMAT_VERSION,
        "shape": list(dataset.image_shape),
        "count": len(dataset),
        "dtype": "uint8",
        "num_classes": dataset.num_classes,
        "split_tag": dataset.split_tag,
        "labels": dataset.noisy_labels.tolist(),
    }
    if dataset.has_true_labels:
        manifest["true_labels"] = dataset.true_labels_oracle().tolist()
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)


def load_blob_dataset(directory: str | Path) -> NoisyDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataFormatError(f"manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("shape", "count", "labels", "num_classes"):
        if key not in manifest:
            raise DataFormatError(f"manifest missing key '{key}'")
    shape = tuple(manifest["shape"])
    count = int(manifest["count"])
    dtype = np.dtype(manifest.get("dtype", "uint8"))
    raw = np.fromfile(directory / "images.bin", dtype=dtype)
    expected = count * int(np.prod(shape))
    if raw.size != expected:
        raise DataFormatError(
            f"blob size mismatch: expected {expected} values, found {raw.size}"
        )
    arr = raw.reshape((count,) + shape).astype(np.float32)
    if dtype == np.uint8:
        arr /= 255.0
    return NoisyDataset(
        torch.from_numpy(arr),
        manifest["labels"],
        int(manifest["num_classes"]),
        true_labels=manifest.get("true_labels"),
        split_tag=manifest.get("split_tag", "train"),
    )
