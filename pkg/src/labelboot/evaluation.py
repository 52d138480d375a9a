"""Test-set evaluation, per-label prediction sweeps, and clean-set purity."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .bootstrap import SplitResult
from .data import NoisyDataset
from .models import Classifier, one_hot, predict_averaged
from .seeding import SeedStreams


@dataclass(frozen=True)
class EvalReport:
    top1: float
    top5: float
    per_class_accuracy: tuple[float, ...]
    mode: str  # plain|tta
    label_mode: str  # null|noisy
    n_augs: int

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "EvalReport":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        payload["per_class_accuracy"] = tuple(payload["per_class_accuracy"])
        return cls(**payload)


def _topk_hits(probs: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on -probs: ties resolve toward the lowest class index,
    # matching the top-1 argmax convention.
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (order == truth[:, None]).any(axis=1)


def evaluate(
    model: Classifier,
    test_set: NoisyDataset,
    label_mode: str = "null",
    tta: bool = False,
    n_augs: int = 25,
    streams: SeedStreams | None = None,
    batch_size: int = 512,
) -> EvalReport:
    """Top-1/top-5 against true labels, with or without test-time averaging.

    ``label_mode="noisy"`` feeds the test set's noisy labels to the
    model's label input; ``"null"`` feeds the null label.  Plain mode is
    a single deterministic forward (dropout off); TTA mode averages
    ``n_augs`` weak augmentations with dropout enabled.
    """
    if label_mode not in ("null", "noisy"):
        raise ValueError(f"label_mode must be 'null' or 'noisy', got {label_mode!r}")
    truth = test_set.true_labels_oracle()
    if label_mode == "noisy":
        if (test_set.noisy_labels == truth).all():
            raise ValueError(
                "label_mode='noisy' requires a test set with injected noisy labels"
            )
        label_vecs = one_hot(test_set.noisy_labels, test_set.num_classes)
    else:
        label_vecs = model.null_vector().unsqueeze(0).expand(len(test_set), -1)
    rng = (streams or SeedStreams(0)).generator("evaluate", label_mode, "tta" if tta else "plain")
    outs = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(test_set), batch_size):
                images = test_set.images[start : start + batch_size]
                labels = label_vecs[start : start + batch_size]
                if tta:
                    probs = predict_averaged(
                        model, images, labels, n_augs=n_augs, rng=rng, dropout=True, augment="weak"
                    )
                else:
                    probs = model(images, labels)
                outs.append(probs)
    finally:
        model.train(was_training)
    probs = torch.cat(outs).numpy()
    k = min(5, test_set.num_classes)
    top1_hits = _topk_hits(probs, truth, 1)
    top5_hits = _topk_hits(probs, truth, k)
    per_class = []
    for c in range(test_set.num_classes):
        mask = truth == c
        per_class.append(float(top1_hits[mask].mean()) if mask.any() else 0.0)
    return EvalReport(
        top1=float(top1_hits.mean()),
        top5=float(top5_hits.mean()),
        per_class_accuracy=tuple(per_class),
        mode="tta" if tta else "plain",
        label_mode=label_mode,
        n_augs=n_augs if tta else 1,
    )


def label_sweep(model: Classifier, image: torch.Tensor) -> list[dict]:
    """Prediction table over the null label plus every class label.

    One deterministic forward per row.  On a normal-variant model all
    rows are identical (reported, not an error).
    """
    num_classes = model.config.num_classes
    rows = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            inputs = [("null", model.null_vector())]
            inputs += [(c, one_hot([c], num_classes)[0]) for c in range(num_classes)]
            for name, vec in inputs:
                probs = model(image.unsqueeze(0), vec.unsqueeze(0))[0]
                cls = int(probs.argmax())
                rows.append(
                    {"label_input": name, "predicted_class": cls, "confidence": float(probs[cls])}
                )
    finally:
        model.train(was_training)
    return rows


@dataclass(frozen=True)
class PurityReport:
    errors: int
    error_fraction: float
    breakdown: dict  # (noisy, predicted) -> error count


def clean_set_purity(split: SplitResult, dataset: NoisyDataset) -> PurityReport:
    """Errors among clean-set predicted labels, against the hidden truth."""
    truth = dataset.true_labels_oracle()
    errors = 0
    breakdown: dict[tuple[int, int], int] = {}
    for index, noisy, predicted in split.clean:
        if predicted != truth[index]:
            errors += 1
            key = (noisy, predicted)
            breakdown[key] = breakdown.get(key, 0) + 1
    n_clean = max(len(split.clean), 1)
    return PurityReport(errors, errors / n_clean, breakdown)
