"""Synthetic label-noise injection and the ground-truth transition oracle.

All injectors are deterministic functions of (inputs, seed).  The RNG
consumption pattern is part of the contract so tests can re-code a
sampler independently and compare outputs exactly:

* symmetric: one ``random(n)`` array of flip deciders, then one
  ``integers(0, num_classes - 1, n)`` array of alternative classes
  (values >= own label are shifted up by one, i.e. "uniform over the
  *other* classes");
* asymmetric: one ``random(n)`` array of flip deciders.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import NoisyDataset
from .errors import DataFormatError

NOISE_KINDS = ("symmetric", "asymmetric", "aux_model", "file")


@dataclass(frozen=True)
class TransitionMatrix:
    """Joint proportion of samples with noisy label i and clean label j.

    Entries are non-negative and sum to one over the whole matrix (it is
    a joint distribution, not row-stochastic).
    """

    entries: np.ndarray  # (num_classes, num_classes) float64

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("transition matrix must be square")
        if (entries < 0).any():
            raise ValueError("transition matrix entries must be non-negative")
        if abs(float(entries.sum()) - 1.0) > 1e-9:
            raise ValueError("transition matrix entries must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def save_json(self, path: str | Path) -> None:
        payload = {"format_version": 1, "entries": self.entries.tolist()}
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "TransitionMatrix":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(np.asarray(payload["entries"], dtype=np.float64))


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative description of the label noise to inject."""

    kind: str
    rate: float | None = None
    mapping: dict[int, int] | None = None
    seed: int = 0
    path: str | None = None

    def validate(self, num_classes: int | None = None) -> list[str]:
        problems = []
        if self.kind not in NOISE_KINDS:
            problems.append(f"noise.kind must be one of {NOISE_KINDS}, got {self.kind!r}")
            return problems
        if self.kind in ("symmetric", "asymmetric", "aux_model"):
            if self.rate is None:
                problems.append(f"noise.rate is required for kind={self.kind}")
            elif not 0.0 <= self.rate <= 1.0:
                problems.append("noise.rate must lie in [0,1]")
        if self.kind == "asymmetric" and self.mapping is None:
            problems.append("noise.mapping is required for kind=asymmetric")
        if self.kind == "file" and self.path is None:
            problems.append("noise.path is required for kind=file")
        if self.mapping is not None and num_classes is not None:
            for src, dst in self.mapping.items():
                if not (0 <= src < num_classes and 0 <= dst < num_classes):
                    problems.append(
                        f"noise.mapping entry {src}->{dst} outside class range 0..{num_classes - 1}"
                    )
        return problems


def inject_symmetric_noise(
    labels: Sequence[int], rate: float, num_classes: int, seed: int
) -> list[int]:
    """Flip each label to a uniformly random *other* class with probability rate."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0,1], got {rate}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    deciders = rng.random(labels.size)
    alts = rng.integers(0, num_classes - 1, size=labels.size)
    alts = np.where(alts >= labels, alts + 1, alts)  # skip own class
    return np.where(deciders < rate, alts, labels).tolist()


def inject_asymmetric_noise(
    labels: Sequence[int],
    rate: float,
    mapping: dict[int, int],
    seed: int,
    num_classes: int | None = None,
) -> list[int]:
    """Flip each label to mapping[label] with probability rate.

    Classes missing from the mapping are treated as identity and never
    change; identity entries likewise.  When ``num_classes`` is given,
    mapping entries outside that range are rejected.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0,1], got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    for src, dst in mapping.items():
        if src < 0 or dst < 0:
            raise ValueError(f"mapping entry {src}->{dst} references a negative class")
        if num_classes is not None and not (src < num_classes and dst < num_classes):
            raise ValueError(
                f"mapping entry {src}->{dst} outside class range 0..{num_classes - 1}"
            )
    size = 1 + max(
        int(labels.max(initial=0)),
        max(mapping.keys(), default=0),
        max(mapping.values(), default=0),
    )
    table = np.arange(size, dtype=np.int64)
    for src, dst in mapping.items():
        table[src] = dst
    rng = np.random.default_rng(seed)
    deciders = rng.random(labels.size)
    flipped = table[labels]
    return np.where(deciders < rate, flipped, labels).tolist()


def inject_aux_model_noise(
    dataset: NoisyDataset,
    aux_predictor: Callable[[torch.Tensor], object],
    rate: float,
    seed: int = 0,
) -> list[int]:
    """Relabel examples the auxiliary predictor gets wrong.

    The predictor maps an (H, W, C) image to either a class index or a
    class-probability vector.  Wrong predictions are applied
    most-confident first (random order when the predictor yields bare
    indices) until the overall noise fraction reaches
    ``min(rate, achievable)``; everything else keeps its true label.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0,1], got {rate}")
    true = dataset.true_labels_oracle()
    n = len(dataset)
    preds = np.empty(n, dtype=np.int64)
    confs = np.empty(n, dtype=np.float64)
    for i in range(n):
        out = aux_predictor(dataset.images[i])
        if np.ndim(out) == 0:
            preds[i], confs[i] = int(out), 0.0
        else:
            vec = np.asarray(out, dtype=np.float64)
            preds[i], confs[i] = int(vec.argmax()), float(vec.max())
    if preds.min() < 0 or preds.max() >= dataset.num_classes:
        raise DataFormatError(
            f"aux predictor emitted class outside 0..{dataset.num_classes - 1}"
        )
    wrong = np.flatnonzero(preds != true)
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n)  # "then random"
    order = wrong[np.lexsort((tiebreak[wrong], -confs[wrong]))]
    n_flip = min(int(round(rate * n)), wrong.size)
    noisy = true.copy()
    chosen = order[:n_flip]
    noisy[chosen] = preds[chosen]
    return noisy.tolist()


def load_noise_file(path: str | Path, dataset: NoisyDataset) -> NoisyDataset:
    """Replace noisy labels from a CSV of ``index,noisy_label`` rows.

    The file must cover every training index exactly once.  Row numbers
    in error messages are 1-based and count the header row.
    """
    path = Path(path)
    seen = np.zeros(len(dataset), dtype=bool)
    noisy = dataset.noisy_labels.copy()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["index", "noisy_label"]:
            raise DataFormatError(f"expected header 'index,noisy_label' in {path}", row=1)
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataFormatError(f"expected 2 fields, got {len(row)}", row=rownum)
            try:
                index, label = int(row[0]), int(row[1])
            except ValueError:
                raise DataFormatError(
                    f"non-integer value in {row!r}", row=rownum
                ) from None
            if not 0 <= index < len(dataset):
                raise DataFormatError(f"index {index} out of range", row=rownum)
            if seen[index]:
                raise DataFormatError(f"duplicate index {index}", row=rownum)
            if not 0 <= label < dataset.num_classes:
                raise DataFormatError(
                    f"label {label} outside 0..{dataset.num_classes - 1}", row=rownum
                )
            seen[index] = True
            noisy[index] = label
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise DataFormatError(f"noise file misses index {missing} (and possibly more)")
    return dataset.with_noisy_labels(noisy)


def save_noise_file(noisy_labels: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "noisy_label"])
        for i, label in enumerate(noisy_labels):
            writer.writerow([i, int(label)])


def true_transition_matrix(dataset: NoisyDataset) -> TransitionMatrix:
    """Exact joint (noisy, true) proportions; evaluation oracle only."""
    true = dataset.true_labels_oracle()
    k = dataset.num_classes
    counts = np.zeros((k, k), dtype=np.float64)
    np.add.at(counts, (dataset.noisy_labels, true), 1.0)
    return TransitionMatrix(counts / len(dataset))


def apply_noise_spec(
    dataset: NoisyDataset,
    spec: NoiseSpec,
    aux_predictor: Callable | None = None,
) -> NoisyDataset:
    """Dispatch a NoiseSpec onto a dataset, returning the noisy copy."""
    problems = spec.validate(dataset.num_classes)
    if problems:
        raise ValueError("; ".join(problems))
    if spec.kind == "symmetric":
        base = dataset.true_labels_oracle() if dataset.has_true_labels else dataset.noisy_labels
        noisy = inject_symmetric_noise(base, spec.rate, dataset.num_classes, spec.seed)
    elif spec.kind == "asymmetric":
        base = dataset.true_labels_oracle() if dataset.has_true_labels else dataset.noisy_labels
        noisy = inject_asymmetric_noise(
            base, spec.rate, spec.mapping, spec.seed, dataset.num_classes
        )
    elif spec.kind == "aux_model":
        if aux_predictor is None:
            raise ValueError("aux_model noise requires an aux_predictor")
        noisy = inject_aux_model_noise(dataset, aux_predictor, spec.rate, spec.seed)
    elif spec.kind == "file":
        return load_noise_file(spec.path, dataset)
    else:  # pragma: no cover - guarded by validate
        raise ValueError(f"unknown noise kind {spec.kind!r}")
    return dataset.with_noisy_labels(noisy)
