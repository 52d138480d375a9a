"""Deterministic seed derivation and named RNG streams.

One global seed fans out to every randomness consumer through a stable
hash of a path of names, e.g. ("bootstrap", "epoch", 3, "aug").  Stages,
epochs, and data-loading workers each derive their own child seed, so a
run is reproducible regardless of how work is scheduled.

``SeedStreams`` additionally exposes an ``observer`` hook: every stream
request reports its full path, which lets tests spy on *which* sites
consumed randomness and in what order (used to verify, for instance,
that label dropping never happens on the pseudo-label branch and that
it draws strictly after MixUp pairing).
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(root: int, *path: object) -> int:
    """Derive a child seed from a root seed and a path of names/indices.

    Stable across processes and platforms (blake2b of the textual path).
    """
    text = f"{int(root)}" + "".join(f"/{p}" for p in path)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


class SeedStreams:
    """Factory of independent, named RNGs derived from one seed.

    Each call to :meth:`generator` / :meth:`numpy` returns a *fresh* RNG
    seeded from ``derive_seed(seed, *path)``; requesting the same path
    twice yields identical streams.  Use :meth:`child` to scope a
    subsystem (stage, epoch, step) under its own namespace.
    """

    def __init__(self, seed: int, _path: tuple = (), observer: Callable | None = None):
        self.seed = int(seed)
        self._path = _path
        self.observer = observer

    def child(self, *path: object) -> "SeedStreams":
        return SeedStreams(self.seed, self._path + tuple(path), self.observer)

    def _resolve(self, path: Iterable[object]) -> tuple[tuple, int]:
        full = self._path + tuple(path)
        if self.observer is not None:
            self.observer(full)
        return full, derive_seed(self.seed, *full)

    def derive(self, *path: object) -> int:
        return self._resolve(path)[1]

    def generator(self, *path: object) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self._resolve(path)[1])
        return g

    def numpy(self, *path: object) -> np.random.Generator:
        return np.random.default_rng(self._resolve(path)[1])


def spy_streams(seed: int) -> tuple[SeedStreams, list[tuple]]:
    """SeedStreams that records every requested stream path, in order."""
    log: list[tuple] = []
    return SeedStreams(seed, observer=log.append), log
