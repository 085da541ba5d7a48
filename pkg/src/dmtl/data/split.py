"""Patient-level train/validation/test partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import DatasetManifest


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 1

    def __post_init__(self) -> None:
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Validation and test get round(n*f) (half up), at least one each; train takes the remainder."""
    n_val = max(1, int(math.floor(n * spec.val + 0.5)))
    n_test = max(1, int(math.floor(n * spec.test + 0.5)))
    return n - n_val - n_test, n_val, n_test


def split_patients(manifest: DatasetManifest, spec: SplitSpec):
    """Return (train, val, test) manifests; each patient lands in exactly one."""
    n = len(manifest)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    n_train, n_val, _ = split_sizes(n, spec)
    order = np.random.default_rng([spec.seed, 0x5917]).permutation(n)
    ids = [manifest.rows[i].patient_id for i in order]
    parts = ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]
    return tuple(manifest.subset(p) for p in parts)
