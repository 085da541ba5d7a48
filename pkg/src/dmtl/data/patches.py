"""Random training patches and sliding-window whole-volume inference."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff.tensor import Tensor


@dataclass(frozen=True)
class PatchSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    patches_per_volume: int = 1
    tumor_prob: float = 0.5
    max_retries: int = 50
    seed: int = 0

    def validate(self, volume_dims, stages: int | None = None) -> None:
        if any(p > v for p, v in zip(self.dims, volume_dims)):
            raise ValueError(f"patch {self.dims} larger than volume {tuple(volume_dims)}")
        if stages is not None and any(p % 2**stages for p in self.dims):
            raise ValueError(f"patch {self.dims} not divisible by 2**{stages}")


def _crop(arr: np.ndarray, corner, dims) -> np.ndarray:
    sl = tuple(slice(c, c + p) for c, p in zip(corner, dims))
    return arr[(slice(None),) + sl]


def sample_patch(sample, spec: PatchSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Crop one patch with a uniformly random corner.

    With probability ``spec.tumor_prob`` the corner is redrawn (up to
    ``spec.max_retries`` times) until the patch holds at least one tumour
    voxel; after that the last draw is kept.
    """
    image, mask = sample.image, sample.mask
    vol = image.shape[1:]
    spec.validate(vol)
    hi = [v - p + 1 for v, p in zip(vol, spec.dims)]
    corner = [int(rng.integers(0, h)) for h in hi]
    if rng.random() < spec.tumor_prob and mask.any():
        for _ in range(spec.max_retries):
            if _crop(mask, corner, spec.dims).any():
                break
            corner = [int(rng.integers(0, h)) for h in hi]
    return _crop(image, corner, spec.dims).copy(), _crop(mask, corner, spec.dims).copy()


def window_starts(length: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def window_corners(vol_dims, patch_dims, stride_dims) -> list[tuple[int, int, int]]:
    axes = [window_starts(v, p, s) for v, p, s in zip(vol_dims, patch_dims, stride_dims)]
    return list(itertools.product(*axes))


def predict_volume(model: Callable, image: np.ndarray, patch_dims, stride=None,
                   batch_size: int = 4) -> tuple[np.ndarray, np.ndarray | None]:
    """Stitched probability map [1,D,H,W] and window-averaged class logits.

    Overlapping windows are averaged uniformly; windows at the far edge are
    clamped to the volume boundary.
    """
    patch_dims = tuple(int(p) for p in patch_dims)
    stride = tuple(int(s) for s in (stride or [max(1, p // 2) for p in patch_dims]))
    vol = image.shape[1:]
    if any(s > p for s, p in zip(stride, patch_dims)) or any(p > v for p, v in zip(patch_dims, vol)):
        raise ValueError(f"invalid window: volume {vol}, patch {patch_dims}, stride {stride}")
    corners = window_corners(vol, patch_dims, stride)
    acc = np.zeros(vol, dtype=np.float64)
    count = np.zeros(vol, dtype=np.int32)
    logit_sum, n_logits = None, 0
    for i in range(0, len(corners), batch_size):
        chunk = corners[i:i + batch_size]
        batch = np.stack([_crop(image, c, patch_dims) for c in chunk])
        out = model(Tensor(batch))
        probs = out.seg_prob.data
        for j, c in enumerate(chunk):
            sl = tuple(slice(a, a + p) for a, p in zip(c, patch_dims))
            acc[sl] += probs[j, 0]
            count[sl] += 1
        if out.class_logits is not None:
            s = out.class_logits.data.astype(np.float64).sum(axis=0)
            logit_sum = s if logit_sum is None else logit_sum + s
            n_logits += len(chunk)
    prob = (acc / count).astype(np.float32)[None]
    logits = None if logit_sum is None else logit_sum / n_logits
    return prob, logits


def sliding_window_predict(model: Callable, image: np.ndarray, patch_dims, stride=None,
                           batch_size: int = 4) -> np.ndarray:
    return predict_volume(model, image, patch_dims, stride, batch_size)[0]


def coverage_count(vol_dims, patch_dims, stride) -> np.ndarray:
    count = np.zeros(tuple(vol_dims), dtype=np.int32)
    for c in window_corners(vol_dims, patch_dims, stride):
        count[tuple(slice(a, a + p) for a, p in zip(c, patch_dims))] += 1
    return count


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)
