"""Synthetic brain-lesion phantoms with a texture-coded three-way label.

Labels: 0 = V600E-like (bright rim around a darker core), 1 = fusion-like
(uniformly bright), 2 = other (speckled, heterogeneous). Every patient is
generated from its own generator seeded by (global seed, patient index),
so corpora are identical whether produced serially or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import DatasetManifest, ManifestRow, save_mask, save_volume, write_manifest

DEFAULT_DIMS = (48, 48, 40)
DEFAULT_PRIORS = (0.45, 0.35, 0.20)
LABEL_NAMES = ("v600e", "fusion", "other")


@dataclass(frozen=True)
class PhantomParams:
    lesion_radius: tuple[float, float] = (5.0, 10.0)
    tissue_noise: float = 0.25
    white_noise: float = 0.18
    lesion_contrast: float = 0.9
    edge_blur: float = 0.8
    distractors: tuple[int, int] = (1, 3)
    distractor_radius: tuple[float, float] = (2.0, 3.5)
    distractor_contrast: float = 0.8


@dataclass
class VolumeSample:
    patient_id: str
    image: np.ndarray  # [1, D, H, W] float32
    mask: np.ndarray   # [1, D, H, W] uint8
    label: int

    def __post_init__(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.patient_id}: image {self.image.shape} vs mask {self.mask.shape}")
        if self.label not in (0, 1, 2):
            raise ValueError(f"{self.patient_id}: label {self.label} not in {{0,1,2}}")


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid_radius(coords: np.ndarray, center, radii, rot: np.ndarray) -> np.ndarray:
    """Normalised ellipsoidal radius (1 on the surface) at every voxel."""
    local = np.tensordot(rot.T, coords - np.asarray(center, dtype=float)[:, None, None, None], axes=1)
    r = np.asarray(radii, dtype=float)[:, None, None, None]
    return np.sqrt(((local / r) ** 2).sum(axis=0))


def generate_patient(index: int, dims=DEFAULT_DIMS, priors=DEFAULT_PRIORS, seed: int = 0,
                     params: PhantomParams = PhantomParams()) -> VolumeSample:
    dims = tuple(int(d) for d in dims)
    rng = patient_rng(seed, index)
    label = int(rng.choice(3, p=np.asarray(priors, dtype=float)))
    coords = np.stack(np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij"))
    mid = (np.asarray(dims, dtype=float) - 1) / 2

    brain_radii = np.asarray(dims, dtype=float) * rng.uniform(0.40, 0.46, size=3)
    brain_center = mid + rng.uniform(-1.5, 1.5, size=3)
    brain = _ellipsoid_radius(coords, brain_center, brain_radii, np.eye(3)) <= 1.0

    tissue = gaussian_filter(rng.standard_normal(dims), 3.0)
    tissue *= params.tissue_noise / (tissue.std() + 1e-12)
    fine = gaussian_filter(rng.standard_normal(dims), 1.0)
    fine *= 0.5 * params.tissue_noise / (fine.std() + 1e-12)
    image = brain * (1.0 + tissue + fine)

    # lesion centre far enough inside the brain envelope that it stays inside
    lo, hi = params.lesion_radius
    radii = rng.uniform(lo, hi, size=3)
    margin = radii.max() + 1.0
    room = np.maximum(brain_radii - margin, 0.5)
    for _ in range(100):
        offset = rng.uniform(-1, 1, size=3) * room
        if ((offset / room) ** 2).sum() <= 1.0:
            break
    center = brain_center + offset
    rho = _ellipsoid_radius(coords, center, radii, _rotation(rng))
    mask = rho <= 1.0

    c = params.lesion_contrast
    if label == 0:
        # bright shell, core only slightly above tissue
        profile = np.where(rho > 0.6, c * 1.15, c * 0.3)
    elif label == 1:
        profile = np.full(dims, c)
    else:
        speckle = rng.standard_normal(dims)
        profile = c * (0.65 + 0.55 * speckle)
    lesion = gaussian_filter((mask * profile).astype(float), params.edge_blur)

    for _ in range(int(rng.integers(params.distractors[0], params.distractors[1] + 1))):
        dr = rng.uniform(*params.distractor_radius)
        for _ in range(100):
            dc = brain_center + rng.uniform(-1, 1, size=3) * np.maximum(brain_radii - dr - 1, 0.5)
            if np.linalg.norm(dc - center) > radii.max() + dr + 2:
                break
        blob = _ellipsoid_radius(coords, dc, (dr, dr, dr), np.eye(3))
        image += params.distractor_contrast * np.exp(-0.5 * (blob * 1.2) ** 2) * brain

    image = image + lesion + params.white_noise * rng.standard_normal(dims)
    image = (image - image.mean()) / (image.std() + 1e-12)
    return VolumeSample(
        patient_id=f"P{index:04d}",
        image=image.astype(np.float32)[None],
        mask=mask.astype(np.uint8)[None],
        label=label,
    )


def generate_dataset(out_dir, n_patients: int, dims=DEFAULT_DIMS, priors=DEFAULT_PRIORS,
                     seed: int = 0, params: PhantomParams = PhantomParams()) -> DatasetManifest:
    """Write ``n_patients`` phantoms plus ``manifest.csv`` under ``out_dir``."""
    if n_patients < 3:
        raise ValueError(f"need at least 3 patients to split, got {n_patients}")
    priors = tuple(float(p) for p in priors)
    if len(priors) != 3 or min(priors) < 0 or abs(sum(priors) - 1.0) > 1e-9:
        raise ValueError(f"class priors must be 3 non-negative numbers summing to 1, got {priors}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2 * params.lesion_radius[1] + 4:
        raise ValueError(f"dims {dims} too small for lesions of radius up to {params.lesion_radius[1]}")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_patients):
        s = generate_patient(i, dims, priors, seed, params)
        img_rel = f"images/{s.patient_id}.dvol"
        msk_rel = f"masks/{s.patient_id}.dmsk"
        save_volume(root / img_rel, s.image)
        save_mask(root / msk_rel, s.mask)
        rows.append(ManifestRow(s.patient_id, img_rel, msk_rel, s.label))
    manifest = DatasetManifest(root, rows, seed, dims)
    write_manifest(manifest)
    return manifest
