from .formats import (
    BadMagicError,
    DatasetManifest,
    DimOverflowError,
    FormatError,
    ManifestRow,
    TrailingDataError,
    TruncatedError,
    load_mask,
    load_volume,
    read_manifest,
    save_mask,
    save_volume,
    write_manifest,
)
from .patches import PatchSpec, binarize, predict_volume, sample_patch, sliding_window_predict
from .split import SplitSpec, split_patients
from .synth import DEFAULT_DIMS, DEFAULT_PRIORS, PhantomParams, VolumeSample, generate_dataset, generate_patient


def load_samples(manifest: DatasetManifest) -> list[VolumeSample]:
    return [
        VolumeSample(r.patient_id, load_volume(manifest.root / r.image),
                     load_mask(manifest.root / r.mask), r.label)
        for r in manifest.rows
    ]
