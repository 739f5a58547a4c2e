//! Volumes, file formats, manifests, patch sampling and synthetic data.

pub mod lvol;
pub mod manifest;
pub mod nifti;
pub mod sampling;
pub mod synth;
pub mod volume;

pub use lvol::{load_lvol, save_lvol, LvolDtype};
pub use manifest::{load_volume, split_cases, Manifest, ManifestEntry, Split};
pub use nifti::{load_nifti, NiftiDtype};
pub use sampling::{
    sample_lesion_centered, sample_uniform, CaseSampler, DatasetSampler, PatchRef, PatchSample,
    DEFAULT_PATCH_SIZE,
};
pub use synth::{generate_synthetic, paint_ellipsoid, Ellipsoid, SynthCase, SynthSpec};
pub use volume::{count_in_patch, Grid3, VolumeCase, DEFAULT_MODALITIES};
