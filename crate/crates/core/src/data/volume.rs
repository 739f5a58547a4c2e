use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MODALITIES: [&str; 4] = ["FLAIR", "DWI", "T1", "T1c"];

/// Row-major 3D grid of doubles (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("grid dims must be positive, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "grid dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Grid3 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, at: [usize; 3]) -> f64 {
        self.data[self.index(at)]
    }

    pub fn set(&mut self, at: [usize; 3], v: f64) {
        let i = self.index(at);
        self.data[i] = v;
    }
}

/// Checks that the `patch_size`-wide cube centred on `center` lies inside
/// `dims`. Patch sizes must be odd so the centre voxel is well defined.
pub fn check_patch(dims: [usize; 3], center: [usize; 3], patch_size: usize) -> Result<()> {
    if patch_size.is_multiple_of(2) {
        return Err(Error::Parameter(format!("patch size must be odd, got {patch_size}")));
    }
    let half = patch_size / 2;
    for axis in 0..3 {
        if center[axis] < half || center[axis] + half >= dims[axis] {
            return Err(Error::Sampling(format!(
                "patch of size {patch_size} at {center:?} leaves volume {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Number of nonzero mask voxels inside the `patch_size`³ cube centred on
/// `center`, by direct summation.
pub fn count_in_patch(
    mask: &[u8],
    dims: [usize; 3],
    center: [usize; 3],
    patch_size: usize,
) -> Result<u32> {
    check_patch(dims, center, patch_size)?;
    let half = patch_size / 2;
    let [z0, y0, x0] = center.map(|c| c - half);
    let mut count = 0u32;
    for z in z0..z0 + patch_size {
        for y in y0..y0 + patch_size {
            let row = (z * dims[1] + y) * dims[2] + x0;
            count += mask[row..row + patch_size]
                .iter()
                .map(|&m| u32::from(m != 0))
                .sum::<u32>();
        }
    }
    Ok(count)
}

/// One subject: co-registered modality grids plus a binary lesion mask.
///
/// Intensities are held in single precision to keep full-size volumes in
/// memory; patches are widened to `f64` on extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCase {
    case_id: String,
    modality_names: Vec<String>,
    dims: [usize; 3],
    modalities: Vec<Vec<f32>>,
    mask: Vec<u8>,
}

impl VolumeCase {
    /// Builds a case, binarizing the mask (any nonzero voxel is lesion).
    pub fn new(
        case_id: impl Into<String>,
        modalities: Vec<(String, Grid3)>,
        mask: &Grid3,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if modalities.is_empty() {
            return Err(Error::Data(format!("case {case_id}: no modalities")));
        }
        let dims = mask.dims();
        let mut names = Vec::with_capacity(modalities.len());
        let mut grids = Vec::with_capacity(modalities.len());
        for (name, grid) in modalities {
            if grid.dims() != dims {
                return Err(Error::Data(format!(
                    "case {case_id}: modality {name} has dims {:?}, mask has {dims:?}",
                    grid.dims()
                )));
            }
            names.push(name);
            grids.push(grid.data().iter().map(|&v| v as f32).collect());
        }
        let mask = mask.data().iter().map(|&v| u8::from(v != 0.0)).collect();
        Ok(VolumeCase {
            case_id,
            modality_names: names,
            dims,
            modalities: grids,
            mask,
        })
    }

    /// Case with the four default modality names in order.
    pub fn with_default_names(
        case_id: impl Into<String>,
        modalities: [Grid3; 4],
        mask: &Grid3,
    ) -> Result<Self> {
        let named = DEFAULT_MODALITIES
            .iter()
            .map(|n| n.to_string())
            .zip(modalities)
            .collect();
        Self::new(case_id, named, mask)
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality(&self, i: usize) -> &[f32] {
        &self.modalities[i]
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn is_lesion(&self, at: [usize; 3]) -> bool {
        self.mask[self.index(at)] != 0
    }

    pub fn lesion_total(&self) -> u64 {
        self.mask.iter().map(|&m| u64::from(m)).sum()
    }

    pub fn count_in_patch(&self, center: [usize; 3], patch_size: usize) -> Result<u32> {
        count_in_patch(&self.mask, self.dims, center, patch_size)
    }

    /// Channel-first `[M, P, P, P]` patch of all modalities around `center`.
    pub fn extract_patch(&self, center: [usize; 3], patch_size: usize) -> Result<Tensor> {
        check_patch(self.dims, center, patch_size)?;
        let half = patch_size / 2;
        let [z0, y0, x0] = center.map(|c| c - half);
        let p = patch_size;
        let mut data = Vec::with_capacity(self.modalities.len() * p * p * p);
        for m in &self.modalities {
            for z in z0..z0 + p {
                for y in y0..y0 + p {
                    let row = (z * self.dims[1] + y) * self.dims[2] + x0;
                    data.extend(m[row..row + p].iter().map(|&v| f64::from(v)));
                }
            }
        }
        Tensor::new(&[self.modalities.len(), p, p, p], data)
    }

    /// Each modality z-scored over its nonzero voxels; zero (background)
    /// voxels stay zero. A modality with no spread is only centred.
    pub fn zscore(mut self) -> Self {
        for m in &mut self.modalities {
            let (mut n, mut sum) = (0usize, 0.0f64);
            for &v in m.iter().filter(|&&v| v != 0.0) {
                n += 1;
                sum += f64::from(v);
            }
            if n == 0 {
                continue;
            }
            let mean = sum / n as f64;
            let var = m
                .iter()
                .filter(|&&v| v != 0.0)
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
            for v in m.iter_mut().filter(|v| **v != 0.0) {
                *v = ((f64::from(*v) - mean) * scale) as f32;
            }
        }
        self
    }

    /// Modality `i` widened back to a [`Grid3`].
    pub fn modality_grid(&self, i: usize) -> Grid3 {
        Grid3 {
            dims: self.dims,
            data: self.modalities[i].iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn mask_grid(&self) -> Grid3 {
        Grid3 {
            dims: self.dims,
            data: self.mask.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}
