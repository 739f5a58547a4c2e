use rand::{Rng, RngExt};
use rand_pcg::Pcg64;

use super::volume::{check_patch, VolumeCase};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::BatchSource;

pub const DEFAULT_PATCH_SIZE: usize = 25;

/// A patch, its exact lesion count and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub input: Tensor,
    pub count: u32,
    pub center: [usize; 3],
}

/// Draws patches from one case. Valid lesion centres (lesion voxels whose
/// whole footprint is in-bounds) are enumerated once up front.
#[derive(Clone, Debug)]
pub struct CaseSampler<'a> {
    case: &'a VolumeCase,
    patch_size: usize,
    lesion_centers: Vec<[u32; 3]>,
}

impl<'a> CaseSampler<'a> {
    pub fn new(case: &'a VolumeCase, patch_size: usize) -> Result<Self> {
        if patch_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!("patch size must be odd, got {patch_size}")));
        }
        let half = patch_size / 2;
        let dims = case.dims();
        let mut lesion_centers = Vec::new();
        if dims.iter().all(|&d| d >= patch_size) {
            let mask = case.mask();
            for z in half..dims[0] - half {
                for y in half..dims[1] - half {
                    let row = (z * dims[1] + y) * dims[2];
                    for x in half..dims[2] - half {
                        if mask[row + x] != 0 {
                            lesion_centers.push([z as u32, y as u32, x as u32]);
                        }
                    }
                }
            }
        }
        Ok(CaseSampler {
            case,
            patch_size,
            lesion_centers,
        })
    }

    pub fn case(&self) -> &'a VolumeCase {
        self.case
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn lesion_centers(&self) -> impl ExactSizeIterator<Item = [usize; 3]> + '_ {
        self.lesion_centers.iter().map(|c| c.map(|v| v as usize))
    }

    pub fn num_lesion_centers(&self) -> usize {
        self.lesion_centers.len()
    }

    pub fn draw_lesion_center<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[usize; 3]> {
        if self.lesion_centers.is_empty() {
            return Err(Error::Sampling(format!(
                "case {} has no lesion voxel at least {} voxels from every face",
                self.case.case_id(),
                self.patch_size / 2
            )));
        }
        let i = rng.random_range(0..self.lesion_centers.len());
        Ok(self.lesion_centers[i].map(|v| v as usize))
    }

    pub fn draw_uniform_center<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[usize; 3]> {
        let dims = self.case.dims();
        if dims.iter().any(|&d| d < self.patch_size) {
            return Err(Error::Sampling(format!(
                "case {}: volume {dims:?} is smaller than a {p}×{p}×{p} patch",
                self.case.case_id(),
                p = self.patch_size
            )));
        }
        let half = self.patch_size / 2;
        Ok(dims.map(|d| rng.random_range(half..d - half)))
    }

    pub fn count_at(&self, center: [usize; 3]) -> Result<u32> {
        self.case.count_in_patch(center, self.patch_size)
    }

    pub fn patch_at(&self, center: [usize; 3]) -> Result<PatchSample> {
        check_patch(self.case.dims(), center, self.patch_size)?;
        Ok(PatchSample {
            input: self.case.extract_patch(center, self.patch_size)?,
            count: self.count_at(center)?,
            center,
        })
    }

    pub fn sample_lesion_centered<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchSample> {
        let c = self.draw_lesion_center(rng)?;
        self.patch_at(c)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchSample> {
        let c = self.draw_uniform_center(rng)?;
        self.patch_at(c)
    }
}

/// One-off lesion-centred draw with the default patch size. Enumerates the
/// valid centres on every call; hold a [`CaseSampler`] for repeated draws.
pub fn sample_lesion_centered<R: Rng + ?Sized>(case: &VolumeCase, rng: &mut R) -> Result<PatchSample> {
    CaseSampler::new(case, DEFAULT_PATCH_SIZE)?.sample_lesion_centered(rng)
}

pub fn sample_uniform<R: Rng + ?Sized>(case: &VolumeCase, rng: &mut R) -> Result<PatchSample> {
    CaseSampler::new(case, DEFAULT_PATCH_SIZE)?.sample_uniform(rng)
}

/// Location of a drawn patch without its intensities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    /// Index into the case list the sampler was built from.
    pub case: usize,
    pub center: [usize; 3],
    pub count: u32,
}

/// Two-stage lesion-centred sampling over several cases: a case uniformly
/// at random, then a valid lesion centre within it. Cases without any valid
/// centre are never chosen.
#[derive(Clone, Debug)]
pub struct DatasetSampler<'a> {
    samplers: Vec<CaseSampler<'a>>,
    eligible: Vec<usize>,
}

impl<'a> DatasetSampler<'a> {
    pub fn new(cases: &'a [VolumeCase], patch_size: usize) -> Result<Self> {
        let samplers = cases
            .iter()
            .map(|c| CaseSampler::new(c, patch_size))
            .collect::<Result<Vec<_>>>()?;
        let eligible: Vec<usize> = (0..samplers.len())
            .filter(|&i| samplers[i].num_lesion_centers() > 0)
            .collect();
        for s in samplers.iter().filter(|s| s.num_lesion_centers() == 0) {
            log::warn!("case {} has no valid lesion centre; skipped", s.case().case_id());
        }
        if eligible.is_empty() {
            return Err(Error::Sampling(format!(
                "none of the {} cases has a valid lesion centre",
                cases.len()
            )));
        }
        Ok(DatasetSampler { samplers, eligible })
    }

    pub fn cases(&self) -> impl Iterator<Item = &'a VolumeCase> + '_ {
        self.samplers.iter().map(|s| s.case())
    }

    pub fn case_sampler(&self, case: usize) -> &CaseSampler<'a> {
        &self.samplers[case]
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchRef> {
        let case = self.eligible[rng.random_range(0..self.eligible.len())];
        let s = &self.samplers[case];
        let center = s.draw_lesion_center(rng)?;
        Ok(PatchRef {
            case,
            center,
            count: s.count_at(center)?,
        })
    }

    pub fn extract(&self, r: &PatchRef) -> Result<Tensor> {
        let s = &self.samplers[r.case];
        s.case().extract_patch(r.center, s.patch_size())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchSample> {
        let r = self.draw(rng)?;
        Ok(PatchSample {
            input: self.extract(&r)?,
            count: r.count,
            center: r.center,
        })
    }
}

impl BatchSource for DatasetSampler<'_> {
    fn next_batch(&mut self, size: usize, rng: &mut Pcg64) -> Result<Vec<PatchSample>> {
        (0..size).map(|_| self.sample(rng)).collect()
    }
}
