//! Synthetic multi-modal volumes with ellipsoidal lesions.

use rand::{Rng, RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use super::volume::{Grid3, VolumeCase};
use crate::config::{fmt_f64, fmt_list, KvMap};
use crate::error::{Error, Result};

/// Minimum distance from a lesion centre to any face, so that a default-size
/// patch around it is in-bounds.
pub const MIN_CENTER_MARGIN: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_cases: usize,
    /// Cases tagged `train` in a generated manifest; the rest are `val`.
    pub n_train: usize,
    pub dims: [usize; 3],
    /// Inclusive range of lesions per case.
    pub lesions_per_case: (usize, usize),
    /// Inclusive range of each semi-axis, in voxels.
    pub radius_range: (f64, f64),
    pub background_mean: [f64; 4],
    /// Added to each modality inside lesions.
    pub lesion_offset: [f64; 4],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cases: 28,
            n_train: 20,
            dims: [64, 64, 64],
            lesions_per_case: (1, 3),
            radius_range: (3.0, 20.0),
            background_mean: [100.0, 80.0, 120.0, 110.0],
            lesion_offset: [40.0, 50.0, -30.0, 20.0],
            noise_std: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Same geometry with no intensity difference between lesion and
    /// background, so counts are not recoverable from the images.
    pub fn null(self) -> Self {
        SynthSpec {
            lesion_offset: [0.0; 4],
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_cases == 0 {
            return fail("n_cases must be at least 1".into());
        }
        if self.n_train >= self.n_cases {
            return fail(format!(
                "n_train ({}) must be smaller than n_cases ({})",
                self.n_train, self.n_cases
            ));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < 64) {
            return fail(format!("every dimension must be at least 64, got {d}"));
        }
        let (lo, hi) = self.lesions_per_case;
        if lo == 0 || lo > hi {
            return fail(format!("lesions_per_case must satisfy 1 <= min <= max, got {lo}..{hi}"));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo.is_finite() && rhi.is_finite() && rlo > 0.0 && rlo <= rhi) {
            return fail(format!("radius range {rlo}..{rhi} is not a valid interval"));
        }
        let min_dim = *self.dims.iter().min().unwrap();
        let margin = (rhi.ceil() as usize).max(MIN_CENTER_MARGIN);
        if 2 * margin >= min_dim {
            return fail(format!(
                "lesion radius {rhi} does not fit inside a volume of extent {min_dim}"
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self
            .background_mean
            .iter()
            .chain(&self.lesion_offset)
            .any(|v| !v.is_finite())
        {
            return fail("intensity means and offsets must be finite".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("n_cases", self.n_cases);
        kv.insert("n_train", self.n_train);
        kv.insert("dims", fmt_list(&self.dims));
        kv.insert("lesions_min", self.lesions_per_case.0);
        kv.insert("lesions_max", self.lesions_per_case.1);
        kv.insert("radius_min", fmt_f64(self.radius_range.0));
        kv.insert("radius_max", fmt_f64(self.radius_range.1));
        let floats = |v: &[f64; 4]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",");
        kv.insert("background_mean", floats(&self.background_mean));
        kv.insert("lesion_offset", floats(&self.lesion_offset));
        kv.insert("noise_std", fmt_f64(self.noise_std));
        kv.insert("seed", self.seed);
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = SynthSpec::default();
        let four = |kv: &mut KvMap, key: &str, default: [f64; 4]| -> Result<[f64; 4]> {
            match kv.take_list::<f64>(key)? {
                None => Ok(default),
                Some(v) => v.try_into().map_err(|v: Vec<f64>| {
                    Error::Config(format!("`{key}` needs 4 values, got {}", v.len()))
                }),
            }
        };
        let dims = match kv.take_list::<usize>("dims")? {
            None => d.dims,
            Some(v) => v.try_into().map_err(|v: Vec<usize>| {
                Error::Config(format!("`dims` needs 3 values, got {}", v.len()))
            })?,
        };
        let spec = SynthSpec {
            n_cases: kv.take_or("n_cases", d.n_cases)?,
            n_train: kv.take_or("n_train", d.n_train)?,
            dims,
            lesions_per_case: (
                kv.take_or("lesions_min", d.lesions_per_case.0)?,
                kv.take_or("lesions_max", d.lesions_per_case.1)?,
            ),
            radius_range: (
                kv.take_or("radius_min", d.radius_range.0)?,
                kv.take_or("radius_max", d.radius_range.1)?,
            ),
            background_mean: four(kv, "background_mean", d.background_mean)?,
            lesion_offset: four(kv, "lesion_offset", d.lesion_offset)?,
            noise_std: kv.take_or("noise_std", d.noise_std)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Axis-aligned ellipsoid: voxel `p` is inside iff
/// `Σ ((p_a − center_a) / semi_axes_a)² ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [usize; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a] as f64) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Inclusive voxel bounding box, clipped to `dims`.
    pub fn bounding_box(&self, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let lo = std::array::from_fn(|a| self.center[a].saturating_sub(self.semi_axes[a].floor() as usize));
        let hi = std::array::from_fn(|a| {
            (self.center[a] + self.semi_axes[a].floor() as usize).min(dims[a] - 1)
        });
        (lo, hi)
    }
}

/// Sets every voxel of `mask` inside `e` to 1; returns how many were newly set.
pub fn paint_ellipsoid(mask: &mut Grid3, e: &Ellipsoid) -> usize {
    let (lo, hi) = e.bounding_box(mask.dims());
    let mut added = 0;
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                if e.contains([z, y, x]) && mask.get([z, y, x]) == 0.0 {
                    mask.set([z, y, x], 1.0);
                    added += 1;
                }
            }
        }
    }
    added
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    /// Raw intensities (not normalized).
    pub case: VolumeCase,
    pub lesions: Vec<Ellipsoid>,
}

fn draw_ellipsoid<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Ellipsoid {
    let (rlo, rhi) = spec.radius_range;
    let semi_axes: [f64; 3] = std::array::from_fn(|_| {
        if rlo == rhi {
            rlo
        } else {
            rng.random_range(rlo..=rhi)
        }
    });
    let center = std::array::from_fn(|a| {
        let margin = (semi_axes[a].ceil() as usize).max(MIN_CENTER_MARGIN);
        rng.random_range(margin..spec.dims[a] - margin)
    });
    Ellipsoid { center, semi_axes }
}

/// Generates `spec.n_cases` cases from one seeded stream. For each case the
/// lesion geometry is drawn first, then per-modality noise in modality
/// order, so the result depends only on the spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let n_vox = spec.dims.iter().product::<usize>();
    (0..spec.n_cases)
        .map(|i| {
            let (lo, hi) = spec.lesions_per_case;
            let n_lesions = rng.random_range(lo..=hi);
            let lesions: Vec<Ellipsoid> = (0..n_lesions).map(|_| draw_ellipsoid(spec, &mut rng)).collect();
            let mut mask = Grid3::zeros(spec.dims);
            for e in &lesions {
                paint_ellipsoid(&mut mask, e);
            }
            let modalities: [Grid3; 4] = std::array::from_fn(|m| {
                let data = (0..n_vox)
                    .map(|v| {
                        let lesion = if mask.data()[v] != 0.0 { spec.lesion_offset[m] } else { 0.0 };
                        spec.background_mean[m] + lesion + noise.sample(&mut rng)
                    })
                    .collect();
                Grid3::new(spec.dims, data).expect("dims match")
            });
            let case = VolumeCase::with_default_names(format!("case{i:03}"), modalities, &mask)?;
            Ok(SynthCase { case, lesions })
        })
        .collect()
}
