//! Patch-count metrics, the pairwise ordering experiment and sampling-based
//! lesion localization.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CaseSampler, DatasetSampler, PatchRef, VolumeCase};
use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic};
use crate::model::Network;
use crate::tensor::Tensor;

/// A drawn patch whose intensities are only extracted on request.
pub struct PatchView<'a> {
    case: &'a VolumeCase,
    center: [usize; 3],
    patch_size: usize,
    count: u32,
}

impl<'a> PatchView<'a> {
    pub fn new(case: &'a VolumeCase, center: [usize; 3], patch_size: usize, count: u32) -> Self {
        PatchView {
            case,
            center,
            patch_size,
            count,
        }
    }

    pub fn input(&self) -> Result<Tensor> {
        self.case.extract_patch(self.center, self.patch_size)
    }

    pub fn true_count(&self) -> u32 {
        self.count
    }

    pub fn center(&self) -> [usize; 3] {
        self.center
    }
}

pub trait CountPredictor {
    fn predict(&self, patch: &PatchView<'_>) -> Result<u32>;
}

impl CountPredictor for Network {
    fn predict(&self, patch: &PatchView<'_>) -> Result<u32> {
        self.predict_count(&patch.input()?)
    }
}

/// Returns the true count: the ceiling any model can reach.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl CountPredictor for OraclePredictor {
    fn predict(&self, patch: &PatchView<'_>) -> Result<u32> {
        Ok(patch.true_count())
    }
}

/// Always predicts the same count.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub u32);

impl CountPredictor for ConstantPredictor {
    fn predict(&self, _patch: &PatchView<'_>) -> Result<u32> {
        Ok(self.0)
    }
}

fn view<'a>(sampler: &DatasetSampler<'a>, r: &PatchRef) -> PatchView<'a> {
    let s = sampler.case_sampler(r.case);
    PatchView::new(s.case(), r.center, s.patch_size(), r.count)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(rename = "n")]
    pub n_samples: usize,
    /// Mean absolute error rounded up to an integer.
    pub mae_ceil: Option<u64>,
    pub mean_ratio: Option<f64>,
    /// Mean relative error.
    pub mre: Option<f64>,
    pub pearson_r: Option<f64>,
    /// `(true, predicted)` per sample, in draw order.
    #[serde(skip)]
    pub pairs: Vec<(u32, u32)>,
}

impl MetricsReport {
    /// Metrics over `(true, predicted)` pairs. Undefined values are `None`:
    /// everything when empty, the ratio metrics when a true count is 0, and
    /// the correlation when either side is constant.
    pub fn from_pairs(pairs: Vec<(u32, u32)>) -> Self {
        let n = pairs.len();
        if n == 0 {
            return MetricsReport {
                n_samples: 0,
                mae_ceil: None,
                mean_ratio: None,
                mre: None,
                pearson_r: None,
                pairs,
            };
        }
        let abs_sum: u64 = pairs.iter().map(|&(c, p)| u64::from(c.abs_diff(p))).sum();
        let mae_ceil = abs_sum.div_ceil(n as u64);
        let (mean_ratio, mre) = if pairs.iter().any(|&(c, _)| c == 0) {
            (None, None)
        } else {
            let ratio = pairs.iter().map(|&(c, p)| f64::from(p) / f64::from(c)).sum::<f64>();
            let rel = pairs
                .iter()
                .map(|&(c, p)| f64::from(c.abs_diff(p)) / f64::from(c))
                .sum::<f64>();
            (Some(ratio / n as f64), Some(rel / n as f64))
        };
        let xs: Vec<f64> = pairs.iter().map(|&(c, _)| f64::from(c)).collect();
        let ys: Vec<f64> = pairs.iter().map(|&(_, p)| f64::from(p)).collect();
        MetricsReport {
            n_samples: n,
            mae_ceil: Some(mae_ceil),
            mean_ratio,
            mre,
            pearson_r: pearson(&xs, &ys),
            pairs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pearson correlation, or `None` when it is undefined (fewer than two
/// points, mismatched lengths, or zero variance on either side).
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // sqrt(sxx·syy) rounds to exactly sxx when y == x, so identical inputs
    // give exactly 1; fall back to separate roots if the product leaves range.
    let prod = sxx * syy;
    let denom = if prod.is_finite() && prod > 0.0 {
        prod.sqrt()
    } else {
        sxx.sqrt() * syy.sqrt()
    };
    Some((sxy / denom).clamp(-1.0, 1.0))
}

/// Draws `n` lesion-centred patches and scores the predictor on them.
pub fn evaluate<P, R>(predictor: &P, sampler: &DatasetSampler<'_>, n: usize, rng: &mut R) -> Result<MetricsReport>
where
    P: CountPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let r = sampler.draw(rng)?;
        pairs.push((r.count, predictor.predict(&view(sampler, &r))?));
        if (i + 1) % 1000 == 0 {
            log::info!("evaluated {}/{n} patches", i + 1);
        }
    }
    Ok(MetricsReport::from_pairs(pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairOrderReport {
    pub n_pairs: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Draws discarded because both true counts were equal.
    pub redraws: usize,
}

/// Redraw budget per pair before giving up on finding unequal true counts.
pub const MAX_PAIR_ATTEMPTS: usize = 1000;

/// Scores whether predictions order pairs of patches like their true counts.
/// Pairs with equal true counts are redrawn; equal predictions count as
/// wrong.
pub fn pair_order_experiment<P, R>(
    predictor: &P,
    sampler: &DatasetSampler<'_>,
    n_pairs: usize,
    rng: &mut R,
) -> Result<PairOrderReport>
where
    P: CountPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::Parameter("n_pairs must be at least 1".into()));
    }
    let (mut n_correct, mut redraws) = (0, 0);
    for i in 0..n_pairs {
        let mut attempts = 0;
        let (a, b) = loop {
            let a = sampler.draw(rng)?;
            let b = sampler.draw(rng)?;
            if a.count != b.count {
                break (a, b);
            }
            redraws += 1;
            attempts += 1;
            if attempts == MAX_PAIR_ATTEMPTS {
                return Err(Error::Sampling(format!(
                    "{MAX_PAIR_ATTEMPTS} consecutive pairs had equal true counts"
                )));
            }
        };
        let pa = predictor.predict(&view(sampler, &a))?;
        let pb = predictor.predict(&view(sampler, &b))?;
        if pa != pb && (pa > pb) == (a.count > b.count) {
            n_correct += 1;
        }
        if (i + 1) % 1000 == 0 {
            log::info!("scored {}/{n_pairs} pairs", i + 1);
        }
    }
    Ok(PairOrderReport {
        n_pairs,
        n_correct,
        accuracy: n_correct as f64 / n_pairs as f64,
        redraws,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Detection {
    pub center: [usize; 3],
    pub predicted_count: u32,
    pub true_count: u32,
}

fn uniform_detections<P, R>(
    predictor: &P,
    sampler: &CaseSampler<'_>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Detection>>
where
    P: CountPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::Parameter("number of samples must be at least 1".into()));
    }
    (0..n)
        .map(|_| {
            let center = sampler.draw_uniform_center(rng)?;
            let true_count = sampler.count_at(center)?;
            let v = PatchView::new(sampler.case(), center, sampler.patch_size(), true_count);
            Ok(Detection {
                center,
                predicted_count: predictor.predict(&v)?,
                true_count,
            })
        })
        .collect()
}

/// Centre of the uniformly drawn patch with the largest predicted count;
/// ties go to the earliest draw.
pub fn detect_argmax<P, R>(predictor: &P, sampler: &CaseSampler<'_>, n: usize, rng: &mut R) -> Result<Detection>
where
    P: CountPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let all = uniform_detections(predictor, sampler, n, rng)?;
    let mut best = 0;
    for (i, d) in all.iter().enumerate() {
        if d.predicted_count > all[best].predicted_count {
            best = i;
        }
    }
    Ok(all[best].clone())
}

/// Empirical `q`-quantile with linear interpolation between order
/// statistics: position `(n − 1)·q` in the sorted values.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
}

/// Uniformly drawn patches whose predicted count is at least the `q`-quantile
/// of all predicted counts, in draw order.
pub fn detect_quantile<P, R>(
    predictor: &P,
    sampler: &CaseSampler<'_>,
    n: usize,
    q: f64,
    rng: &mut R,
) -> Result<Vec<Detection>>
where
    P: CountPredictor + ?Sized,
    R: Rng + ?Sized,
{
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("quantile must lie in (0, 1), got {q}")));
    }
    let all = uniform_detections(predictor, sampler, n, rng)?;
    let counts: Vec<f64> = all.iter().map(|d| f64::from(d.predicted_count)).collect();
    let threshold = quantile(&counts, q).expect("non-empty");
    Ok(all
        .into_iter()
        .filter(|d| f64::from(d.predicted_count) >= threshold)
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScatterRow {
    true_count: u32,
    predicted_count: u32,
}

pub fn scatter_csv(pairs: &[(u32, u32)]) -> String {
    let mut out = String::from("true_count,predicted_count\n");
    for (c, p) in pairs {
        out.push_str(&format!("{c},{p}\n"));
    }
    out
}

/// Writes `(true, predicted)` pairs as CSV for plotting.
pub fn export_scatter(pairs: &[(u32, u32)], path: &Path) -> Result<()> {
    write_atomic(path, scatter_csv(pairs).as_bytes())
}

pub fn read_scatter(path: &Path) -> Result<Vec<(u32, u32)>> {
    let bytes = read_file(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    rdr.deserialize::<ScatterRow>()
        .map(|r| {
            r.map(|r| (r.true_count, r.predicted_count))
                .map_err(|e| Error::Data(e.to_string()).at_path(path))
        })
        .collect()
}
