//! Poisson likelihood objective, regularization, Adam, and the mini-batch
//! training loop with windowed early stopping.

use log::{debug, info};
use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::checkpoint::{BestWindow, Checkpoint};
use crate::config::{fmt_f64, KvMap};
use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::model::{rate_from_log, Network, NetworkParams, ParamGrads};
use crate::tensor::Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l1: f64,
    pub l2: f64,
    pub dropout_rate: f64,
    pub max_iterations: u64,
    /// Iterations per early-stopping window.
    pub window: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            learning_rate: 1e-4,
            l1: 1e-8,
            l2: 1e-6,
            dropout_rate: 0.5,
            max_iterations: 15_000,
            window: 1_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0 && self.l1.is_finite() && self.l2.is_finite()) {
            return fail("l1 and l2 must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("batch_size", self.batch_size);
        kv.insert("learning_rate", fmt_f64(self.learning_rate));
        kv.insert("l1", fmt_f64(self.l1));
        kv.insert("l2", fmt_f64(self.l2));
        kv.insert("dropout_rate", fmt_f64(self.dropout_rate));
        kv.insert("max_iterations", self.max_iterations);
        kv.insert("window", self.window);
        kv.insert("adam_beta1", fmt_f64(self.adam_beta1));
        kv.insert("adam_beta2", fmt_f64(self.adam_beta2));
        kv.insert("adam_eps", fmt_f64(self.adam_eps));
        kv.insert("seed", self.seed);
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            l1: kv.take_or("l1", d.l1)?,
            l2: kv.take_or("l2", d.l2)?,
            dropout_rate: kv.take_or("dropout_rate", d.dropout_rate)?,
            max_iterations: kv.take_or("max_iterations", d.max_iterations)?,
            window: kv.take_or("window", d.window)?,
            adam_beta1: kv.take_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.take_or("adam_beta2", d.adam_beta2)?,
            adam_eps: kv.take_or("adam_eps", d.adam_eps)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean Poisson negative log-likelihood of counts under rates `exp(N)`,
/// with its gradient with respect to each `N`.
///
/// `loss = (1/b) Σ [λ_i − c_i·N_i + ln(c_i!)]`, `dN_i = (λ_i − c_i)/b`, where
/// `λ_i = exp(clamp(N_i))`. The `ln(c!)` term does not depend on the
/// parameters but keeps the reported value a true likelihood.
pub fn poisson_nll(log_rates: &[f64], counts: &[u32], clamp: f64) -> Result<(f64, Vec<f64>)> {
    if log_rates.len() != counts.len() {
        return Err(Error::Data(format!(
            "{} log-rates for {} counts",
            log_rates.len(),
            counts.len()
        )));
    }
    if log_rates.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let b = log_rates.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b);
    for (&n, &c) in log_rates.iter().zip(counts) {
        let (term, g) = nll_term(n, c, clamp, b);
        loss += term;
        grad.push(g);
    }
    Ok((loss / b as f64, grad))
}

/// One sample's unscaled NLL term and its share `(λ − c)/b` of the gradient.
fn nll_term(n: f64, c: u32, clamp: f64, b: usize) -> (f64, f64) {
    let c = f64::from(c);
    let lambda = rate_from_log(n, clamp);
    (lambda - c * n + libm::lgamma(c + 1.0), (lambda - c) / b as f64)
}

/// L1 and L2 penalty over kernel weights (biases excluded), and its
/// gradient laid out like the parameters. `sign(0)` is taken as 0.
pub fn regularization(params: &NetworkParams, l1: f64, l2: f64) -> (f64, ParamGrads) {
    let mut grads = params.clone();
    let mut penalty = 0.0;
    for layer in grads.layers_mut() {
        for w in layer.kernels.data_mut() {
            let v = *w;
            penalty += l1 * v.abs() + l2 * v * v;
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            *w = l1 * sign + 2.0 * l2 * v;
        }
        layer.bias.fill(0.0);
    }
    (penalty, grads)
}

/// `nll` plus the regularization penalty, with the penalty's gradient.
pub fn regularized_loss(params: &NetworkParams, nll: f64, l1: f64, l2: f64) -> (f64, ParamGrads) {
    let (penalty, grads) = regularization(params, l1, l2);
    (nll + penalty, grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let mut m = params.clone();
        for s in m.flat_slices_mut() {
            s.fill(0.0);
        }
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.layers().len() != params.layers().len()
        || grads.num_values() != params.num_values()
        || state.m.num_values() != params.num_values()
    {
        return Err(Error::Shape("adam: gradient/state layout differs from parameters".into()));
    }
    if let Some(pos) = grads
        .flat_slices()
        .iter()
        .flat_map(|s| s.iter())
        .position(|g| !g.is_finite())
    {
        return Err(Error::NonFinite(format!(
            "gradient entry {pos} is not finite at Adam step {}",
            state.t + 1
        )));
    }
    state.t += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    let g_slices = grads.flat_slices();
    let m_slices = state.m.flat_slices_mut();
    let v_slices = state.v.flat_slices_mut();
    let p_slices = params.flat_slices_mut();
    for (((p, g), m), v) in p_slices.into_iter().zip(g_slices).zip(m_slices).zip(v_slices) {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Supplies training mini-batches.
pub trait BatchSource {
    fn next_batch(&mut self, size: usize, rng: &mut Pcg64) -> Result<Vec<PatchSample>>;
}

/// The same samples every iteration (used to check the optimizer can fit).
pub struct FixedBatch(pub Vec<PatchSample>);

impl BatchSource for FixedBatch {
    fn next_batch(&mut self, _size: usize, _rng: &mut Pcg64) -> Result<Vec<PatchSample>> {
        if self.0.is_empty() {
            return Err(Error::Data("fixed batch is empty".into()));
        }
        Ok(self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// Stop and restore the snapshot taken after window `restore` (0-based).
    Stop { restore: usize },
}

/// Windowed early-stopping rule: stop as soon as a window's mean cost
/// exceeds the previous window's, and fall back to the lowest-mean window.
#[derive(Clone, Debug, Default)]
pub struct EarlyStopping {
    means: Vec<f64>,
    best: Option<usize>,
}

impl EarlyStopping {
    pub fn observe(&mut self, window_mean: f64) -> StopDecision {
        let idx = self.means.len();
        let increased = self.means.last().is_some_and(|&prev| window_mean > prev);
        self.means.push(window_mean);
        if !increased && self.best.is_none_or(|b| window_mean < self.means[b]) {
            self.best = Some(idx);
        }
        match (increased, self.best) {
            (true, Some(best)) => StopDecision::Stop { restore: best },
            _ => StopDecision::Continue,
        }
    }

    /// Index of the lowest-mean window seen so far.
    pub fn best(&self) -> Option<usize> {
        self.best
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    /// Iteration count at the end of the window.
    pub iteration: u64,
    pub mean_nll: f64,
    pub mean_total_loss: f64,
    /// False for a trailing window cut short by `max_iterations`.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final state; parameters are the restored best window when training
    /// stopped early.
    pub checkpoint: Checkpoint,
    pub windows: Vec<WindowRecord>,
    /// Mean NLL of every iteration's mini-batch, in order.
    pub iteration_nll: Vec<f64>,
    pub iterations_run: u64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.windows)
    }
}

pub fn trace_csv(windows: &[WindowRecord]) -> String {
    let mut out = String::from("iteration,window_mean_nll,window_mean_total_loss\n");
    for w in windows {
        out.push_str(&format!(
            "{},{},{}\n",
            w.iteration,
            fmt_f64(w.mean_nll),
            fmt_f64(w.mean_total_loss)
        ));
    }
    out
}

struct Snapshot {
    params: NetworkParams,
    adam: AdamState,
    iteration: u64,
    rng: Pcg64,
}

/// Runs mini-batch training until the early-stopping rule fires or
/// `max_iterations` is reached.
///
/// On a non-finite loss or gradient, returns [`Error::Diverged`] carrying the
/// last completed-window checkpoint.
pub fn train(
    network: Network,
    source: &mut dyn BatchSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut network = network;
    let arch = network.config().clone();
    let clamp = arch.log_rate_clamp;
    let mut rng = Pcg64::seed_from_u64(config.seed);
    let mut adam = AdamState::new(network.params());
    let mut stopper = EarlyStopping::default();
    let mut windows = Vec::new();
    let mut iteration_nll = Vec::new();
    let mut best_snapshot: Option<Snapshot> = None;
    let mut last_good = Snapshot {
        params: network.params().clone(),
        adam: adam.clone(),
        iteration: 0,
        rng: rng.clone(),
    };
    let (mut win_nll, mut win_total, mut win_len) = (0.0, 0.0, 0u64);
    let mut stopped = false;
    let mut iteration = 0u64;

    let diverged = |snap: &Snapshot, at: u64, why: String| -> Error {
        let ckpt = Checkpoint {
            arch: arch.clone(),
            train: config.clone(),
            params: snap.params.clone(),
            adam: snap.adam.clone(),
            iteration: snap.iteration,
            rng: snap.rng.clone(),
            best_window: None,
        };
        Error::Diverged {
            iteration: at,
            reason: why,
            last_good: Box::new(ckpt),
        }
    };

    while iteration < config.max_iterations {
        iteration += 1;
        let batch = source.next_batch(config.batch_size, &mut rng)?;
        // Each sample's gradient depends only on its own log-rate, so its
        // backward pass runs straight after its forward pass and only one
        // activation cache is alive at a time.
        let (penalty, mut grads) = regularization(network.params(), config.l1, config.l2);
        let mut log_rates = Vec::with_capacity(batch.len());
        for sample in &batch {
            let (n, cache) =
                network.forward(&sample.input, Mode::Train, config.dropout_rate, &mut rng)?;
            let (_, d) = nll_term(n, sample.count, clamp, batch.len());
            network.accumulate_backward(&cache, d, &mut grads)?;
            log_rates.push(n);
        }
        let counts: Vec<u32> = batch.iter().map(|s| s.count).collect();
        let (nll, _) = poisson_nll(&log_rates, &counts, clamp)?;
        let total = nll + penalty;
        if !total.is_finite() {
            return Err(diverged(&last_good, iteration, format!("loss {total}")));
        }
        let params = network.params_mut();
        if let Err(e) = adam_step(params, &grads, &mut adam, config) {
            return Err(diverged(&last_good, iteration, e.to_string()));
        }

        iteration_nll.push(nll);
        win_nll += nll;
        win_total += total;
        win_len += 1;
        if iteration.is_multiple_of(100) {
            info!("iteration {iteration}: batch nll {nll:.4}, total {total:.4}");
        }
        if win_len == config.window {
            let record = WindowRecord {
                iteration,
                mean_nll: win_nll / win_len as f64,
                mean_total_loss: win_total / win_len as f64,
                complete: true,
            };
            info!(
                "window {} ending at iteration {iteration}: mean nll {:.4}, mean cost {:.4}",
                windows.len() + 1,
                record.mean_nll,
                record.mean_total_loss
            );
            let decision = stopper.observe(record.mean_total_loss);
            windows.push(record);
            (win_nll, win_total, win_len) = (0.0, 0.0, 0);
            last_good = Snapshot {
                params: network.params().clone(),
                adam: adam.clone(),
                iteration,
                rng: rng.clone(),
            };
            if stopper.best() == Some(windows.len() - 1) {
                best_snapshot = Some(Snapshot {
                    params: last_good.params.clone(),
                    adam: last_good.adam.clone(),
                    iteration,
                    rng: rng.clone(),
                });
            }
            if let StopDecision::Stop { restore } = decision {
                debug!("early stop after window {}, restoring window {}", windows.len(), restore + 1);
                stopped = true;
                break;
            }
        }
    }
    if win_len > 0 {
        windows.push(WindowRecord {
            iteration,
            mean_nll: win_nll / win_len as f64,
            mean_total_loss: win_total / win_len as f64,
            complete: false,
        });
    }

    let best_window = stopper.best().map(|idx| BestWindow {
        index: idx as u64,
        end_iteration: windows[idx].iteration,
        mean_nll: windows[idx].mean_nll,
        mean_total_loss: windows[idx].mean_total_loss,
    });
    let (params, adam_state, ckpt_iteration) = match best_snapshot.filter(|_| stopped) {
        Some(snap) => (snap.params, snap.adam, snap.iteration),
        None => (network.into_params(), adam, iteration),
    };
    let checkpoint = Checkpoint {
        arch,
        train: config.clone(),
        params,
        adam: adam_state,
        iteration: ckpt_iteration,
        rng,
        best_window,
    };
    Ok(TrainOutcome {
        checkpoint,
        windows,
        iteration_nll,
        iterations_run: iteration,
        stopped_early: stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params_with_std, ArchConfig, Layer};
    use crate::tensor::Tensor;
    use rand::RngExt;

    #[test]
    fn nll_trivial_values() {
        let (loss, grad) = poisson_nll(&[0.0], &[0], 30.0).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad, vec![1.0]);
        let (_, grad) = poisson_nll(&[0.0], &[3], 30.0).unwrap();
        assert_eq!(grad, vec![-2.0]);
    }

    #[test]
    fn nll_ln2_case() {
        let ln2 = std::f64::consts::LN_2;
        let (loss, _) = poisson_nll(&[ln2], &[2], 30.0).unwrap();
        // 2 − 2·ln2 + ln(2!)
        let expected = 2.0 - 2.0 * ln2 + ln2;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.306853).abs() < 1e-6);
    }

    #[test]
    fn nll_rejects_bad_batches() {
        assert!(matches!(poisson_nll(&[], &[], 30.0), Err(Error::Data(_))));
        assert!(poisson_nll(&[0.0, 1.0], &[1], 30.0).is_err());
    }

    fn one_weight(w: f64) -> (ArchConfig, NetworkParams) {
        let cfg = ArchConfig {
            patch_size: 5,
            hidden_channels: vec![1],
            in_channels: 1,
            final_kernel: 2,
            count_cap: 125,
            ..ArchConfig::default()
        };
        let layers = vec![
            Layer {
                kernels: Tensor::zeros(&[1, 1, 3, 3, 3]),
                bias: vec![5.0],
            },
            Layer {
                kernels: Tensor::zeros(&[1, 1, 2, 2, 2]),
                bias: vec![-3.0],
            },
        ];
        let mut p = NetworkParams::from_layers(&cfg, layers).unwrap();
        p.layers_mut()[0].kernels.data_mut()[0] = w;
        (cfg, p)
    }

    #[test]
    fn regularization_hand_arithmetic() {
        let (_, p) = one_weight(2.0);
        let (loss, g) = regularized_loss(&p, 0.0, 0.5, 0.25);
        assert_eq!(loss, 2.0);
        assert_eq!(g.layers()[0].kernels.data()[0], 1.5);
        assert_eq!(g.layers()[0].kernels.data()[1], 0.0);
        assert_eq!(g.layers()[0].bias, vec![0.0]);
        let (loss, _) = regularized_loss(&p, 0.75, 0.0, 0.0);
        assert_eq!(loss, 0.75);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (_, mut p) = one_weight(0.3);
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let grads = AdamState::new(&p).m;
        adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [0.37, -5.0, 1e-3] {
            let (_, mut p) = one_weight(0.3);
            let mut state = AdamState::new(&p);
            let mut grads = AdamState::new(&p).m;
            grads.layers_mut()[0].kernels.data_mut()[0] = g;
            adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
            let delta = (p.layers()[0].kernels.data()[0] - 0.3).abs();
            let expected = cfg.learning_rate * g.abs() / (g.abs() + cfg.adam_eps);
            assert!((delta - expected).abs() <= 1e-15, "{delta} vs {expected}");
            assert!((delta - cfg.learning_rate).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let (_, mut p) = one_weight(0.3);
        let mut state = AdamState::new(&p);
        let mut grads = AdamState::new(&p).m;
        grads.layers_mut()[1].bias[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &grads, &mut state, &TrainConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn adam_matches_textbook_loop() {
        let cfg = ArchConfig {
            patch_size: 11,
            hidden_channels: vec![2, 2, 2],
            final_kernel: 2,
            count_cap: 1331,
            ..ArchConfig::default()
        };
        let tc = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut params = init_params_with_std(&cfg, 5, 0.5).unwrap();
        let mut flat: Vec<f64> = params.flat_slices().concat();
        let mut m = vec![0.0; flat.len()];
        let mut v = vec![0.0; flat.len()];
        let mut state = AdamState::new(&params);
        let mut rng = Pcg64::seed_from_u64(3);
        for t in 1..=100 {
            let g: Vec<f64> = (0..flat.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut grads = AdamState::new(&params).m;
            let mut k = 0;
            for s in grads.flat_slices_mut() {
                for x in s.iter_mut() {
                    *x = g[k];
                    k += 1;
                }
            }
            adam_step(&mut params, &grads, &mut state, &tc).unwrap();
            for j in 0..flat.len() {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                flat[j] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got: Vec<f64> = params.flat_slices().concat();
        for (a, b) in got.iter().zip(&flat) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::default();
        assert_eq!(s.observe(5.0), StopDecision::Continue);
        assert_eq!(s.observe(4.0), StopDecision::Continue);
        assert_eq!(s.observe(4.1), StopDecision::Stop { restore: 1 });

        let mut s = EarlyStopping::default();
        for i in 0..15 {
            assert_eq!(s.observe(10.0 - i as f64), StopDecision::Continue);
        }
        assert_eq!(s.best(), Some(14));

        // Equal means do not count as an increase.
        let mut s = EarlyStopping::default();
        s.observe(3.0);
        assert_eq!(s.observe(3.0), StopDecision::Continue);
        assert_eq!(s.best(), Some(0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut kv = KvMap::default();
        TrainConfig::default().to_kv(&mut kv);
        let mut parsed = KvMap::parse(&kv.to_canonical_text()).unwrap();
        assert_eq!(TrainConfig::from_kv(&mut parsed).unwrap(), TrainConfig::default());
    }
}
