//! The patch-count network: three `conv → leaky ReLU → max-pool → dropout`
//! blocks followed by a single convolution that covers the whole remaining
//! feature volume and emits the log-rate `N`. The Poisson mean is `exp(N)`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::config::{fmt_f64, fmt_list, KvMap};
use crate::error::{Error, Result};
use crate::tensor::{
    conv3d_backward_with, conv3d_forward, dropout, dropout_backward, leaky_relu,
    leaky_relu_backward, maxpool3d_backward, maxpool3d_forward, DropoutMask, Mode, PoolCache,
    Tensor,
};

/// Standard deviation of the Gaussian kernel initialization.
pub const DEFAULT_INIT_STD: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub final_kernel: usize,
    pub leaky_slope: f64,
    pub count_cap: u32,
    /// `N` is clamped to `[-log_rate_clamp, log_rate_clamp]` before `exp`.
    pub log_rate_clamp: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            patch_size: 25,
            in_channels: 4,
            hidden_channels: vec![8, 8, 8],
            conv_kernel: 3,
            pool_window: 2,
            pool_stride: 1,
            final_kernel: 16,
            leaky_slope: 0.01,
            count_cap: 15_625,
            log_rate_clamp: 30.0,
        }
    }
}

impl ArchConfig {
    /// Spatial extent after every conv and pool of the hidden blocks, in
    /// order. Validates the whole layer chain.
    pub fn spatial_chain(&self) -> Result<Vec<usize>> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(Error::Config(format!(
                "hidden_channels must be a non-empty list of positive ints, got {:?}",
                self.hidden_channels
            )));
        }
        if self.conv_kernel == 0 || self.pool_window == 0 || self.pool_stride == 0 {
            return Err(Error::Config(
                "conv_kernel, pool_window and pool_stride must be positive".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !(self.log_rate_clamp > 0.0 && self.log_rate_clamp.is_finite()) {
            return Err(Error::Config("log_rate_clamp must be positive and finite".into()));
        }
        let mut size = self.patch_size;
        let mut chain = Vec::with_capacity(2 * self.hidden_channels.len());
        for layer in 0..self.hidden_channels.len() {
            if size < self.conv_kernel {
                return Err(Error::Config(format!(
                    "layer {layer}: extent {size} smaller than conv kernel {}",
                    self.conv_kernel
                )));
            }
            size = size - self.conv_kernel + 1;
            chain.push(size);
            if size < self.pool_window {
                return Err(Error::Config(format!(
                    "layer {layer}: extent {size} smaller than pool window {}",
                    self.pool_window
                )));
            }
            size = (size - self.pool_window) / self.pool_stride + 1;
            chain.push(size);
        }
        if size != self.final_kernel {
            return Err(Error::Config(format!(
                "layer chain ends at extent {size} but final_kernel is {}; \
                 patch_size {} is inconsistent with the stack",
                self.final_kernel, self.patch_size
            )));
        }
        let cap = (self.patch_size as u64).pow(3);
        if u64::from(self.count_cap) != cap {
            return Err(Error::Config(format!(
                "count_cap must equal patch_size^3 = {cap}, got {}",
                self.count_cap
            )));
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial_chain().map(|_| ())
    }

    pub fn input_dims(&self) -> [usize; 4] {
        let p = self.patch_size;
        [self.in_channels, p, p, p]
    }

    /// Kernel shapes in declared parameter order (hidden layers, then final).
    pub fn kernel_shapes(&self) -> Vec<[usize; 5]> {
        let k = self.conv_kernel;
        let mut prev = self.in_channels;
        let mut shapes = Vec::with_capacity(self.hidden_channels.len() + 1);
        for &h in &self.hidden_channels {
            shapes.push([h, prev, k, k, k]);
            prev = h;
        }
        let f = self.final_kernel;
        shapes.push([1, prev, f, f, f]);
        shapes
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("patch_size", self.patch_size);
        kv.insert("in_channels", self.in_channels);
        kv.insert("hidden_channels", fmt_list(&self.hidden_channels));
        kv.insert("conv_kernel", self.conv_kernel);
        kv.insert("pool_window", self.pool_window);
        kv.insert("pool_stride", self.pool_stride);
        kv.insert("final_kernel", self.final_kernel);
        kv.insert("leaky_slope", fmt_f64(self.leaky_slope));
        kv.insert("count_cap", self.count_cap);
        kv.insert("log_rate_clamp", fmt_f64(self.log_rate_clamp));
    }

    /// Reads the architecture keys from `kv`, defaulting absent ones. The
    /// count cap follows the patch size unless given explicitly.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = ArchConfig::default();
        let patch_size = kv.take_or("patch_size", d.patch_size)?;
        let cfg = ArchConfig {
            patch_size,
            in_channels: kv.take_or("in_channels", d.in_channels)?,
            hidden_channels: kv.take_list("hidden_channels")?.unwrap_or(d.hidden_channels),
            conv_kernel: kv.take_or("conv_kernel", d.conv_kernel)?,
            pool_window: kv.take_or("pool_window", d.pool_window)?,
            pool_stride: kv.take_or("pool_stride", d.pool_stride)?,
            final_kernel: kv.take_or("final_kernel", d.final_kernel)?,
            leaky_slope: kv.take_or("leaky_slope", d.leaky_slope)?,
            count_cap: kv.take_or("count_cap", (patch_size as u32).saturating_pow(3))?,
            log_rate_clamp: kv.take_or("log_rate_clamp", d.log_rate_clamp)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// All learnable kernels and biases, hidden layers first, final layer last.
///
/// Every mutable borrow stamps a fresh generation so that a forward cache
/// taken before an update is rejected by [`Network::backward`].
#[derive(Debug)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    generation: u64,
}

/// Gradients share the parameter layout.
pub type ParamGrads = NetworkParams;

impl Clone for NetworkParams {
    fn clone(&self) -> Self {
        NetworkParams {
            layers: self.layers.clone(),
            generation: self.generation,
        }
    }
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn from_layers(config: &ArchConfig, layers: Vec<Layer>) -> Result<Self> {
        let shapes = config.kernel_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (n, (layer, shape)) in layers.iter().zip(&shapes).enumerate() {
            if layer.kernels.dims() != shape || layer.bias.len() != shape[0] {
                return Err(Error::Shape(format!(
                    "layer {n}: kernels {:?} / {} biases, expected {shape:?} / {}",
                    layer.kernels.dims(),
                    layer.bias.len(),
                    shape[0]
                )));
            }
        }
        Ok(NetworkParams {
            layers,
            generation: next_generation(),
        })
    }

    pub fn zeros(config: &ArchConfig) -> Self {
        let layers = config
            .kernel_shapes()
            .into_iter()
            .map(|shape| Layer {
                kernels: Tensor::zeros(&shape),
                bias: vec![0.0; shape[0]],
            })
            .collect();
        NetworkParams {
            layers,
            generation: next_generation(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernels.len() + l.bias.len())
            .sum()
    }

    /// Flat views in declared order: each layer's kernels then its bias.
    pub fn flat_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernels.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flat_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| [l.kernels.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("parameter sets differ in layer count".into()));
        }
        for (a, b) in self.layers_mut().iter_mut().zip(&other.layers) {
            if a.kernels.dims() != b.kernels.dims() || a.bias.len() != b.bias.len() {
                return Err(Error::Shape("parameter sets differ in layer shapes".into()));
            }
            for (x, y) in a.kernels.data_mut().iter_mut().zip(b.kernels.data()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }
}

/// Kernels drawn i.i.d. from N(0, 0.001²) with the seeded generator; biases
/// start at zero.
pub fn init_params(config: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    init_params_with_std(config, seed, DEFAULT_INIT_STD)
}

pub fn init_params_with_std(config: &ArchConfig, seed: u64, std: f64) -> Result<NetworkParams> {
    config.validate()?;
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Parameter(format!("init std {std}: {e}")))?;
    let mut rng = Pcg64::seed_from_u64(seed);
    let layers = config
        .kernel_shapes()
        .into_iter()
        .map(|shape| Layer {
            kernels: Tensor::from_fn(&shape, |_| normal.sample(&mut rng)),
            bias: vec![0.0; shape[0]],
        })
        .collect();
    NetworkParams::from_layers(config, layers)
}

#[derive(Clone, Debug)]
struct HiddenCache {
    pre_activation: Tensor,
    pool: PoolCache,
    mask: DropoutMask,
    output: Tensor,
}

/// Intermediate state of one forward pass, needed for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    input: Tensor,
    hidden: Vec<HiddenCache>,
    log_rate: f64,
}

impl ForwardCache {
    pub fn log_rate(&self) -> f64 {
        self.log_rate
    }

    /// Spatial extent after each conv and each pool, in order.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.hidden
            .iter()
            .flat_map(|h| [h.pre_activation.dims()[1], h.pool.output_dims()[1]])
            .collect()
    }

    /// Convolution outputs before the nonlinearity, one per hidden block.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Tensor> {
        self.hidden.iter().map(|h| &h.pre_activation)
    }

    pub fn pool_caches(&self) -> impl Iterator<Item = &PoolCache> {
        self.hidden.iter().map(|h| &h.pool)
    }

    pub fn dropout_masks(&self) -> impl Iterator<Item = &DropoutMask> {
        self.hidden.iter().map(|h| &h.mask)
    }
}

/// `exp(clamp(N))`.
pub fn rate_from_log(log_rate: f64, clamp: f64) -> f64 {
    log_rate.clamp(-clamp, clamp).exp()
}

/// `floor(min(λ, cap))`.
pub fn count_from_rate(rate: f64, cap: u32) -> u32 {
    if rate.is_nan() {
        return 0;
    }
    rate.min(f64::from(cap)).max(0.0).floor() as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ArchConfig,
    params: NetworkParams,
}

impl Network {
    pub fn new(config: ArchConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        let shapes = config.kernel_shapes();
        let ok = params.layers.len() == shapes.len()
            && params
                .layers
                .iter()
                .zip(&shapes)
                .all(|(l, s)| l.kernels.dims() == s && l.bias.len() == s[0]);
        if !ok {
            return Err(Error::ConfigMismatch(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        Ok(Network { config, params })
    }

    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    /// Runs the stack on one patch `[C, P, P, P]`, returning the log-rate.
    /// Dropout is applied after each pooled hidden activation in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Tensor,
        mode: Mode,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<(f64, ForwardCache)> {
        if input.dims() != self.config.input_dims() {
            return Err(Error::Shape(format!(
                "network input must be {:?}, got {:?}",
                self.config.input_dims(),
                input.dims()
            )));
        }
        let slope = self.config.leaky_slope;
        let (hidden_layers, final_layer) = self.params.layers.split_at(self.params.layers.len() - 1);
        let mut hidden = Vec::with_capacity(hidden_layers.len());
        for layer in hidden_layers {
            let x = hidden.last().map_or(input, |h: &HiddenCache| &h.output);
            let pre_activation = conv3d_forward(x, &layer.kernels, &layer.bias)?;
            let activated = leaky_relu(&pre_activation, slope)?;
            let (pooled, pool) =
                maxpool3d_forward(&activated, self.config.pool_window, self.config.pool_stride)?;
            let (output, mask) = dropout(&pooled, dropout_rate, mode, rng)?;
            hidden.push(HiddenCache {
                pre_activation,
                pool,
                mask,
                output,
            });
        }
        let last = hidden.last().map_or(input, |h| &h.output);
        let out = conv3d_forward(last, &final_layer[0].kernels, &final_layer[0].bias)?;
        debug_assert_eq!(out.len(), 1);
        let log_rate = out.data()[0];
        let cache = ForwardCache {
            generation: self.params.generation,
            input: input.clone(),
            hidden,
            log_rate,
        };
        Ok((log_rate, cache))
    }

    /// Deterministic inference pass (no dropout).
    pub fn forward_eval(&self, input: &Tensor) -> Result<f64> {
        let mut unused = Pcg64::seed_from_u64(0);
        self.forward(input, Mode::Eval, 0.0, &mut unused)
            .map(|(n, _)| n)
    }

    /// Gradient of `d_log_rate * N` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, d_log_rate: f64) -> Result<ParamGrads> {
        let mut grads = NetworkParams::zeros(&self.config);
        self.accumulate_backward(cache, d_log_rate, &mut grads)?;
        Ok(grads)
    }

    /// As [`Network::backward`], adding into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        d_log_rate: f64,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        if cache.generation != self.params.generation {
            return Err(Error::Usage(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let n_layers = self.params.layers.len();
        if cache.hidden.len() + 1 != n_layers || grads.layers.len() != n_layers {
            return Err(Error::Usage("forward cache does not match this network".into()));
        }
        let slope = self.config.leaky_slope;
        let grad_layers = grads.layers_mut();

        let final_layer = &self.params.layers[n_layers - 1];
        let final_input = cache.hidden.last().map_or(&cache.input, |h| &h.output);
        let upstream = Tensor::filled(&[1, 1, 1, 1], d_log_rate);
        let g = conv3d_backward_with(final_input, &final_layer.kernels, &upstream, !cache.hidden.is_empty())?;
        add_layer_grads(&mut grad_layers[n_layers - 1], &g.kernels, &g.bias);
        let mut grad = g.input;

        for (l, h) in cache.hidden.iter().enumerate().rev() {
            let grad_output = grad
                .take()
                .expect("upstream gradient exists for every hidden layer");
            let d_pooled = dropout_backward(&h.mask, &grad_output)?;
            let d_activated = maxpool3d_backward(&h.pool, &d_pooled)?;
            let d_pre = leaky_relu_backward(&h.pre_activation, &d_activated, slope)?;
            let x = if l == 0 { &cache.input } else { &cache.hidden[l - 1].output };
            let g = conv3d_backward_with(x, &self.params.layers[l].kernels, &d_pre, l > 0)?;
            add_layer_grads(&mut grad_layers[l], &g.kernels, &g.bias);
            grad = g.input;
        }
        Ok(())
    }

    /// Poisson mean `exp(clamp(N))` in eval mode.
    pub fn predict_rate(&self, input: &Tensor) -> Result<f64> {
        let n = self.forward_eval(input)?;
        Ok(rate_from_log(n, self.config.log_rate_clamp))
    }

    /// Floored and capped integer count estimate.
    pub fn predict_count(&self, input: &Tensor) -> Result<u32> {
        Ok(count_from_rate(self.predict_rate(input)?, self.config.count_cap))
    }
}

fn add_layer_grads(dst: &mut Layer, kernels: &Tensor, bias: &[f64]) {
    for (a, b) in dst.kernels.data_mut().iter_mut().zip(kernels.data()) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(bias) {
        *a += b;
    }
}
