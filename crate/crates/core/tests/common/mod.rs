//! Finite-difference gradient checks shared by the property tests and the
//! acceptance suite. Each check builds a random instance from a seed and
//! returns the relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! over every gradient entry, or `None` when the instance must be rejected.

#![allow(dead_code)]

use lesion_count::model::{init_params_with_std, ArchConfig, Network};
use lesion_count::tensor::{
    conv3d_backward, conv3d_forward, leaky_relu, leaky_relu_backward, maxpool3d_backward,
    maxpool3d_forward, Mode, Tensor,
};
use lesion_count::train::poisson_nll;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `f` in every coordinate of `x`.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(x);
            x[i] = orig - H;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn normal_vec(rng: &mut Pcg64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

fn weighted(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Conv3d: gradients with respect to input, kernels and bias of `Σ w·out`.
pub fn conv_check(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let d = rng.random_range(k..=k + 3);
    let input = Tensor::new(&[c, d, d, d], normal_vec(&mut rng, c * d * d * d)).unwrap();
    let kernels = Tensor::new(&[o, c, k, k, k], normal_vec(&mut rng, o * c * k * k * k)).unwrap();
    let bias = normal_vec(&mut rng, o);
    let e = d - k + 1;
    let w = normal_vec(&mut rng, o * e * e * e);
    let upstream = Tensor::new(&[o, e, e, e], w.clone()).unwrap();
    let g = conv3d_backward(&input, &kernels, &upstream).unwrap();

    let mut analytic = g.input.unwrap().into_data();
    analytic.extend_from_slice(g.kernels.data());
    analytic.extend_from_slice(&g.bias);

    let mut x = input.data().to_vec();
    let mut numeric = numeric_grad(&mut x, |x| {
        let t = Tensor::new(&[c, d, d, d], x.to_vec()).unwrap();
        weighted(&conv3d_forward(&t, &kernels, &bias).unwrap(), &w)
    });
    let mut kv = kernels.data().to_vec();
    numeric.extend(numeric_grad(&mut kv, |kv| {
        let kt = Tensor::new(&[o, c, k, k, k], kv.to_vec()).unwrap();
        weighted(&conv3d_forward(&input, &kt, &bias).unwrap(), &w)
    }));
    let mut b = bias.clone();
    numeric.extend(numeric_grad(&mut b, |b| {
        weighted(&conv3d_forward(&input, &kernels, b).unwrap(), &w)
    }));
    rel_err(&analytic, &numeric)
}

/// Max-pool on distinct values spaced far wider than `H`, so no perturbation
/// can change a window's winner.
pub fn pool_check(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let window = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let d = rng.random_range(window..=window + 4);
    let n = c * d * d * d;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let values: Vec<f64> = order.iter().map(|&i| i as f64 * 0.01 - 1.0).collect();
    let input = Tensor::new(&[c, d, d, d], values).unwrap();
    let (out, cache) = maxpool3d_forward(&input, window, stride).unwrap();
    let w = normal_vec(&mut rng, out.len());
    let upstream = Tensor::new(out.dims(), w.clone()).unwrap();
    let analytic = maxpool3d_backward(&cache, &upstream).unwrap().into_data();
    let mut x = input.data().to_vec();
    let numeric = numeric_grad(&mut x, |x| {
        let t = Tensor::new(&[c, d, d, d], x.to_vec()).unwrap();
        weighted(&maxpool3d_forward(&t, window, stride).unwrap().0, &w)
    });
    rel_err(&analytic, &numeric)
}

/// Leaky ReLU on inputs kept at least 0.01 away from the kink.
pub fn leaky_check(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = rng.random_range(1..=64);
    let slope = rng.random_range(0.001..0.5);
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.01..2.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    let input = Tensor::new(&[n], values).unwrap();
    let w = normal_vec(&mut rng, n);
    let upstream = Tensor::new(&[n], w.clone()).unwrap();
    let analytic = leaky_relu_backward(&input, &upstream, slope).unwrap().into_data();
    let mut x = input.data().to_vec();
    let numeric = numeric_grad(&mut x, |x| {
        let t = Tensor::new(&[n], x.to_vec()).unwrap();
        weighted(&leaky_relu(&t, slope).unwrap(), &w)
    });
    rel_err(&analytic, &numeric)
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        patch_size: 12,
        in_channels: 2,
        hidden_channels: vec![2, 3, 2],
        final_kernel: 3,
        count_cap: 1728,
        ..ArchConfig::default()
    }
}

/// Sign pattern of every pre-activation plus every pool winner.
fn activation_pattern(net: &Network, input: &Tensor, dropout_seed: u64) -> (Vec<bool>, Vec<u32>) {
    let mut rng = Pcg64::seed_from_u64(dropout_seed);
    let (_, cache) = net.forward(input, Mode::Train, 0.5, &mut rng).unwrap();
    let signs = cache
        .pre_activations()
        .flat_map(|t| t.data().iter().map(|&v| v >= 0.0))
        .collect();
    let winners = cache.pool_caches().flat_map(|p| p.argmax().to_vec()).collect();
    (signs, winners)
}

/// Whole network in train mode (fixed dropout mask), gradient of `N` with
/// respect to every kernel and bias. Rejected when any perturbation flips an
/// activation sign or a pool winner.
pub fn network_check(seed: u64) -> Option<f64> {
    let arch = small_arch();
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut params = init_params_with_std(&arch, seed, 0.3).unwrap();
    for layer in params.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let mut net = Network::new(arch.clone(), params).unwrap();
    let p = arch.patch_size;
    let input = Tensor::new(
        &[arch.in_channels, p, p, p],
        normal_vec(&mut rng, arch.in_channels * p * p * p),
    )
    .unwrap();
    let dropout_seed: u64 = rng.random();

    let mut drng = Pcg64::seed_from_u64(dropout_seed);
    let (_, cache) = net.forward(&input, Mode::Train, 0.5, &mut drng).unwrap();
    let grads = net.backward(&cache, 1.0).unwrap();
    let analytic: Vec<f64> = grads.flat_slices().concat();
    let base_pattern = activation_pattern(&net, &input, dropout_seed);

    let n = net.params().num_values();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let mut side = [0.0; 2];
        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
            let orig = set_param(&mut net, i, None);
            set_param(&mut net, i, Some(orig + sign * H));
            if activation_pattern(&net, &input, dropout_seed) != base_pattern {
                return None;
            }
            let mut drng = Pcg64::seed_from_u64(dropout_seed);
            side[s] = net.forward(&input, Mode::Train, 0.5, &mut drng).unwrap().0;
            set_param(&mut net, i, Some(orig));
        }
        numeric.push((side[0] - side[1]) / (2.0 * H));
    }
    Some(rel_err(&analytic, &numeric))
}

/// Reads parameter `i` in flat order, optionally overwriting it. Returns the
/// value held before the call.
fn set_param(net: &mut Network, mut i: usize, value: Option<f64>) -> f64 {
    for slice in net.params_mut().flat_slices_mut() {
        if i < slice.len() {
            let old = slice[i];
            if let Some(v) = value {
                slice[i] = v;
            }
            return old;
        }
        i -= slice.len();
    }
    panic!("parameter index out of range");
}

/// Poisson NLL with respect to the log-rates of a random batch.
pub fn nll_check(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let b = rng.random_range(1..=16);
    let n: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..8.0)).collect();
    let c: Vec<u32> = (0..b).map(|_| rng.random_range(0..3000)).collect();
    let (_, analytic) = poisson_nll(&n, &c, 30.0).unwrap();
    let mut x = n.clone();
    let numeric = numeric_grad(&mut x, |x| poisson_nll(x, &c, 30.0).unwrap().0);
    rel_err(&analytic, &numeric)
}

/// Largest deviation of the NLL gradient from `(exp(N) − c)/b`, relative to
/// the magnitude of the closed form.
pub fn nll_closed_form_deviation(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let b = rng.random_range(1..=32);
    let n: Vec<f64> = (0..b).map(|_| rng.random_range(-10.0..10.0)).collect();
    let c: Vec<u32> = (0..b).map(|_| rng.random_range(0..16_000)).collect();
    let (_, grad) = poisson_nll(&n, &c, 30.0).unwrap();
    grad.iter()
        .zip(n.iter().zip(&c))
        .map(|(&g, (&ni, &ci))| {
            let expect = (ni.exp() - f64::from(ci)) / b as f64;
            (g - expect).abs() / expect.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}
