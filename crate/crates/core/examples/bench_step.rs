use std::time::Instant;

use lesion_count::model::{init_params_with_std, ArchConfig, Network};
use lesion_count::tensor::{Mode, Tensor};
use rand::SeedableRng;
use rand_pcg::Pcg64;

fn main() {
    lesion_count::runtime::tune_allocator();
    let cfg = ArchConfig::default();
    let net = Network::new(cfg.clone(), init_params_with_std(&cfg, 1, 0.05).unwrap()).unwrap();
    let x = Tensor::from_fn(&cfg.input_dims(), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let mut rng = Pcg64::seed_from_u64(3);
    let n = 20;
    let t = Instant::now();
    for _ in 0..n {
        let (_, cache) = net.forward(&x, Mode::Train, 0.5, &mut rng).unwrap();
        let _ = net.backward(&cache, 1.0).unwrap();
    }
    println!("fwd+bwd per sample: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    let t = Instant::now();
    for _ in 0..n {
        let _ = net.forward_eval(&x).unwrap();
    }
    println!("eval fwd per sample: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}
