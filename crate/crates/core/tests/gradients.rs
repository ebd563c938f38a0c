//! Finite-difference checks of the unrolled CSC backward pass.

use cscnet_core::{ConvDictionary, CscLayer, FistaConfig, Tensor};
use cscnet_oracle::{central_difference, median, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Median relative error of directional derivatives in `x` and in the
/// kernel for one random layer.
fn layer_fd_errors(k_iters: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dict = ConvDictionary::random(2, 3, 3, 1, &mut rng).unwrap();
    let cfg = FistaConfig::new(0.1, k_iters);
    let mut layer = CscLayer::new(dict.clone(), cfg, (6, 6), seed).unwrap();
    let x = random_tensor([1, 2, 6, 6], &mut rng);
    let out = layer.forward(&x).unwrap();
    let g = random_tensor(out.shape(), &mut rng);
    let grads = layer.backward(&g).unwrap();
    let step = layer.cached_step();

    let loss_x = |xs: &[f64]| {
        let xt = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
        let tr = cscnet_core::fista::solve(&dict, &xt, &cfg, Some(step)).unwrap();
        tr.output().inner(&g).unwrap()
    };
    let loss_a = |ks: &[f64]| {
        let d = ConvDictionary::new(Tensor::from_vec(dict.kernel().shape(), ks.to_vec()).unwrap(), 1).unwrap();
        let tr = cscnet_core::fista::solve(&d, &x, &cfg, Some(step)).unwrap();
        tr.output().inner(&g).unwrap()
    };

    let mut ex = Vec::new();
    let mut ea = Vec::new();
    for _ in 0..20 {
        let dx = random_tensor(x.shape(), &mut rng);
        let fd = central_difference(loss_x, x.data(), dx.data(), 1e-5);
        ex.push(rel_err(grads.input.inner(&dx).unwrap(), fd, 1e-12));
        let da = random_tensor(dict.kernel().shape(), &mut rng);
        let fd = central_difference(loss_a, dict.kernel().data(), da.data(), 1e-5);
        ea.push(rel_err(grads.dict.inner(&da).unwrap(), fd, 1e-12));
    }
    (median(&mut ex), median(&mut ea))
}

#[test]
fn csc_layer_gradients_match_finite_differences() {
    for k in [1, 2, 3, 4] {
        let (ex, ea) = layer_fd_errors(k, 40 + k as u64);
        assert!(ex <= 1e-4, "K={k} input grad median rel err {ex}");
        assert!(ea <= 1e-4, "K={k} dict grad median rel err {ea}");
    }
}
