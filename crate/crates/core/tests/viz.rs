mod common;

use cscnet_core::data::{load_mnist, Dataset, Split};
use cscnet_core::nn::{Layer, SdNetLite, REFERENCE_ARCH};
use cscnet_core::viz::{psnr, reconstruct, sparsity_histogram};
use cscnet_core::{FistaConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 1, hw, hw], |_| rng.random_range(0.0..1.0))
}

fn first_residuals(model: &SdNetLite) -> Vec<f64> {
    model.csc_layers().next().unwrap().last_residual_norm().to_vec()
}

#[test]
fn first_layer_reconstruction_error_is_the_recorded_residual() {
    let mut model = SdNetLite::build("csc:4:3,relu,maxpool:2,flatten,linear:2", [1, 8, 8], FistaConfig::new(0.1, 3), 2).unwrap();
    let x = random_images(3, 8, 3);
    let rec = reconstruct(&mut model, &x, 1).unwrap();
    assert_eq!(rec.shape(), x.shape());
    let recorded = first_residuals(&model);
    for (i, r) in recorded.iter().enumerate() {
        let diff = x.select(&[i]).sub(&rec.select(&[i])).unwrap().l2();
        assert!((diff - r).abs() <= 1e-10, "{diff} vs {r}");
    }
}

#[test]
fn standardization_is_undone_after_the_cascade() {
    let mut model = SdNetLite::build("std,csc:4:3,flatten,linear:2", [1, 8, 8], FistaConfig::new(0.1, 3), 2).unwrap();
    model.set_standardization(vec![0.3], vec![0.5]).unwrap();
    let x = random_images(2, 8, 4);
    let rec = reconstruct(&mut model, &x, 1).unwrap();
    for (i, r) in first_residuals(&model).iter().enumerate() {
        let diff = x.select(&[i]).sub(&rec.select(&[i])).unwrap().l2();
        assert!((diff - 0.5 * r).abs() <= 1e-10);
    }
}

#[test]
fn psnr_matches_its_definition() {
    let mut model = SdNetLite::build("csc:4:3,flatten,linear:2", [1, 8, 8], FistaConfig::new(0.1, 3), 5).unwrap();
    let x = random_images(1, 8, 6);
    let rec = reconstruct(&mut model, &x, 1).unwrap();
    let mse = x.sub(&rec).unwrap().l2().powi(2) / x.len() as f64;
    let p = psnr(&x, &rec).unwrap();
    assert!(p.is_finite());
    assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
}

#[test]
fn vanishing_lambda_reconstructs_smooth_images_almost_exactly() {
    let mut model = SdNetLite::build("csc:8:5,flatten,linear:2", [1, 16, 16], FistaConfig::new(1e-5, 500), 7).unwrap();
    let x = Tensor::from_fn([2, 1, 16, 16], |[n, _, i, j]| {
        let (u, v) = (i as f64 / 15.0, j as f64 / 15.0);
        0.5 + 0.3 * (3.0 * u + n as f64).sin() * (2.0 * v).cos()
    });
    let rec = reconstruct(&mut model, &x, 1).unwrap();
    let p = psnr(&x, &rec).unwrap();
    assert!(p >= 40.0, "psnr {p}");
}

#[test]
fn depth_outside_the_csc_chain_is_rejected() {
    let mut model = SdNetLite::build("csc:2:3,flatten,linear:2", [1, 4, 4], FistaConfig::new(0.1, 2), 1).unwrap();
    let x = random_images(1, 4, 1);
    assert!(reconstruct(&mut model, &x, 0).is_err());
    assert!(reconstruct(&mut model, &x, 2).is_err());
}

#[test]
fn deeper_reconstructions_are_no_sharper_on_mnist() {
    let Some(dir) = common::mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let test = load_mnist(dir, Split::Test).unwrap().take(5);
    let mut model = SdNetLite::build(REFERENCE_ARCH, [1, 28, 28], FistaConfig::new(0.1, 2), 3).unwrap();
    model.set_standardization(vec![0.1307], vec![0.3081]).unwrap();
    let shallow = reconstruct(&mut model, &test.images, 1).unwrap();
    let deep = reconstruct(&mut model, &test.images, 2).unwrap();
    for i in 0..5 {
        let x = test.images.select(&[i]);
        let p1 = psnr(&x, &shallow.select(&[i])).unwrap();
        let p2 = psnr(&x, &deep.select(&[i])).unwrap();
        assert!(p2 <= p1, "image {i}: {p2} > {p1}");
    }
}

fn zero_fraction_at(model: &mut SdNetLite, data: &Dataset, lambda: f64) -> f64 {
    model.set_lambda(lambda).unwrap();
    sparsity_histogram(model, data, 4).unwrap().zero_fraction()
}

#[test]
fn zero_fraction_grows_with_lambda() {
    let mut model = SdNetLite::build("csc:4:3,flatten,linear:2", [1, 8, 8], FistaConfig::new(0.1, 4), 9).unwrap();
    let data = Dataset::new(random_images(6, 8, 10), vec![0, 1, 0, 1, 0, 1], "noise").unwrap();
    let sweep: Vec<f64> = [1e-9, 0.01, 0.05, 0.1, 0.3, 1.0, 1e6]
        .iter()
        .map(|&l| zero_fraction_at(&mut model, &data, l))
        .collect();
    for w in sweep.windows(2) {
        assert!(w[0] <= w[1], "{sweep:?}");
    }
    assert!(sweep[0] < 0.01, "{sweep:?}");
    assert_eq!(*sweep.last().unwrap(), 1.0);
}

#[test]
fn histogram_accounts_for_every_entry() {
    let mut model = SdNetLite::build("csc:4:3,flatten,linear:2", [1, 8, 8], FistaConfig::new(0.2, 2), 9).unwrap();
    let data = Dataset::new(random_images(5, 8, 11), vec![0; 5], "noise").unwrap();
    let hist = sparsity_histogram(&mut model, &data, 2).unwrap();
    let binned: u64 = hist.bins.iter().map(|b| b.2).sum();
    assert_eq!(hist.total, 5 * 4 * 8 * 8);
    assert_eq!(binned + hist.zero_count, hist.total);
    assert!(matches!(model.layers()[0], Layer::Csc(_)));
}
