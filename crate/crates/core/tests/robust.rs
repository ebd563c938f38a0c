use cscnet_core::checkpoint::Checkpoint;
use cscnet_core::data::{Dataset, NoiseKind};
use cscnet_core::nn::{Mode, SdNetLite};
use cscnet_core::robust::{
    adaptive_eval, calibrate, evaluate, max_perturbation, pgd_attack, with_lambda, AttackNorm, CalibrationSettings,
    LambdaCalibration, Level, PgdConfig,
};
use cscnet_core::{FistaConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> SdNetLite {
    let mut m = SdNetLite::build("std,csc:4:3,bn,relu,maxpool:2,flatten,linear:3", [1, 8, 8], FistaConfig::new(0.1, 2), seed).unwrap();
    m.set_standardization(vec![0.5], vec![0.3]).unwrap();
    m
}

fn random_set(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn([n, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|i| i % 3).collect();
    Dataset::new(images, labels, "random").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pgd_respects_ball_and_box(seed in 0u64..1000, eps in 0.001f64..0.5, l2 in any::<bool>(), iters in 1usize..4) {
        let mut model = tiny_model(seed);
        let data = random_set(3, seed + 1);
        let norm = if l2 { AttackNorm::L2 } else { AttackNorm::Linf };
        let cfg = PgdConfig { iters, ..PgdConfig::new(norm, eps, seed) };
        let adv = pgd_attack(&mut model, &data.images, &data.labels, &cfg).unwrap();
        prop_assert_eq!(adv.shape(), data.images.shape());
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(max_perturbation(&adv, &data.images, norm) <= eps);
    }
}

#[test]
fn pgd_is_seeded() {
    let mut model = tiny_model(3);
    let data = random_set(4, 4);
    let cfg = PgdConfig::new(AttackNorm::Linf, 0.1, 9);
    let a = pgd_attack(&mut model, &data.images, &data.labels, &cfg).unwrap();
    let b = pgd_attack(&mut model, &data.images, &data.labels, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(pgd_attack(&mut model, &data.images, &data.labels, &PgdConfig::new(AttackNorm::L2, 0.0, 9)).is_err());
}

#[test]
fn pgd_raises_the_loss() {
    let mut model = tiny_model(5);
    let data = random_set(8, 6);
    let loss = |m: &mut SdNetLite, x: &Tensor| {
        let out = m.forward(x, Mode::Eval).unwrap();
        cscnet_core::nn::cross_entropy(&out.logits, &data.labels).unwrap().0
    };
    let clean = loss(&mut model, &data.images);
    let cfg = PgdConfig { random_start: false, ..PgdConfig::new(AttackNorm::Linf, 0.2, 1) };
    let adv = pgd_attack(&mut model, &data.images, &data.labels, &cfg).unwrap();
    assert!(loss(&mut model, &adv) > clean);
}

fn settings(levels: Vec<Level>, lambdas: Vec<f64>) -> CalibrationSettings {
    CalibrationSettings {
        kind: NoiseKind::Gaussian,
        levels,
        lambdas,
        subsample: 12,
        batch: 5,
        seed: 3,
    }
}

#[test]
fn calibration_records_one_curve_per_level() {
    let mut model = tiny_model(7);
    let train = random_set(20, 8);
    let levels = vec![Level::Clean, Level::Severity(2), Level::Severity(4)];
    let run = calibrate(&mut model, &train, &settings(levels.clone(), vec![0.1, 0.2, 0.4])).unwrap();
    assert_eq!(run.curves.len(), 3);
    assert_eq!(model.lambda(), 0.1);
    for (c, l) in run.curves.iter().zip(&levels) {
        assert_eq!(c.level, *l);
        assert_eq!(c.accuracies.len(), 3);
        let best = c.accuracies.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let first = c.accuracies.iter().find(|p| p.1 == best).unwrap().0;
        assert_eq!(c.best_lambda, first);
    }
    assert!(run.curves[2].residual > run.curves[0].residual);
    let cal = &run.calibration;
    assert!((0.1..=0.4).contains(&cal.lambda_for(0.0)));
    assert!((0.1..=0.4).contains(&cal.lambda_for(1e9)));
}

#[test]
fn calibration_rejects_bad_grids() {
    let mut model = tiny_model(7);
    let train = random_set(10, 8);
    let two = vec![Level::Clean, Level::Severity(0)];
    assert!(calibrate(&mut model, &train, &settings(two.clone(), vec![])).is_err());
    assert!(calibrate(&mut model, &train, &settings(two.clone(), vec![0.3, 0.2])).is_err());
    assert!(calibrate(&mut model, &train, &settings(vec![Level::Clean], vec![0.1, 0.2])).is_err());
}

#[test]
fn adaptive_eval_with_the_training_lambda_matches_fixed() {
    let mut model = tiny_model(11);
    let test = random_set(15, 12);
    let cal = LambdaCalibration::fit(NoiseKind::Gaussian, vec![(0.1, 1.0), (0.1, 2.0)], 0.1, 1.5).unwrap();
    let r = adaptive_eval(&mut model, &test, &cal, 4).unwrap();
    assert_eq!(r.lambda_used, 0.1);
    assert_eq!(r.accuracy, r.fixed_accuracy);
    assert_eq!(r.fixed_accuracy, evaluate(&mut model, &test, 15).unwrap().accuracy());
}

#[test]
fn lambda_override_equal_to_training_value_changes_nothing() {
    let mut model = tiny_model(13);
    let test = random_set(9, 14);
    let plain = evaluate(&mut model, &test, 4).unwrap();
    let same = with_lambda(&mut model, 0.1, |m| evaluate(m, &test, 4)).unwrap();
    assert_eq!(plain, same);
    let other = with_lambda(&mut model, 0.9, |m| evaluate(m, &test, 4)).unwrap();
    assert!(other.zero_fraction >= plain.zero_fraction);
    assert_eq!(model.lambda(), 0.1);
}

#[test]
fn model_state_survives_a_checkpoint_file() {
    let mut model = tiny_model(15);
    let data = random_set(6, 16);
    for _ in 0..3 {
        model.forward(&data.images, Mode::Train).unwrap();
    }
    let before = model.forward(&data.images, Mode::Eval).unwrap().logits;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut ck = Checkpoint { config: vec![], tensors: model.state() };
    ck.set("arch", model.arch());
    ck.save(&path).unwrap();
    assert!(!dir.path().join("m.tmp").exists());
    let back = Checkpoint::load(&path).unwrap();
    let mut restored = SdNetLite::build(back.require("arch").unwrap(), [1, 8, 8], FistaConfig::new(0.1, 2), 999).unwrap();
    restored.load_state(&back.tensors).unwrap();
    let after = restored.forward(&data.images, Mode::Eval).unwrap().logits;
    assert_eq!(before, after);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_bytes_round_trip(
        values in prop::collection::vec(any::<f64>(), 1..40),
        key in "[a-z_]{1,8}",
        value in "[ -~]{0,16}",
    ) {
        let n = values.len();
        let t = Tensor::from_vec([1, 1, 1, n], values).unwrap();
        let mut ck = Checkpoint::default();
        ck.set(key.clone(), value.clone());
        ck.tensors.push(("t".into(), t.clone()));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.get(&key), Some(value.as_str()));
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.tensor("t").unwrap()), bits(&t));
    }
}
