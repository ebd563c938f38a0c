//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 7 to 11 share one model trained on MNIST, read from
//! `$CSCNET_DATA/mnist` or `/root/data/mnist`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cscnet_cli::commands;
use cscnet_cli::config::RunConfig;
use cscnet_cli::train::{self, from_checkpoint, load_split, to_checkpoint};
use cscnet_core::checkpoint::Checkpoint;
use cscnet_core::data::{Dataset, Split};
use cscnet_core::fista::{self, kkt_residual, solve, stable_recovery_trial, RecoveryParams};
use cscnet_core::nn::{cross_entropy, Mode, SdNetLite, REFERENCE_ARCH};
use cscnet_core::robust::{evaluate, Level};
use cscnet_core::{ConvDictionary, CscLayer, FistaConfig, Tensor};
use cscnet_oracle::{central_difference, correlate, ista, lasso_objective, materialize, median, place, rel_err, DictShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Epochs for the shared MNIST model; five full epochs exceed the 30 minute
/// budget on one core.
const TRAIN_EPOCHS: usize = 2;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    if took <= limit {
        Ok(format!("{detail} ({:.1}s)", took.as_secs_f64()))
    } else {
        Err(format!("{detail}; took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn shape_of(d: &ConvDictionary) -> DictShape {
    DictShape {
        m: d.signal_channels(),
        c: d.code_channels(),
        k: d.size(),
        stride: d.stride(),
    }
}

fn adjoint_identity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let s = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(4..16), rng.random_range(4..16));
        let d = ConvDictionary::new(random_tensor([m, c, k, k], &mut rng), s).map_err(|e| e.to_string())?;
        let (zh, zw) = d.code_hw(h, w);
        let z = random_tensor([1, c, zh, zw], &mut rng);
        let x = random_tensor([1, m, h, w], &mut rng);
        let lhs = d.apply_sized(&z, (h, w)).unwrap().inner(&x).unwrap();
        let rhs = z.inner(&d.adjoint(&x).unwrap()).unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs());
    }
    check(worst < 1e-10, format!("worst relative gap {worst:.2e} over 100 triples"))
        .and_then(|d| within(Duration::from_secs(10), started, d))
}

fn operator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (m, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let s = if case % 5 == 4 { 2 } else { 1 };
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let d = ConvDictionary::new(random_tensor([m, c, k, k], &mut rng), s).unwrap();
        let (zh, zw) = d.code_hw(h, w);
        let z = random_tensor([2, c, zh, zw], &mut rng);
        let fast = d.apply_sized(&z, (h, w)).unwrap();
        let slow = if s == 1 {
            correlate(d.kernel().data(), shape_of(&d), z.data(), 2, h, w)
        } else {
            place(d.kernel().data(), shape_of(&d), z.data(), 2, (zh, zw), (h, w))
        };
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("max abs deviation {worst:.2e} over 50 cases"))
}

fn lasso_optimality() -> Outcome {
    let started = Instant::now();
    let mut worst_kkt = f64::NEG_INFINITY;
    let mut worst_gap: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (m, c) = (1, 2);
        let d = ConvDictionary::random(m, c, 3, 1, &mut rng).unwrap();
        let x = random_tensor([1, m, 6, 6], &mut rng);
        let lambda = 0.1;
        let trace = solve(&d, &x, &FistaConfig::new(lambda, 500), None).unwrap();
        let a = materialize(d.kernel().data(), shape_of(&d), (6, 6), (6, 6));
        let z_ref = ista(&a, x.data(), lambda, 100_000);
        let f_ref = lasso_objective(&a, x.data(), &z_ref, lambda);
        worst_gap = worst_gap.max((trace.objective - f_ref).abs());
        worst_kkt = worst_kkt.max(kkt_residual(&d, &x, trace.output(), lambda).unwrap());
    }
    check(
        worst_kkt < 1e-4 && worst_gap < 1e-6,
        format!("worst kkt {worst_kkt:.2e}, worst objective gap {worst_gap:.2e} over 20 instances"),
    )
    .and_then(|d| within(Duration::from_secs(60), started, d))
}

fn scalar_closed_form() -> Outcome {
    let d = ConvDictionary::new(Tensor::filled([1, 1, 1, 1], 1.0), 1).unwrap();
    let x = Tensor::filled([1, 1, 1, 1], 1.0);
    let z = solve(&d, &x, &FistaConfig::new(0.3, 500), None).unwrap().output().data()[0];
    check((z - 0.7).abs() <= 1e-6, format!("z = {z}"))
}

fn layer_fd_medians(k_iters: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dict = ConvDictionary::random(2, 3, 3, 1, &mut rng).unwrap();
    let cfg = FistaConfig::new(0.1, k_iters);
    let mut layer = CscLayer::new(dict.clone(), cfg, (7, 7), seed).unwrap();
    let x = random_tensor([1, 2, 7, 7], &mut rng);
    let out = layer.forward(&x).unwrap();
    let g = random_tensor(out.shape(), &mut rng);
    let grads = layer.backward(&g).unwrap();
    let step = layer.cached_step();
    let loss_x = |xs: &[f64]| {
        let xt = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
        solve(&dict, &xt, &cfg, Some(step)).unwrap().output().inner(&g).unwrap()
    };
    let loss_a = |ks: &[f64]| {
        let d = ConvDictionary::new(Tensor::from_vec(dict.kernel().shape(), ks.to_vec()).unwrap(), 1).unwrap();
        solve(&d, &x, &cfg, Some(step)).unwrap().output().inner(&g).unwrap()
    };
    let (mut ex, mut ea) = (Vec::new(), Vec::new());
    for _ in 0..30 {
        let dx = random_tensor(x.shape(), &mut rng);
        ex.push(rel_err(grads.input.inner(&dx).unwrap(), central_difference(loss_x, x.data(), dx.data(), 1e-5), 1e-12));
        let da = random_tensor(dict.kernel().shape(), &mut rng);
        ea.push(rel_err(grads.dict.inner(&da).unwrap(), central_difference(loss_a, dict.kernel().data(), da.data(), 1e-5), 1e-12));
    }
    (median(&mut ex), median(&mut ea))
}

fn model_fd_worst(samples: usize, seed: u64) -> f64 {
    let mut model = SdNetLite::build(REFERENCE_ARCH, [1, 28, 28], FistaConfig::new(0.1, 2), seed).unwrap();
    model.set_standardization(vec![0.1307], vec![0.3081]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Tensor::from_fn([4, 1, 28, 28], |_| rng.random_range(0.0..1.0));
    let labels = [7, 2, 1, 0];
    let loss = |m: &mut SdNetLite| cross_entropy(&m.forward(&x, Mode::Train).unwrap().logits, &labels).unwrap().0;
    let out = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = cross_entropy(&out.logits, &labels).unwrap();
    let grads = model.backward(&g).unwrap();
    let infos = model.params();
    let nudge = |m: &mut SdNetLite, p: usize, e: usize, h: f64| {
        m.param_tensors_mut()[p].data_mut()[e] += h;
        m.csc_layers_mut().for_each(|l| l.pin_step());
    };
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        // Cycle through every parameter tensor before sampling at random.
        let p = if i < infos.len() { i } else { rng.random_range(0..infos.len()) };
        let e = rng.random_range(0..infos[p].shape.iter().product::<usize>());
        let h = 1e-5;
        nudge(&mut model, p, e, h);
        let up = loss(&mut model);
        nudge(&mut model, p, e, -2.0 * h);
        let down = loss(&mut model);
        nudge(&mut model, p, e, h);
        worst = worst.max(rel_err(grads.params[p].data()[e], (up - down) / (2.0 * h), 1e-7));
    }
    worst
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [1, 2, 4] {
        let (ex, ea) = layer_fd_medians(k, 50 + k as u64);
        ok &= ex <= 1e-4 && ea <= 1e-4;
        parts.push(format!("K={k} x {ex:.1e} dict {ea:.1e}"));
    }
    let worst = model_fd_worst(40, 60);
    ok &= worst <= 1e-3;
    parts.push(format!("network worst {worst:.1e}"));
    check(ok, parts.join(", ")).and_then(|d| within(Duration::from_secs(120), started, d))
}

fn recovery(noise: f64) -> RecoveryParams {
    RecoveryParams {
        signal_channels: 3,
        code_channels: 4,
        size: 5,
        grid: 10,
        sparsity: 1,
        noise_norm: noise,
        lambda_factor: fista::RECOVERY_LAMBDA_FACTOR,
        min_lambda: 1e-6,
        iters: 300,
    }
}

fn stable_recovery() -> Outcome {
    let started = Instant::now();
    let contained = (0..100)
        .filter(|&s| stable_recovery_trial(&recovery(0.05), s).unwrap().support_contained)
        .count();
    let med = |noise: f64| {
        let mut errs: Vec<f64> = (0..100)
            .map(|s| stable_recovery_trial(&recovery(noise), 1000 + s).unwrap().error)
            .collect();
        median(&mut errs)
    };
    let ratio = med(0.1) / med(0.05);
    check(
        contained >= 95 && (1.5..=2.5).contains(&ratio),
        format!("support contained {contained}/100, error doubling ratio {ratio:.3}"),
    )
    .and_then(|d| within(Duration::from_secs(120), started, d))
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os(cscnet_cli::DATA_ENV)
        .map(|r| PathBuf::from(r).join("mnist"))
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

struct Shared {
    cfg: RunConfig,
    model: SdNetLite,
    train: Dataset,
    test: Dataset,
}

fn training_sanity(dir: &PathBuf, work: &std::path::Path) -> (Outcome, Option<Shared>) {
    let mut cfg = RunConfig::default();
    cfg.data_dir = Some(dir.clone());
    cfg.epochs = TRAIN_EPOCHS;
    let (train, test) = match (load_split(&cfg, Split::Train), load_split(&cfg, Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (Err(format!("{e:#}")), None),
    };
    let started = Instant::now();
    let outcome = match train::train_on(&cfg, &train, &test, &work.join("train"), true) {
        Ok(o) => o,
        Err(e) => return (Err(format!("{e:#}")), None),
    };
    let acc = outcome.metrics.last().map_or(0.0, |m| m.test_acc);
    let verdict = check(acc >= 0.97, format!("test accuracy {acc:.4} after {TRAIN_EPOCHS} epochs"))
        .and_then(|d| within(Duration::from_secs(30 * 60), started, d));
    (verdict, Some(Shared { cfg, model: outcome.model, train, test }))
}

struct RobustChecks {
    c8: Outcome,
    c9: Outcome,
}

fn robust_inference(s: &mut Shared) -> RobustChecks {
    let started = Instant::now();
    let mut cfg = s.cfg.clone();
    cfg.levels = (0..5).map(Level::Severity).collect();
    cfg.eval_limit = 5000;
    let outcome = match commands::robust(&mut s.model, &cfg, &s.train, &s.test) {
        Ok(o) => o,
        Err(e) => {
            let msg = format!("{e:#}");
            return RobustChecks { c8: Err(msg.clone()), c9: Err(msg) };
        }
    };
    print!("{}{}", outcome.table_csv(), outcome.curves_csv());
    let curves = &outcome.run.curves;
    let lambdas: Vec<f64> = curves.iter().map(|c| c.best_lambda).collect();
    let residuals: Vec<f64> = curves.iter().map(|c| c.residual).collect();
    let lambda_ok = lambdas.windows(2).all(|w| w[0] <= w[1]);
    let residual_ok = residuals.windows(2).all(|w| w[0] <= w[1]);
    let rows = &outcome.rows;
    let adaptive_ok = rows[1..].iter().all(|r| r.report.accuracy >= r.report.fixed_accuracy);
    let top = rows.last().unwrap();
    let strict_top = top.report.accuracy > top.report.fixed_accuracy;
    let gains: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4}->{:.4}", r.report.fixed_accuracy, r.report.accuracy))
        .collect();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let c8 = check(
        lambda_ok && residual_ok && adaptive_ok && strict_top,
        format!(
            "lambda_c [{}], r_c [{}], fixed->adaptive [{}]",
            fmt(&lambdas),
            fmt(&residuals),
            gains.join(" ")
        ),
    )
    .and_then(|d| within(Duration::from_secs(20 * 60), started, d));

    let mut interior = Vec::new();
    for c in &curves[1..] {
        let best = c.accuracies.iter().find(|p| p.0 == c.best_lambda).unwrap().1;
        let lo = c.accuracies.first().unwrap().1;
        let hi = c.accuracies.last().unwrap().1;
        interior.push((c.level, best > lo && best > hi, c.best_lambda));
    }
    let c9 = check(
        interior.iter().all(|t| t.1),
        interior
            .iter()
            .map(|(l, ok, b)| format!("severity {l}: argmax {b:.2} {}", if *ok { "interior" } else { "on the boundary" }))
            .collect::<Vec<_>>()
            .join(", "),
    );
    RobustChecks { c8, c9 }
}

fn sparsity(s: &mut Shared) -> Outcome {
    let report = evaluate(&mut s.model, &s.test, 500).map_err(|e| e.to_string())?;
    let zf = report.zero_fraction;
    check(zf > 0.3 && s.model.lambda() == 0.1, format!("first-layer zero fraction {zf:.4} at lambda 0.1"))
}

fn pgd_contract(s: &mut Shared) -> Outcome {
    let mut cfg = s.cfg.clone();
    cfg.attack_count = 500;
    let (r, adv) = commands::attack(&mut s.model, &cfg, &s.test).map_err(|e| format!("{e:#}"))?;
    let clean = s.test.take(500);
    let in_box = adv.data().iter().all(|v| (0.0..=1.0).contains(v));
    let in_ball = adv
        .data()
        .iter()
        .zip(clean.images.data())
        .all(|(a, c)| (a - c).abs() <= cfg.attack_eps);
    check(
        in_box && in_ball && r.robust_acc < r.clean_acc,
        format!(
            "linf eps {}: max perturbation {}, box {in_box}, clean {:.4}, robust {:.4}",
            cfg.attack_eps, r.max_perturbation, r.clean_acc, r.robust_acc
        ),
    )
}

fn checkpoint_and_determinism(dir: &PathBuf, work: &std::path::Path, shared: Option<&mut Shared>) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    if let Some(s) = shared {
        let ck = to_checkpoint(&s.cfg, &s.model);
        let path = work.join("roundtrip.ckpt");
        ck.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let exact = back.config == ck.config
            && back.tensors.len() == ck.tensors.len()
            && ck
                .tensors
                .iter()
                .zip(&back.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb));
        let (_, mut restored) = from_checkpoint(&back).map_err(|e| format!("{e:#}"))?;
        let probe = s.test.take(200).images;
        let a = restored.forward(&probe, Mode::Eval).map_err(|e| e.to_string())?.logits;
        let b = s.model.forward(&probe, Mode::Eval).map_err(|e| e.to_string())?.logits;
        ok &= exact && bits(&a) == bits(&b);
        parts.push(format!("{} tensors bit-exact {exact}", ck.tensors.len()));
    } else {
        ok = false;
        parts.push("no trained model to round-trip".into());
    }
    let mut cfg = RunConfig::default();
    cfg.data_dir = Some(dir.clone());
    cfg.epochs = 1;
    cfg.train_limit = 1024;
    cfg.test_limit = 500;
    let run = |name: &str| -> Result<String, String> {
        let out = train::train(&cfg, &work.join(name), false).map_err(|e| format!("{e:#}"))?;
        std::fs::read_to_string(out.metrics_path).map_err(|e| e.to_string())
    };
    let (a, b) = (run("det_a")?, run("det_b")?);
    let same = a == b && a.lines().count() == 2;
    ok &= same;
    parts.push(format!("seeded metrics identical {same}"));
    check(ok, parts.join(", "))
}

fn main() -> ExitCode {
    let suite = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => println!("FAIL {n:>2} {name}: {d}"),
        }
        results.push((n, name, o));
    };

    report(1, "adjoint identity", adjoint_identity());
    report(2, "operator oracle", operator_oracle());
    report(3, "lasso optimality", lasso_optimality());
    report(4, "scalar closed form", scalar_closed_form());
    report(5, "gradient fidelity", gradient_fidelity());
    report(6, "stable recovery", stable_recovery());

    let work = tempfile::tempdir().expect("temporary directory");
    match mnist_dir() {
        None => {
            let missing = || Err("MNIST not found (set CSCNET_DATA)".to_string());
            for (n, name) in [
                (7, "training sanity"),
                (8, "robust inference"),
                (9, "lambda sweep shape"),
                (10, "sparsity"),
                (11, "PGD contract"),
                (12, "checkpoint and determinism"),
            ] {
                report(n, name, missing());
            }
        }
        Some(dir) => {
            let (c7, shared) = training_sanity(&dir, work.path());
            report(7, "training sanity", c7);
            let mut shared = shared;
            match shared.as_mut() {
                Some(s) => {
                    let RobustChecks { c8, c9 } = robust_inference(s);
                    report(8, "robust inference", c8);
                    report(9, "lambda sweep shape", c9);
                    report(10, "sparsity", sparsity(s));
                    report(11, "PGD contract", pgd_contract(s));
                }
                None => {
                    for (n, name) in [(8, "robust inference"), (9, "lambda sweep shape"), (10, "sparsity"), (11, "PGD contract")] {
                        report(n, name, Err("no trained model".into()));
                    }
                }
            }
            report(12, "checkpoint and determinism", checkpoint_and_determinism(&dir, work.path(), shared.as_mut()));
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1} min",
        results.len() - failed.len(),
        results.len(),
        suite.elapsed().as_secs_f64() / 60.0
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
