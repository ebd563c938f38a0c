use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use cscnet_cli::commands;
use cscnet_cli::config::RunConfig;
use cscnet_cli::train::{self, load_model, load_split};
use cscnet_core::data::Split;
use cscnet_core::nn::SdNetLite;
use cscnet_core::robust::{corrupt_dataset, Level};
use cscnet_core::viz::Image;
use cscnet_core::ConvDictionary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Convolutional sparse coding networks: training, robust inference and
/// diagnostics.
#[derive(Parser)]
#[command(name = "cscnet", version)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set epochs=2.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, best.ckpt and final.ckpt.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Start from the 220-epoch CIFAR-10 recipe instead of the MNIST defaults.
        #[arg(long)]
        cifar_recipe: bool,
    },
    /// Test accuracy, mean residual and first-layer zero fraction.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate at this lambda instead of the trained one.
        #[arg(long)]
        lambda: Option<f64>,
        /// Corrupt the test set at this level (clean or 0..=4) with the configured noise.
        #[arg(long)]
        level: Option<Level>,
        /// Also sweep the configured lambda grid and write lambda,accuracy here.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Calibrate lambda against residuals and run adaptive inference per level.
    Robust {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and KKT violation versus FISTA iterations. With a checkpoint
    /// only the test-time unroll changes; without one a model is trained per K.
    AblateK {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstructions, dictionary grids and the sparsity histogram.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Deepest CSC layer to reconstruct from (1-based).
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Number of test images.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// PGD attack on the first attack_count test images.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report here as key=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the lasso for one PPM image and write its reconstruction.
    Solve {
        #[arg(long)]
        image: PathBuf,
        /// Use the first dictionary of this checkpoint; otherwise a random one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Atoms and atom size of the random dictionary.
        #[arg(long, default_value_t = 16)]
        atoms: usize,
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_user_config(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()
}

/// The checkpoint's model plus its stored config with user settings layered on top.
fn restore(path: &Path, cli: &Cli) -> Result<(RunConfig, SdNetLite)> {
    let (mut cfg, model) = load_model(path)?;
    apply_user_config(&mut cfg, cli)?;
    Ok((cfg, model))
}

fn say(cli: &Cli, line: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", line.as_ref());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { out, cifar_recipe } => {
            let mut cfg = if *cifar_recipe { RunConfig::cifar_recipe() } else { RunConfig::default() };
            apply_user_config(&mut cfg, cli)?;
            let outcome = train::train(&cfg, out, !cli.quiet)?;
            match outcome.metrics.last() {
                Some(m) => println!("final test accuracy {:.4} after {} epochs", m.test_acc, m.epoch),
                None => println!("wrote initialized model"),
            }
            println!("checkpoint {}", outcome.final_path.display());
        }
        Command::Eval { checkpoint, lambda, level, sweep } => {
            if let Some(l) = lambda {
                ensure!(l.is_finite() && *l > 0.0, "lambda must be positive");
            }
            let (cfg, mut model) = restore(checkpoint, cli)?;
            let mut test = load_split(&cfg, Split::Test)?;
            if let Some(level) = level {
                test = corrupt_dataset(&test, cfg.noise, *level, cfg.seed.wrapping_add(30_000))?;
            }
            let report = train::eval_report(&mut model, &test, cfg.eval_batch, *lambda)?;
            println!("accuracy {}", report.accuracy());
            println!("mean_residual {}", report.mean_residual);
            println!("zero_fraction {}", report.zero_fraction);
            if let Some(path) = sweep {
                let points = commands::sweep(&mut model, &cfg, &test)?;
                fs::write(path, commands::sweep_csv(&points)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Robust { checkpoint, out } => {
            let (cfg, mut model) = restore(checkpoint, cli)?;
            let train_set = load_split(&cfg, Split::Train)?;
            let test = load_split(&cfg, Split::Test)?;
            say(cli, "calibrating");
            let outcome = commands::robust(&mut model, &cfg, &train_set, &test)?;
            commands::write_robust(&outcome, out)?;
            print!("{}", outcome.table_csv());
        }
        Command::AblateK { checkpoint, out } => {
            let (cfg, mut model) = match checkpoint {
                Some(p) => {
                    let (c, m) = restore(p, cli)?;
                    (c, Some(m))
                }
                None => {
                    let mut c = RunConfig::default();
                    apply_user_config(&mut c, cli)?;
                    (c, None)
                }
            };
            let train_set = load_split(&cfg, Split::Train)?;
            let test = load_split(&cfg, Split::Test)?;
            let rows = commands::ablate_k(&cfg, model.as_mut(), &train_set, &test, out)?;
            fs::create_dir_all(out)?;
            let csv = commands::ablate_csv(&rows);
            fs::write(out.join("ablate_k.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Viz { checkpoint, layer, count, out } => {
            let (cfg, mut model) = restore(checkpoint, cli)?;
            let depth = model.csc_indices().len();
            ensure!(*layer >= 1 && *layer <= depth, "layer {layer} outside the CSC depth 1..={depth}");
            let test = load_split(&cfg, Split::Test)?;
            let test = if cfg.eval_limit > 0 { test.take(cfg.eval_limit) } else { test };
            let v = commands::viz(&mut model, &test, *layer, *count, cfg.eval_batch, out)?;
            for (i, row) in v.psnr.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|p| format!("{p:.2}")).collect();
                println!("image {i} psnr by layer: {}", cells.join(" "));
            }
            println!("zero_fraction {}", v.zero_fraction);
            println!("wrote {} files to {}", v.files.len(), out.display());
        }
        Command::Attack { checkpoint, out } => {
            let (cfg, mut model) = restore(checkpoint, cli)?;
            let test = load_split(&cfg, Split::Test)?;
            let (r, _) = commands::attack(&mut model, &cfg, &test)?;
            let text = format!(
                "count={}\nlambda={}\nclean_acc={}\nrobust_acc={}\nmax_perturbation={}\n",
                r.count, r.lambda, r.clean_acc, r.robust_acc, r.max_perturbation
            );
            if let Some(path) = out {
                fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{text}");
        }
        Command::Solve { image, checkpoint, lambda, iters, atoms, size, seed, out } => {
            ensure!(lambda.is_finite() && *lambda > 0.0 && *iters > 0, "lambda and iters must be positive");
            let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
            let img = Image::from_ppm(&bytes)?;
            let dict = match checkpoint {
                Some(p) => {
                    let (_, model) = load_model(p)?;
                    let dict = model.csc_layers().next().expect("models have a CSC layer").dict().clone();
                    dict
                }
                None => {
                    ensure!(*atoms > 0 && *size > 0, "atoms and size must be positive");
                    let channels = if img.channels == 3 && is_gray(&img) { 1 } else { img.channels };
                    ConvDictionary::random(channels, *atoms, *size, 1, &mut ChaCha8Rng::seed_from_u64(*seed))?
                }
            };
            let (report, rec) = commands::solve(&dict, &img, *lambda, *iters)?;
            Image::from_item(&rec, 0)?.save_ppm(out).with_context(|| format!("writing {}", out.display()))?;
            println!("objective {}", report.objective);
            println!("kkt_residual {}", report.kkt_residual);
            println!("residual_norm {}", report.residual_norm);
            println!("zero_fraction {}", report.zero_fraction);
            println!("psnr {:.2}", report.psnr);
        }
    }
    Ok(())
}

fn is_gray(img: &Image) -> bool {
    let plane = img.height * img.width;
    (0..plane).all(|p| img.data[p] == img.data[plane + p] && img.data[p] == img.data[2 * plane + p])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
