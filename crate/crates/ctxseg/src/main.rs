//! Command-line entry point: dataset generation, training, evaluation,
//! prediction, and gradient self-verification.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ctxseg::checkpoint;
use ctxseg::config::{DtypeChoice, RunConfig};
use ctxseg::dataset::Dataset;
use ctxseg::error::{Error, Result};
use ctxseg::gradcheck;
use ctxseg::imageio;
use ctxseg::metrics::{render_table, ConfusionMatrix, MetricsReport};
use ctxseg::model::{build_model, ModelConfig, Segmenter};
use ctxseg::patch::NeighborSet;
use ctxseg::scalar::Scalar;
use ctxseg::synthetic;
use ctxseg::train;

#[derive(Parser)]
#[command(name = "ctxseg", version, about = "Context-aware patch segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Command-line overrides; they win over config-file values.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for model init, training order, and task generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Context fusion switch.
    #[arg(long, value_parser = parse_on_off)]
    context: Option<bool>,
    /// Patch side length S.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Output path (dataset dir / checkpoint / report / prediction).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images/ + labels/ + task.toml).
    Generate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model and write checkpoint + loss log.
    Train {
        /// Dataset directory (overrides the config value).
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate one checkpoint, or two side by side (w/o vs w).
    Eval {
        /// Checkpoint to evaluate (the "w/o" column when two are given).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint filling the "w" column.
        #[arg(long)]
        checkpoint_context: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment one image into a label raster file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference verification of the fused pipeline gradients.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn resolve(overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.task.seed = seed;
    }
    if let Some(context) = overrides.context {
        cfg.model.context_enabled = context;
    }
    if let Some(s) = overrides.patch_size {
        cfg.model.patch_size = s;
        cfg.task.patch_size = s;
    }
    if let Some(epochs) = overrides.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = overrides.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { overrides } => cmd_generate(&overrides),
        Command::Train { data, overrides } => {
            let cfg = resolve(&overrides)?;
            match cfg.dtype {
                DtypeChoice::F64 => cmd_train::<f64>(&cfg, data.as_deref(), &overrides),
                DtypeChoice::F32 => cmd_train::<f32>(&cfg, data.as_deref(), &overrides),
            }
        }
        Command::Eval {
            checkpoint,
            checkpoint_context,
            data,
            overrides,
        } => {
            let cfg = resolve(&overrides)?;
            match cfg.dtype {
                DtypeChoice::F64 => cmd_eval::<f64>(
                    &cfg,
                    &checkpoint,
                    checkpoint_context.as_deref(),
                    data.as_deref(),
                    &overrides,
                ),
                DtypeChoice::F32 => cmd_eval::<f32>(
                    &cfg,
                    &checkpoint,
                    checkpoint_context.as_deref(),
                    data.as_deref(),
                    &overrides,
                ),
            }
        }
        Command::Predict {
            checkpoint,
            image,
            overrides,
        } => {
            let cfg = resolve(&overrides)?;
            match cfg.dtype {
                DtypeChoice::F64 => cmd_predict::<f64>(&cfg, &checkpoint, &image, &overrides),
                DtypeChoice::F32 => cmd_predict::<f32>(&cfg, &checkpoint, &image, &overrides),
            }
        }
        Command::Gradcheck { overrides } => cmd_gradcheck(&overrides),
    }
}

fn cmd_generate(overrides: &Overrides) -> Result<()> {
    let cfg = resolve(overrides)?;
    let dir = overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
    println!("# resolved configuration\n{}", cfg.echo());
    let stems = synthetic::generate_dataset(&cfg.task, cfg.data.num_images, &dir)?;
    println!("wrote {} image/label pairs to {}", stems.len(), dir.display());
    Ok(())
}

fn train_stems(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let stems = Dataset::list_stems(dir)?;
    if cfg.data.train_fraction >= 1.0 {
        return Ok(stems);
    }
    let (train, _, _) = synthetic::split_stems(
        &stems,
        (cfg.data.train_fraction, 1.0 - cfg.data.train_fraction, 0.0),
        cfg.data.split_seed,
    )?;
    Ok(train)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, data: Option<&Path>, overrides: &Overrides) -> Result<()> {
    let dir = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
    let ckpt_path = overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.checkpoint));

    let echo = cfg.echo();
    println!("# resolved configuration\n{echo}");

    let stems = train_stems(cfg, &dir)?;
    let pad = cfg.train.ignore_label.unwrap_or(255);
    let dataset = Dataset::load(&dir, &stems, cfg.model.patch_size, pad)?;
    if dataset.in_channels() != cfg.model.in_channels {
        return Err(Error::config(format!(
            "dataset has {} channels, model expects {}",
            dataset.in_channels(),
            cfg.model.in_channels
        )));
    }

    let model = build_model::<T>(&cfg.model)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(&cfg.output.log)?);
    for line in echo.lines() {
        writeln!(log, "# {line}")?;
    }
    let stats = train::train(&model, &dataset, &cfg.train, &mut log)?;
    log.flush()?;

    checkpoint::save(model.params(), &ckpt_path)?;
    if let Some(last) = stats.last() {
        println!(
            "trained {} epochs over {} patches; final mean loss {}",
            stats.len(),
            dataset.len(),
            last.mean_loss
        );
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

/// Build a model matching a checkpoint: the context block is present
/// exactly when the archive holds the alpha gate.
fn model_for_checkpoint<T: Scalar>(base: &ModelConfig, path: &Path) -> Result<Segmenter<T>> {
    let entries = checkpoint::load::<T>(path)?;
    let mut cfg = base.clone();
    cfg.context_enabled = entries.iter().any(|e| e.name == "fusion.alpha");
    let model = build_model::<T>(&cfg)?;
    checkpoint::restore(model.params(), path)?;
    Ok(model)
}

fn evaluate_checkpoint<T: Scalar>(
    cfg: &RunConfig,
    path: &Path,
    dir: &Path,
    context_override: Option<bool>,
) -> Result<MetricsReport> {
    let model = model_for_checkpoint::<T>(&cfg.model, path)?;
    let context_on = context_override.unwrap_or(model.config.context_enabled);
    let mut cm = ConfusionMatrix::new(
        cfg.model.num_classes,
        cfg.train.background_class,
        cfg.train.ignore_label,
    )?;
    for stem in Dataset::list_stems(dir)? {
        let (img_path, lab_path) = synthetic::pair_paths(dir, &stem);
        let image = imageio::read_image(&img_path)?;
        let truth = imageio::read_labels(&lab_path)?;
        let pred = model.predict_full_image(&image, context_on)?;
        cm.accumulate(&pred, &truth)?;
    }
    MetricsReport::from_matrix(&cm)
}

fn cmd_eval<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    checkpoint_context: Option<&Path>,
    data: Option<&Path>,
    overrides: &Overrides,
) -> Result<()> {
    let dir = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
    let report_path = overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.report));

    println!("# resolved configuration\n{}", cfg.echo());
    let first = evaluate_checkpoint::<T>(cfg, checkpoint, &dir, overrides.context)?;
    let second = match checkpoint_context {
        Some(path) => Some(evaluate_checkpoint::<T>(cfg, path, &dir, overrides.context)?),
        None => None,
    };

    let table = render_table(&first, second.as_ref());
    print!("{table}");

    let mut kv = String::new();
    match &second {
        None => kv.push_str(&first.to_key_values("")),
        Some(ctx) => {
            kv.push_str(&first.to_key_values("wo."));
            kv.push_str(&ctx.to_key_values("w."));
        }
    }
    std::fs::write(&report_path, format!("{table}\n{kv}"))?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_predict<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    overrides: &Overrides,
) -> Result<()> {
    let out = overrides
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.prediction));
    let model = model_for_checkpoint::<T>(&cfg.model, checkpoint)?;
    let context_on = overrides.context.unwrap_or(model.config.context_enabled);
    let image = imageio::read_image(image_path)?;
    let labels = model.predict_full_image(&image, context_on)?;
    imageio::write_labels(&labels, &out)?;
    println!(
        "wrote {}x{} label raster to {}",
        labels.height,
        labels.width,
        out.display()
    );
    Ok(())
}

/// Tiny reference configuration for gradient verification: S=8, encoder
/// stride 2, C=4 feature channels, K=2 classes.
fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        in_channels: 1,
        encoder_channels: vec![6, 4],
        encoder_strides: vec![2, 1],
        num_classes: 2,
        context_enabled: true,
        softmax_temperature: 1.0,
        detach_target_slab: false,
        seed,
    }
}

fn cmd_gradcheck(overrides: &Overrides) -> Result<()> {
    let cfg = resolve(overrides)?;
    let seed = cfg.model.seed;
    let model = build_model::<f64>(&gradcheck_config(seed))?;
    // Differencing at the zero-bias init would sit on ReLU kinks.
    gradcheck::jitter_params(&model, seed.wrapping_add(2), 0.2)?;

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let patch: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let neighbors = NeighborSet {
        tiles: (0..8)
            .map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect(),
        synthetic: [false; 8],
    };
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();

    let report = gradcheck::check_model(&model, &patch, Some(&neighbors), &labels, 1e-5, 1e-4)?;
    print!("{}", report.render());
    if !report.passed {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds 1e-4",
            report.max_rel_err
        )));
    }
    Ok(())
}
