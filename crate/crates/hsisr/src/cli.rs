//! Command-line surface. Every subcommand is a thin wrapper over the
//! library; the runnable programs in `examples/` exercise the same calls.
//!
//! Exit codes are a stable contract: 0 on success, 1 when a check or
//! verification fails (a failing gradient battery, a run aborted by a
//! non-finite loss), 2 for usage, config, and environment errors. Output
//! directories must already exist; no command mutates its inputs, and all
//! file writes go complete-then-rename.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::checks::{run_battery, BatteryConfig};
use crate::config::CliConfig;
use crate::data::{
    center_crop, extract_patches, load_split, make_pair, normalize_cube, read_hsc, split_dataset,
    synth_generate, write_hsc, Cube, CubeMeta, Manifest, ManifestPair, SamplePair, Split,
    SynthSpec,
};
use crate::gradcheck::GradCheckSettings;
use crate::model::{init_params, param_count, Mode, ModelConfig};
use crate::render::write_false_color;
use crate::resample::bilinear_resize;
use crate::tensor::Tensor;
use crate::train::{evaluate, history_table, train, StopReason, TrainData};

/// Failures split by exit code.
enum CliError {
    /// Usage, config, or environment problem (exit 2).
    Usage(String),
    /// A check or verification failed (exit 1).
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Check(m) => m,
        }
    }
}

macro_rules! usage_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        })*
    };
}

usage_from!(
    crate::data::DataError,
    crate::config::ConfigError,
    crate::checkpoint::CheckpointError,
    crate::model::ModelError,
    crate::render::RenderError,
    crate::tensor::TensorError,
    crate::train::TrainError,
    crate::gradcheck::GradCheckError
);

#[derive(Parser)]
#[command(
    name = "hsisr",
    about = "Hyperspectral single-image super-resolution: data preparation, training, evaluation, inference",
    after_help = "Exit codes: 0 success, 1 check/verification failure, 2 usage/config error.\n\
                  HSISR_THREADS sets the evaluation thread count (default 1)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic hyperspectral cubes plus a manifest.
    Synth(SynthArgs),
    /// Normalize, crop, patch, degrade, and split cubes into a pair dataset.
    Prepare(PrepareArgs),
    /// Train a model from a TOML experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared dataset split.
    Eval(EvalArgs),
    /// Super-resolve one cube with a trained checkpoint.
    Infer(InferArgs),
    /// Run the finite-difference gradient-check battery.
    Gradcheck(GradcheckArgs),
    /// Render a false-color composite of three bands as a PPM image.
    Render(RenderArgs),
    /// Print per-tensor and total parameter counts for a model config.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Existing directory to write cubes and the manifest into.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of cubes (seeded seed, seed+1, ...).
    #[arg(long, default_value_t = 4)]
    cubes: usize,
    /// Height and width of each cube.
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f32,
    /// Spatial correlation length of the abundance maps, in pixels.
    #[arg(long, default_value_t = 2.0)]
    smoothness: f32,
}

#[derive(Args)]
struct PrepareArgs {
    /// Input cubes in HSC1 format.
    #[arg(long, required = true, num_args = 1..)]
    cubes: Vec<PathBuf>,
    #[arg(long)]
    patch_size: usize,
    /// Degradation scale (2, 4, or 8); must divide the patch size.
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional center-crop size applied before patch extraction.
    #[arg(long)]
    crop: Option<usize>,
    /// Existing directory for pair files and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config (see README for the schema).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Existing directory for the per-pair and aggregate reports.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Low-resolution input cube (HSC1).
    #[arg(long)]
    input: PathBuf,
    /// Output path for the super-resolved cube (HSC1).
    #[arg(long)]
    output: PathBuf,
    /// Upsampling factor applied before the network.
    #[arg(long)]
    scale: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    bands: usize,
    #[arg(long, default_value_t = 5)]
    feature_width: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 6)]
    height: usize,
    #[arg(long, default_value_t = 6)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// Input cube (HSC1).
    #[arg(long)]
    cube: PathBuf,
    /// Three band indices composited as red, green, blue.
    #[arg(long, num_args = 3, value_names = ["R", "G", "B"])]
    bands: Vec<usize>,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    bands: usize,
    #[arg(long, default_value_t = 56)]
    feature_width: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same error path.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Render(args) => cmd_render(args),
        Command::Params(args) => cmd_params(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!(
            "output directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Listing of generated cubes, written next to them.
#[derive(Serialize, Deserialize)]
struct SynthManifest {
    cube: Vec<SynthManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct SynthManifestEntry {
    path: String,
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    require_dir(&args.out_dir)?;
    if args.cubes == 0 {
        return Err(CliError::Usage("--cubes must be at least 1".into()));
    }
    let mut entries = Vec::new();
    for i in 0..args.cubes {
        let seed = args.seed + i as u64;
        let cube = synth_generate(&SynthSpec {
            height: args.size,
            width: args.size,
            bands: args.bands,
            num_endmembers: args.endmembers,
            noise_sigma: args.noise_sigma,
            smoothness: args.smoothness,
            seed,
        })?;
        let name = format!("cube_{i:02}.hsc");
        write_hsc(&args.out_dir.join(&name), &cube)?;
        entries.push(SynthManifestEntry {
            path: name,
            seed,
            height: args.size,
            width: args.size,
            bands: args.bands,
        });
    }
    let manifest = SynthManifest { cube: entries };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    crate::data::write_atomic(&args.out_dir.join("cubes.toml"), text.as_bytes())?;
    println!(
        "wrote {} cubes ({}x{}x{}) and cubes.toml to {}",
        args.cubes,
        args.size,
        args.size,
        args.bands,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    require_dir(&args.out_dir)?;
    if args.patch_size % args.scale != 0 {
        return Err(CliError::Usage(format!(
            "patch size {} is not divisible by scale {}",
            args.patch_size, args.scale
        )));
    }
    let mut pairs: Vec<(SamplePair, String)> = Vec::new();
    for cube_path in &args.cubes {
        let mut cube = read_hsc(cube_path)?;
        if !cube.meta.normalized {
            cube = normalize_cube(&cube)?;
        }
        if let Some(size) = args.crop {
            cube = center_crop(&cube, size)?;
        }
        let source = cube_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| cube_path.display().to_string());
        for patch in extract_patches(&cube, args.patch_size)? {
            pairs.push((make_pair(&patch, args.scale)?, source.clone()));
        }
    }
    let split_input: Vec<SamplePair> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let (train_pairs, val_pairs) = split_dataset(split_input, args.val_fraction, args.seed)?;

    // Recover each pair's source name by content identity.
    let source_of = |pair: &SamplePair| -> String {
        pairs
            .iter()
            .find(|(p, _)| p == pair)
            .map(|(_, s)| s.clone())
            .unwrap_or_default()
    };

    let mut manifest = Manifest::default();
    let write_pairs = |manifest: &mut Manifest,
                           list: &[SamplePair],
                           split: Split|
     -> Result<(), CliError> {
        for pair in list {
            let index = manifest.pairs.len();
            let hr_name = format!("pair_{index:04}_hr.hsc");
            let lr_name = format!("pair_{index:04}_lrup.hsc");
            let meta = |t: &Tensor<f32>, suffix: &str| CubeMeta {
                height: t.height(),
                width: t.width(),
                bands: t.channels(),
                normalized: true,
                norm_scale: 1.0,
                source: format!("{} {suffix}", source_of(pair)),
            };
            write_hsc(
                &args.out_dir.join(&hr_name),
                &Cube::new(pair.hr.clone(), meta(&pair.hr, "hr"))?,
            )?;
            write_hsc(
                &args.out_dir.join(&lr_name),
                &Cube::new(pair.lr_up.clone(), meta(&pair.lr_up, "lr_up"))?,
            )?;
            manifest.pairs.push(ManifestPair {
                hr: hr_name,
                lr_up: lr_name,
                scale: args.scale,
                split,
                origin: [pair.origin.0, pair.origin.1],
                source: source_of(pair),
            });
        }
        Ok(())
    };
    write_pairs(&mut manifest, &train_pairs, Split::Train)?;
    write_pairs(&mut manifest, &val_pairs, Split::Val)?;
    manifest.save(&args.out_dir.join("manifest.toml"))?;
    println!(
        "prepared {} train / {} val pairs (patch {}, scale x{}) in {}",
        train_pairs.len(),
        val_pairs.len(),
        args.patch_size,
        args.scale,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = CliConfig::load(&args.config)?;
    let manifest_path = config
        .data
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("data.manifest is required for training".into()))?;
    let out_dir = config
        .data
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("data.out_dir is required for training".into()))?;
    require_dir(&out_dir)?;

    let manifest = Manifest::load(&manifest_path)?;
    if let Some(scale) = config.data.scale {
        if let Some(p) = manifest.pairs.iter().find(|p| p.scale != scale) {
            return Err(CliError::Usage(format!(
                "data.scale is {scale} but the manifest holds pairs at scale {}",
                p.scale
            )));
        }
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bands = manifest.peek_bands(dir)?;
    let model_cfg = config.model_config(Some(bands))?;
    let train_cfg = config.train_config();

    let data = TrainData {
        train: load_split(&manifest_path, Split::Train)?,
        val: load_split(&manifest_path, Split::Val)?,
    };
    if let Some(patch) = config.data.patch_size {
        if let Some(p) = data.train.first() {
            if p.hr.height() != patch {
                return Err(CliError::Usage(format!(
                    "data.patch_size is {patch} but pairs are {}",
                    p.hr.height()
                )));
            }
        }
    }

    let outcome = train(&model_cfg, &train_cfg, &data, Some(&out_dir))?;
    crate::data::write_atomic(
        &out_dir.join("history.tsv"),
        history_table(&outcome.history).as_bytes(),
    )?;
    save_checkpoint(&out_dir.join("best.ckpt"), &outcome.checkpoint)?;

    let (_, aggregate) = evaluate(&outcome.checkpoint.params, &data.val)?;
    let stop_line = match &outcome.stop {
        StopReason::EarlyStopped { at_epoch } => format!("early_stop@{at_epoch}"),
        StopReason::MaxEpochs => "max_epochs".to_string(),
        StopReason::NonFiniteLoss { at_step } => format!("non_finite_loss@{at_step}"),
    };
    let mut summary = String::new();
    summary.push_str(&format!("seed = {}\n", train_cfg.seed));
    summary.push_str(&format!("model_seed = {}\n", model_cfg.seed));
    summary.push_str(&format!("parameter_count = {}\n", param_count(&model_cfg)));
    summary.push_str(&format!("stop = {stop_line}\n"));
    summary.push_str(&format!("best_epoch = {}\n", outcome.checkpoint.epoch));
    summary.push_str(&format!("steps = {}\n", outcome.checkpoint.step));
    summary.push_str(&aggregate.to_text());
    crate::data::write_atomic(&out_dir.join("summary.txt"), summary.as_bytes())?;

    println!(
        "trained {} epochs ({} steps), stop: {stop_line}, val mpsnr {:.3} dB",
        outcome.history.len(),
        outcome.checkpoint.step,
        aggregate.mpsnr_db
    );
    if let StopReason::NonFiniteLoss { at_step } = outcome.stop {
        return Err(CliError::Check(format!(
            "loss became non-finite at step {at_step}; best checkpoint saved"
        )));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    require_dir(&args.out_dir)?;
    let ckpt: Checkpoint = load_checkpoint(&args.checkpoint)?;
    let pairs = load_split(&args.manifest, args.split)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "manifest has no pairs in the {:?} split",
            args.split
        )));
    }
    let (reports, aggregate) = evaluate(&ckpt.params, &pairs)?;
    for (i, report) in reports.iter().enumerate() {
        crate::data::write_atomic(
            &args.out_dir.join(format!("metrics_pair_{i:04}.txt")),
            report.to_text().as_bytes(),
        )?;
        crate::data::write_atomic(
            &args.out_dir.join(format!("metrics_pair_{i:04}.json")),
            report.to_json().as_bytes(),
        )?;
    }
    crate::data::write_atomic(
        &args.out_dir.join("metrics_aggregate.txt"),
        aggregate.to_text().as_bytes(),
    )?;
    crate::data::write_atomic(
        &args.out_dir.join("metrics_aggregate.json"),
        aggregate.to_json().as_bytes(),
    )?;
    print!("{}", aggregate.to_text());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cube = read_hsc(&args.input)?;
    if cube.bands() != ckpt.config.bands {
        return Err(CliError::Usage(format!(
            "input has {} bands but the checkpoint expects {}",
            cube.bands(),
            ckpt.config.bands
        )));
    }
    if !matches!(args.scale, 2 | 4 | 8) {
        return Err(CliError::Usage(format!(
            "scale {} unsupported (must be 2, 4, or 8)",
            args.scale
        )));
    }
    let up = bilinear_resize(
        &cube.data,
        cube.height() * args.scale,
        cube.width() * args.scale,
    )?;
    let out = crate::model::hdl_forward(&up, &ckpt.params, Mode::Infer)?;
    // The network output can leave the normalized range slightly; clamp so
    // the written cube honors the [0, 1] contract.
    let clamped = if cube.meta.normalized {
        out.map(|v| v.clamp(0.0, 1.0))
    } else {
        out
    };
    let result = Cube::new(
        clamped,
        CubeMeta {
            height: cube.height() * args.scale,
            width: cube.width() * args.scale,
            bands: cube.bands(),
            normalized: cube.meta.normalized,
            norm_scale: cube.meta.norm_scale,
            source: format!("{} x{} super-resolved", cube.meta.source, args.scale),
        },
    )?;
    write_hsc(&args.output, &result)?;
    println!(
        "super-resolved {} -> {} ({}x{}x{})",
        args.input.display(),
        args.output.display(),
        result.height(),
        result.width(),
        result.bands()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if !(args.step > 0.0) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let cfg = BatteryConfig {
        bands: args.bands,
        feature_width: args.feature_width,
        num_residual_blocks: args.blocks,
        batch: args.batch,
        height: args.height,
        width: args.width,
        seed: args.seed,
        settings: GradCheckSettings {
            step: args.step,
            tolerance: args.tolerance,
            ..GradCheckSettings::default()
        },
    };
    let report = run_battery(&cfg)?;
    println!("{report}");
    if report.pass() {
        Ok(())
    } else {
        let worst: Vec<String> = report
            .worst_first()
            .into_iter()
            .take(5)
            .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_err))
            .collect();
        Err(CliError::Check(format!(
            "gradient check failed; worst offenders: {}",
            worst.join(", ")
        )))
    }
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let cube = read_hsc(&args.cube)?;
    let bands = [args.bands[0], args.bands[1], args.bands[2]];
    write_false_color(&cube, bands, &args.out)?;
    println!(
        "rendered bands ({}, {}, {}) of {} to {}",
        bands[0],
        bands[1],
        bands[2],
        args.cube.display(),
        args.out.display()
    );
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<(), CliError> {
    let cfg = ModelConfig {
        bands: args.bands,
        feature_width: args.feature_width,
        num_residual_blocks: args.blocks,
        ..ModelConfig::new(args.bands)
    };
    cfg.validate()?;
    let params = init_params::<f32>(&cfg)?;
    let mut total = 0usize;
    println!("{:<24} {:>10}", "tensor", "elements");
    for (name, _, values) in params.leaf_entries() {
        if !crate::model::is_trainable(&name) {
            continue;
        }
        println!("{name:<24} {:>10}", values.len());
        total += values.len();
    }
    println!("{:<24} {:>10}", "total", total);
    let closed_form = param_count(&cfg);
    if closed_form != total {
        return Err(CliError::Check(format!(
            "closed-form count {closed_form} disagrees with enumeration {total}"
        )));
    }
    Ok(())
}
