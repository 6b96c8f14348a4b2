//! Command-line driver: ingest acquisition stacks, train and evaluate
//! denoisers, denoise frames, and run the full experiment matrix.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 data error,
//! 4 training divergence.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mcdenoise_core::data::{
    self, build_dataset, guess_format, synthesize_ground_truth, DatasetManifest, DatasetParams,
    FewShotSize, FewShotSpec, StackFormat,
};
use mcdenoise_core::error::{DataError, TrainError};
use mcdenoise_core::harness::{collect_reports, make_table, parse_plan, run_plan};
use mcdenoise_core::inference::{denoise_frame, export_crops, BlendMode, TilingSpec};
use mcdenoise_core::losses::LossWeights;
use mcdenoise_core::metrics::{evaluate, write_aggregate_csv, EvalContext};
use mcdenoise_core::training::{
    fit, AblationFlags, FitOptions, ModelConfigs, TrainConfig, TrainState,
};
use mcdenoise_core::Error;

#[derive(Parser)]
#[command(
    name = "mcdenoise",
    about = "Few-shot microscopy image denoising with adversarial and contrastive training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an acquisition stack into a re-runnable dataset manifest.
    Ingest(IngestArgs),
    /// Train one model on an ingested dataset.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Denoise a frame or stack with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Run the full experiment matrix from a plan file.
    Plan(PlanArgs),
    /// Aggregate cell reports into the final table.
    Table(TableArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Acquisition stack: multi-page TIFF, image directory, or raw file.
    #[arg(long)]
    input: PathBuf,
    /// Container format; inferred from the path when omitted.
    #[arg(long)]
    format: Option<StackFormat>,
    /// Dataset name recorded in the manifest.
    #[arg(long)]
    name: Option<String>,
    /// Manifest output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    low_pct: f64,
    #[arg(long, default_value_t = 99.9)]
    high_pct: f64,
    #[arg(long, default_value_t = 256)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct TrainHyperArgs {
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    decay_start_epoch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_gan: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_l1: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_ssim: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda_tv: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_cl: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long)]
    use_tv: bool,
    #[arg(long)]
    use_ssim: bool,
    #[arg(long)]
    use_cl: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainHyperArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            decay_start_epoch: self.decay_start_epoch,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: LossWeights {
                lambda_gan: self.lambda_gan,
                lambda_l1: self.lambda_l1,
                lambda_ssim: self.lambda_ssim,
                lambda_tv: self.lambda_tv,
                lambda_cl: self.lambda_cl,
                tau: self.tau,
            },
            seed: self.seed,
            ablation: AblationFlags {
                use_tv: self.use_tv,
                use_ssim: self.use_ssim,
                use_cl: self.use_cl,
            },
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest from `ingest`.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for checkpoints, the loss CSV, and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Model sizing preset.
    #[arg(long, default_value = "paper-faithful")]
    model_preset: String,
    /// Few-shot training-set size ("all" or a count).
    #[arg(long, default_value = "all")]
    n_samples: FewShotSize,
    /// Checkpoint every K epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Resume from <out>/final.ckpt, appending to the loss CSV.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    hyper: TrainHyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    experiment: String,
    #[arg(long, default_value = "all")]
    n_samples: FewShotSize,
    /// Tile overlap in pixels (default: tile/8).
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long, default_value = "linear-ramp")]
    blend: String,
    /// Also export qualitative PNG panels of this crop (row0,row1,col0,col1)
    /// for the first test frame.
    #[arg(long, value_delimiter = ',')]
    export_crop: Option<Vec<usize>>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input frame or stack.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    format: Option<StackFormat>,
    /// Output directory for denoised frames.
    #[arg(long)]
    output: PathBuf,
    /// Dataset manifest carrying the training normalization record.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Treat inputs as already normalized to [0, 1].
    #[arg(long)]
    pre_normalized: bool,
    /// Also write raw-intensity 16-bit TIFFs (needs --manifest).
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long, default_value = "linear-ramp")]
    blend: String,
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Skip cells whose outputs are complete and configuration-matched
    /// (the default; kept as an explicit flag).
    #[arg(long, default_value_t = true)]
    resume: bool,
    /// Re-run every cell even if complete.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TableArgs {
    /// Directory searched recursively for cell report.csv files.
    #[arg(long)]
    reports: PathBuf,
    /// Output prefix: writes <prefix>.csv and <prefix>.txt.
    #[arg(long)]
    out: PathBuf,
}

fn parse_blend(name: &str) -> Result<BlendMode, Error> {
    match name {
        "linear-ramp" => Ok(BlendMode::LinearRamp),
        "uniform-average" => Ok(BlendMode::UniformAverage),
        other => Err(TrainError::InvalidConfig(format!("unknown blend mode {other:?}")).into()),
    }
}

fn model_preset(name: &str) -> Result<ModelConfigs, Error> {
    match name {
        "paper-faithful" => Ok(ModelConfigs::paper_faithful()),
        "desk-scale" => Ok(ModelConfigs::desk_scale()),
        other => {
            Err(TrainError::InvalidConfig(format!("unknown model preset {other:?}")).into())
        }
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<(), Error> {
    let format = args.format.unwrap_or_else(|| guess_format(&args.input));
    let stack = data::load_stack(&args.input, format)?;
    let name = args
        .name
        .unwrap_or_else(|| stack.name().to_string());
    let params = DatasetParams {
        patch_size: args.patch_size,
        test_fraction: args.test_fraction,
        low_pct: args.low_pct,
        high_pct: args.high_pct,
    };
    let gt = synthesize_ground_truth(&stack);
    let dataset = build_dataset(&stack, &gt, &params, args.seed)?;
    let manifest = DatasetManifest {
        name,
        stack_path: args.input.clone(),
        stack_format: format,
        normalization: *dataset.normalization(),
        patch_size: dataset.patch_size(),
        test_fraction: args.test_fraction,
        split_seed: args.seed,
        train_indices: dataset.train_indices().to_vec(),
        test_indices: dataset.test_indices().to_vec(),
    };
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    data::write_manifest(&manifest, &args.out)?;
    println!(
        "ingested {} frames ({} train / {} test) -> {}",
        stack.len(),
        dataset.train_len(),
        dataset.test_len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let manifest = data::read_manifest(&args.manifest)?;
    let dataset = data::load_dataset(&manifest)?;
    let dataset = dataset.few_shot_subset(&FewShotSpec {
        n_samples: args.n_samples,
        seed: args.hyper.seed,
    })?;
    let cfg = args.hyper.to_config();
    cfg.validate().map_err(Error::Train)?;

    let models = model_preset(&args.model_preset)?;
    std::fs::create_dir_all(&args.out)?;
    let final_ckpt = args.out.join("final.ckpt");
    let mut state = if args.resume && final_ckpt.exists() {
        TrainState::load(&final_ckpt, cfg.beta1, cfg.beta2)?
    } else {
        TrainState::init(&models, cfg.seed, cfg.beta1, cfg.beta2)?
    };

    let run_record = serde_json::json!({
        "manifest": args.manifest.display().to_string(),
        "manifest_hash": data::manifest_hash(&args.manifest)?,
        "n_samples": args.n_samples.to_string(),
        "models": models,
        "train": cfg,
        "code_version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&run_record).expect("run record serializes"),
    )?;

    let opts = FitOptions {
        loss_csv_path: Some(args.out.join("loss.csv")),
        append_loss_csv: args.resume,
        checkpoint_dir: Some(args.out.clone()),
        checkpoint_every_epochs: args.checkpoint_every,
        stop_after_epoch: None,
    };
    fit(&dataset, &mut state, &cfg, &opts)?;
    println!(
        "trained to epoch {} ({} steps) -> {}",
        state.epoch,
        state.global_step,
        final_ckpt.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let manifest = data::read_manifest(&args.manifest)?;
    let dataset = data::load_dataset(&manifest)?;
    let state = TrainState::load(&args.checkpoint, 0.5, 0.999)?;
    let tile = state.generator.config().input_size;
    let mut tiling = TilingSpec::for_tile(tile);
    if let Some(o) = args.overlap {
        tiling.overlap = o;
    }
    tiling.blend = parse_blend(&args.blend)?;

    let ctx = EvalContext::new(dataset.name(), &args.experiment, args.n_samples);
    let generator = &state.generator;
    let report = evaluate(
        |frame| denoise_frame(generator, frame, &tiling).expect("validated tiling"),
        &dataset,
        &ctx,
    )?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    report.write_csv(std::fs::File::create(&args.out)?)?;

    for agg in report.aggregates() {
        println!(
            "{} {} ns={}: psnr {:.4} dB  ssim {:.4}  nrmse {:.6}  ({} images)",
            agg.dataset, agg.experiment, agg.n_samples, agg.psnr, agg.ssim, agg.nrmse, agg.images
        );
    }

    if let Some(crop) = args.export_crop {
        if crop.len() != 4 {
            return Err(TrainError::InvalidConfig(
                "--export-crop needs row0,row1,col0,col1".into(),
            )
            .into());
        }
        let (noisy, clean) = dataset.test_pair(0);
        let denoised = denoise_frame(generator, &noisy.view(), &tiling)?;
        let out_dir = args.out.parent().unwrap_or(std::path::Path::new(".")).join("crops");
        let paths = export_crops(
            &noisy.view(),
            &denoised.view(),
            &clean.view(),
            (crop[0], crop[1], crop[2], crop[3]),
            &out_dir,
        )?;
        for p in paths {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_denoise(args: DenoiseArgs) -> Result<(), Error> {
    let state = TrainState::load(&args.checkpoint, 0.5, 0.999)?;
    let tile = state.generator.config().input_size;
    let mut tiling = TilingSpec::for_tile(tile);
    if let Some(o) = args.overlap {
        tiling.overlap = o;
    }
    tiling.blend = parse_blend(&args.blend)?;

    let normalization = match (&args.manifest, args.pre_normalized) {
        (Some(path), _) => Some(data::read_manifest(path)?.normalization),
        (None, true) => None,
        (None, false) => {
            return Err(DataError::Manifest(
                "denoise needs --manifest for the normalization record, or --pre-normalized"
                    .into(),
            )
            .into());
        }
    };
    if args.raw && normalization.is_none() {
        return Err(DataError::Manifest("--raw needs --manifest".into()).into());
    }

    let format = args.format.unwrap_or_else(|| guess_format(&args.input));
    let frames = data::load_frames(&args.input, format)?;
    std::fs::create_dir_all(&args.output)?;
    let generator = &state.generator;
    for (i, frame) in frames.iter().enumerate() {
        let normalized = match &normalization {
            Some(rec) => data::apply_normalization(&frame.view(), rec),
            None => frame.clone(),
        };
        let denoised = denoise_frame(generator, &normalized.view(), &tiling)?;
        let out = args.output.join(format!("denoised_{i:04}.tif"));
        mcdenoise_core::inference::save_normalized_tiff(&out, &denoised)?;
        if args.raw {
            let raw_out = args.output.join(format!("denoised_{i:04}_raw.tif"));
            mcdenoise_core::inference::save_raw_tiff(
                &raw_out,
                &denoised,
                normalization.as_ref().expect("checked above"),
            )?;
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<(), Error> {
    let plan = parse_plan(&args.config)?;
    if args.force {
        for cell in plan.cells() {
            let marker = cell.dir(&plan.output_dir).join("COMPLETE");
            let _ = std::fs::remove_file(marker);
        }
    }
    let outcome = run_plan(&plan)?;
    println!(
        "plan finished: {} completed, {} skipped, {} failed",
        outcome.completed.len(),
        outcome.skipped.len(),
        outcome.failed.len()
    );
    for (cell, err) in &outcome.failed {
        eprintln!("failed {cell}: {err}");
    }

    let reports = collect_reports(&plan.output_dir)?;
    if !reports.is_empty() {
        let (marked, text) = make_table(&reports)?;
        let aggregates: Vec<_> = marked.iter().map(|m| m.row.clone()).collect();
        write_aggregate_csv(
            &aggregates,
            std::fs::File::create(plan.output_dir.join("table.csv"))?,
        )?;
        std::fs::write(plan.output_dir.join("table.txt"), &text)?;
        println!("{text}");
    }
    if !outcome.failed.is_empty() {
        // partial completion is reported but not fatal; the failure log
        // sits next to the outputs
        eprintln!(
            "{} cell(s) failed; see {}",
            outcome.failed.len(),
            plan.output_dir.join("failures.log").display()
        );
    }
    Ok(())
}

fn cmd_table(args: TableArgs) -> Result<(), Error> {
    let reports = if args.reports.is_file() {
        vec![args.reports.clone()]
    } else {
        collect_reports(&args.reports)?
    };
    if reports.is_empty() {
        println!("no reports found under {}", args.reports.display());
        return Ok(());
    }
    let (marked, text) = make_table(&reports)?;
    let aggregates: Vec<_> = marked.iter().map(|m| m.row.clone()).collect();
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let csv_path = args.out.with_extension("csv");
    let txt_path = args.out.with_extension("txt");
    write_aggregate_csv(&aggregates, std::fs::File::create(&csv_path)?)?;
    std::fs::write(&txt_path, &text)?;
    println!("{text}");
    println!("wrote {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Denoise(args) => cmd_denoise(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Table(args) => cmd_table(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
