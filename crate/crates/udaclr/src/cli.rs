//! Command-line entry point: `synth`, `train`, `eval` and `ablate`
//! subcommands with shared config and seed handling.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
//! `UDACLR_DETERMINISTIC=1` is equivalent to passing `--deterministic`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::datasets::{generate_benchmark, Dataset, DomainTag, ShiftPreset};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_checkpoint, render_run_report, run_ablation, summarize, table2_grid, table3_pair,
    AblationRow,
};
use crate::trainer::{fit, selected_checkpoint, Preset, TrainConfig};

#[derive(Parser)]
#[command(
    name = "udaclr",
    version,
    about = "Domain-adaptive nested segmentation with category-level regularization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domain-shift benchmark
    Synth(SynthArgs),
    /// Train on a labelled source and an unlabelled target domain
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset
    Eval(EvalArgs),
    /// Train and evaluate an ablation grid with shared seeds
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output root; writes source/, target/ and target_test/ subdirectories
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 100)]
    n_target: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    /// Domain gap severity: mild or strong
    #[arg(long, default_value = "mild")]
    shift_preset: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Image side length
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct CommonTrainArgs {
    /// JSON config file (fields mirror the resolved config)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Schedule preset applied before the config file: desk or paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Force deterministic single-worker mode
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config field, e.g. --set lambda2=0 --set perturb.hue=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long)]
    source_dir: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    /// Optional labelled validation split; when absent and the target
    /// directory is labelled, every 5th target sample is held out
    #[arg(long)]
    target_val_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled dataset directory ({images,masks}/)
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write predicted masks (0/128/255 coding) under <out>/masks
    #[arg(long)]
    dump_masks: bool,
    /// Write per-class MC uncertainty heatmaps (16-bit PNG) to this directory
    #[arg(long, value_name = "DIR")]
    dump_uncertainty: Option<PathBuf>,
    /// Binarization threshold
    #[arg(long, default_value_t = 0.75)]
    beta: f32,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Base config file (alias of --config)
    #[arg(long)]
    base_config: Option<PathBuf>,
    #[arg(long)]
    source_dir: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    /// Labelled target test directory for the final scores
    #[arg(long)]
    test_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds (base seed, base seed + 1, ...)
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Which rows to run: table2, table3 or both
    #[arg(long, default_value = "both")]
    grid: String,
    /// Concurrent training runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Parse argv and run; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            // --help/--version land here with a zero exit code.
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.cmd {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let preset: ShiftPreset = args.shift_preset.parse()?;
    if args.size < 16 || args.size % 16 != 0 {
        return Err(Error::config(format!(
            "--size must be a positive multiple of 16, got {}",
            args.size
        )));
    }
    let bench = generate_benchmark(
        preset,
        args.n_source,
        args.n_target,
        args.n_test,
        args.size,
        args.seed,
    )?;
    bench.source.save_dir(&args.out.join("source"), true)?;
    bench.target_train.save_dir(&args.out.join("target"), true)?;
    bench
        .target_test
        .save_dir(&args.out.join("target_test"), true)?;
    println!(
        "wrote {} source, {} target and {} target-test samples under {}",
        bench.source.len(),
        bench.target_train.len(),
        bench.target_test.len(),
        args.out.display()
    );
    Ok(())
}

/// Resolve the effective config: preset defaults, then the config file,
/// then `--set` overrides, then explicit flags.
fn resolve_config(common: &CommonTrainArgs, file_alias: Option<&Path>) -> Result<TrainConfig> {
    let preset: Preset = common.preset.parse()?;
    let mut cfg = TrainConfig::with_preset(preset);
    let config_path = common.config.as_deref().or(file_alias);
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
    }
    for kv in &common.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set_field(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic || std::env::var("UDACLR_DETERMINISTIC").as_deref() == Ok("1") {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_labeled(dir: &Path, domain: DomainTag, what: &str) -> Result<Dataset> {
    let ds = Dataset::load_dir(dir, domain)?;
    if ds.is_empty() {
        return Err(Error::validation(format!(
            "{what} dataset at {} is empty",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Hold out every 5th labelled target sample as a validation split.
fn carve_val(target: Dataset) -> (Dataset, Option<Dataset>) {
    if !target.is_labeled() || target.len() < 5 {
        return (target, None);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in target.samples.into_iter().enumerate() {
        if i % 5 == 0 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (
        Dataset { samples: train },
        Some(Dataset { samples: val }),
    )
}

fn print_resolved(cfg: &TrainConfig) {
    println!(
        "resolved config ({}):\n{}",
        cfg.config_hash(),
        serde_json::to_string_pretty(cfg).expect("config serializes")
    );
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, None)?;
    print_resolved(&cfg);
    let source = load_labeled(&args.source_dir, DomainTag::Source, "source")?;
    let target = load_labeled(&args.target_dir, DomainTag::Target, "target")?;
    let (target_train, target_val) = match &args.target_val_dir {
        Some(dir) => (
            target,
            Some(load_labeled(dir, DomainTag::Target, "target-val")?),
        ),
        None => carve_val(target),
    };
    let result = fit(
        &cfg,
        &source,
        &target_train,
        target_val.as_ref(),
        &args.out,
    )?;
    render_run_report(&args.out)?;
    println!(
        "training done: {} epochs, best val mean dice {:?}",
        cfg.epochs, result.best_metric
    );
    println!("selected checkpoint: {}", selected_checkpoint(&result).display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data = load_labeled(&args.data, DomainTag::Target, "eval")?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let masks_dir = args.dump_masks.then(|| args.out.join("masks"));
    let result = evaluate_checkpoint(
        &args.checkpoint,
        &data,
        args.beta,
        masks_dir.as_deref(),
        args.dump_uncertainty.as_deref(),
    )?;
    let results_path = args.out.join("results.json");
    std::fs::write(
        &results_path,
        serde_json::to_vec_pretty(&result).expect("result serializes"),
    )
    .map_err(|e| Error::io(&results_path, e))?;
    println!(
        "dice disc {:.4}, dice cup {:.4} over {} images -> {}",
        result.dice_disc,
        result.dice_cup,
        result.per_image.len(),
        results_path.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, args.base_config.as_deref())?;
    print_resolved(&cfg);
    if args.seeds == 0 {
        return Err(Error::config("--seeds must be >= 1"));
    }
    let grid: Vec<AblationRow> = match args.grid.as_str() {
        "table2" => table2_grid(),
        "table3" => table3_pair(),
        "both" => {
            let mut g = table2_grid();
            g.extend(table3_pair());
            g
        }
        other => {
            return Err(Error::config(format!(
                "unknown grid `{other}` (expected table2|table3|both)"
            )))
        }
    };
    let source = load_labeled(&args.source_dir, DomainTag::Source, "source")?;
    let target = load_labeled(&args.target_dir, DomainTag::Target, "target")?;
    let test = load_labeled(&args.test_dir, DomainTag::Target, "test")?;
    if !test.is_labeled() {
        return Err(Error::validation("test dataset must be labelled"));
    }
    let (target_train, target_val) = carve_val(target);
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed + i).collect();
    let outcomes = run_ablation(
        &cfg,
        &grid,
        &seeds,
        &source,
        &target_train,
        target_val.as_ref(),
        &test,
        &args.out,
        args.jobs.max(1),
    )?;
    println!("config            | dice disc (mean±std) | dice cup (mean±std)");
    for (name, md, sd, mc, sc) in summarize(&outcomes) {
        println!("{name:<18}| {md:.4}±{sd:.4}        | {mc:.4}±{sc:.4}");
    }
    println!("details: {}", args.out.join("ablation.csv").display());
    Ok(())
}
