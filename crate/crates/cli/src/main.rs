mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand, ValueEnum};
use hvp_core::analysis::{compare_runs, compute_stats_from_paths, write_comparison_csv, write_histogram_csv, write_stats_csv};
use hvp_core::data::{load_cifar10_bin, synth_dataset, Dataset};
use hvp_core::eval::{
    append_result, collapse_metrics, extract_features, knn_eval, linear_probe, ProbeConfig, ResultRow, KNN_K,
    KNN_TEMPERATURE,
};
use hvp_core::model::load_checkpoint;
use hvp_core::trainer::{pretrain, RunOptions, TrainConfig};
use hvp_core::HvpError;

use manifest::RunManifest;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "hvp", version, about = "Hard view pretraining: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder from a JSON config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an epoch checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (the run can be resumed later).
        #[arg(long)]
        stop_after_epochs: Option<u64>,
    },
    /// Evaluate frozen encoder features and append one row to a results CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 binary file or `synth:SEED:N:CLASSES`; used as the train bank.
        #[arg(long)]
        data: String,
        /// Test bank; defaults to `--data`.
        #[arg(long)]
        test_data: Option<String>,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = KNN_K)]
        k: usize,
        #[arg(long, default_value_t = KNN_TEMPERATURE)]
        temperature: f32,
        /// Side length of the centre crop fed to the encoder.
        #[arg(long, default_value_t = 32)]
        input_size: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Selection statistics from JSONL logs, optionally against a baseline run.
    Analyze {
        #[arg(long, num_args = 1.., required = true)]
        log: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        baseline_log: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        bucket_epochs: u64,
        /// First epoch included in the printed summary.
        #[arg(long, default_value_t = 0)]
        from_epoch: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Knn,
    Linear,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
            stop_after_epochs,
        } => cmd_pretrain(&config, &out, resume, stop_after_epochs),
        Command::Eval {
            checkpoint,
            data,
            test_data,
            protocol,
            out,
            k,
            temperature,
            input_size,
            probe_seed,
        } => cmd_eval(EvalArgs {
            checkpoint,
            data,
            test_data,
            protocol,
            out,
            k,
            temperature,
            input_size,
            probe_seed,
        }),
        Command::Analyze {
            log,
            baseline_log,
            out,
            bucket_epochs,
            from_epoch,
        } => cmd_analyze(&log, &baseline_log, &out, bucket_epochs, from_epoch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(err) = e.chain().find_map(|c| c.downcast_ref::<HvpError>()) {
        return match err {
            HvpError::Config(_) | HvpError::ResumeMismatch(_) => EXIT_CONFIG,
            HvpError::NonFinite { .. } => EXIT_ABORT,
            HvpError::Io { .. } | HvpError::Format(_) | HvpError::Csv(_) => EXIT_IO,
            HvpError::Json(_) | HvpError::Contract(_) => EXIT_FAILURE,
        };
    }
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        EXIT_IO
    } else {
        EXIT_FAILURE
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HVP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("HVP_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn cmd_pretrain(config: &Path, out: &Path, resume: Option<PathBuf>, stop_after_epochs: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| HvpError::Io {
        path: config.to_path_buf(),
        source: e,
    })?;
    let cfg = TrainConfig::from_json(&text)?;
    let data = cfg.data.load()?;
    fs::create_dir_all(out).map_err(|e| HvpError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let started = Utc::now();
    let opts = RunOptions {
        resume,
        stop_after_epochs,
    };
    let outcome = pretrain(&cfg, &data, out, &opts)?;
    let manifest = RunManifest::new(&cfg, out, &outcome, started)?;
    let path = manifest.write(out)?;
    println!(
        "run {} finished={} epochs={} checkpoint={} manifest={}",
        manifest.run_id,
        outcome.finished,
        outcome.completed_epochs,
        outcome.final_checkpoint.display(),
        path.display()
    );
    Ok(())
}

/// `synth:SEED:N:CLASSES` or a CIFAR-10 binary batch file.
fn load_data(source: &str) -> Result<Dataset> {
    if let Some(rest) = source.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!(HvpError::Config(format!("expected synth:SEED:N:CLASSES, got {source:?}")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| HvpError::Config(format!("bad number {s:?} in {source:?}")).into())
        };
        return Ok(synth_dataset(num(parts[0])? as u64, num(parts[1])?, num(parts[2])?)?);
    }
    Ok(load_cifar10_bin(source)?)
}

struct EvalArgs {
    checkpoint: PathBuf,
    data: String,
    test_data: Option<String>,
    protocol: Protocol,
    out: PathBuf,
    k: usize,
    temperature: f32,
    input_size: usize,
    probe_seed: u64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let train_data = load_data(&a.data).with_context(|| format!("loading {}", a.data))?;
    let train = extract_features(&ck.model, &train_data, a.input_size)?;
    let test = match &a.test_data {
        Some(source) => {
            let ds = load_data(source).with_context(|| format!("loading {source}"))?;
            extract_features(&ck.model, &ds, a.input_size)?
        }
        None => train.clone(),
    };
    let (knn_acc, linear_acc) = match a.protocol {
        Protocol::Knn => (Some(knn_eval(&train, &test, a.k, a.temperature)?), None),
        Protocol::Linear => {
            let cfg = ProbeConfig {
                seed: a.probe_seed,
                ..ProbeConfig::default()
            };
            (None, Some(linear_probe(&train, &test, &cfg)?))
        }
    };
    let collapse = collapse_metrics(&test)?;
    let run = RunManifest::for_checkpoint(&a.checkpoint);
    let cfg = run.as_ref().map(|m| m.config.clone());
    let row = ResultRow {
        run_id: run
            .as_ref()
            .map(|m| m.run_id.clone())
            .unwrap_or_else(|| a.checkpoint.display().to_string()),
        objective: cfg
            .as_ref()
            .and_then(|c| serde_json::to_value(c.objective).ok())
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_else(|| "unknown".into()),
        mode: cfg.as_ref().map(|c| c.mode.name().to_string()).unwrap_or_else(|| "unknown".into()),
        n_views: cfg.as_ref().map(|c| c.n_views).unwrap_or(0),
        n_step: cfg.as_ref().map(|c| c.n_step).unwrap_or(0),
        seed: ck.meta.seed,
        knn_acc,
        linear_acc,
        per_dim_std_mean: collapse.per_dim_std_mean,
        effective_rank: collapse.effective_rank,
    };
    append_result(&a.out, &row)?;
    let acc = knn_acc.or(linear_acc).unwrap_or(f64::NAN);
    println!("{acc:.3}");
    Ok(())
}

fn cmd_analyze(logs: &[PathBuf], baseline: &[PathBuf], out: &Path, bucket_epochs: u64, from_epoch: u64) -> Result<()> {
    let stats = compute_stats_from_paths(logs, bucket_epochs)?;
    fs::create_dir_all(out).map_err(|e| HvpError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_stats_csv(out.join("stats.csv"), &stats)?;
    write_histogram_csv(out.join("histogram.csv"), &stats)?;
    let frac = stats.frac_lowest_iou_from(from_epoch);
    let delta_iou = stats.mean_iou_selected_from(from_epoch) - stats.mean_iou_random_from(from_epoch);
    let mut summary = format!(
        "records={} skipped={} frac_lowest_iou={frac:.4} mean_delta_iou={delta_iou:.4}",
        stats.records, stats.skipped_lines
    );
    if !baseline.is_empty() {
        let base = compute_stats_from_paths(baseline, bucket_epochs)?;
        write_stats_csv(out.join("baseline_stats.csv"), &base)?;
        let cmp = compare_runs(&stats, &base)?;
        write_comparison_csv(out.join("comparison.csv"), &cmp)?;
        summary.push_str(&format!(" loss_elevated={:.4}", cmp.loss_elevated));
    }
    println!("{summary}");
    Ok(())
}
