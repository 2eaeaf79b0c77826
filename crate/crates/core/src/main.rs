use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gan_unlearning::experiments::{compare_runs, emit_plots, ExperimentConfig, Pipeline};
use gan_unlearning::models::ModelSnapshot;
use gan_unlearning::Error;

#[derive(Parser)]
#[command(name = "gan-unlearn", version, about = "Cascaded unlearning for GANs: pipeline stages and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set unlearn.f_label=-1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Recompute stages even when cached outputs match.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the raw GAN on the full training set.
    Train(ConfigArgs),
    /// Train the downstream classifier (also the feature extractor).
    TrainClassifier(ConfigArgs),
    /// Invert the unlearning images into latent codes.
    Invert(ConfigArgs),
    /// Latent means of the inverted reference subset.
    Stats(ConfigArgs),
    /// Run cascaded unlearning and print the post-unlearning report.
    Unlearn(ConfigArgs),
    /// Retrain from scratch on the learning set only.
    RetrainBaseline(ConfigArgs),
    /// Metrics of a GAN snapshot (default: the unlearned one).
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// LOGAN membership audit AUC_{u,t} (default: raw and unlearned).
    Mia {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Regenerate the figures of a finished run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// Comparison table of several runs, with saving factors.
    Compare {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Row that defines saving factor 1 (default: first retraining row).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Every stage, reports, baseline (if configured), plots and manifest.
    Run(ConfigArgs),
}

fn pipeline(args: &ConfigArgs) -> gan_unlearning::Result<Pipeline> {
    let cfg = ExperimentConfig::load_with_overrides(&args.config, &args.overrides)?;
    let mut p = Pipeline::new(&cfg)?;
    p.force = args.force;
    Ok(p)
}

fn stages(p: &Pipeline) -> Value {
    json!(p.records())
}

fn execute(cli: Cli) -> gan_unlearning::Result<Value> {
    Ok(match cli.command {
        Command::Train(a) => {
            let mut p = pipeline(&a)?;
            let (_, snap) = p.raw_gan()?;
            json!({"parameter_hash": snap.parameter_hash(), "stages": stages(&p)})
        }
        Command::TrainClassifier(a) => {
            let mut p = pipeline(&a)?;
            p.classifier()?;
            json!({"stages": stages(&p)})
        }
        Command::Invert(a) => {
            let mut p = pipeline(&a)?;
            let (_, inv) = p.inversion()?;
            let worst = inv.final_errors.iter().copied().fold(0.0, f64::max);
            let mean = inv.final_errors.iter().sum::<f64>() / inv.final_errors.len().max(1) as f64;
            json!({"images": inv.ids.len(), "mean_mse": mean, "max_mse": worst, "stages": stages(&p)})
        }
        Command::Stats(a) => {
            let mut p = pipeline(&a)?;
            let (_, stats) = p.latent_stats()?;
            json!({"class_counts": stats.class_counts, "empty_classes": stats.empty_classes(), "stages": stages(&p)})
        }
        Command::Unlearn(a) => {
            let mut p = pipeline(&a)?;
            let (_, o) = p.unlearn()?;
            json!({"pre": o.pre(), "post": o.post(), "stop_reason": o.stop_reason, "iterations": o.iterations, "wall_time_s": o.wall_time_s, "stages": stages(&p)})
        }
        Command::RetrainBaseline(a) => {
            let mut p = pipeline(&a)?;
            let (_, report, _) = p.baseline()?;
            json!({"baseline": report, "stages": stages(&p)})
        }
        Command::Evaluate { cfg, snapshot } => {
            let mut p = pipeline(&cfg)?;
            let snap = match snapshot {
                Some(path) => ModelSnapshot::load(path)?,
                None => p.unlearn()?.1.snapshot.expect("stage returns its snapshot"),
            };
            serde_json::to_value(p.evaluate_snapshot(&snap)?)?
        }
        Command::Mia { cfg, snapshot } => {
            let mut p = pipeline(&cfg)?;
            match snapshot {
                Some(path) => json!({"auc_ut": p.audit_snapshot(&ModelSnapshot::load(path)?)?}),
                None => {
                    let (_, raw) = p.raw_gan()?;
                    let (_, o) = p.unlearn()?;
                    let unlearned = o.snapshot.expect("stage returns its snapshot");
                    json!({"pre": p.audit_snapshot(&raw)?, "post": p.audit_snapshot(&unlearned)?})
                }
            }
        }
        Command::Plot { run } => json!({"plots": emit_plots(run)?}),
        Command::Compare { manifests, baseline, out } => {
            let rows = compare_runs(&manifests, baseline.as_deref(), &out)?;
            json!({"table": out, "rows": rows})
        }
        Command::Run(a) => {
            let mut p = pipeline(&a)?;
            let s = p.run()?;
            json!({
                "manifest": p.run_dir().join("manifest.json"),
                "pre": s.outcome.pre(),
                "post": s.outcome.post(),
                "stop_reason": s.outcome.stop_reason,
                "wall_time_s": s.outcome.wall_time_s,
                "baseline_wall_time_s": s.baseline.as_ref().map(|b| b.wall_time_s),
                "saving_factor": s.saving_factor(),
                "stages": s.stages,
            })
        }
    })
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match &e {
                Error::Argument(_) => "argument",
                Error::Config(_) => "config",
                Error::Format(_) => "format",
                Error::Corruption(_) => "corruption",
                Error::Shape(_) => "shape",
                Error::Migration { .. } => "migration",
                Error::Integrity(_) => "integrity",
                Error::Divergence(_) => "divergence",
                Error::MissingArtifacts(_) => "missing_artifacts",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
            };
            eprintln!("{}", json!({"error": kind, "message": e.to_string()}));
            match e {
                Error::Argument(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
