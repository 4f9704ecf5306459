use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use s3da::error::{Error, Result};
use s3da::harness::train::{write_csv, write_json, write_report_csv};
use s3da::harness::{ablate_lambda, best_lambda, evaluate, label_stats, load_labels, mean_metric, train, RunConfig};
use s3da::model::Detector;
use s3da::sampling::ShapeScalePreset;
use s3da::verify;

#[derive(Parser)]
#[command(name = "s3da", version, about = "Shape&scale-perceptive deformable attention harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, env = "S3DA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Trains on synthetic scenes and writes a metrics CSV and the model.
    TrainSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, env = "S3DA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Scores key-point precision and matching accuracy of a saved model.
    EvalKeypoints {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, env = "S3DA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Shape and scale statistics of KITTI-format labels.
    LabelStats {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "car")]
        category: String,
        #[arg(long, env = "S3DA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Trains one model per λ and seed and reports held-out metrics.
    AblateLambda {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, env = "S3DA_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
}

/// Any error; the variant decides the exit code.
struct Failure(Error);

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => RunConfig::from_path(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    };
    cfg.map_err(Failure)
}

fn validated(cfg: RunConfig) -> std::result::Result<RunConfig, Failure> {
    cfg.validate().map_err(Failure)?;
    Ok(cfg)
}

fn output_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(command: Command) -> std::result::Result<bool, Failure> {
    match command {
        Command::Gradcheck { seeds, output_dir: dir } => {
            let results = verify::run_suite(seeds).map_err(Failure)?;
            for r in &results {
                println!(
                    "{} {:<28} max rel error {:.3e} over {} seeds",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_error,
                    r.seeds
                );
            }
            let dir = output_dir(dir, None).map_err(Failure)?;
            write_json(&dir.join("gradcheck.json"), &results).map_err(Failure)?;
            Ok(results.iter().all(|r| r.passed))
        }
        Command::TrainSynth {
            config,
            seed,
            lambda,
            steps,
            output_dir: dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lambda {
                cfg.set_lambda(l);
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let cfg = validated(cfg)?;
            let dir = output_dir(dir, Some(&cfg)).map_err(Failure)?;
            let outcome = train(&cfg).map_err(Failure)?;
            write_report_csv(&dir.join("metrics.csv"), &outcome.rows).map_err(Failure)?;
            write_json(&dir.join("model.json"), &outcome.model).map_err(Failure)?;
            write_json(&dir.join("config.json"), &cfg).map_err(Failure)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {}: loss {:.4}, matching accuracy {}, position precision {}, weighted {}",
                    last.step,
                    last.total_loss,
                    fmt(last.matching_accuracy),
                    fmt(last.position_precision),
                    fmt(last.weighted_position_precision)
                );
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::EvalKeypoints {
            model,
            config,
            scenes,
            output_dir: dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let text = std::fs::read_to_string(&model)
                .map_err(|e| Failure(Error::Config(format!("{}: {e}", model.display()))))?;
            let detector: Detector = serde_json::from_str(&text)
                .map_err(|e| Failure(Error::Config(format!("{}: {e}", model.display()))))?;
            if detector.config != cfg.model {
                return Err(Failure(Error::Config("model and config disagree on model dimensions".into())));
            }
            let report = evaluate(&detector, &cfg, scenes).map_err(Failure)?;
            println!(
                "{} scenes: matching accuracy {}, position precision {}, weighted position precision {}",
                report.scenes,
                fmt(report.matching_accuracy()),
                fmt(report.position_precision()),
                fmt(report.weighted_position_precision())
            );
            let dir = output_dir(dir, Some(&cfg)).map_err(Failure)?;
            write_json(&dir.join("eval_keypoints.json"), &report).map_err(Failure)?;
            Ok(true)
        }
        Command::LabelStats {
            labels,
            category,
            output_dir: dir,
        } => {
            let presets = ShapeScalePreset::for_category(&category)
                .ok_or_else(|| Failure(Error::Config(format!("unknown category {category:?}"))))?;
            let records = load_labels(&labels).map_err(Failure)?;
            let stats = label_stats(&records, &category, &presets, &Default::default()).map_err(Failure)?;
            print!("{}", stats.summary());
            let dir = output_dir(dir, None).map_err(Failure)?;
            write_json(&dir.join("label_stats.json"), &stats).map_err(Failure)?;
            Ok(true)
        }
        Command::AblateLambda {
            values,
            seeds,
            config,
            steps,
            scenes,
            output_dir: dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || values.is_empty() || seeds.is_empty() {
                return Err(Failure(Error::Config("λ values must be finite and nonnegative".into())));
            }
            let cfg = validated(cfg)?;
            let rows = ablate_lambda(&cfg, &values, &seeds, scenes).map_err(Failure)?;
            for &l in &values {
                println!(
                    "lambda {l}: matching accuracy {}, position precision {}, weighted {}",
                    fmt(mean_metric(&rows, l, |r| r.matching_accuracy)),
                    fmt(mean_metric(&rows, l, |r| r.position_precision)),
                    fmt(mean_metric(&rows, l, |r| r.weighted_position_precision))
                );
            }
            println!("best lambda: {}", fmt(best_lambda(&rows)));
            let dir = output_dir(dir, Some(&cfg)).map_err(Failure)?;
            write_csv(&dir.join("ablate_lambda.csv"), &rows).map_err(Failure)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Preset { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
