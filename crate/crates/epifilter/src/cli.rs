//! Command line entry point.
//!
//! Subcommands mirror the experimental workflow: `gen-data` synthesizes a
//! dataset, `fit-prior` fits the ratio densities, `train` runs the
//! optimization loop, `eval` produces the method comparison report, and
//! `verify-theory` exercises the guided-weighting guarantees standalone.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or i/o error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::cascade::ModelError;
use crate::datagen::{self, DataError, SceneConfig};
use crate::loss;
use crate::metrics::{self, Method, PostProcess};
use crate::prior::{self, PriorError};
use crate::trainer::{self, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "epifilter",
    about = "Correspondence filtering for two-view geometry",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-view dataset.
    GenData(GenDataArgs),
    /// Fit the distinctiveness-ratio densities from a labeled dataset.
    FitPrior(FitPriorArgs),
    /// Train the cascade classifier.
    Train(TrainArgs),
    /// Evaluate methods and post-processing combinations.
    Eval(EvalArgs),
    /// Run the guided-weighting invariant suite.
    VerifyTheory(VerifyTheoryArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of image pairs.
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// Correspondences per pair.
    #[arg(long, default_value_t = 500)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    outlier_ratio_min: f64,
    #[arg(long, default_value_t = 0.9)]
    outlier_ratio_max: f64,
    /// Gaussian pixel noise on inlier projections.
    #[arg(long, default_value_t = 0.5)]
    noise_px: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the manifest and records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitPriorArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON path for the density model.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = prior::DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (overrides the config file's `dataset`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prior model JSON (overrides the config file's `prior`).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for log, curves and checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Prior model JSON.
    #[arg(long)]
    prior: PathBuf,
    /// Checkpoint of the trained model (required for `learned`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated: learned, ransac-only, oracle.
    #[arg(long, default_value = "learned,ransac-only")]
    methods: String,
    /// Comma-separated: w8pt, ransac.
    #[arg(long, default_value = "w8pt,ransac")]
    post: String,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyTheoryArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Random directions per trial for the anti-parallelism check.
    #[arg(long, default_value_t = 1000)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::FitPrior(args) => fit_prior(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::VerifyTheory(args) => verify_theory(args),
    };
    match outcome {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<PriorError> for Failure {
    fn from(e: PriorError) -> Self {
        Failure::new(EXIT_DATA, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NumericFailure(_) => EXIT_NUMERIC,
            TrainError::BadConfig(_) => EXIT_USAGE,
            TrainError::Model(ModelError::InvalidConfig(_)) => EXIT_USAGE,
            TrainError::Model(_) => EXIT_NUMERIC,
            TrainError::Loss(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<metrics::MetricsError> for Failure {
    fn from(e: metrics::MetricsError) -> Self {
        let code = match &e {
            metrics::MetricsError::BadThreshold(_) => EXIT_USAGE,
            metrics::MetricsError::MissingModel => EXIT_DATA,
            metrics::MetricsError::Io(_) | metrics::MetricsError::Json(_) => EXIT_DATA,
            metrics::MetricsError::Prior(_) => EXIT_DATA,
            _ => EXIT_NUMERIC,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_DATA, e.to_string())
    }
}

fn gen_data(args: GenDataArgs) -> Result<i32, Failure> {
    let mut config = SceneConfig::with_seed(args.seed);
    config.num_correspondences = args.points;
    config.outlier_ratio_min = args.outlier_ratio_min;
    config.outlier_ratio_max = args.outlier_ratio_max;
    config.noise_std_px = args.noise_px;
    config.validate()?;
    let dataset = datagen::generate_dataset(&config, args.pairs)?;
    datagen::write_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} pairs of {} correspondences to {}",
        args.pairs,
        args.points,
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn fit_prior(args: FitPriorArgs) -> Result<i32, Failure> {
    let dataset = datagen::read_dataset(&args.data)?;
    let mut ratios = Vec::new();
    let mut labels = Vec::new();
    for pair in &dataset.pairs {
        ratios.extend_from_slice(&pair.lowe_ratios);
        labels.extend_from_slice(&pair.labels);
    }
    let model = prior::fit_ratio_densities(&ratios, &labels, args.bins)?;
    prior::write_prior_model(&model, &args.out)?;
    println!(
        "fitted {}-bin ratio densities from {} samples to {}",
        model.bins(),
        ratios.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn train(args: TrainArgs) -> Result<i32, Failure> {
    let text = std::fs::read_to_string(&args.config)?;
    let (tcfg, ccfg) = trainer::parse_config_text(&text)?;
    let data_path = args
        .data
        .clone()
        .or_else(|| tcfg.dataset_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            Failure::new(EXIT_USAGE, "no dataset given (pass --data or set `dataset`)")
        })?;
    let prior_path = args
        .prior
        .clone()
        .or_else(|| tcfg.prior_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            Failure::new(EXIT_USAGE, "no prior model given (pass --prior or set `prior`)")
        })?;
    let artifacts = trainer::train_from_files(&data_path, &prior_path, tcfg, ccfg, &args.out)?;
    println!(
        "trained: checkpoint {}, log {}, final val precision {:.4} recall {:.4} F2 {:.4}",
        artifacts.checkpoint.display(),
        artifacts.log.display(),
        artifacts.final_val.precision,
        artifacts.final_val.recall,
        artifacts.final_val.f2
    );
    Ok(EXIT_OK)
}

fn parse_list<T: std::str::FromStr<Err = String>>(text: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Failure::new(EXIT_USAGE, e))
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<i32, Failure> {
    let methods: Vec<Method> = parse_list(&args.methods)?;
    let posts: Vec<PostProcess> = parse_list(&args.post)?;
    if methods.is_empty() || posts.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "empty method or post list"));
    }
    let dataset = datagen::read_dataset(&args.data)?;
    let prior_model = prior::read_prior_model(&args.prior)?;
    let model = match &args.checkpoint {
        Some(path) => Some(trainer::load_checkpoint(path)?.model),
        None => None,
    };
    if methods.contains(&Method::Learned) && model.is_none() {
        return Err(Failure::new(
            EXIT_DATA,
            "method `learned` requires --checkpoint",
        ));
    }
    let report = metrics::run_comparison(
        &dataset,
        &prior_model,
        model.as_ref(),
        &methods,
        &posts,
        args.seed,
    )?;
    std::fs::create_dir_all(&args.report)?;
    let json_path = args.report.join("report.json");
    let csv_path = args.report.join("report.csv");
    metrics::write_report_json(&report, &json_path)?;
    metrics::write_report_csv(&report, &csv_path)?;
    for row in &report.rows {
        println!(
            "{:>12} + {:<6} mAP5 {:6.2} mAP10 {:6.2} mAP20 {:6.2} P {:.3} R {:.3} F2 {:.3}",
            row.method, row.post, row.map5, row.map10, row.map20, row.mean_p, row.mean_r,
            row.mean_f2
        );
    }
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(EXIT_OK)
}

fn verify_theory(args: VerifyTheoryArgs) -> Result<i32, Failure> {
    let report = loss::verify_theory(args.trials, args.directions, args.seed);
    println!("trials: {}", report.trials);
    println!("directions per trial: {}", report.directions_per_trial);
    println!("max ratio-condition residual: {:.3e}", report.max_ratio_residual);
    println!(
        "max anti-parallel product: {:.3e}",
        report.max_antiparallel_product
    );
    println!("weight-sum violations: {}", report.weight_sum_violations);
    println!("ordering violations: {}", report.ordering_violations);
    println!("sign violations: {}", report.sign_violations);
    println!("degenerate fallbacks: {}", report.fallback_count);
    let clean = report.weight_sum_violations == 0
        && report.ordering_violations == 0
        && report.sign_violations == 0
        && report.max_ratio_residual < 1e-9
        && report.max_antiparallel_product <= 1e-12;
    if clean {
        println!("verdict: PASS");
        Ok(EXIT_OK)
    } else {
        println!("verdict: FAIL");
        Ok(EXIT_NUMERIC)
    }
}
