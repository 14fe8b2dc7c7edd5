use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ggiu_core::harness::{
    ablate, canonical_json, lambda_sweep_csv, patch_sweep_csv, run_eval, sweep_lambda,
    sweep_patches, variance_report,
};
use ggiu_core::store::{load_dataset, save_dataset};
use ggiu_core::synth::{write_truth_sidecar, SynthJob, SynthRecipe};
use ggiu_core::{DistanceMetric, EmbeddingDataset, EpisodeSpec, FusionConfig, GgiuError, LambdaDiag};

#[derive(Parser)]
#[command(name = "ggiu", version, about = "Totality/closure feature fusion for few-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one fusion configuration.
    Eval(EvalArgs),
    /// Run the four support/query on-off combinations.
    Ablate(EvalArgs),
    /// Accuracy over a grid of weights for several patch counts.
    SweepLambda(SweepLambdaArgs),
    /// Accuracy against the number of sampled patches.
    SweepPatches(SweepPatchesArgs),
    /// Intra-class variance before and after fusion.
    Variance(VarianceArgs),
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Check a dataset file and print a summary.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    q_query: usize,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    /// Episodes per group.
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct Fusion {
    /// A scalar weight or one comma-separated weight per dimension.
    #[arg(long, default_value = "0.5")]
    lambda: String,
    #[arg(long, default_value_t = 5)]
    patches: usize,
    #[arg(long, default_value = "sqeuclid")]
    metric: String,
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    apply_support: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    apply_query: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fusion: Fusion,
}

#[derive(Args)]
struct SweepLambdaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fusion: Fusion,
    /// Comma-separated weights; defaults to 0, 0.1, ..., 1.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long, default_value = "1,5,10")]
    m_values: String,
}

#[derive(Args)]
struct SweepPatchesArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fusion: Fusion,
    #[arg(long, default_value = "0,1,2,3,4,5")]
    m_values: String,
}

#[derive(Args)]
struct VarianceArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fusion: Fusion,
    /// Comma-separated weights searched on held-out episodes.
    #[arg(long)]
    lambdas: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file holding {"recipe": {...}, "images_per_class", "patches_per_image"}.
    #[arg(long, conflicts_with_all = ["dim", "classes", "patch_var", "totality_var"])]
    recipe: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    class_spread: f64,
    #[arg(long, default_value_t = 6.0)]
    patch_var: f64,
    /// Whole-image noise variance; defaults to the patch variance.
    #[arg(long)]
    totality_var: Option<f64>,
    #[arg(long, default_value_t = 40)]
    images_per_class: usize,
    #[arg(long, default_value_t = 10)]
    patches_per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to OUT with ".truth.jsonl" appended.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
}

impl From<GgiuError> for Failure {
    fn from(e: GgiuError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_list<T: std::str::FromStr>(flag: &str, raw: &str) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Config(format!("--{flag}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_lambda(raw: &str) -> CliResult<LambdaDiag> {
    let values: Vec<f64> = parse_list("lambda", raw)?;
    Ok(match values.as_slice() {
        [v] => LambdaDiag::Scalar(*v),
        _ => LambdaDiag::PerDim(values),
    })
}

fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl Common {
    fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_query: self.q_query,
            groups: self.groups,
            episodes_per_group: self.episodes,
        }
    }

    fn load(&self) -> CliResult<EmbeddingDataset> {
        Ok(load_dataset(&self.dataset)?)
    }

    fn emit(&self, text: &str) -> CliResult<()> {
        emit(self.out.as_deref(), text)
    }
}

impl Fusion {
    fn config(&self) -> CliResult<FusionConfig> {
        Ok(FusionConfig {
            lambda: parse_lambda(&self.lambda)?,
            patches_m: self.patches,
            apply_support: self.apply_support,
            apply_query: self.apply_query,
            metric: self.metric.parse::<DistanceMetric>()?,
            normalize: self.normalize,
        })
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn with_newline(mut s: String) -> String {
    s.push('\n');
    s
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let config = args.fusion.config()?;
    let ds = args.common.load()?;
    let report = run_eval(&ds, &args.common.spec(), &config, args.common.seed)?;
    let text = match args.common.format {
        Format::Json => with_newline(report.to_json()),
        Format::Csv => {
            let mut s = String::from("group,accuracy\n");
            for (g, a) in report.per_group_accuracy.iter().enumerate() {
                s.push_str(&format!("{g},{a}\n"));
            }
            s
        }
    };
    args.common.emit(&text)
}

fn run_ablate(args: &EvalArgs) -> CliResult<()> {
    let config = args.fusion.config()?;
    let ds = args.common.load()?;
    let rows = ablate(&ds, &args.common.spec(), &config, args.common.seed)?;
    let text = match args.common.format {
        Format::Json => with_newline(canonical_json(&rows)),
        Format::Csv => {
            let mut s = String::from("apply_support,apply_query,accuracy,ci95\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.apply_support, r.apply_query, r.report.mean_accuracy, r.report.ci95
                ));
            }
            s
        }
    };
    args.common.emit(&text)
}

fn run_sweep_lambda(args: &SweepLambdaArgs) -> CliResult<()> {
    let config = args.fusion.config()?;
    let lambdas = match &args.lambdas {
        Some(raw) => parse_list("lambdas", raw)?,
        None => default_grid(),
    };
    let ms: Vec<usize> = parse_list("m-values", &args.m_values)?;
    let ds = args.common.load()?;
    let rows = sweep_lambda(&ds, &args.common.spec(), &config, &lambdas, &ms, args.common.seed)?;
    let text = match args.common.format {
        Format::Json => with_newline(canonical_json(&rows)),
        Format::Csv => lambda_sweep_csv(&rows),
    };
    args.common.emit(&text)
}

fn run_sweep_patches(args: &SweepPatchesArgs) -> CliResult<()> {
    let config = args.fusion.config()?;
    let ms: Vec<usize> = parse_list("m-values", &args.m_values)?;
    let ds = args.common.load()?;
    let rows = sweep_patches(&ds, &args.common.spec(), &config, &ms, &config.lambda, args.common.seed)?;
    let text = match args.common.format {
        Format::Json => with_newline(canonical_json(&rows)),
        Format::Csv => patch_sweep_csv(&rows),
    };
    args.common.emit(&text)
}

fn run_variance(args: &VarianceArgs) -> CliResult<()> {
    let config = args.fusion.config()?;
    let lambdas = match &args.lambdas {
        Some(raw) => parse_list("lambdas", raw)?,
        None => default_grid(),
    };
    let ds = args.common.load()?;
    let report = variance_report(&ds, &args.common.spec(), &config, &lambdas, args.common.seed)?;
    if !report.excluded_classes.is_empty() {
        eprintln!(
            "warning: {} classes with fewer than two images were left out",
            report.excluded_classes.len()
        );
    }
    let text = match args.common.format {
        Format::Json => with_newline(canonical_json(&report)),
        Format::Csv => lambda_sweep_csv(&report.accuracy_curve),
    };
    args.common.emit(&text)
}

fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let job = match &args.recipe {
        Some(path) => {
            let raw = fs::read_to_string(path)?;
            serde_json::from_str::<SynthJob>(&raw)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthJob {
            recipe: SynthRecipe {
                dim: args.dim,
                classes: args.classes,
                mean_scale: args.mean_scale,
                class_spread: args.class_spread,
                patch_var: args.patch_var,
                totality_var: args.totality_var,
                seed: args.seed,
            },
            images_per_class: args.images_per_class,
            patches_per_image: args.patches_per_image,
        },
    };
    let synth = job.generate()?;
    let bytes = save_dataset(&synth.dataset, &args.out)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".truth.jsonl");
        p.into()
    });
    write_truth_sidecar(&synth.truths, fs::File::create(&truth_path)?)?;
    eprintln!(
        "wrote {} records ({bytes} bytes) to {}, truths to {}",
        synth.dataset.records.len(),
        args.out.display(),
        truth_path.display()
    );
    Ok(())
}

fn run_validate(args: &ValidateArgs) -> CliResult<()> {
    let ds = load_dataset(&args.dataset)?;
    let patches: Vec<usize> = ds.records.iter().map(|r| r.patches.len()).collect();
    let per_class: Vec<usize> = ds.records_by_class().iter().map(Vec::len).collect();
    let summary = serde_json::json!({
        "dim": ds.dim,
        "classes": ds.class_count(),
        "records": ds.records.len(),
        "images_per_class": per_class,
        "min_patches": patches.iter().min().copied().unwrap_or(0),
        "max_patches": patches.iter().max().copied().unwrap_or(0),
        "provenance": ds.provenance,
        "diagnostics": [],
    });
    emit(None, &with_newline(canonical_json(&summary)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::SweepLambda(a) => run_sweep_lambda(a),
        Command::SweepPatches(a) => run_sweep_patches(a),
        Command::Variance(a) => run_variance(a),
        Command::Synth(a) => run_synth(a),
        Command::Validate(a) => run_validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
