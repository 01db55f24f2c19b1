//! `earlywarn` command line: generate synthetic data, aggregate ensemble
//! predictions, run the policy grid and build reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use earlywarn::costmodel::CostParameters;
use earlywarn::harness::{read_results, run_grid, summarize, write_report, write_results, ExperimentConfig};
use earlywarn::metrics::per_case_mae_series;
use earlywarn::rl::{run_stream, write_learning_curve, OnlineAgent};
use earlywarn::stream::{
    aggregate_stream, load_base_matrix, load_stream, truncate_to_quantile, write_base_matrix, write_stream,
    PredictionStream, StreamFormat, DEFAULT_EXPECTED_OUTCOME,
};
use earlywarn::synthgen::{generate, GeneratorConfig};
use earlywarn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "earlywarn",
    version,
    about = "Alarm policies for prescriptive process monitoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic base-prediction matrix and/or prediction stream.
    Generate(GenerateArgs),
    /// Turn a base-prediction matrix and truth file into a prediction stream.
    Aggregate(AggregateArgs),
    /// Run every policy over the cost-parameter grid.
    Run(RunArgs),
    /// Summarize a results table; optionally write learning and drift curves.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Start from a named preset (bpic12-like, bpic17rf-like, traffic-rf-like, cargo-like).
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` generator settings applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    settings: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cases: Option<usize>,
    /// Base-prediction matrix output (CSV); needs --truth.
    #[arg(long, requires = "truth")]
    matrix: Option<PathBuf>,
    /// Truth sidecar output (CSV); needs --matrix.
    #[arg(long, requires = "matrix")]
    truth: Option<PathBuf>,
    /// Aggregated stream output.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Stream format; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<StreamFormat>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Expected outcome the deviations are measured against.
    #[arg(long, default_value_t = DEFAULT_EXPECTED_OUTCOME)]
    expected_outcome: f64,
    /// Truncate cases to this length quantile.
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<StreamFormat>,
}

/// Flags overriding config file keys.
#[derive(Args, Default)]
struct ConfigOverrides {
    /// Comma-separated lambda values.
    #[arg(long)]
    lambda: Option<String>,
    /// Comma-separated kappa values.
    #[arg(long)]
    kappa: Option<String>,
    /// Comma-separated alpha_min values.
    #[arg(long)]
    alpha_min: Option<String>,
    /// Comma-separated envelope half-widths for thresholding.
    #[arg(long)]
    xi: Option<String>,
    /// Use the full envelope sweep 0.025, 0.1, 0.175, 0.25.
    #[arg(long)]
    xi_sweep: bool,
    #[arg(long)]
    repetitions: Option<String>,
    #[arg(long)]
    fit_fraction: Option<String>,
    /// Comma-separated subset of never, first_positive, static, threshold, online_rl.
    #[arg(long)]
    policies: Option<String>,
    #[arg(long)]
    penalty: Option<String>,
    #[arg(long)]
    static_theta: Option<String>,
    #[arg(long)]
    rl_clip_epsilon: Option<String>,
    #[arg(long)]
    rl_learning_rate: Option<String>,
    #[arg(long)]
    rl_update_epochs: Option<String>,
    #[arg(long)]
    rl_hidden_width: Option<String>,
    #[arg(long)]
    rl_max_grad_norm: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<String>,
}

impl ConfigOverrides {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        let pairs = [
            ("lambda", &self.lambda),
            ("kappa", &self.kappa),
            ("alpha_min", &self.alpha_min),
            ("xi", &self.xi),
            ("repetitions", &self.repetitions),
            ("fit_fraction", &self.fit_fraction),
            ("policies", &self.policies),
            ("penalty", &self.penalty),
            ("static_theta", &self.static_theta),
            ("rl.clip_epsilon", &self.rl_clip_epsilon),
            ("rl.learning_rate", &self.rl_learning_rate),
            ("rl.update_epochs", &self.rl_update_epochs),
            ("rl.hidden_width", &self.rl_hidden_width),
            ("rl.max_grad_norm", &self.rl_max_grad_norm),
            ("workers", &self.workers),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, v)?;
            }
        }
        if self.xi_sweep {
            config.set("xi_sweep", "true")?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    format: Option<StreamFormat>,
    /// Master seed every run seed is derived from.
    #[arg(long)]
    seed: u64,
    /// Results CSV.
    #[arg(long)]
    out: PathBuf,
    /// Write one learning curve per online-RL run into this directory.
    #[arg(long)]
    curves_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Stream for the learning-curve and MAE outputs; needs --seed.
    #[arg(long, requires = "seed")]
    stream: Option<PathBuf>,
    #[arg(long)]
    format: Option<StreamFormat>,
    #[arg(long, requires = "stream")]
    seed: Option<u64>,
    /// Experiment config supplying learner settings and the cost cell.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn stream_format(path: &Path, explicit: Option<StreamFormat>) -> Result<StreamFormat> {
    explicit.or_else(|| StreamFormat::from_path(path)).ok_or_else(|| {
        Error::Config(format!(
            "cannot tell the format of `{}`; pass --format jsonl|csv",
            path.display()
        ))
    })
}

fn read_stream(path: &Path, format: Option<StreamFormat>) -> Result<PredictionStream> {
    load_stream(path, stream_format(path, format)?)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    if args.matrix.is_none() && args.stream.is_none() {
        return Err(Error::Config(
            "nothing to write: pass --matrix/--truth and/or --stream".into(),
        ));
    }
    let mut config = match &args.preset {
        Some(name) => GeneratorConfig::preset(name)?,
        None => GeneratorConfig::default(),
    };
    if let Some(path) = &args.config {
        config.apply_kv_file(path)?;
    }
    for setting in &args.settings {
        let (k, v) = setting
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{setting}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.cases {
        config.n_cases = n;
    }
    let data = generate(&config)?;
    if let (Some(matrix), Some(truth)) = (&args.matrix, &args.truth) {
        write_base_matrix(&data.matrices, &data.truths, matrix, truth)?;
    }
    if let Some(path) = &args.stream {
        write_stream(&data.aggregate()?, path, stream_format(path, args.format)?)?;
    }
    eprintln!("generated {} cases", data.truths.len());
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs) -> Result<()> {
    let (matrices, truths) = load_base_matrix(&args.matrix, &args.truth, args.expected_outcome)?;
    let mut stream = aggregate_stream(&matrices, &truths, args.expected_outcome)?;
    if let Some(q) = args.quantile {
        stream = truncate_to_quantile(&stream, q)?;
    }
    write_stream(&stream, &args.out, stream_format(&args.out, args.format)?)?;
    eprintln!("aggregated {} cases", stream.len());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    args.overrides.apply(&mut config)?;
    config.validate()?;
    let stream = read_stream(&args.stream, args.format)?;
    let results = run_grid(&stream, &config, args.seed, args.curves_dir.as_deref())?;
    write_results(&results, &args.out)?;
    let failed: Vec<_> = results.iter().filter(|r| r.is_failed()).collect();
    for r in &failed {
        eprintln!(
            "warning: {} run {} at lambda={} kappa={} alpha_min={} failed: {}",
            r.policy,
            r.repetition,
            r.cell.lambda,
            r.cell.kappa,
            r.cell.alpha_min,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    eprintln!(
        "wrote {} runs ({} failed) to {}",
        results.len(),
        failed.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let results = read_results(&args.results)?;
    let report = summarize(&results)?;
    write_report(&report, &args.out_dir)?;
    for s in &report.standings {
        eprintln!(
            "{:>15}: won {} of {} situations",
            s.policy.name(),
            s.wins,
            report.counted_situations
        );
    }
    if let (Some(path), Some(seed)) = (&args.stream, args.seed) {
        let config = load_config(args.config.as_deref())?;
        config.validate()?;
        let stream = read_stream(path, args.format)?;
        let cell = config.cells()[0];
        let params = CostParameters::new(config.penalty, cell.lambda, cell.kappa, cell.alpha_min)?;
        let mut agent = OnlineAgent::new(config.hyper, seed)?;
        let run = run_stream(&stream, &mut agent, &params)?;
        write_learning_curve(&run.curve, args.out_dir.join("learning_curve.csv"))?;
        let mut mae = String::from("case_index,mae\n");
        for (i, m) in per_case_mae_series(&stream) {
            mae.push_str(&format!("{},{m}\n", i + 1));
        }
        let mae_path = args.out_dir.join("mae_series.csv");
        std::fs::write(&mae_path, mae).map_err(|e| Error::Io {
            path: mae_path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
