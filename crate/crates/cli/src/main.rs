//! `sarqc`: batch calibration front-end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 invalid arguments,
//! 3 I/O or parse failure, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sarqc_core::harness::{ExperimentSpec, SweepMethod};
use sarqc_core::oracle::{FaultInjection, Suite};
use sarqc_core::pipeline::{
    self, GenSpec, Manifest, Method, QuantizeOptions, SaliencyChoice, SweepConfig, SweepSource, VerifyConfig,
};
use sarqc_core::{Error, QuantMode, QuantScheme, Result};

#[derive(Parser, Debug)]
#[command(name = "sarqc", version, about = "Saliency-aware regularized quantization calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize every layer listed in a manifest.
    Quantize(QuantizeArgs),
    /// Sweep the regularization strength and write a CSV of loss terms.
    Sweep(SweepArgs),
    /// Run the oracle verification suites.
    Verify(VerifyArgs),
    /// Generate a synthetic manifest with weights and calibration tensors.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sym,
    Asym,
}

impl From<ModeArg> for QuantMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sym => QuantMode::Symmetric,
            ModeArg::Asym => QuantMode::Asymmetric,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SaliencyArg {
    Identity,
    Saliency,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepMethodArg {
    SarqcGs,
    SarqcGbs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    FlipCompensationSign,
}

/// Comma-separated list of reals, e.g. `0.1,0.5,1`.
#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Grid)
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long, required_unless_present = "replay")]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Method))]
    method: Option<Method>,
    #[arg(long)]
    bits: Option<u32>,
    /// Input channels per group; 0 means one group per output row.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, conflicts_with = "lambda_grid")]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_grid)]
    lambda_grid: Option<Grid>,
    #[arg(long, value_parser = parse_grid)]
    gamma_grid: Option<Grid>,
    #[arg(long, value_parser = parse_grid)]
    alpha_grid: Option<Grid>,
    #[arg(long, value_enum)]
    saliency: Option<SaliencyArg>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Re-run the configuration echoed in an earlier report.json.
    #[arg(long, conflicts_with_all = ["manifest", "method", "bits", "group_size", "mode", "lambda", "lambda_grid", "gamma_grid", "alpha_grid", "saliency", "block", "seed", "val_fraction"])]
    replay: Option<PathBuf>,
    #[arg(long, env = "SARQC_JOBS")]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// JSON experiment description for synthetic layers.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    spec: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Layer to sweep when the manifest lists more than one.
    #[arg(long, requires = "manifest")]
    layer: Option<String>,
    #[arg(long, value_enum, default_value = "sarqc-gbs")]
    method: SweepMethodArg,
    #[arg(long, value_parser = parse_grid, default_value = "0,0.01,0.03,0.1,0.3,1,3,10,30,100")]
    lambda_grid: Grid,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, value_enum, default_value = "asym")]
    mode: ModeArg,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    #[arg(long, env = "SARQC_JOBS")]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// compensation, supportedness, hoeffding, gptq-equiv or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "SARQC_JOBS")]
    jobs: Option<usize>,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON generator description; built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "SARQC_JOBS")]
    jobs: Option<usize>,
}

fn default_jobs(jobs: Option<usize>) -> Result<usize> {
    match jobs {
        Some(0) => Err(Error::InvalidArgument("--jobs must be >= 1".into())),
        Some(j) => Ok(j),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn scheme_for(bits: u32, group_size: usize, mode: ModeArg) -> QuantScheme {
    use sarqc_core::Granularity;
    let granularity = if group_size == 0 { Granularity::PerChannel } else { Granularity::Group(group_size) };
    match QuantMode::from(mode) {
        QuantMode::Symmetric => QuantScheme::symmetric(bits, granularity),
        QuantMode::Asymmetric => QuantScheme::asymmetric(bits, granularity),
    }
}

fn cmd_quantize(a: QuantizeArgs) -> Result<ExitCode> {
    let jobs = default_jobs(a.jobs)?;
    let cfg = match &a.replay {
        Some(report) => pipeline::replay_config(report)?,
        None => {
            let manifest_path = a.manifest.clone().expect("clap enforces --manifest");
            let manifest = Manifest::read(&manifest_path)?;
            QuantizeOptions {
                manifest: manifest_path,
                method: a.method,
                bits: a.bits,
                group_size: a.group_size,
                mode: a.mode.map(Into::into),
                lambda: a.lambda,
                lambda_grid: a.lambda_grid.map(|g| g.0),
                gamma_grid: a.gamma_grid.map(|g| g.0),
                alpha_grid: a.alpha_grid.map(|g| g.0),
                saliency: a.saliency.map(|s| match s {
                    SaliencyArg::Identity => SaliencyChoice::Identity,
                    SaliencyArg::Saliency => SaliencyChoice::Saliency,
                }),
                block: a.block,
                seed: a.seed,
                val_fraction: a.val_fraction,
            }
            .resolve(&manifest.defaults)?
        }
    };
    let report = pipeline::run_quantize(&cfg, &a.out, jobs)?;
    for l in &report.layers {
        println!(
            "{}\t{}\trecon={:.6e}\theldout_risk={:.6e}",
            l.layer_id, l.method, l.losses.recon, l.heldout_risk
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let jobs = default_jobs(a.jobs)?;
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be >= 1".into()));
    }
    let source = match (&a.spec, &a.manifest) {
        (Some(p), _) => SweepSource::Synthetic(pipeline::read_experiment_spec(p)?),
        (None, Some(p)) => SweepSource::Manifest { path: p.clone(), layer: a.layer.clone() },
        (None, None) => SweepSource::Synthetic(ExperimentSpec::default()),
    };
    let cfg = SweepConfig {
        source,
        method: match a.method {
            SweepMethodArg::SarqcGs => SweepMethod::Gs,
            SweepMethodArg::SarqcGbs => SweepMethod::Gbs,
        },
        lambda_grid: a.lambda_grid.0,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        scheme: scheme_for(a.bits, a.group_size, a.mode),
        gamma: a.gamma,
        val_fraction: a.val_fraction,
    };
    let records = sarqc_core::par::with_jobs(jobs, || pipeline::run_sweep(&cfg))?;
    pipeline::write_text(&a.out, &pipeline::sweep_csv(&records))?;
    println!("{} records written to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let jobs = default_jobs(a.jobs)?;
    let suites = if a.suite == "all" { Suite::ALL.to_vec() } else { vec![a.suite.parse::<Suite>()?] };
    let cfg = VerifyConfig {
        suites,
        trials: a.trials,
        seed: a.seed,
        fault: FaultInjection { flip_compensation_sign: matches!(a.inject_fault, Some(FaultArg::FlipCompensationSign)) },
    };
    let report = sarqc_core::par::with_jobs(jobs, || pipeline::run_verify(&cfg))?;
    for s in &report.suites {
        println!(
            "{:<14} {} ({} trials, {} failures)",
            s.suite.name(),
            if s.pass { "PASS" } else { "FAIL" },
            s.trials,
            s.failures
        );
    }
    if let Some(out) = &a.out {
        pipeline::write_verify_report(out, &report)?;
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let jobs = default_jobs(a.jobs)?;
    let spec = match &a.spec {
        Some(p) => GenSpec::read(p)?,
        None => GenSpec::default(),
    };
    let manifest = sarqc_core::par::with_jobs(jobs, || pipeline::run_gen(&spec, &a.out, a.seed))?;
    println!("{} layers written to {}", manifest.layers.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize(a) => cmd_quantize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("sarqc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
