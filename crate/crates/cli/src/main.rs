use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use sg_core::datasets::write_jsonl;
use sg_core::harness::{self, is_sidecar, load_artifact, RunConfig};
use sg_core::mcqa::IdkPlacement;
use sg_core::metrics::{fmt2, MetricTriple};
use sg_core::population::{generate, PopulationSpec};
use sg_core::protocols::{ProtocolId, StdConvention};

#[derive(Parser)]
#[command(name = "sg", version, about = "Evaluate abstention protocols on multiple-choice QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one protocol over one dataset sample and write its artifact.
    Run(RunArgs),
    /// Per-combination tables and per-protocol summaries from run artifacts.
    Report {
        #[arg(required = true)]
        artifacts: Vec<PathBuf>,
        #[arg(long, default_value = "original", value_parser = parse_protocol)]
        baseline_protocol: ProtocolId,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Divisor for the ± column.
        #[arg(long, default_value = "sample", value_parser = parse_serde::<StdConvention>)]
        std: StdConvention,
    },
    /// Change breakdown of a Second Guess artifact.
    Breakdown { artifact: PathBuf },
    /// Per-question diff of two runs over the same sample.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic dataset and matching knowledge profiles.
    SimulateProfiles(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolId>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_parser = parse_serde::<IdkPlacement>)]
    idk_position: Option<IdkPlacement>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    stable_known: f64,
    #[arg(long, default_value_t = 0.2)]
    stable_wrong: f64,
    #[arg(long, default_value_t = 0.3)]
    max_idk_mass: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    dataset_out: PathBuf,
    #[arg(long)]
    profiles_out: PathBuf,
}

fn parse_protocol(s: &str) -> Result<ProtocolId, String> {
    s.parse()
}

fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn apply_overrides(mut config: RunConfig, args: RunArgs) -> RunConfig {
    if let Some(p) = args.protocol {
        config.protocol = p;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    if let Some(d) = args.dataset {
        config.dataset = d;
    }
    if let Some(n) = args.sample_n {
        config.sample_n = n;
    }
    if args.endpoint.is_some() {
        config.endpoint = args.endpoint;
    }
    if args.model.is_some() {
        config.model = args.model;
    }
    if args.profiles.is_some() {
        config.profiles = args.profiles;
    }
    if let Some(c) = args.concurrency {
        config.concurrency = c;
    }
    if let Some(t) = args.temperature {
        config.temperature = t;
    }
    if let Some(p) = args.idk_position {
        config.idk_position = p;
    }
    if args.cache_dir.is_some() {
        config.cache_dir = args.cache_dir;
    }
    config
}

fn metrics_line(m: &MetricTriple) -> String {
    let p = m.precision_pct.map(fmt2).unwrap_or_else(|| "n/a".into());
    format!(
        "precision {p}  error rate {}  composite risk {}",
        fmt2(m.error_rate_pct),
        fmt2(m.composite_risk_pct)
    )
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = RunConfig::from_file(&args.config)?;
    let config = apply_overrides(config, args);
    let artifact = harness::run(&config)?;
    let t = &artifact.tally;
    println!("run {}", artifact.id);
    println!(
        "  protocol {}  seed {}  sample_seed {}  normalization_seed {}",
        artifact.protocol, config.seed, config.sample_seed, config.normalization_seed
    );
    println!(
        "  N {}  correct {}  incorrect {}  abstained {}  abstained-but-correct {}",
        t.n, t.n_c, t.n_i, t.n_a, t.n_ca
    );
    println!("  {}", metrics_line(&artifact.metrics));
    let a = &artifact.accounting;
    println!(
        "  backend calls {}  cache hits {}  misses {}  {} ms",
        a.backend_calls, a.cache_hits, a.cache_misses, a.wall_clock_ms
    );
    println!("  wrote {}", config.out.join(format!("{}.json", artifact.id)).display());
    if artifact.is_partial() {
        eprintln!(
            "warning: {} of {} questions failed and are excluded from N",
            artifact.failures.len(),
            artifact.question_ids.len()
        );
    }
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<harness::RunArtifact>> {
    paths
        .iter()
        .filter(|p| !is_sidecar(p))
        .map(|p| load_artifact(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec = PopulationSpec {
        n: args.n,
        stable_known: args.stable_known,
        stable_wrong: args.stable_wrong,
        max_idk_mass: args.max_idk_mass,
    };
    let population = generate(&spec, args.seed).map_err(anyhow::Error::msg)?;
    write_jsonl(&args.dataset_out, &population.questions)?;
    write_file(&args.profiles_out, &serde_json::to_vec_pretty(&population.profiles)?)?;
    println!(
        "wrote {} questions to {} and profiles to {} (seed {})",
        population.questions.len(),
        args.dataset_out.display(),
        args.profiles_out.display(),
        args.seed
    );
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report {
            artifacts,
            baseline_protocol,
            format,
            std,
        } => {
            let loaded = load_all(&artifacts)?;
            if loaded.is_empty() {
                bail!("no artifacts given");
            }
            let report = harness::report(&loaded, baseline_protocol, std)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            match format {
                Format::Md => print!("{}", report.to_markdown()),
                Format::Csv => print!("{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Breakdown { artifact } => {
            let a = load_artifact(&artifact)?;
            print!("{}", harness::breakdown(&a)?);
            Ok(())
        }
        Command::Compare { a, b, json } => {
            let delta = harness::compare(&load_artifact(&a)?, &load_artifact(&b)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&delta)?);
            } else {
                print!("{}", delta.to_markdown());
            }
            Ok(())
        }
        Command::SimulateProfiles(args) => cmd_simulate(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
