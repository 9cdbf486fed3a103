use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otseries::data::{write_covariates, write_timeseries};
use otseries::pipeline::{run_until, PipelineConfig, PipelineReport, Stage, StageStatus};
use otseries::synthetic::{generate, SyntheticConfig};
use otseries::Error;

#[derive(Parser)]
#[command(name = "otseries", version, about = "Cluster cities by the dependence between mobility and new cases")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage.
    Run(StageArgs),
    /// Read, filter and validate the time series.
    Ingest(StageArgs),
    /// Rank-embed each city for every configured variant.
    Embed(StageArgs),
    /// Pairwise Wasserstein distance matrices.
    Dist(StageArgs),
    /// Ward clustering, flat cuts and seriation.
    Cluster(StageArgs),
    /// Partition graph between the clusterings.
    Compare(StageArgs),
    /// Per-cluster barycenters of the selected clustering.
    Bary(StageArgs),
    /// Spatial statistics, forest and Shapley importance.
    Analyze(StageArgs),
    /// Write a synthetic data set and a matching config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override any config key, e.g. `--set cluster.n_clusters=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write into.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    cities: usize,
    #[arg(long, default_value_t = 90)]
    days: usize,
    #[arg(long, default_value_t = 3)]
    lag: usize,
    #[arg(long, default_value_t = 1.0)]
    coupling: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Run(a) => stage(a, Stage::Analyze),
        Command::Ingest(a) => stage(a, Stage::Ingest),
        Command::Embed(a) => stage(a, Stage::Embed),
        Command::Dist(a) => stage(a, Stage::Dist),
        Command::Cluster(a) => stage(a, Stage::Cluster),
        Command::Compare(a) => stage(a, Stage::Compare),
        Command::Bary(a) => stage(a, Stage::Bary),
        Command::Analyze(a) => stage(a, Stage::Analyze),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 data, 4 non-convergence, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Schema { .. } | Error::Validation(_) | Error::Size(_) | Error::Undefined(_) | Error::Csv(_) => 3,
        Error::Json(_) => 3,
        Error::NonConvergence(_) => 4,
        _ => 1,
    }
}

fn stage(args: StageArgs, last: Stage) -> Result<(), Error> {
    let mut overrides = Vec::new();
    for raw in &args.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{raw}` is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    // flags win over --set
    if let Some(t) = args.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &args.output {
        let abs = std::path::absolute(o).map_err(|e| Error::Config(format!("bad output path {}: {e}", o.display())))?;
        overrides.push(("output_dir".into(), toml_string(&abs)));
    }
    let cfg = PipelineConfig::load(&args.config, &overrides)?;
    let report = run_until(&cfg, last)?;
    print_report(&report);
    Ok(())
}

/// Quoted TOML string so paths never parse as numbers or dates.
fn toml_string(p: &Path) -> String {
    toml_quote(&p.to_string_lossy())
}

fn toml_quote(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_report(report: &PipelineReport) {
    for o in &report.outcomes {
        let status = match o.status {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
        };
        println!("{:<8} {status}", o.stage.as_str());
        for w in &o.warnings {
            println!("         warning: {w}");
        }
    }
    println!("manifest {}", report.output_dir.join(otseries::pipeline::MANIFEST).display());
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let cfg = SyntheticConfig {
        n_cities: a.cities,
        n_days: a.days,
        lag: a.lag,
        coupling: a.coupling,
        seed: a.seed,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", a.out.display())))?;
    let create = |name: &str| {
        let p = a.out.join(name);
        fs::File::create(&p).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))
    };
    write_timeseries(&data.records, create("timeseries.csv")?)?;
    write_covariates(&data.covariates, create("covariates.csv")?)?;
    let mut regimes = String::from("city_id,regime\n");
    for (r, g) in data.records.iter().zip(&data.regimes) {
        regimes.push_str(&format!("{},{}\n", r.city_id, g));
    }
    let config = format!(
        "# synthetic data: {} cities, {} days, seed {}\n\
         seed = 0\n\
         output_dir = \"out\"\n\n\
         [input]\n\
         timeseries = \"timeseries.csv\"\n\
         covariates = \"covariates.csv\"\n\n\
         [cluster]\n\
         n_clusters = 3\n\
         selected = \"Mprime\"\n",
        a.cities, a.days, a.seed
    );
    for (name, text) in [("regimes.csv", regimes), ("config.toml", config)] {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))?;
    }
    println!("wrote {} cities to {}", data.records.len(), a.out.display());
    Ok(())
}
