use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lns_harness::output::write_outputs;
use lns_harness::{run, ExperimentConfig, HarnessError, Task};

#[derive(Debug, Parser)]
#[command(name = "lns-madam", version, about = "LNS quantized training experiments")]
struct Cli {
    #[arg(value_enum)]
    task: Task,
    /// TOML experiment config; headline defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and the CSV table; JSON goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Golden-vector file for datapath-conformance.
    #[arg(long)]
    golden: Option<PathBuf>,
}

fn execute(cli: &Cli) -> Result<bool, HarnessError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(cli.task),
    };
    if cfg.task != cli.task {
        return Err(HarnessError::Config(format!(
            "config is for task {} but {} was requested",
            cfg.task.name(),
            cli.task.name()
        )));
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let report = run(&cfg, cli.golden.as_deref())?;
    match cli.out.as_ref().or(cfg.output.as_ref()) {
        Some(dir) => write_outputs(&report, dir)?,
        None => println!("{}", report.to_json()?),
    }
    for f in &report.failures {
        eprintln!("FAIL: {f}");
    }
    if let lns_harness::CommandResult::DatapathConformance(r) = &report.result {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
