use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

mod config;
mod error;
mod experiments;
mod report;

use config::parse_scenario;
use error::CliError;
use experiments::RunDir;

/// Experiments for the controlled skeleton equation and its fluctuating counterpart.
#[derive(Parser)]
#[command(name = "skeld", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON scenario.
    Run {
        config: PathBuf,
        /// Output directory (overrides SKELD_OUT_DIR and the scenario).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for replica and sweep parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report { dir: PathBuf },
}

fn output_dir(cli_out: Option<PathBuf>, scenario: Option<&Path>, base: &Path, experiment: &str) -> PathBuf {
    if let Some(p) = cli_out {
        return p;
    }
    if let Some(p) = std::env::var_os("SKELD_OUT_DIR") {
        return PathBuf::from(p);
    }
    match scenario {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => base.join(p),
        None => PathBuf::from("skeld-out").join(experiment),
    }
}

fn run(config: &Path, out: Option<PathBuf>, workers: Option<usize>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Config { key: "<file>".into(), message: format!("{}: {e}", config.display()) })?;
    let scenario = parse_scenario(&text)?;
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config { key: "--workers".into(), message: "must be positive".into() });
        }
        // fails only if a pool already exists, in which case the default is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let kind = scenario.experiment;
    let dir = output_dir(out, scenario.output_dir.as_deref(), base, kind.name());
    let mut rd = RunDir::create(&dir)?;
    log::info!("{} -> {}", kind.name(), dir.display());
    match experiments::run(kind, &scenario, base, &mut rd) {
        Ok(()) => report::write_manifest(&dir, kind.name(), "ok", rd.files()),
        Err(e) => {
            let failure = json!({
                "experiment": kind.name(),
                "error": e.to_string(),
                "exit_code": e.exit_code(),
            });
            let _ = rd.write_json("failure.json", &failure);
            let _ = report::write_manifest(&dir, kind.name(), "failed", rd.files());
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { config, out, workers } => run(&config, out, workers),
        Command::Report { dir } => report::report(&dir).map(|s| println!("{}", serde_json::to_string_pretty(&s).unwrap())),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skeld: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
