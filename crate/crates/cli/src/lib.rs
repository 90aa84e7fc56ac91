//! Command implementations behind the `ccl` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod world;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "CCL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ccl", version, about = "Continual communicative learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic session files and a hash manifest.
    GenData(RunArgs),
    /// Run the strategy x N transfer sweep and write results.csv.
    Simulate(RunArgs),
    /// Compare fine-tuning, replay and the analytic learner over sessions.
    DsiDemo(RunArgs),
    /// Summarize a serialized statistics message.
    InspectStats {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides CCL_OUT_DIR and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds (overrides [sweep].seeds).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl RunArgs {
    fn load(&self) -> CliResult<LoadedConfig> {
        match &self.config {
            Some(path) => LoadedConfig::load(path),
            None => Ok(LoadedConfig::defaults()),
        }
    }

    fn out_dir(&self, config: &LoadedConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| config.config.output_dir.as_ref().map(|p| config.resolve(p)))
            .unwrap_or_else(|| PathBuf::from("ccl-out"))
    }

    fn seeds(&self, config: &LoadedConfig) -> CliResult<Vec<u64>> {
        let seeds = self.seeds.clone().unwrap_or_else(|| config.config.sweep.seeds.clone());
        if seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        Ok(seeds)
    }
}

/// Run a parsed command, writing human-readable output to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(args) => {
            let config = args.load()?;
            let manifest = commands::gen_data(&config, &args.out_dir(&config), &args.seeds(&config)?)?;
            println!("wrote {}", manifest.display());
        }
        Command::Simulate(args) => {
            let config = args.load()?;
            let out = commands::simulate(&config, &args.out_dir(&config), &args.seeds(&config)?, args.jobs)?;
            print!("{}", commands::summary_table(&out.summary));
            println!("wrote {} ({} rows)", out.results_path.display(), out.rows.len());
        }
        Command::DsiDemo(args) => {
            let config = args.load()?;
            let out = commands::dsi_demo(&config, &args.out_dir(&config), &args.seeds(&config)?)?;
            print!("{}", out.table);
            println!("wrote {}", out.report_path.display());
        }
        Command::InspectStats { path } => {
            print!("{}", commands::inspect_stats(&path)?);
        }
    }
    Ok(())
}
