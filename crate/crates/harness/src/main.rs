use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use valuelab_harness::presets::{preset, preset_names};
use valuelab_harness::run::{replay, run_experiment};
use valuelab_harness::summarize::summarize;
use valuelab_harness::validate::{load_config, validate_config};
use valuelab_harness::{checks, default_output_root, HarnessError};

/// Off-policy value-based RL experiments on token-level MDPs.
#[derive(Parser)]
#[command(name = "valuelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or config file.
    Run {
        /// Preset name, or a path to a config file.
        target: Option<String>,
        /// Replay the single run recorded in this manifest.
        #[arg(long, conflicts_with = "target")]
        manifest: Option<PathBuf>,
        /// Output directory; defaults to $VALUELAB_OUT/<name>.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Replace the seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// dotted.path=value, repeatable.
        #[arg(long = "set", short = 's')]
        overrides: Vec<String>,
    },
    /// Check a config file and print diagnostics.
    Validate { path: PathBuf },
    /// Aggregate finished runs.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the summary table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Exact property checks on random tiny instances.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        cases: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List built-in presets.
    Presets,
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<u8, HarnessError> {
    match command {
        Command::Run {
            target,
            manifest,
            out,
            seed,
            overrides,
        } => {
            if let Some(manifest) = manifest {
                let dir = out.unwrap_or_else(|| default_output_root().join("replay"));
                let result = replay(&manifest, &dir)?;
                println!("{}: {}", dir.display(), result.status.name());
                return Ok(if result.status.name() == "aborted" { 2 } else { 0 });
            }
            let target = target.ok_or_else(|| HarnessError::UnknownPreset(String::new()))?;
            let src = match preset(&target) {
                Some(src) => src.to_string(),
                None if std::path::Path::new(&target).is_file() => {
                    std::fs::read_to_string(&target).map_err(|e| HarnessError::file(&target, e))?
                }
                None => return Err(HarnessError::UnknownPreset(target)),
            };
            let mut overrides = overrides;
            if let Some(seed) = seed {
                overrides.push(format!("seeds=[{seed}]"));
            }
            let cfg = load_config(&src, &overrides)?;
            let dir = out.unwrap_or_else(|| default_output_root().join(&cfg.name));
            let report = run_experiment(&cfg, &dir)?;
            for r in &report.results {
                println!("{}/seed{}: {}", r.spec.point, r.spec.seed, r.status.name());
            }
            println!("artifacts in {}", dir.display());
            match report.aborted() {
                0 => Ok(0),
                count => Err(HarnessError::NumericAbort { count }),
            }
        }
        Command::Validate { path } => {
            let diags = validate_config(&path)?;
            if diags.is_empty() {
                println!("{}: ok", path.display());
                Ok(0)
            } else {
                for d in &diags {
                    println!("{}: {d}", path.display());
                }
                Ok(1)
            }
        }
        Command::Summarize { dirs, csv } => {
            let summary = summarize(&dirs)?;
            print!("{}", summary.report());
            if let Some(path) = csv {
                std::fs::write(&path, summary.to_csv())?;
            }
            Ok(0)
        }
        Command::OracleCheck { cases, seed } => {
            let results = checks::all(cases, seed)?;
            for r in &results {
                println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            Ok(if results.iter().all(|r| r.pass) { 0 } else { 2 })
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(0)
        }
    }
}
