use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dcgrid::config::{parse_config, preset_config, preset_text, LoadedConfig};
use dcgrid::export::{certificate_text, export_trace, TRACE_FILE};
use dcgrid::oracle::run_oracle_suite_with;
use dcgrid::sim::{run_config, IntegrationError};
use dcgrid::GridError;

const EXIT_INVALID: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_ORACLE: u8 = 3;

/// Islanded DC grid under distributed primal-dual control.
#[derive(Debug, Parser)]
#[command(name = "dcgrid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario file and write trace.csv and certificate.txt.
    Run {
        config: PathBuf,
        /// Seed for the parameter draws and the flexibility tuning.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `output.dir` of the file, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write voltage.svg, current.svg and ul.svg.
        #[arg(long)]
        plot: bool,
        /// Override a file entry, e.g. `--set weights.gamma=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Simulate one of the four shipped scenarios.
    Preset {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        number: u8,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        plot: bool,
        /// Print the preset file instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Parse and check a scenario file without simulating it.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Cross-check the closed forms against brute-force references.
    Oracle {
        /// Number of random instances per seeded check.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_INVALID,
            error,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            plot,
            overrides,
        } => {
            let loaded = parse_config(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            simulate(loaded, seed, out, plot)
        }
        Command::Preset {
            number,
            out,
            seed,
            plot,
            print,
        } => {
            if print {
                print!("{}", preset_text(number).map_err(anyhow::Error::from)?);
                return Ok(());
            }
            let loaded = preset_config(number).map_err(anyhow::Error::from)?;
            simulate(loaded, seed, out, plot)
        }
        Command::Validate { config, overrides } => {
            let loaded = parse_config(&config, &overrides)
                .with_context(|| format!("validating {}", config.display()))?;
            let resolved = loaded.scenario.resolve().map_err(anyhow::Error::from)?;
            println!(
                "{}: ok ({} prosumers, {} lines, flexibility level {:.6})",
                loaded.scenario.name,
                resolved.grid.n(),
                resolved.grid.m(),
                resolved.lambda
            );
            Ok(())
        }
        Command::Oracle { seeds } => {
            let report = run_oracle_suite_with(0..seeds);
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_ORACLE,
                    error: anyhow::anyhow!("oracle mismatch"),
                })
            }
        }
    }
}

fn simulate(mut loaded: LoadedConfig, seed: Option<u64>, out: Option<PathBuf>, plot: bool) -> Result<(), Failure> {
    if let Some(seed) = seed {
        loaded.scenario.seed = seed;
    }
    let dir = out
        .or_else(|| loaded.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let plot = plot || loaded.output.plot;
    let name = loaded.scenario.name.clone();
    let run = match run_config(&loaded.scenario, None) {
        Ok(run) => run,
        Err(failure) => return Err(integration_failure(failure, &dir)),
    };
    export_trace(&name, &run.trace, &run.certificate, &dir, plot)
        .with_context(|| format!("writing results to {}", dir.display()))?;
    print!("{}", certificate_text(&name, &run.certificate));
    println!("results: {}", dir.display());
    if !run.certificate.converged {
        return Err(Failure {
            code: EXIT_DIVERGED,
            error: anyhow::anyhow!("no convergence within the horizon ({:?})", run.trace.outcome),
        });
    }
    Ok(())
}

/// Maps a failed integration to its exit code, saving whatever trace was
/// recorded before a divergence.
fn integration_failure(failure: IntegrationError, dir: &Path) -> Failure {
    let code = match failure.error {
        GridError::Divergence { .. } | GridError::Numeric(_) => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    };
    let mut error = anyhow::Error::new(failure.error);
    if code == EXIT_DIVERGED && !failure.prefix.samples.is_empty() {
        if let Ok(csv) = dcgrid::export::trace_csv(&failure.prefix) {
            let saved = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join(TRACE_FILE), csv));
            if saved.is_ok() {
                error = error.context(format!(
                    "trace up to the failure written to {}",
                    dir.join(TRACE_FILE).display()
                ));
            }
        }
    }
    Failure { code, error }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> Result<(), Failure> {
        let cli = Cli::try_parse_from(std::iter::once("dcgrid").chain(args.iter().copied()))
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        dispatch(cli.command)
    }

    fn code(result: Result<(), Failure>) -> u8 {
        result.err().map_or(0, |f| f.code)
    }

    fn small_config(dir: &Path) -> String {
        let text = preset_text(2).unwrap().replace("nodes = 10", "nodes = 4");
        let path = dir.join("small.toml");
        std::fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_owned()
    }

    fn out(dir: &Path, name: &str) -> String {
        dir.join(name).to_str().unwrap().to_owned()
    }

    #[test]
    fn run_is_byte_identical_for_a_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        for name in ["a", "b"] {
            assert_eq!(code(run(&["run", &cfg, "--seed", "7", "--out", &out(dir.path(), name)])), 0);
        }
        let a = std::fs::read(dir.path().join("a").join(TRACE_FILE)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(TRACE_FILE)).unwrap());
        assert_eq!(code(run(&["run", &cfg, "--seed", "8", "--out", &out(dir.path(), "c")])), 0);
        assert_ne!(a, std::fs::read(dir.path().join("c").join(TRACE_FILE)).unwrap());
    }

    #[test]
    fn run_writes_trace_certificate_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        assert_eq!(code(run(&["run", &cfg, "--plot", "--out", &out(dir.path(), "res")])), 0);
        let res = dir.path().join("res");
        for f in ["trace.csv", "certificate.txt", "voltage.svg", "current.svg", "ul.svg"] {
            assert!(res.join(f).is_file(), "{f} missing");
        }
        let cert = std::fs::read_to_string(res.join("certificate.txt")).unwrap();
        assert!(cert.contains("converged: yes"));
        let csv = std::fs::read_to_string(res.join(TRACE_FILE)).unwrap();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("t,V_1,V_2,V_3,V_4,Is_1"));
        assert!(header.ends_with("I_4,S,S_c,S_cl,kkt_residual"));
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == header.split(',').count()));
    }

    #[test]
    fn overrides_reach_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let dest = out(dir.path(), "o");
        let args = [
            "run",
            &cfg,
            "--set",
            "flexibility.source=fixed",
            "--set",
            "flexibility.lambda=0.2",
            "--out",
            &dest,
        ];
        assert_eq!(code(run(&args)), 0);
        let cert = std::fs::read_to_string(dir.path().join("o/certificate.txt")).unwrap();
        assert!(cert.contains("flexibility level: 0.200000"), "{cert}");
    }

    #[test]
    fn validation_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        assert_eq!(code(run(&["validate", &cfg])), 0);
        let bad = run(&["validate", &cfg, "--set", "prosumers.R_s=\"-1 mohm\""]).err().unwrap();
        assert_eq!(bad.code, EXIT_INVALID);
        assert!(format!("{:#}", bad.error).contains("prosumers.R_s"));
        assert_eq!(code(run(&["validate", &cfg, "--set", "grid.colour=1"])), EXIT_INVALID);
        assert_eq!(code(run(&["validate", &out(dir.path(), "missing.toml")])), EXIT_INVALID);
    }

    #[test]
    fn divergence_exits_with_two_and_keeps_the_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let dest = out(dir.path(), "d");
        let failure = run(&["run", &cfg, "--set", "integration.divergence=100", "--out", &dest])
            .err()
            .unwrap();
        assert_eq!(failure.code, EXIT_DIVERGED);
        assert!(format!("{:#}", failure.error).contains("diverged"));
        assert!(dir.path().join("d").join(TRACE_FILE).is_file());
    }

    #[test]
    fn oracle_passes() {
        assert_eq!(code(run(&["oracle", "--seeds", "5"])), 0);
    }

    #[test]
    fn presets_parse_and_out_of_range_numbers_are_refused() {
        for k in 1..=4 {
            preset_config(k).unwrap().scenario.resolve().unwrap();
        }
        assert_eq!(code(run(&["preset", "5"])), EXIT_INVALID);
    }
}
