use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qctl::report::{compare_report, OverheadReport};
use qctl::{run, CliError, ExperimentId, RunManifest};
use qctl_core::devices::DelayMode;

#[derive(Parser)]
#[command(name = "qctl", version, about = "Run experiments on simulated trapped-ion systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PolicyArg {
    WorstCase,
    PerFunction,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its result files.
    Run {
        /// Bundled system name (staq_sim, rc_sim) or path to a definition.
        #[arg(long, default_value = "staq_sim")]
        system: String,
        #[arg(long = "exp", value_enum)]
        experiment: ExperimentId,
        #[arg(long)]
        seed: u64,
        /// Detection windows scheduled ahead of their reads.
        #[arg(long)]
        buffer: Option<usize>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long, env = "QCTL_OUT_DIR", default_value = "qctl_out")]
        out: PathBuf,
        /// Override, e.g. noise.depol_per_gate=0.01 or exp.samples=50.
        #[arg(long = "set", value_parser = parse_key_value)]
        set: Vec<(String, String)>,
    },
    /// Validate a system definition and print a summary.
    Check {
        #[arg(long, default_value = "staq_sim")]
        system: String,
    },
    /// Compare two overhead reports.
    Compare { report_a: PathBuf, report_b: PathBuf },
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            system,
            experiment,
            seed,
            buffer,
            policy,
            out,
            set,
        } => {
            let mut manifest = RunManifest::new(&system, experiment, seed, out);
            manifest.buffer = buffer;
            manifest.policy = policy.map(|p| match p {
                PolicyArg::WorstCase => DelayMode::WorstCase,
                PolicyArg::PerFunction => DelayMode::PerFunction,
            });
            manifest.overrides = set;
            run(&manifest).map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
        }
        Command::Check { system } => qctl::load_system(&system, 0).map(|s| {
            let r = s.registry();
            println!(
                "{}: {} modules, {} services, {} devices",
                s.name(),
                r.modules().count(),
                r.services().count(),
                r.declared_devices().len()
            );
        }),
        Command::Compare { report_a, report_b } => (|| {
            let a = OverheadReport::from_json(&read(&report_a)?)?;
            let b = OverheadReport::from_json(&read(&report_b)?)?;
            let c = compare_report(&a, &b)?;
            println!("{}", serde_json::to_string_pretty(&c).expect("serializable"));
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(1)
        }
    }
}
