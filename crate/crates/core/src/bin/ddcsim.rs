use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ddc_sim::latency::Profile;
use ddc_sim::runner::{self, Overrides};
use ddc_sim::scenario::{ConfigError, ScenarioConfig, BUNDLED};

/// Deterministic simulator of a disaggregated rack.
#[derive(Parser)]
#[command(name = "ddcsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario once.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a scenario over consecutive seeds starting at its own (or --seed).
    Fuzz {
        scenario: String,
        /// Number of seeds.
        #[arg(short = 'n', long, default_value_t = 100)]
        seeds: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Crash a heap workload after every write and check recovery.
    CrashSweep {
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// List the bundled scenarios.
    ListScenarios {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Write the trace as JSON lines. For fuzz, the first failing seed's.
    #[arg(long, value_name = "PATH")]
    trace_out: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, profile: self.profile.map(Profile::from) }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Current,
    Future,
    Cloud,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Current => Profile::Current,
            ProfileArg::Future => Profile::Future,
            ProfileArg::Cloud => Profile::Cloud,
        }
    }
}

const VIOLATION: u8 = 1;
const CONFIG: u8 = 2;

enum Failure {
    Config(ConfigError),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(VIOLATION),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(CONFIG)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG)
        }
    }
}

/// Returns whether every invariant held.
fn dispatch(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Run { scenario, common } => {
            let cfg = common.overrides().apply(&ScenarioConfig::resolve(&scenario)?);
            let mut out = runner::run(&cfg)?;
            if let Some(path) = &common.trace_out {
                out.save_traces(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            }
            print_report(common.json, &out.report.to_json(), &out.report.to_text());
            Ok(out.report.passed())
        }
        Command::Fuzz { scenario, seeds, common } => {
            let cfg = ScenarioConfig::resolve(&scenario)?;
            let report = runner::fuzz(&cfg, seeds, common.overrides())?;
            if let (Some(path), Some(seed)) = (&common.trace_out, report.reproducing_seed()) {
                let o = Overrides { seed: Some(seed), ..common.overrides() };
                let mut out = runner::run_with(&cfg, o)?;
                out.save_traces(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            }
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            print_report(common.json, &json, &report.to_text());
            Ok(report.passed())
        }
        Command::CrashSweep { scenario, common } => {
            let cfg = common.overrides().apply(&ScenarioConfig::resolve(&scenario)?);
            let report = runner::crash_sweep(&cfg)?;
            print_report(common.json, &report.to_json(), &report.to_text());
            Ok(report.passed())
        }
        Command::ListScenarios { json } => {
            let list: Vec<(String, String)> = BUNDLED
                .iter()
                .map(|(name, text)| {
                    let d = ScenarioConfig::from_toml(text).map(|c| c.description).unwrap_or_default();
                    (name.to_string(), d)
                })
                .collect();
            if json {
                let v: Vec<_> = list.iter().map(|(n, d)| serde_json::json!({ "name": n, "description": d })).collect();
                println!("{}", serde_json::to_string_pretty(&v).expect("list serializes"));
            } else {
                for (n, d) in list {
                    println!("{n:28} {d}");
                }
            }
            Ok(true)
        }
    }
}

fn print_report(json: bool, as_json: &str, as_text: &str) {
    if json {
        println!("{as_json}");
    } else {
        print!("{as_text}");
    }
}
