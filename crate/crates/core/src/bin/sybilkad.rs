use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sybilkad::attack::{plan_attack, OptimizerConfig};
use sybilkad::detect::{detect, estimate_network_size};
use sybilkad::error::{ConfigError, ExperimentError};
use sybilkad::experiments::{read_rows_csv, report, run_scenario, write_plans_csv, write_rows_csv, Scenario};
use sybilkad::{build_network, NetworkConfig, NodeId};

#[derive(Parser)]
#[command(name = "sybilkad", version, about = "Kademlia Sybil attack and defense lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write one row per probe.
    Run {
        scenario: PathBuf,
        /// Seeds as `a..b` (exclusive) or `a..=b`; overrides the file.
        #[arg(long)]
        seed_range: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-target attack rows here.
        #[arg(long)]
        plans: Option<PathBuf>,
    },
    /// Summarise probe rows into CSV tables.
    Report {
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a network and print the attack plan for a key as JSON.
    Plan {
        #[arg(long)]
        target: String,
        /// Network config JSON; defaults apply when omitted.
        #[arg(long)]
        net: Option<PathBuf>,
        /// Attacker's size estimate; measured with lookups when omitted.
        #[arg(long)]
        n_hat: Option<f64>,
    },
    /// Test a k-closest set (CSV with an `id` column) against the model.
    Detect {
        #[arg(long)]
        closest: PathBuf,
        #[arg(long)]
        n: f64,
        #[arg(long)]
        target: String,
    },
}

enum Failure {
    Config(String),
    Other(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn other<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Other(e.to_string())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Config(format!("bad seed range {s:?}; expected a..b or a..=b"));
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn parse_id(s: &str) -> Result<NodeId, Failure> {
    s.parse().map_err(|e| Failure::Config(format!("bad id {s:?}: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| other(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed_range,
            out,
            plans,
        } => {
            let mut s = Scenario::from_json_file(&scenario)?;
            if let Some(r) = seed_range {
                s.seeds = parse_seeds(&r)?;
            }
            let result = run_scenario(&s)?;
            write_rows_csv(&result.rows, create(&out)?)?;
            if let Some(p) = plans {
                write_plans_csv(&result.plans, create(&p)?)?;
            }
            eprintln!("{} rows written to {}", result.rows.len(), out.display());
        }
        Cmd::Report { rows, out } => {
            let f = File::open(&rows).map_err(|source| ConfigError::Io {
                path: rows.display().to_string(),
                source,
            })?;
            let rows = read_rows_csv(f).map_err(|e| Failure::Config(e.to_string()))?;
            for r in report(&rows, &out)? {
                println!("{}\t{:.3}\t{} probes", r.scenario, r.success_rate, r.probes);
            }
        }
        Cmd::Plan { target, net, n_hat } => {
            let target = parse_id(&target)?;
            let cfg = match net {
                Some(p) => NetworkConfig::from_json_file(&p)?,
                None => NetworkConfig::default(),
            };
            let mut network = build_network(cfg)?;
            let n_hat = match n_hat {
                Some(n) => n,
                None => estimate_network_size(&mut network, 0, 10).map_err(other)?.n_hat,
            };
            let plan = plan_attack(&mut network, &target, n_hat, &OptimizerConfig::default()).map_err(other)?;
            println!("{}", plan.to_json());
        }
        Cmd::Detect { closest, n, target } => {
            let target = parse_id(&target)?;
            let mut rd = csv::Reader::from_path(&closest).map_err(|e| Failure::Config(e.to_string()))?;
            let col = rd
                .headers()
                .map_err(|e| Failure::Config(e.to_string()))?
                .iter()
                .position(|h| h == "id")
                .ok_or_else(|| Failure::Config(format!("{}: no `id` column", closest.display())))?;
            let mut ids = Vec::new();
            for rec in rd.records() {
                let rec = rec.map_err(|e| Failure::Config(e.to_string()))?;
                ids.push(parse_id(&rec[col])?);
            }
            let k = ids.len();
            let verdict = detect(&ids, &target, n, k).map_err(|e| Failure::Config(e.to_string()))?;
            println!("{}", serde_json::to_string_pretty(&verdict).map_err(other)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
