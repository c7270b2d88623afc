use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toom_core::explanation::{verify_explanation, ExplanationTree};
use toom_core::harness::{
    bound_report, count_trees_table, estimate_failure, explain_pair, explain_run, parse_rational,
    read_trajectory, sweep, verify_lemmas, write_csv, write_trajectory, ExperimentConfig,
    Observation, DEGREE,
};
use toom_core::noise_sim::{evolve, sample_with_ideal};
use toom_core::Result;

#[derive(Parser)]
#[command(
    name = "toom",
    version,
    about = "Noisy Toom automata and explanation trees"
)]
struct Cli {
    /// Replaces the seed of the configuration or of the random checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate deviation probabilities; writes the failure-rate CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build and verify explanation trees; writes statistics as JSON.
    Explain {
        #[arg(long, required_unless_present = "trajectory")]
        config: Option<PathBuf>,
        /// Explain the deviations of a dumped trajectory instead.
        #[arg(long, conflicts_with = "config")]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Random-instance checks of the tree-cutting and spanning constructions.
    VerifyLemmas {
        #[arg(long, default_value_t = 10_000)]
        trees: usize,
        #[arg(long, default_value_t = 10_000)]
        spanning: usize,
    },
    /// Exhaustive subtree counts next to the counting bound, as CSV.
    CountTrees {
        #[arg(long, default_value_t = 3)]
        window_k: usize,
        #[arg(long, default_value_t = 10)]
        graphs: usize,
        #[arg(long, default_value_t = 6)]
        random_k: usize,
    },
    /// Failure estimates over the epsilon grid with the bound terms, as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the small-noise bound expressions at one epsilon, as JSON.
    Bound {
        #[arg(long)]
        epsilon: String,
        #[arg(long, default_value_t = 16)]
        m: u64,
        #[arg(long, default_value_t = 8)]
        n: u64,
        #[arg(long, default_value_t = 16)]
        t: u64,
    },
    /// Write one sampled trajectory in the dump format.
    Dump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        epsilon_index: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check a tree file against the noise set of a dumped trajectory.
    VerifyTree {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
    },
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn line(text: &str) -> Result<()> {
    emit(None, format!("{text}\n").as_bytes())
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate { config, output } => {
            let cfg = load(&config, seed)?;
            let rows = estimate_failure(&cfg)?;
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            emit(output.as_deref().or(cfg.output.csv.as_deref()), &buf)?;
        }
        Command::Explain {
            config,
            trajectory,
            output,
        } => {
            let (stats, json_path) = match (config, trajectory) {
                (Some(config), _) => {
                    let cfg = load(&config, seed)?;
                    (explain_run(&cfg)?, output.or(cfg.output.json))
                }
                (None, Some(path)) => {
                    let dump = read_trajectory(&std::fs::read_to_string(&path)?)?;
                    let stats = explain_pair(
                        &dump.pair,
                        &dump.rule,
                        Observation::AllTimes,
                        None,
                        None,
                        "dump",
                    )?;
                    (stats, output)
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            let mut text = serde_json::to_string_pretty(&stats)?;
            text.push('\n');
            emit(json_path.as_deref(), text.as_bytes())?;
        }
        Command::VerifyLemmas { trees, spanning } => {
            let report = verify_lemmas(seed.unwrap_or(0), trees, spanning);
            line(&serde_json::to_string_pretty(&report)?)?;
            return Ok(report.passed());
        }
        Command::CountTrees {
            window_k,
            graphs,
            random_k,
        } => {
            let rows = count_trees_table(seed.unwrap_or(0), window_k, graphs, random_k)?;
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            emit(None, &buf)?;
            return Ok(rows.iter().all(|r| r.holds));
        }
        Command::Sweep { config, output } => {
            let cfg = load(&config, seed)?;
            let rows = sweep(&cfg)?;
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            emit(output.as_deref().or(cfg.output.csv.as_deref()), &buf)?;
        }
        Command::Bound { epsilon, m, n, t } => {
            let report = bound_report(DEGREE, &parse_rational(&epsilon)?, m, n, t)?;
            line(&serde_json::to_string_pretty(&report.summary())?)?;
        }
        Command::Dump {
            config,
            epsilon_index,
            trial,
            output,
        } => {
            let cfg = load(&config, seed)?;
            let epsilon = *cfg.epsilons.get(epsilon_index).ok_or_else(|| {
                toom_core::Error::Precondition(format!("no epsilon at index {epsilon_index}"))
            })?;
            let rule = cfg.rule()?;
            let ideal = evolve(&cfg.initial()?, &rule);
            let params = cfg.noise(epsilon, trial)?;
            let pair = sample_with_ideal(&ideal, &rule, &params)?;
            emit(
                output.as_deref(),
                write_trajectory(&pair, &rule, Some(&params)).as_bytes(),
            )?;
        }
        Command::VerifyTree { tree, trajectory } => {
            let tree: ExplanationTree = std::fs::read_to_string(&tree)?.parse()?;
            let dump = read_trajectory(&std::fs::read_to_string(&trajectory)?)?;
            let cert = verify_explanation(&tree, |p| dump.pair.noise.contains(*p));
            line(&format!(
                "nodes {} weight {} arrows {} forks {}",
                cert.nodes, cert.weight, cert.arrows, cert.forks
            ))?;
            for (clause, msg) in &cert.failures {
                line(&format!("failed {clause:?}: {msg}"))?;
            }
            line(if cert.passed() { "pass" } else { "fail" })?;
            return Ok(cert.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
