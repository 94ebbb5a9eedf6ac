use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use csvto::experiment::{
    run_bench, run_mpc, run_solve, write_bench_outputs, write_mpc_outputs, write_solve_outputs, ExperimentConfig,
    ProblemKind, SolverKind,
};

#[derive(Parser)]
#[command(name = "csvto", version, about = "Constrained Stein variational trajectory optimization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single warm-start solve; writes particles.csv and metrics.json.
    Solve(RunArgs),
    /// One receding-horizon run; writes trace.csv and metrics.json.
    Mpc(RunArgs),
    /// Receding-horizon runs over consecutive seeds with an aggregate summary.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// toy2d, quadrotor-none, quadrotor-static or quadrotor-dynamic.
    #[arg(long, value_parser = parse_problem)]
    problem: Option<ProblemKind>,
    /// csvto or mppi.
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverKind>,
}

fn parse_problem(s: &str) -> std::result::Result<ProblemKind, String> {
    s.parse().map_err(|e: csvto::Error| e.to_string())
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    s.parse().map_err(|e: csvto::Error| e.to_string())
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.problem {
            cfg.problem.name = p.to_string();
        }
        if let Some(s) = self.solver {
            cfg.run.solver = s;
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Solve(args) => {
            let cfg = args.config()?;
            let report = run_solve(&cfg)?;
            write_solve_outputs(&report, &args.out).context("writing solve outputs")?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            Ok(true)
        }
        Command::Mpc(args) => {
            let cfg = args.config()?;
            let report = run_mpc(&cfg)?;
            write_mpc_outputs(&report, &cfg, &args.out).context("writing run outputs")?;
            let m = &report.metrics;
            println!(
                "seed {}: success={} final_distance={} steps={}",
                m.seed,
                m.success,
                m.final_distance.map_or("n/a".into(), |d| format!("{d:.4}")),
                m.steps
            );
            if let Some(msg) = &m.failure {
                eprintln!("run failed at {msg}");
            }
            Ok(m.completed)
        }
        Command::Bench(args) => {
            let cfg = args.config()?;
            let report = run_bench(&cfg)?;
            write_bench_outputs(&report, &cfg, &args.out).context("writing bench outputs")?;
            for r in &report.runs {
                let m = &r.metrics;
                println!(
                    "seed {}: success={} final_distance={}",
                    m.seed,
                    m.success,
                    m.final_distance.map_or("n/a".into(), |d| format!("{d:.4}"))
                );
                if let Some(msg) = &m.failure {
                    eprintln!("seed {} failed at {msg}", m.seed);
                }
            }
            println!(
                "success rate {}/{}",
                report.summary["successes"], report.summary["trials"]
            );
            Ok(report.runs.iter().all(|r| r.metrics.completed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
