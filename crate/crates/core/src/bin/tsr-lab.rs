use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsr_lab::diagnostics;
use tsr_lab::error::Result;
use tsr_lab::harness::{self, ExperimentConfig, Method};
use tsr_lab::verify;

#[derive(Parser)]
#[command(name = "tsr-lab", version, about = "Temporal self-rewarding preference-optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method and write a run directory.
    Run(RunArgs),
    /// Run several methods and seeds at a matched DPO budget.
    Compare(CompareArgs),
    /// Merge run logs into a tidy dynamics.csv.
    Export(ExportArgs),
    /// Run the gradient, bound and selection-oracle checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// DPO runs allowed per method.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated methods.
    #[arg(long, default_value = "sr,tsr,tsr_no_future")]
    methods: String,
    /// Number of consecutive seeds starting at --seed (or the config seed).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// run.jsonl files or run directories.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long, default_value = "dynamics.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bound_check.csv from a continuous-mode sweep.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) => {
            let mut cfg = a.common.load()?;
            if let Some(m) = &a.method {
                cfg.method = Method::parse(m)?;
            }
            if a.iterations.is_some() {
                cfg.iterations = a.iterations;
            }
            let log = harness::run_experiment(&cfg)?;
            let last = log.rows.last().expect("every run has a final row");
            println!(
                "{} seed {}: {} iterations, dpo_runs {}, final true quality {:.4}, output {}",
                cfg.method,
                cfg.seed,
                log.rows.len() - 1,
                log.ledger.dpo_runs,
                last.mean_policy_true_quality,
                cfg.output_dir.display()
            );
            Ok(true)
        }
        Command::Compare(a) => {
            let cfg = a.common.load()?;
            let methods = a
                .methods
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| Method::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
            let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("runs/compare"));
            let cmp = harness::compare_methods(&cfg, &methods, &seeds, cfg.budget, &out)?;
            for m in &methods {
                let rows = cmp.summary_for(*m);
                let q = rows.iter().map(|r| r.final_true_quality).sum::<f64>() / rows.len() as f64;
                let gaps: Vec<f64> = rows.iter().filter_map(|r| r.final_score_gap).collect();
                let gap = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
                println!("{m:>14}: mean final true quality {q:.4}, mean final score gap {gap:.4}");
            }
            println!("wrote {}", out.join("summary.csv").display());
            Ok(true)
        }
        Command::Export(a) => {
            let rows = harness::export_figure_data(&a.logs)?;
            harness::write_dynamics_csv(BufWriter::new(File::create(&a.out)?), &rows)?;
            println!("wrote {} rows to {}", rows.len(), a.out.display());
            Ok(true)
        }
        Command::Verify(a) => {
            let report = verify::run_all(a.cases, a.seed);
            for c in &report {
                println!("{c}");
            }
            let mut ok = report.iter().all(|c| c.passed);
            if let Some(dir) = &a.out {
                let rows = verify::bound_sweep(a.cases, a.seed)?;
                std::fs::create_dir_all(dir)?;
                let path = dir.join("bound_check.csv");
                diagnostics::write_bound_csv(BufWriter::new(File::create(&path)?), &rows)?;
                let held = rows.iter().filter(|b| b.satisfied).count();
                println!("wrote {} ({held}/{} satisfied)", path.display(), rows.len());
                ok &= held == rows.len();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
