use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use shardflow_core::bench::{compare_policies, run_experiment, ExperimentConfig};
use shardflow_core::sim::PolicyKind;

/// Runs a simulated elasticity experiment described by a JSON config.
#[derive(Debug, Parser)]
#[command(name = "shardflow", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir` or `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated policies (static, rc, ec) overriding the config.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<PolicyKind>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write report.md; without --config, report on an existing --out.
    #[arg(long)]
    report: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let Some(path) = args.config else {
        if !args.report {
            return Err("either --config or --report with --out is required".into());
        }
        let out = args.out.unwrap_or_else(|| PathBuf::from("out"));
        let report = compare_policies(&out)?;
        let text = report.to_markdown();
        std::fs::write(out.join("report.md"), &text)?;
        print!("{text}");
        return Ok(());
    };
    let mut exp = ExperimentConfig::load(&path)?;
    if !args.seeds.is_empty() {
        exp.seeds = args.seeds;
    }
    if !args.policies.is_empty() {
        exp.policies = args.policies;
    }
    let out = args
        .out
        .or_else(|| exp.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let rows = run_experiment(&exp, &out, args.jobs, args.report)?;
    eprintln!("{} runs written to {}", rows.len(), out.display());
    if args.report {
        print!("{}", std::fs::read_to_string(out.join("report.md"))?);
    }
    Ok(())
}
