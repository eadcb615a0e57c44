use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedlt::config::{parse_config, Settings};
use fedlt::experiment::{run_experiment, run_suite};
use fedlt::Error;

#[derive(Parser)]
#[command(name = "fedlt", version, about = "Federated long-tailed fine-tuning simulator")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (the default).
    Run(Common),
    /// Run every arm for every seed and write a comparison table.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arm names.
        #[arg(long, value_delimiter = ',', default_value = "fedpurel,fedavg-baseline")]
        arms: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file of settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "purify")]
    no_purify: bool,
    #[arg(long, conflicts_with = "residual")]
    no_residual: bool,
    #[command(flatten)]
    settings: Settings,
}

impl Common {
    fn flags(&self) -> Settings {
        let mut s = self.settings.clone();
        if self.no_purify {
            s.purify = Some(false);
        }
        if self.no_residual {
            s.residual = Some(false);
        }
        s
    }
}

fn report(e: &Error) -> ExitCode {
    eprintln!("{}", json!({ "status": "error", "kind": e.kind(), "message": e.to_string() }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        None => run(&cli.common),
        Some(Command::Run(common)) => run(&common),
        Some(Command::Suite { common, arms, seeds }) => suite(&common, &arms, &seeds),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn run(common: &Common) -> fedlt::Result<()> {
    let cfg = parse_config(common.config.as_deref(), &common.flags())?;
    let result = run_experiment(&cfg)?;
    let s = &result.summary;
    println!("arm {} seed {}: zero-shot {:.4}, GM {:.4} (few {}), PM {}",
        s.arm,
        s.seed,
        s.zero_shot.all,
        s.gm.all,
        fmt_opt(s.gm.few),
        fmt_opt(s.pm.map(|p| p.all)),
    );
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

fn suite(common: &Common, arms: &[String], seeds: &[u64]) -> fedlt::Result<()> {
    let cfg = parse_config(common.config.as_deref(), &common.flags())?;
    let rows = run_suite(&cfg, arms, seeds)?;
    for r in &rows {
        println!("{:<16} seed {:<4} {:<8} GM {} PM {} balancedness {} drift {}",
            r.arm,
            r.seed,
            if r.status == "ok" { "ok" } else { "FAILED" },
            fmt_opt(r.gm_all),
            fmt_opt(r.pm_all),
            fmt_opt(r.final_balancedness),
            fmt_opt(r.mean_drift),
        );
    }
    println!("table in {}", cfg.out.join("suite.csv").display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}
