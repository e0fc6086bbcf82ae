use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdrbench::runner::{self, RunConfig};

/// Benchmark LLMs as cross-domain recommenders.
#[derive(Parser)]
#[command(name = "cdrbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse review and metadata files into per-domain datasets.
    Ingest(ConfigArg),
    /// Build paired corpora of overlapping users and print their statistics.
    Pair(ConfigArg),
    /// Split each pair and write its evaluation set.
    Sample(ConfigArg),
    /// Run every configured model, prompt variant and baseline.
    Run(ConfigArg),
    /// Compare high and medium context prompts.
    Ablate(ConfigArg),
    /// Re-render text tables from persisted results.
    Report(OutputArg),
    /// Recompute every reported number from the per-instance records.
    Verify(OutputArg),
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> cdrbench::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct OutputArg {
    /// Output directory of a previous run.
    #[arg(short, long)]
    output_dir: PathBuf,
}

fn execute(cli: Cli) -> cdrbench::Result<u8> {
    match cli.command {
        Command::Ingest(a) => {
            let m = runner::ingest(&a.load()?)?;
            for (domain, d) in &m.domains {
                println!(
                    "{domain}: {} ratings kept ({} malformed, {} duplicates, {} without title)",
                    d.join.retained, d.ingest.malformed, d.ingest.dropped, d.join.dropped
                );
            }
            Ok(0)
        }
        Command::Pair(a) => {
            let cfg = a.load()?;
            runner::pair(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(runner::Layout::new(&cfg.output_dir).reports_dir().join("pair_stats.txt"))?
            );
            Ok(0)
        }
        Command::Sample(a) => {
            for s in runner::sample(&a.load()?)? {
                println!("{}: {} instances, {} skipped -> {}", s.pair, s.instances, s.skipped, s.path.display());
            }
            Ok(0)
        }
        Command::Run(a) => {
            let out = runner::run_experiment(&a.load()?)?;
            for path in out.written.iter().filter(|p| p.extension().is_some_and(|e| e == "txt")) {
                println!("{}", std::fs::read_to_string(path)?);
            }
            println!(
                "backend calls: {}, network requests: {}",
                out.stats.backend_calls(),
                out.stats.network_requests()
            );
            Ok(out.exit_code() as u8)
        }
        Command::Ablate(a) => {
            let (table, stats, written) = runner::run_context_ablation(&a.load()?)?;
            print!("{}", runner::render_ablation_table(&table));
            for p in &written {
                println!("wrote {}", p.display());
            }
            println!(
                "backend calls: {}, network requests: {}",
                stats.backend_calls(),
                stats.network_requests()
            );
            Ok(if table.all_complete() { 0 } else { 2 })
        }
        Command::Report(a) => {
            for p in runner::report(&a.output_dir)? {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Verify(a) => {
            let v = runner::verify(&a.output_dir)?;
            for m in &v.mismatches {
                eprintln!("mismatch: {m}");
            }
            println!("{} cells checked, {} mismatches", v.cells_checked, v.mismatches.len());
            Ok(if v.ok() { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
