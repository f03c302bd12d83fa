use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvlift::error::Error;
use cvlift::experiments::{compare_files, run_with_manifest, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cvlift", version, about = "Guided bridge sampling and effective-dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out/<experiment>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare a results file against another results file or a reference.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Relative tolerance for fields without a declared tolerance.
        #[arg(long, default_value_t = 1e-12)]
        rel_tol: f64,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli.command {
        Command::Run { config, seed, out, threads } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.name()));
            match run_with_manifest(&cfg, &out, threads) {
                Ok(o) => {
                    for (k, v) in &o.values {
                        println!("{k} = {v}");
                    }
                    println!("wrote {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Compare { a, b, rel_tol } => match compare_files(&a, &b, rel_tol) {
            Ok(rep) => {
                for c in &rep.checks {
                    let tag = if c.pass { "ok  " } else { "FAIL" };
                    println!("{tag} {}: {} vs {} (rel diff {:.3e}, tol {:.3e})", c.field, c.a, c.b, c.rel_diff, c.rel_tol);
                }
                if rep.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(4)
                }
            }
            Err(e) => fail(&e),
        },
    }
}
