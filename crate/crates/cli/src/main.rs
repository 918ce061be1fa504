//! `strato`: run a simulation or validation study from a TOML config.
//!
//! Exit status: 0 when every criterion passes, 1 on a criterion failure,
//! 2 on a usage, config or IO error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use strato_cli::{config, run};

#[derive(Parser, Debug)]
#[command(name = "strato", version, about = "Conditional McKean-Vlasov particle simulator and validation studies")]
struct Args {
    /// TOML run configuration.
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Override `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a top-level scalar key, e.g. `--set N=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("strato: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return usage_error(e);
        }
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return usage_error(format!("{}: {e}", args.config.display())),
    };
    let mut table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => return usage_error(format!("{}: {e}", args.config.display())),
    };
    for o in &args.overrides {
        if let Err(e) = config::apply_override(&mut table, o) {
            return usage_error(e);
        }
    }
    if let Some(seed) = args.seed {
        table.insert("base_seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg = match config::from_table(&table) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    match run::run(&cfg) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            for c in &outcome.criteria {
                println!("{}", c.line());
            }
            println!("summary: {}", run::summary_path(&cfg.output_dir).display());
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => usage_error(e),
    }
}
