//! Command-line front end for training, evaluating and inspecting
//! adaptive token sampling on the toy vision transformer.

pub mod args;
pub mod commands;
pub mod config;
pub mod report;

use anyhow::{Context, Result};

use args::{Cli, Command};

/// Caps the global thread pool when `ATS_THREADS` is set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ATS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("ATS_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Masks(a) => commands::masks(a),
    }
}
