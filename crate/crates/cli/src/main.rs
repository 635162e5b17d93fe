use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use surveyscope::error::{Error, Result};

mod commands;
mod config;

use commands::{Ctx, Status};
use config::{Manifest, RunConfig, MANIFEST};

#[derive(Parser)]
#[command(name = "surveyscope", version, about = "Soft-mapped survey measurement with held-out validation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Output directory; must be empty or absent.
    #[arg(long)]
    out: PathBuf,
    /// JSON config or a manifest from an earlier run. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic study with planted structure.
    Synth(Common),
    /// Apply harmonization rules to raw responses.
    Harmonize(Common),
    /// Build subdimension scores from a mapping.
    Score(Common),
    /// Check a taxonomy and mapping.
    Validate(Common),
    /// Held-out deltas, overlap screen and data-limit flags.
    Diagnose(Common),
    /// Run the evaluate / diagnose / refine loop.
    Refine(Common),
    /// Outcome or mapping permutation placebo.
    Placebo(Common),
    /// Sparsification and scoring-rule robustness grid.
    Grid(Common),
    /// Triage table from delta reports.
    Report(Common),
}

impl Command {
    fn split(self) -> (&'static str, Common, fn(&Ctx) -> Result<Status>) {
        match self {
            Command::Synth(c) => ("synth", c, commands::synth),
            Command::Harmonize(c) => ("harmonize", c, commands::harmonize),
            Command::Score(c) => ("score", c, commands::score),
            Command::Validate(c) => ("validate", c, commands::validate),
            Command::Diagnose(c) => ("diagnose", c, commands::diagnose),
            Command::Refine(c) => ("refine", c, commands::refine),
            Command::Placebo(c) => ("placebo", c, commands::placebo),
            Command::Grid(c) => ("grid", c, commands::grid),
            Command::Report(c) => ("report", c, commands::report),
        }
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Precondition(format!("{} is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Precondition(format!("output directory {} is not empty", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cmd: Command) -> Result<Status> {
    let (name, common, f) = cmd.split();
    let mut cfg = common.run;
    if let Some(path) = &common.config {
        cfg = cfg.layer_file(path, name)?;
    }
    let cfg = cfg.resolve(name)?;
    prepare_out(&common.out)?;
    let mut text = serde_json::to_string_pretty(&Manifest::new(name, cfg.clone()))?;
    text.push('\n');
    fs::write(common.out.join(MANIFEST), text)?;
    f(&Ctx { out: common.out, cfg })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Findings) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
