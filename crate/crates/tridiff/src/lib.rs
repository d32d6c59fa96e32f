//! File formats, dataset generation, the training driver and the
//! command-line front end around `tridiff-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod par;
pub mod run;
pub mod train;

pub use error::{CliError, CliResult};

use cli::{Cli, Command};

/// Runs one parsed command and returns the line to print on success.
pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenDataset(a) => {
            let (out, m) = commands::gen_dataset(a)?;
            let images: usize = m.scenes.iter().map(|s| s.views.len()).sum();
            Ok(format!(
                "wrote {} scenes, {images} images at {}x{} to {}",
                m.scenes.len(),
                m.resolution,
                m.resolution,
                out.display()
            ))
        }
        Command::Train(a) => commands::cmd_train(a).map(|p| p.display().to_string()),
        Command::Generate(a) => commands::cmd_generate(a).map(|p| p.display().to_string()),
        Command::Reconstruct(a) => commands::cmd_reconstruct(a).map(|p| p.display().to_string()),
        Command::Inpaint(a) => commands::cmd_inpaint(a).map(|p| p.display().to_string()),
        Command::Eval(a) => {
            let p = commands::cmd_eval(a)?;
            let report = std::fs::read_to_string(p.join("report.txt")).unwrap_or_default();
            Ok(format!("{report}{}", p.display()))
        }
    }
}
