use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fodiff::pipeline::commands;
use fodiff::Error;

#[derive(Parser)]
#[command(name = "fodiff", about = "Conditional patch diffusion for FOD angular super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "24,24,24")]
        dims: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a HAR volume from a LAR volume.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lar: PathBuf,
        #[arg(long)]
        wm: PathBuf,
        #[arg(long)]
        brain: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// ACC report over WM and brain masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        wm: PathBuf,
        #[arg(long)]
        brain: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sample FOD amplitudes on a sphere for selected voxels.
    ExportGlyphs {
        #[arg(long)]
        fod: PathBuf,
        /// `x,y,z;x,y,z;…`
        #[arg(long)]
        voxels: String,
        #[arg(long, default_value_t = 100)]
        dirs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> fodiff::Result<()> {
    match cli.cmd {
        Cmd::Phantom { out, n, dims, seed } => commands::phantom(&out, n, commands::parse_dims(&dims)?, seed),
        Cmd::Train { data, config, out } => {
            let model = commands::train_dir(&data, &config, &out)?;
            println!("{}", model.display());
            Ok(())
        }
        Cmd::Infer { ckpt, lar, wm, brain, out, seed } => commands::infer_files(&ckpt, &lar, &wm, &brain, &out, seed),
        Cmd::Eval { pred, truth, wm, brain, report } => {
            let r = commands::eval_files(&pred, &truth, &wm, &brain, &report)?;
            print!("{}", r.to_text());
            if r.is_complete() {
                Ok(())
            } else {
                Err(Error::NoValidVoxels("a region has no voxels with defined ACC".into()))
            }
        }
        Cmd::ExportGlyphs { fod, voxels, dirs, out } => commands::export_glyphs(&fod, &voxels, dirs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
