//! Command-line front end of the `vasc` binary.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{class_seed, evaluate, gen_data, render_mip, run_ablation, sample, samples_dir, train_ae, train_ldm, Log, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::comparison_table;
use crate::phantom::ClassLabel;
use crate::util::deterministic_mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "vasc", version, about = "Shape- and anatomy-guided latent diffusion for synthetic vessel images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override one config value, e.g. `--set ldm.steps=500`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Log every N-th training step.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom corpus and its manifest.
    GenData(Common),
    /// Train the image autoencoder.
    TrainAe(Common),
    /// Train the latent noise predictor (resumes from its checkpoint).
    TrainLdm {
        #[command(flatten)]
        common: Common,
        /// Train all three guidance settings in turn.
        #[arg(long)]
        ablation: bool,
    },
    /// Sample latents, decode them and write PNG MIPs.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Class 1, 2 or 3; every class when omitted.
        #[arg(long)]
        class: Option<String>,
        /// Samples per class (defaults to sample.n_per_class).
        #[arg(long)]
        n: Option<usize>,
        /// Chain seed (defaults to sample.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to out_dir/samples/<guidance>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sample directories against the real corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Sample directory; repeat to compare several models.
        #[arg(long)]
        samples: Vec<PathBuf>,
        /// Run the full three-model ablation and print the comparison table.
        #[arg(long)]
        ablation: bool,
    },
    /// Render maximum intensity projections to PNG (or PGM by extension).
    RenderMip {
        #[command(flatten)]
        common: Common,
        /// Single volume file; the dataset grid is rendered when omitted.
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Volumes per class in the grid.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::TrainAe(c) => c,
            Command::TrainLdm { common, .. }
            | Command::Sample { common, .. }
            | Command::Evaluate { common, .. }
            | Command::RenderMip { common, .. } => common,
        }
    }
}

fn execute(cmd: &Command, cfg: &RunConfig, out: &mut dyn Write, log: &mut Log) -> Result<()> {
    match cmd {
        Command::GenData(_) => {
            let m = gen_data(cfg, log)?;
            let _ = writeln!(out, "dataset {} volumes generator_hash={}", m.entries.len(), m.generator_hash);
        }
        Command::TrainAe(_) => {
            let a = train_ae(cfg, log)?;
            let _ = writeln!(out, "autoencoder latent_mean={:.6} latent_std={:.6}", a.stats.mean, a.stats.std);
        }
        Command::TrainLdm { ablation, .. } => {
            let configs = if *ablation { cfg.ablation_matrix().to_vec() } else { vec![cfg.clone()] };
            for c in &configs {
                let a = train_ldm(c, log)?;
                let _ = writeln!(out, "{} steps={} final_loss={:.6}", c.guidance().label(), a.trainer.step(), a.trainer.losses.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::Sample { class, n, seed, out: dir, .. } => {
            let n = n.unwrap_or(cfg.sample.n_per_class);
            let seed = seed.unwrap_or(cfg.sample.seed);
            let classes: Vec<(ClassLabel, u64)> = match class {
                Some(c) => vec![(c.parse()?, seed)],
                None => ClassLabel::ALL.iter().map(|&c| (c, class_seed(seed, c))).collect(),
            };
            let dir = dir.clone().unwrap_or_else(|| samples_dir(cfg));
            let sets = sample(cfg, &classes, n, &dir, log)?;
            let total: usize = sets.iter().map(|s| s.images.len()).sum();
            let _ = writeln!(out, "wrote {total} samples to {}", dir.display());
        }
        Command::Evaluate { samples, ablation, .. } => {
            if *ablation {
                let r = run_ablation(cfg, log)?;
                let _ = write!(out, "{}", r.table);
            } else {
                let dirs = if samples.is_empty() { vec![samples_dir(cfg)] } else { samples.clone() };
                let reports = evaluate(cfg, &dirs, log)?;
                for (name, r) in &reports {
                    let _ = write!(out, "{name}\n{}\n", r.to_table());
                }
                if reports.len() > 1 {
                    let _ = write!(out, "{}", comparison_table(&reports));
                }
            }
        }
        Command::RenderMip { volume, n, out: path, .. } => {
            let img = render_mip(cfg, volume.as_deref(), *n, path, log)?;
            let _ = writeln!(out, "rendered {}x{} to {}", img.width, img.height, path.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Results go to `out`, logs and errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let common = cli.command.common();
    let result = RunConfig::load(&common.config, &common.overrides).and_then(|cfg| {
        let mut log = Log::new(err, common.log_every);
        log.line(&format!("config_hash={} deterministic={}", cfg.config_hash(), u8::from(deterministic_mode())));
        execute(&cli.command, &cfg, out, &mut log)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}
