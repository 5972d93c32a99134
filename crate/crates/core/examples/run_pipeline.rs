//! Drives the staged pipeline from a config file: data, autoencoder, one LDM,
//! sampling and evaluation.
//!
//! `cargo run --release --example run_pipeline -- [config.toml]`

use std::path::PathBuf;

use vasc::phantom::ClassLabel;
use vasc::pipeline::{self, Log, RunConfig};

fn main() -> vasc::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("configs/smoke.toml"));
    let cfg = RunConfig::load(&path, &[])?;
    let mut stdout = std::io::stdout();
    let mut log = Log::new(&mut stdout, 50);
    pipeline::gen_data(&cfg, &mut log)?;
    pipeline::train_ae(&cfg, &mut log)?;
    pipeline::train_ldm(&cfg, &mut log)?;
    let classes: Vec<(ClassLabel, u64)> = ClassLabel::ALL.iter().map(|&c| (c, pipeline::class_seed(cfg.sample.seed, c))).collect();
    let dir = pipeline::samples_dir(&cfg);
    pipeline::sample(&cfg, &classes, cfg.sample.n_per_class, &dir, &mut log)?;
    for (model, report) in pipeline::evaluate(&cfg, &[dir], &mut log)? {
        println!("{model}");
        print!("{}", report.to_table());
    }
    Ok(())
}
