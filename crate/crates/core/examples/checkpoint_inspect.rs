//! Lists the blocks, metadata and tensor shapes of a checkpoint file.
//!
//! `cargo run --example checkpoint_inspect -- run/out/ae.ckpt`

use std::path::PathBuf;

use vasc::pipeline::Checkpoint;

fn main() -> vasc::Result<()> {
    let Some(path) = std::env::args().nth(1).map(PathBuf::from) else {
        eprintln!("usage: checkpoint_inspect <file.ckpt>");
        std::process::exit(1);
    };
    let ckpt = Checkpoint::load(&path)?;
    println!("config_hash {}", ckpt.config_hash);
    for (name, block) in &ckpt.blocks {
        let floats: usize = block.tensors.values().map(|t| t.len()).sum();
        println!("[{name}] {} tensors, {floats} floats", block.tensors.len());
        for (k, v) in &block.meta {
            let shown = if v.len() > 60 { format!("{}... ({} chars)", &v[..60], v.len()) } else { v.clone() };
            println!("  {k} = {shown}");
        }
        for (k, t) in block.tensors.iter().take(6) {
            println!("  {k} {:?}", t.shape());
        }
        if block.tensors.len() > 6 {
            println!("  ...");
        }
    }
    Ok(())
}
