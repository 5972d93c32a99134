//! Overfits the autoencoder on 16 phantoms and reports loss and round-trip Dice.
//!
//! `cargo run --release --example autoencoder_smoke -- [steps]`

use std::time::Instant;

use vasc::autoencoder::{binary_dice, train_autoencoder_on, AeConfig};
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};

fn main() -> vasc::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let images: Vec<_> = (0..16u64)
        .map(|i| {
            let v = generate_phantom(&PhantomSpec::new(ClassLabel::ALL[(i % 3) as usize], i))?;
            Ok(mip_render(&v, Axis::Z))
        })
        .collect::<vasc::Result<_>>()?;
    let config = AeConfig { steps, ..AeConfig::default() };
    let start = Instant::now();
    let (net, stats, log) = train_autoencoder_on(&images, &config, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:5} loss {loss:.4} t {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    let epochs = log.epoch_means();
    let recon = net.reconstruct(&images)?;
    let dice: Vec<f64> = recon.iter().zip(&images).map(|(r, x)| binary_dice(r, x)).collect::<vasc::Result<_>>()?;
    println!(
        "first epoch {:.4} last epoch {:.4} ratio {:.3}",
        epochs[0],
        epochs[epochs.len() - 1],
        epochs[epochs.len() - 1] / epochs[0]
    );
    println!(
        "dice mean {:.4} min {:.4}; latent mean {:.4} std {:.4}; {:.1}s",
        dice.iter().sum::<f64>() / dice.len() as f64,
        dice.iter().cloned().fold(1.0, f64::min),
        stats.mean,
        stats.std,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
