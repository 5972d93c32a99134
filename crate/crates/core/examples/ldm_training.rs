//! Trains the conditional eps-network on area-downsampled phantom MIPs
//! (standing in for autoencoder latents) and samples each class.
//!
//! `cargo run --release --example ldm_training -- [steps] [out.png]`

use std::path::PathBuf;
use std::time::Instant;

use vasc::descriptors::DEFAULT_ZERNIKE_ORDER;
use vasc::diffusion::{sample, EpsConfig, EpsNetwork, GuidanceFlags, LatentDataset, LdmConfig, LdmTrainer};
use vasc::image::tile;
use vasc::phantom::{generate_dataset, ClassLabel, PhantomSpec, Split};
use vasc::pipeline::build_conditioning;

fn main() -> vasc::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ldm_samples.png"));
    let dir = std::env::temp_dir().join("vasc-ldm-example");
    let manifest = generate_dataset(&dir, 20, &PhantomSpec::default(), 0)?;
    let train = manifest.load_mips(Split::Train)?;
    let latents = train
        .iter()
        .map(|(img, _)| Ok(img.downsample_area(4)?.map(|v| 2.0 * v - 1.0)))
        .collect::<vasc::Result<Vec<_>>>()?;
    let data = LatentDataset {
        latents,
        labels: train.iter().map(|(_, c)| *c).collect(),
        conditioning: build_conditioning(&manifest, DEFAULT_ZERNIKE_ORDER, 16)?,
    };
    let config = LdmConfig { steps, ..LdmConfig::default() };
    let net = EpsNetwork::new(EpsConfig::default())?;
    println!("{} parameters, {} training latents", net.params.count(), data.latents.len());
    let mut trainer = LdmTrainer::new(net, config.clone())?;
    let start = Instant::now();
    trainer.run_until(&data, steps, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:5} loss {loss:.4} t {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    let schedule = config.schedule()?;
    let mut panels = Vec::new();
    for class in ClassLabel::ALL {
        let cond = data.conditioning.bundle(class, GuidanceFlags::FULL);
        panels.extend(sample(&trainer.net, &cond, 4, class.index() as u64, &schedule, 4)?.into_iter().map(|z| z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))));
    }
    tile(&panels, 4)?.upsample(4).write_png(&out)?;
    println!("wrote {} (one row per class)", out.display());
    Ok(())
}
