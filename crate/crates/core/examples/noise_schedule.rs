//! Linear noise schedules and forward noising of a phantom MIP.
//!
//! `cargo run --example noise_schedule -- [out.png]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vasc::diffusion::{make_linear_schedule, p_sample_from_eps, q_sample, scaled_linear_schedule};
use vasc::image::tile;
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};
use vasc::Image2D;

fn main() -> vasc::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("forward_noising.png"));
    let long = make_linear_schedule(1000, 1e-4, 2e-2)?;
    let short = scaled_linear_schedule(200, 1e-4, 2e-2)?;
    for (name, s) in [("T=1000", &long), ("T=200 scaled", &short)] {
        let marks: Vec<String> = [1, s.steps() / 4, s.steps() / 2, s.steps()]
            .iter()
            .map(|&t| format!("t={t}: beta {:.2e} abar {:.3e}", s.beta_at(t), s.alpha_bar_at(t)))
            .collect();
        println!("{name}: {}", marks.join("; "));
    }

    let mip = mip_render(&generate_phantom(&PhantomSpec::new(ClassLabel::Class1, 3))?, Axis::Z);
    let x0: Vec<f32> = mip.data.iter().map(|v| 2.0 * v - 1.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps: Vec<f32> = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut frames = Vec::new();
    for t in [1, 25, 50, 100, 150, 200] {
        let xt = q_sample(&x0, t, &eps, &short)?;
        frames.push(Image2D::new(mip.height, mip.width, xt.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())?);
    }
    let x1 = q_sample(&x0, 1, &eps, &short)?;
    let back = p_sample_from_eps(&x1, &eps, 1, None, &short)?;
    let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("t=1 step with the true noise recovers x0 to {err:.1e}");
    tile(&frames, frames.len())?.upsample(3).write_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
