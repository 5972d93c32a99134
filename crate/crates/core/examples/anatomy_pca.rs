//! Class-wise PCA of phantom MIPs: explained variance and the leading modes.
//!
//! `cargo run --example anatomy_pca -- [class 1-3] [n_images] [out.png]`

use std::path::PathBuf;

use vasc::anatomy::{build_anatomy_condition, fit_pca, PCA_COMPONENTS};
use vasc::image::tile;
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};
use vasc::Image2D;

fn main() -> vasc::Result<()> {
    let mut args = std::env::args().skip(1);
    let class = ClassLabel::from_index(args.next().and_then(|s| s.parse::<usize>().ok()).unwrap_or(2).saturating_sub(1))?;
    let n: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("pca_modes.png"));
    let images = (0..n)
        .map(|s| Ok(mip_render(&generate_phantom(&PhantomSpec::new(class, s))?, Axis::Z)))
        .collect::<vasc::Result<Vec<_>>>()?;
    let model = fit_pca(class, &images, PCA_COMPONENTS)?;
    let total: f64 = model.explained_variance.iter().sum();
    for (i, v) in model.explained_variance.iter().enumerate() {
        println!("mode {i}: variance {v:.4} ({:.1}% of the kept modes)", 100.0 * v / total);
    }
    let (h, w) = (images[0].height, images[0].width);
    let to_image = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        Image2D::from_fn(h, w, |y, x| ((v[y * w + x] - lo) / (hi - lo).max(1e-12)) as f32)
    };
    let mut panels = vec![to_image(&model.mean_image)];
    panels.extend(model.components.iter().take(3).map(|c| to_image(c)));
    tile(&panels, 4)?.upsample(4).write_png(&out)?;
    let cond = build_anatomy_condition(&model, 16, 16)?;
    println!("anatomy condition: {} tokens of length {}", cond.tokens.len(), cond.token_len());
    println!("wrote {} (mean, then modes 1-3)", out.display());
    Ok(())
}
