//! Hu and Zernike descriptors for one phantom per class, plus a Zernike
//! reconstruction strip.
//!
//! `cargo run --example shape_descriptors -- [order] [out.png]`

use std::path::PathBuf;

use vasc::descriptors::{hu_moments, log_compress_hu, zernike_moments, zernike_reconstruct};
use vasc::image::tile;
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};

fn main() -> vasc::Result<()> {
    let mut args = std::env::args().skip(1);
    let order: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("zernike_reconstruction.png"));
    let mut strip = Vec::new();
    for class in ClassLabel::ALL {
        let mip = mip_render(&generate_phantom(&PhantomSpec::new(class, 1))?, Axis::Z);
        let hu: Vec<String> = hu_moments(&mip)?.phi.iter().map(|&p| format!("{:6.2}", log_compress_hu(p))).collect();
        let z = zernike_moments(&mip, order)?;
        println!("class {class}");
        println!("  log|hu|  {}", hu.join(" "));
        println!("  |Z| n<=4 {}", z.magnitudes.iter().take(9).map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" "));
        strip.push(mip.clone());
        strip.push(zernike_reconstruct(&mip, order)?.map(|v| v.clamp(0.0, 1.0)));
    }
    tile(&strip, 2)?.upsample(4).write_png(&out)?;
    println!("wrote {} (left: MIP, right: order-{order} reconstruction)", out.display());
    Ok(())
}
