//! Generates one phantom per class and writes their MIPs side by side.
//!
//! `cargo run --example phantom_gallery -- [out.png]`

use std::path::PathBuf;

use vasc::image::tile;
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};

fn main() -> vasc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("phantom_gallery.png"));
    let mut mips = Vec::new();
    for seed in 0..4 {
        for class in ClassLabel::ALL {
            let v = generate_phantom(&PhantomSpec::new(class, seed))?;
            println!("seed {seed} class {class}: pcoma {}", v.pcoma);
            mips.push(mip_render(&v, Axis::Z));
        }
    }
    tile(&mips, 3)?.upsample(4).write_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
