//! Trains the feature extractor and scores degraded copies of the real set.
//!
//! `cargo run --release --example metrics_report`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vasc::metrics::{comparison_table, evaluate, train_feature_extractor, ExtractorConfig};
use vasc::phantom::{generate_dataset, PhantomSpec, Split};

fn main() -> vasc::Result<()> {
    let dir = std::env::temp_dir().join("vasc-metrics-example");
    let manifest = generate_dataset(&dir, 30, &PhantomSpec::default(), 0)?;
    let train = manifest.load_mips(Split::Train)?;
    let val = manifest.load_mips(Split::Val)?;
    let fx = train_feature_extractor(&train, &val, &ExtractorConfig::default(), false)?;
    println!("extractor validation accuracy {:.3}", fx.val_accuracy);

    let mut rows = Vec::new();
    for sigma in [0.0f32, 0.05, 0.15] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, sigma.max(1e-12)).unwrap();
        let degraded: Vec<_> = val
            .iter()
            .map(|(img, c)| {
                let mut out = img.clone();
                out.data.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                (out, *c)
            })
            .collect();
        rows.push((format!("val + noise {sigma}"), evaluate(&train, &degraded, &fx, "example")?));
    }
    print!("{}", comparison_table(&rows));
    Ok(())
}
