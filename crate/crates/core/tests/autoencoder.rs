use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vasc::autoencoder::*;
use vasc::phantom::{generate_phantom, mip_render, Axis, ClassLabel, PhantomSpec};
use vasc::Image2D;

fn mask(size: usize, seed: u64) -> Image2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
    Image2D::new(size, size, data).unwrap()
}

fn phantoms(n: u64) -> Vec<Image2D> {
    (0..n)
        .map(|i| mip_render(&generate_phantom(&PhantomSpec::new(ClassLabel::ALL[(i % 3) as usize], i)).unwrap(), Axis::Z))
        .collect()
}

#[test]
fn loss_is_zero_on_identical_binary_masks() {
    let m = mask(64, 1);
    assert!(ae_loss(&m, &m).unwrap().abs() < 1e-6);
}

#[test]
fn loss_of_blank_prediction_matches_direct_sums() {
    let m = mask(64, 2);
    let fg = m.data.iter().filter(|&&v| v > 0.5).count() as f64;
    let blank = Image2D::zeros(64, 64);
    let expect = fg / 4096.0 + 1.0 - DICE_EPS / (fg + DICE_EPS);
    let got = ae_loss(&blank, &m).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!(got > 1.0);
}

#[test]
fn loss_is_permutation_invariant() {
    let a = mask(32, 3);
    let b = Image2D::from_fn(32, 32, |y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0);
    let mut perm: Vec<usize> = (0..1024).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let pa = Image2D::new(32, 32, perm.iter().map(|&i| a.data[i]).collect()).unwrap();
    let pb = Image2D::new(32, 32, perm.iter().map(|&i| b.data[i]).collect()).unwrap();
    let (l, lp) = (ae_loss(&b, &a).unwrap(), ae_loss(&pb, &pa).unwrap());
    assert!((l - lp).abs() < 1e-12);
    assert!(l >= 0.0);
}

#[test]
fn tape_loss_matches_plain_loss_for_one_image() {
    use vasc::numcore::{Tape, Tensor};
    let target = mask(16, 5);
    let pred = Image2D::from_fn(16, 16, |y, x| ((y + 2 * x) % 5) as f32 / 4.0);
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(Tensor::new(&[1, 1, 16, 16], pred.data.clone()).unwrap());
    let l = ae_loss_var(&mut tape, p, &Tensor::new(&[1, 1, 16, 16], target.data.clone()).unwrap()).unwrap();
    let got = tape.value(l).data()[0] as f64;
    assert!((got - ae_loss(&pred, &target).unwrap()).abs() < 1e-5);
}

#[test]
fn shapes_and_decoder_range() {
    let net = AeNetwork::new(AeConfig::default()).unwrap();
    assert_eq!(net.latent_shape(), [16, 16, 1]);
    let imgs = phantoms(3);
    let z = net.encode(&imgs).unwrap();
    assert!(z.iter().all(|l| l.shape() == [16, 16]));
    assert_eq!(net.encode(&imgs).unwrap(), z);
    let y = net.reconstruct(&imgs).unwrap();
    assert!(y.iter().all(|im| im.shape() == [64, 64]));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let latents: Vec<Image2D> = (0..4)
        .map(|_| Image2D::new(16, 16, (0..256).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap())
        .collect();
    let out = net.decode(&latents).unwrap();
    assert!(out.iter().flat_map(|im| &im.data).all(|&v| (0.0..=1.0).contains(&v)));
    assert!(net.encode(&[Image2D::zeros(32, 32)]).is_err());
}

#[test]
fn latent_normalization_round_trips() {
    let zs = vec![
        Image2D::from_fn(4, 4, |y, x| (y * 4 + x) as f32 * 0.3 - 1.0),
        Image2D::from_fn(4, 4, |y, x| (y as f32 - x as f32) * 0.7),
    ];
    let s = LatentStats::from_latents(&zs).unwrap();
    assert!(s.std > 0.0);
    for z in &zs {
        let back = s.denormalize(&s.normalize(z));
        assert!(back.data.iter().zip(&z.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    let all: Vec<f32> = zs.iter().flat_map(|z| s.normalize(z).data).collect();
    let mean = all.iter().map(|&v| v as f64).sum::<f64>() / all.len() as f64;
    assert!(mean.abs() < 1e-6);
}

#[test]
fn training_is_bit_reproducible() {
    let imgs = phantoms(6);
    let cfg = AeConfig { steps: 12, ..AeConfig::default() };
    let (a, sa, la) = train_autoencoder_on(&imgs, &cfg, |_, _| {}).unwrap();
    let (b, sb, lb) = train_autoencoder_on(&imgs, &cfg, |_, _| {}).unwrap();
    assert_eq!(la.losses, lb.losses);
    assert_eq!(sa, sb);
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x, y);
    }
    assert!(sa.std > 0.0);
    assert!(la.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn invalid_config_is_rejected() {
    let bad = AeConfig { heads: 5, ..AeConfig::default() };
    assert!(bad.validate().is_err());
    assert!(train_autoencoder_on(&[], &AeConfig::default(), |_, _| {}).is_err());
}
