use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vasc::anatomy::{AnatomyConditionVector, ANATOMY_TOKENS};
use vasc::diffusion::*;
use vasc::phantom::ClassLabel;
use vasc::Image2D;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn latents(n: usize, seed: u64) -> Vec<Image2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Image2D::new(16, 16, normals(&mut rng, 256)).unwrap()).collect()
}

fn conditioning(seed: u64) -> Conditioning {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conditioning {
        shape: (0..3).map(|_| normals(&mut rng, 32)).collect(),
        anatomy: (0..3)
            .map(|_| AnatomyConditionVector {
                height: 16,
                width: 16,
                tokens: (0..ANATOMY_TOKENS).map(|_| normals(&mut rng, 256)).collect(),
            })
            .collect(),
    }
}

fn perturbed(b: &ConditionBundle) -> ConditionBundle {
    ConditionBundle {
        shape_vec: b.shape_vec.iter().map(|v| v * -2.0 + 1.0).collect(),
        anatomy_tokens: b.anatomy_tokens.iter().map(|v| v * 3.0 - 0.5).collect(),
        ..b.clone()
    }
}

#[test]
fn schedule_identities_hold() {
    for (t_max, scaled) in [(1000, false), (200, true), (2, false)] {
        let s = if scaled {
            scaled_linear_schedule(t_max, 1e-4, 2e-2).unwrap()
        } else {
            make_linear_schedule(t_max, 1e-4, 2e-2).unwrap()
        };
        assert_eq!(s.steps(), t_max);
        let mut prod = 1.0f64;
        for t in 1..=t_max {
            assert!((s.alpha_at(t) - (1.0 - s.beta_at(t))).abs() < 1e-12);
            prod *= s.alpha_at(t);
            assert!((s.alpha_bar_at(t) - prod).abs() < 1e-12);
            assert!(s.beta_at(t) > 0.0 && s.beta_at(t) < 1.0);
            if t > 1 {
                assert!(s.beta_at(t) >= s.beta_at(t - 1));
                assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
                assert!((s.alpha_bar_at(t) - s.alpha_bar_at(t - 1) * s.alpha_at(t)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn linear_betas_are_affine_in_t() {
    let s = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    for t in 1..=1000 {
        let expect = 1e-4 + (t - 1) as f64 * (2e-2 - 1e-4) / 999.0;
        assert!((s.beta_at(t) - expect).abs() < 1e-15);
    }
    assert!(s.alpha_bar_at(1000) < 5e-5, "{}", s.alpha_bar_at(1000));
}

#[test]
fn q_sample_special_cases() {
    let s = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = normals(&mut rng, 64);
    let x0 = normals(&mut rng, 64);
    let t = 321;
    let xt = q_sample(&vec![0.0; 64], t, &eps, &s).unwrap();
    for (a, e) in xt.iter().zip(&eps) {
        assert_eq!(*a, ((1.0 - s.alpha_bar_at(t)).sqrt() * *e as f64) as f32);
    }
    let x1 = q_sample(&x0, 1, &vec![0.0; 64], &s).unwrap();
    for (a, x) in x1.iter().zip(&x0) {
        assert!((*a as f64 - s.alpha_at(1).sqrt() * *x as f64).abs() < 1e-6);
    }
    assert!(q_sample(&x0, 0, &eps, &s).is_err());
    assert!(q_sample(&x0, 1001, &eps, &s).is_err());
    assert!(q_sample(&x0, 5, &eps[..10], &s).is_err());
}

#[test]
fn q_sample_moments_match_closed_form_and_the_iterated_kernel() {
    let s = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let t = 500;
    let n = 100_000;
    let x0 = [1.5f32, -0.7];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sum_c, mut sq_c) = ([0.0f64; 2], [0.0f64; 2]);
    let (mut sum_i, mut sq_i) = ([0.0f64; 2], [0.0f64; 2]);
    for _ in 0..n {
        let eps = normals(&mut rng, 2);
        let xc = q_sample(&x0, t, &eps, &s).unwrap();
        let mut xi = x0.to_vec();
        for k in 1..=t {
            let e = normals(&mut rng, 2);
            xi = q_step(&xi, k, &e, &s).unwrap();
        }
        for j in 0..2 {
            sum_c[j] += xc[j] as f64;
            sq_c[j] += (xc[j] as f64).powi(2);
            sum_i[j] += xi[j] as f64;
            sq_i[j] += (xi[j] as f64).powi(2);
        }
    }
    let var = 1.0 - s.alpha_bar_at(t);
    let se = (var / n as f64).sqrt();
    for j in 0..2 {
        let mean = s.alpha_bar_at(t).sqrt() * x0[j] as f64;
        for (sum, sq) in [(sum_c[j], sq_c[j]), (sum_i[j], sq_i[j])] {
            let m = sum / n as f64;
            let v = sq / n as f64 - m * m;
            assert!((m - mean).abs() < 4.0 * se, "mean {m} vs {mean}");
            assert!((v / var - 1.0).abs() < 0.03, "variance {v} vs {var}");
        }
    }
}

#[test]
fn reverse_step_inverts_with_true_noise_at_t1() {
    let s = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = normals(&mut rng, 256);
    let eps = normals(&mut rng, 256);
    let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
    let z = normals(&mut rng, 256);
    let back = p_sample_from_eps(&x1, &eps, 1, Some(&z), &s).unwrap();
    let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn zero_noise_estimate_reduces_to_rescaling() {
    let s = scaled_linear_schedule(200, 1e-4, 2e-2).unwrap();
    let x = latents(1, 4).remove(0).data;
    for t in [1, 2, 57, 200] {
        let out = p_sample_from_eps(&x, &vec![0.0; x.len()], t, None, &s).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert_eq!(*o, ((1.0 / s.alpha_at(t).sqrt()) * *v as f64) as f32);
        }
    }
}

#[test]
fn forward_shapes_and_taps_at_every_resolution() {
    let net = EpsNetwork::new(EpsConfig::default()).unwrap();
    let cond = conditioning(5);
    let bundles = vec![cond.bundle(ClassLabel::Class2, GuidanceFlags::FULL); 2];
    let mut taps = Taps::default();
    let out = net.eps_forward_taps(&latents(2, 6), &[3, 150], &bundles, Some(&mut taps)).unwrap();
    assert!(out.iter().all(|o| o.shape() == [16, 16]));
    let enc: Vec<usize> = taps.encoder.iter().map(|t| t.shape()[2]).collect();
    let dec: Vec<usize> = taps.decoder.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(enc, [16, 8, 4, 2, 1]);
    assert_eq!(dec, [1, 2, 4, 8, 16]);
    // Zero-initialized head.
    assert!(out.iter().flat_map(|o| &o.data).all(|&v| v == 0.0));
}

#[test]
fn guidance_inputs_reach_decoder_blocks_only() {
    let mut net = EpsNetwork::new(EpsConfig::default()).unwrap();
    net.randomize_head(7);
    let cond = conditioning(8);
    let b = cond.bundle(ClassLabel::Class1, GuidanceFlags::FULL);
    let x = latents(1, 9);
    let (mut ta, mut tb) = (Taps::default(), Taps::default());
    let ya = net.eps_forward_taps(&x, &[40], &[b.clone()], Some(&mut ta)).unwrap();
    let yb = net.eps_forward_taps(&x, &[40], &[perturbed(&b)], Some(&mut tb)).unwrap();
    for (a, b) in ta.encoder.iter().zip(&tb.encoder) {
        assert_eq!(a.data(), b.data());
    }
    for (a, b) in ta.decoder.iter().zip(&tb.decoder) {
        assert_ne!(a.data(), b.data());
    }
    assert_ne!(ya, yb);
}

#[test]
fn guidance_off_ignores_shape_and_anatomy_bit_exactly() {
    let cond = conditioning(10);
    let x = latents(2, 11);
    for net_flags in [GuidanceFlags::NONE, GuidanceFlags::FULL] {
        let mut net = EpsNetwork::new(EpsConfig { guidance: net_flags, ..EpsConfig::default() }).unwrap();
        net.randomize_head(12);
        let b = cond.bundle(ClassLabel::Class3, GuidanceFlags::NONE);
        let ya = net.eps_forward(&x, &[10, 90], &[b.clone(), b.clone()]).unwrap();
        let yb = net.eps_forward(&x, &[10, 90], &[perturbed(&b), perturbed(&b)]).unwrap();
        assert_eq!(ya, yb);
    }
    // Shape-only networks also ignore anatomy tokens.
    let mut net = EpsNetwork::new(EpsConfig { guidance: GuidanceFlags::SHAPE, ..EpsConfig::default() }).unwrap();
    net.randomize_head(13);
    let b = cond.bundle(ClassLabel::Class3, GuidanceFlags::SHAPE);
    let only_anatomy = ConditionBundle {
        anatomy_tokens: perturbed(&b).anatomy_tokens,
        ..b.clone()
    };
    assert_eq!(net.eps_forward(&x[..1], &[10], &[b]).unwrap(), net.eps_forward(&x[..1], &[10], &[only_anatomy]).unwrap());
}

#[test]
fn class_label_changes_the_output() {
    let mut net = EpsNetwork::new(EpsConfig { guidance: GuidanceFlags::NONE, ..EpsConfig::default() }).unwrap();
    net.randomize_head(14);
    let cond = conditioning(15);
    let x = latents(1, 16);
    let y1 = net.eps_forward(&x, &[50], &[cond.bundle(ClassLabel::Class1, GuidanceFlags::NONE)]).unwrap();
    let y2 = net.eps_forward(&x, &[50], &[cond.bundle(ClassLabel::Class2, GuidanceFlags::NONE)]).unwrap();
    let diff = y1[0].data.iter().zip(&y2[0].data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff > 0.0);
}

#[test]
fn zero_head_loss_is_unit_variance_of_noise() {
    let net = EpsNetwork::new(EpsConfig::default()).unwrap();
    let s = scaled_linear_schedule(200, 1e-4, 2e-2).unwrap();
    let cond = conditioning(17);
    let x0 = latents(64, 18);
    let bundles: Vec<_> = (0..64).map(|i| cond.bundle(ClassLabel::ALL[i % 3], GuidanceFlags::FULL)).collect();
    let loss = diffusion_loss(&net, &x0, &bundles, &s, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "{loss}");
    assert!(diffusion_loss(&net, &[], &[], &s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn reverse_step_at_t1_ignores_noise() {
    let mut net = EpsNetwork::new(EpsConfig::default()).unwrap();
    net.randomize_head(20);
    let s = scaled_linear_schedule(200, 1e-4, 2e-2).unwrap();
    let cond = vec![conditioning(21).bundle(ClassLabel::Class1, GuidanceFlags::FULL)];
    let x = latents(1, 22);
    let z1 = vec![vec![1.0f32; 256]];
    let a = p_sample_step(&net, &x, 1, &cond, &s, Some(&z1)).unwrap();
    let b = p_sample_step(&net, &x, 1, &cond, &s, None).unwrap();
    assert_eq!(a, b);
    let c = p_sample_step(&net, &x, 2, &cond, &s, Some(&z1)).unwrap();
    let d = p_sample_step(&net, &x, 2, &cond, &s, None).unwrap();
    assert_ne!(c, d);
}

#[test]
fn sampling_is_seed_deterministic() {
    let mut net = EpsNetwork::new(EpsConfig::default()).unwrap();
    net.randomize_head(23);
    let s = scaled_linear_schedule(8, 1e-4, 2e-2).unwrap();
    let b = conditioning(24).bundle(ClassLabel::Class2, GuidanceFlags::FULL);
    let a = sample(&net, &b, 3, 5, &s, 2).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|z| z.shape() == [16, 16]));
    assert_eq!(a, sample(&net, &b, 3, 5, &s, 2).unwrap());
    assert_ne!(a, sample(&net, &b, 3, 6, &s, 2).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let eps_cfg = EpsConfig {
        channels: [16, 16, 16, 16, 16],
        emb_dim: 32,
        ..EpsConfig::default()
    };
    let cfg = LdmConfig { timesteps: 50, steps: 6, batch_size: 4, ..LdmConfig::default() };
    let data = LatentDataset {
        latents: latents(10, 25),
        labels: (0..10).map(|i| ClassLabel::ALL[i % 3]).collect(),
        conditioning: conditioning(26),
    };
    let mut full = LdmTrainer::new(EpsNetwork::new(eps_cfg.clone()).unwrap(), cfg.clone()).unwrap();
    full.run_until(&data, 6, |_, _| {}).unwrap();

    let mut first = LdmTrainer::new(EpsNetwork::new(eps_cfg.clone()).unwrap(), cfg.clone()).unwrap();
    first.run_until(&data, 3, |_, _| {}).unwrap();
    let net = EpsNetwork::from_params(eps_cfg, first.net.params.clone()).unwrap();
    let mut resumed = LdmTrainer::resume(net, first.adam.clone(), cfg, first.losses.clone()).unwrap();
    resumed.run_until(&data, 6, |_, _| {}).unwrap();

    assert_eq!(full.losses, resumed.losses);
    for ((_, a), (_, b)) in full.net.params.iter().zip(resumed.net.params.iter()) {
        assert_eq!(a, b);
    }
}
