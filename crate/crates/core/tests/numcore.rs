mod common;

use common::{finite_difference_error, jitter_params, random_tensor};
use vasc::numcore::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_layer(layer: Layer, input_shape: &[usize], seed: u64) -> f64 {
    let mut params = ParamSet::<f64>::new(seed);
    layer.register(&mut params).unwrap();
    jitter_params(&mut params, seed + 1);
    let input = random_tensor(input_shape, seed + 2);
    let build = move |t: &mut Tape<f64>, p: &ParamSet<f64>, x: Var| layer.forward(t, p, x);
    finite_difference_error(&build, &params, &input, H, seed)
}

#[test]
fn dense_matches_finite_differences() {
    let e = check_layer(Layer::Dense(Dense::new("d", 5, 4)), &[3, 5], 1);
    assert!(e < TOL, "dense rel err {e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    let e = check_layer(Layer::Conv2d(Conv2d::new("c", 2, 3, 3)), &[2, 2, 5, 4], 2);
    assert!(e < TOL, "conv2d rel err {e}");
}

#[test]
fn groupnorm_matches_finite_differences() {
    let e = check_layer(Layer::GroupNorm(GroupNorm::new("g", 8)), &[2, 8, 3, 3], 3);
    assert!(e < TOL, "groupnorm rel err {e}");
}

#[test]
fn silu_matches_finite_differences() {
    let e = check_layer(Layer::Silu, &[2, 3, 4], 4);
    assert!(e < TOL, "silu rel err {e}");
}

#[test]
fn resblock_matches_finite_differences() {
    let e = check_layer(Layer::ResBlock(ResBlock::new("r", 8, 16)), &[2, 8, 4, 4], 5);
    assert!(e < TOL, "resblock rel err {e}");
}

#[test]
fn mha_matches_finite_differences() {
    let e = check_layer(Layer::Mha(Mha::new("m", 8, 2)), &[2, 8, 3, 3], 6);
    assert!(e < TOL, "mha rel err {e}");
}

#[test]
fn up2_and_down2_match_finite_differences() {
    let e = check_layer(Layer::Up2(Up2::new("u", 2, 3)), &[1, 2, 3, 3], 7);
    assert!(e < TOL, "up2 rel err {e}");
    let e = check_layer(Layer::Down2(Down2::new("d", 2, 3)), &[1, 2, 6, 5], 8);
    assert!(e < TOL, "down2 rel err {e}");
}

#[test]
fn remaining_tape_ops_match_finite_differences() {
    let mut params = ParamSet::<f64>::new(9);
    params.add("table", &[3, 4], Init::GlorotUniform { fan_in: 3, fan_out: 4 }).unwrap();
    params.add("cb", &[2, 2], Init::GlorotUniform { fan_in: 2, fan_out: 2 }).unwrap();
    jitter_params(&mut params, 10);
    let input = random_tensor(&[2, 2, 4, 4], 11);
    let build = |t: &mut Tape<f64>, p: &ParamSet<f64>, x: Var| -> vasc::Result<Var> {
        let pooled = t.avg_pool2(x)?;
        let up = t.upsample2(pooled)?;
        let cat = t.concat(x, up)?;
        let cb = t.param(p, "cb")?;
        let biased = t.channel_bias(x, cb)?;
        let s = t.sigmoid(biased);
        let a = t.abs(cat);
        let tokens = t.mean_tokens(a)?;
        let table = t.param(p, "table")?;
        let rows = t.gather(table, &[2, 0])?;
        let r = t.reshape(rows, &[2, 4, 1, 1])?;
        let tok = t.reshape(tokens, &[2, 4, 1, 1])?;
        let prod = t.mul(r, tok)?;
        let shifted = t.offset(s, 1.5);
        let q = t.div(biased, shifted)?;
        let qm = t.mean_tokens(q)?;
        let qm = t.reshape(qm, &[2, 2, 1, 1])?;
        let z = t.sub(prod, prod)?;
        let z = t.scale(z, 3.0);
        let pr = t.reshape(prod, &[2, 2, 1, 2])?;
        let pm = t.mean_tokens(pr)?;
        let pm = t.reshape(pm, &[2, 2, 1, 1])?;
        let y = t.add(pm, qm)?;
        let zr = t.reshape(z, &[2, 2, 1, 2])?;
        let zm = t.mean_tokens(zr)?;
        let zm = t.reshape(zm, &[2, 2, 1, 1])?;
        let y = t.add(y, zm)?;
        Ok(y)
    };
    let e = finite_difference_error(&build, &params, &input, H, 12);
    assert!(e < TOL, "misc ops rel err {e}");
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let params = ParamSet::<f64>::new(0);
    let input = random_tensor(&[4, 3], 13);
    let build = |t: &mut Tape<f64>, _: &ParamSet<f64>, x: Var| t.cross_entropy(x, &[0, 2, 1, 2]);
    let e = finite_difference_error(&build, &params, &input, H, 14);
    assert!(e < TOL, "cross entropy rel err {e}");
}

#[test]
fn composite_resblock_attention_network_matches_finite_differences() {
    let rb = ResBlock::new("rb", 8, 8);
    let attn = AttnBlock::new("at", 8, 2);
    let down = Down2::new("dn", 8, 8);
    let head = Dense::new("head", 8, 3);
    let mut params = ParamSet::<f64>::new(20);
    rb.register(&mut params).unwrap();
    attn.register(&mut params).unwrap();
    down.register(&mut params).unwrap();
    head.register(&mut params).unwrap();
    params.add("emb", &[8], Init::GlorotUniform { fan_in: 8, fan_out: 8 }).unwrap();
    jitter_params(&mut params, 21);
    let input = random_tensor(&[2, 8, 4, 4], 22);
    let build = move |t: &mut Tape<f64>, p: &ParamSet<f64>, x: Var| -> vasc::Result<Var> {
        let emb = t.param(p, "emb")?;
        let h = rb.forward_cond(t, p, x, &[Cond::Channel(emb)])?;
        let h = attn.forward(t, p, h)?;
        let h = down.forward(t, p, h)?;
        let h = t.mean_tokens(h)?;
        let h = t.silu(h);
        head.forward(t, p, h)
    };
    let e = finite_difference_error(&build, &params, &input, H, 23);
    assert!(e < TOL, "composite rel err {e}");
}

#[test]
fn silu_closed_form() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let y = t.silu(x);
    let v = t.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    assert!((v[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn single_token_identity_attention_returns_input() {
    let mha = Mha::new("m", 4, 1);
    let mut p = ParamSet::<f64>::new(0);
    mha.register(&mut p).unwrap();
    for s in ["q", "k", "v", "o"] {
        let w = p.get_mut(&format!("m.{s}.w")).unwrap();
        w.data_mut().fill(0.0);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
    }
    let x = Tensor::new(&[1, 4, 1, 1], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
    let y = layer_forward(&Layer::Mha(mha), &p, x.clone()).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv2d_of_ones_counts_window_overlap() {
    // Direct sliding-window sum as the oracle.
    let conv = Conv2d::new("c", 1, 1, 3);
    let mut p = ParamSet::<f64>::new(0);
    conv.register(&mut p).unwrap();
    p.get_mut("c.w").unwrap().data_mut().fill(1.0);
    let x = Tensor::full(&[1, 1, 5, 5], 1.0);
    let y = layer_forward(&Layer::Conv2d(conv), &p, x).unwrap();
    let mut oracle = [[0.0f64; 5]; 5];
    for (oy, row) in oracle.iter_mut().enumerate() {
        for (ox, v) in row.iter_mut().enumerate() {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (oy as i32 + dy, ox as i32 + dx);
                    if (0..5).contains(&yy) && (0..5).contains(&xx) {
                        *v += 1.0;
                    }
                }
            }
        }
    }
    for yy in 0..5 {
        for xx in 0..5 {
            assert_eq!(y.data()[yy * 5 + xx], oracle[yy][xx]);
        }
    }
    assert_eq!(oracle[2][2], 9.0);
    assert_eq!(oracle[0][0], 4.0);
}

#[test]
fn layer_shape_mismatch_reports_expected_and_got() {
    let conv = Conv2d::new("c", 3, 2, 3);
    let mut p = ParamSet::<f64>::new(0);
    conv.register(&mut p).unwrap();
    let err = layer_forward(&Layer::Conv2d(conv), &p, Tensor::zeros(&[1, 2, 4, 4])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("expected") && msg.contains("got"), "{msg}");
}

#[test]
fn gradient_of_sum_of_squares_is_twice_param() {
    let mut p = ParamSet::<f64>::new(3);
    p.add("p", &[5], Init::GlorotUniform { fan_in: 5, fan_out: 5 }).unwrap();
    let mut t = Tape::new();
    let v = t.param(&p, "p").unwrap();
    let sq = t.mul(v, v).unwrap();
    let loss = t.sum(sq);
    let g = grad(&t, loss, &p).unwrap();
    for (a, b) in g.get("p").unwrap().data().iter().zip(p.get("p").unwrap().data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn unconnected_parameter_gets_zero_gradient_and_vector_loss_is_rejected() {
    let mut p = ParamSet::<f64>::new(3);
    p.add("used", &[2], Init::Ones).unwrap();
    p.add("unused", &[3], Init::Ones).unwrap();
    let mut t = Tape::new();
    let v = t.param(&p, "used").unwrap();
    let loss = t.sum(v);
    let g = grad(&t, loss, &p).unwrap();
    assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(grad(&t, v, &p).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = ParamSet::<f64>::new(0);
    p.add("w", &[1], Init::Zeros).unwrap();
    let mut state = AdamState::new(&p, AdamConfig::default());
    let mut t = Tape::new();
    let w = t.param(&p, "w").unwrap();
    let loss = t.sum(w);
    let g = grad(&t, loss, &p).unwrap();
    adam_step(&mut p, &g, &mut state).unwrap();
    assert!((p.get("w").unwrap().data()[0] + 5e-4).abs() < 1e-6);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_leaves_parameters_unchanged() {
    let mut p = ParamSet::<f64>::new(1);
    p.add("w", &[4], Init::GlorotUniform { fan_in: 2, fan_out: 2 }).unwrap();
    let before = p.get("w").unwrap().clone();
    let mut state = AdamState::new(&p, AdamConfig::default());
    let zero = Gradients::zeros_like(&p);
    for _ in 0..5 {
        adam_step(&mut p, &zero, &mut state).unwrap();
    }
    assert_eq!(p.get("w").unwrap(), &before);
}

#[test]
fn adam_updates_parameters_independently() {
    let mut both = ParamSet::<f64>::new(2);
    both.add("a", &[3], Init::GlorotUniform { fan_in: 3, fan_out: 3 }).unwrap();
    both.add("b", &[2], Init::GlorotUniform { fan_in: 3, fan_out: 3 }).unwrap();
    let step = |p: &mut ParamSet<f64>| {
        let mut t = Tape::new();
        let mut terms = Vec::new();
        for (name, _) in p.iter() {
            let v = t.param(p, name).unwrap();
            let s = t.mul(v, v).unwrap();
            terms.push(t.sum(s));
        }
        let loss = terms.iter().skip(1).fold(terms[0], |acc, &x| t.add(acc, x).unwrap());
        let g = grad(&t, loss, p).unwrap();
        let mut st = AdamState::new(p, AdamConfig::default());
        adam_step(p, &g, &mut st).unwrap();
    };
    let mut only_a = ParamSet::<f64>::new(0);
    only_a.insert("a", both.get("a").unwrap().clone());
    let mut only_b = ParamSet::<f64>::new(0);
    only_b.insert("b", both.get("b").unwrap().clone());
    step(&mut both);
    step(&mut only_a);
    step(&mut only_b);
    assert_eq!(both.get("a"), only_a.get("a"));
    assert_eq!(both.get("b"), only_b.get("b"));
}

#[test]
fn adam_rejects_mismatched_gradient_shapes() {
    let mut p = ParamSet::<f32>::new(0);
    p.add("w", &[2], Init::Zeros).unwrap();
    let mut other = ParamSet::<f32>::new(0);
    other.add("w", &[3], Init::Zeros).unwrap();
    let g = Gradients::zeros_like(&other);
    let mut st = AdamState::new(&p, AdamConfig::default());
    assert!(adam_step(&mut p, &g, &mut st).is_err());
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let run = || {
        let net = ResBlock::new("r", 8, 8);
        let mut p = ParamSet::<f32>::new(5);
        net.register(&mut p).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let x = random_tensor(&[2, 8, 4, 4], 6).cast::<f32>();
        for _ in 0..10 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = net.forward(&mut t, &p, xv).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.mean(sq);
            let g = grad(&t, loss, &p).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        p
    };
    let (a, b) = (run(), run());
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x.data(), y.data());
    }
}
