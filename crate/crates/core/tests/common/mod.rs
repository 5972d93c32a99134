#![allow(dead_code)]

//! Shared oracles for integration and acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vasc::numcore::{ParamSet, Tape, Tensor, Var};

pub type Build = dyn Fn(&mut Tape<f64>, &ParamSet<f64>, Var) -> vasc::Result<Var>;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn probe_loss(build: &Build, params: &ParamSet<f64>, input: &Tensor<f64>, probe: &Option<Tensor<f64>>) -> (f64, Tensor<f64>) {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let y = build(&mut tape, params, x).unwrap();
    let out = tape.value(y).clone();
    let loss = match probe {
        Some(r) => out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
        None => out.data().iter().sum(),
    };
    (loss, out)
}

/// Central finite differences (step `h`) against the reverse sweep for the
/// loss `sum(output * R)` with a fixed random `R`. Returns the largest
/// per-tensor relative error `max|analytic - numeric| / max|numeric|` over
/// the input and every parameter.
pub fn finite_difference_error(build: &Build, params: &ParamSet<f64>, input: &Tensor<f64>, h: f64, seed: u64) -> f64 {
    let (_, out) = probe_loss(build, params, input, &None);
    let probe = Some(random_tensor(out.shape(), seed ^ 0x5eed));

    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let y = build(&mut tape, params, x).unwrap();
    let r = tape.constant(probe.clone().unwrap());
    let prod = tape.mul(y, r).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let param_grads = grads.for_params(params);
    let input_grad = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut numeric = vec![0.0; input.len()];
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        numeric[i] = (probe_loss(build, params, &plus, &probe).0 - probe_loss(build, params, &minus, &probe).0) / (2.0 * h);
    }
    pairs.push((input_grad.data().to_vec(), numeric));

    for (name, t) in params.iter() {
        let mut numeric = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let lp = probe_loss(build, &p, input, &probe).0;
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let lm = probe_loss(build, &p, input, &probe).0;
            numeric[i] = (lp - lm) / (2.0 * h);
        }
        pairs.push((param_grads.get(name).unwrap().data().to_vec(), numeric));
    }

    // Tensors whose exact gradient vanishes (e.g. key biases under softmax
    // shift invariance) are measured against a floor tied to the overall
    // gradient scale instead of their own rounding noise.
    let global = pairs
        .iter()
        .flat_map(|(_, n)| n.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * global).max(1e-12);
    pairs
        .iter()
        .map(|(analytic, numeric)| {
            let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
            analytic
                .iter()
                .zip(numeric)
                .map(|(a, n)| (a - n).abs())
                .fold(0.0, f64::max)
                / scale
        })
        .fold(0.0, f64::max)
}

/// Perturbs every parameter away from its structured initial value (unit
/// norm gains, zero biases) so that all gradient paths are exercised.
pub fn jitter_params(params: &mut ParamSet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}
