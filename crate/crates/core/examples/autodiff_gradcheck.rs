//! Reverse-mode gradients of a two-layer classifier checked against central
//! differences.
//!
//! `cargo run --example autodiff_gradcheck`

use vasc::numcore::{grad, Dense, Layer, ParamSet, Tape, Tensor};

fn loss(params: &ParamSet<f64>, x: &Tensor<f64>, labels: &[usize], layers: &[Layer]) -> vasc::Result<(Tape<f64>, vasc::numcore::Var)> {
    let mut tape = Tape::new();
    let mut h = tape.input(x.clone());
    for layer in layers {
        h = layer.forward(&mut tape, params, h)?;
    }
    let l = tape.cross_entropy(h, labels)?;
    Ok((tape, l))
}

fn main() -> vasc::Result<()> {
    let layers = [Layer::Dense(Dense::new("fc1", 6, 8)), Layer::Silu, Layer::Dense(Dense::new("fc2", 8, 3))];
    let mut params = ParamSet::<f64>::new(1);
    for layer in &layers {
        layer.register(&mut params)?;
    }
    let x = Tensor::new(&[4, 6], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?;
    let labels = [0, 1, 2, 1];

    let (tape, l) = loss(&params, &x, &labels, &layers)?;
    println!("loss {:.6}", tape.value(l).data()[0]);
    let g = grad(&tape, l, &params)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            let (tp, lp) = loss(&plus, &x, &labels, &layers)?;
            let (tm, lm) = loss(&minus, &x, &labels, &layers)?;
            let numeric = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
            let analytic = g.get(&name).unwrap().data()[i];
            worst = worst.max((numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8));
        }
        println!("{name:8} {n:3} entries checked");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
