//! Reverse-mode evaluation over a linear tape of tensor operations.
//!
//! Feature maps are laid out `[N, C, H, W]` (or `[N, C, L]` for token
//! sequences); dense activations are `[N, D]`.

use indexmap::IndexMap;

use super::scalar::matmul_into;
use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Upsample2(Var),
    AvgPool2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    MeanTokens(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
#[derive(Debug)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: IndexMap<String, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    img: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [F],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    img: &mut [F],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] =
                                plane[iy as usize * w + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax_rows<F: Scalar>(s: &mut [F], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter (used for input gradients).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records the named parameter; repeated lookups return the same leaf.
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, ctx: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(ctx, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("div", a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::Offset(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(t, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: F = v.data().iter().copied().sum();
        let m = s / F::of(v.len() as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// `x [N, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense input", &[xs.first().copied().unwrap_or(0), ws[0]], &xs));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let mut out = vec![F::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape("dense bias", &[dout], bv.shape()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_into(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut out, F::one());
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Dense { x, w, b }, ng))
    }

    /// Square-kernel convolution. `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d input",
                &[xs.first().copied().unwrap_or(0), ws[1], ws[2], ws[3]],
                &xs,
            ));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d spatial size", &[k, k], &[h, wd]));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let hw = ho * wo;
        let ckk = cin * k * k;
        let mut out = vec![F::zero(); n * cout * hw];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::shape("conv2d bias", &[cout], bv.shape()));
            }
            for sample in out.chunks_mut(cout * hw) {
                for (co, plane) in sample.chunks_mut(hw).enumerate() {
                    plane.fill(bv.data()[co]);
                }
            }
        }
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![F::zero(); ckk * hw] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let img = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let src: &[F] = if direct {
                img
            } else {
                im2col(img, cin, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            matmul_into(cout, ckk, hw, wv, false, src, false, &mut out[s * cout * hw..(s + 1) * cout * hw], F::one());
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Adds a per-channel bias `b [C]` or per-sample bias `b [N, C]` to `x [N, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let per_sample = match bs.as_slice() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => return Err(Error::shape("channel bias", &[n, c], &bs)),
        };
        let inner: usize = xs[2..].iter().product();
        let mut t = self.value(x).clone();
        let bv = self.value(b).data();
        for (s, sample) in t.data_mut().chunks_mut(c * inner).enumerate() {
            for (ch, plane) in sample.chunks_mut(inner).enumerate() {
                let bias = if per_sample { bv[s * c + ch] } else { bv[ch] };
                plane.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::ChannelBias { x, b }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample2", &[0, 0, 0, 0], &xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    d[y * 2 * w + x2] = s[(y / 2) * w + x2 / 2];
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2(x), ng))
    }

    /// 2x2 average pooling of `[N, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("avg_pool2 (even spatial size)", &[0, 0, 2, 2], &xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = F::of(0.25);
        let mut out = vec![F::zero(); nc * h2 * w2];
        for p in 0..nc {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for x2 in 0..w2 {
                    let i = 2 * y * w + 2 * x2;
                    out[p * h2 * w2 + y * w2 + x2] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * q;
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(&[xs[0], xs[1], h2, w2], out)?;
        Ok(self.push(t, Op::AvgPool2(x), ng))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm channels divisible by groups", &[groups], &[c]));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm affine", &[c], self.shape(gamma)));
        }
        let n = xs[0];
        let inner: usize = xs[2..].iter().product();
        let gsize = (c / groups) * inner;
        let eps = F::of(1e-5);
        let mut t = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let cpg = c / groups;
        for (gi, chunk) in t.data_mut().chunks_mut(gsize).enumerate() {
            let cnt = F::of(gsize as f64);
            let mean = chunk.iter().copied().sum::<F>() / cnt;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
            let rstd = F::one() / (var + eps).sqrt();
            let g0 = (gi % groups) * cpg;
            for (ci, plane) in chunk.chunks_mut(inner).enumerate() {
                let (ga, be) = (g[g0 + ci], bt[g0 + ci]);
                plane.iter_mut().for_each(|v| *v = (*v - mean) * rstd * ga + be);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Concatenation along the channel axis of `[N, Ca, ...]` and `[N, Cb, ...]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&va[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&vb[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), ng))
    }

    /// Scaled dot-product attention over tokens. `q`, `k`, `v` are
    /// `[N, C, L]` (any trailing spatial shape is flattened to `L`); channels
    /// split evenly over `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention key", q, k)?;
        self.same_shape("attention value", q, v)?;
        let qs = self.shape(q).to_vec();
        let (n, c) = (qs[0], qs[1]);
        let l: usize = qs[2..].iter().product();
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("attention channels divisible by heads", &[heads], &[c]));
        }
        let d = c / heads;
        let scale = F::one() / F::of(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); n * heads * l * l];
        let mut out = vec![F::zero(); n * c * l];
        for s in 0..n {
            for h in 0..heads {
                let off = s * c * l + h * d * l;
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                matmul_into(l, d, l, &qv[off..off + d * l], true, &kv[off..off + d * l], false, p, F::zero());
                p.iter_mut().for_each(|x| *x = *x * scale);
                softmax_rows(p, l);
                matmul_into(d, l, l, &vv[off..off + d * l], false, p, true, &mut out[off..off + d * l], F::zero());
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Tensor::new(&qs, out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Mean over all trailing axes: `[N, C, ...] -> [N, C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("mean_tokens", &[0, 0, 0], &xs));
        }
        let inner: usize = xs[2..].iter().product();
        let inv = F::one() / F::of(inner as f64);
        let out = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&xs[..2], out)?, Op::MeanTokens(x), ng))
    }

    /// Row lookup: `table [R, D]`, `idx` of length N -> `[N, D]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather table", &[0, 0], &ts));
        }
        let (r, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather index", format!("{bad} out of range 0..{r}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("cross_entropy logits", &[labels.len(), 0], &ls));
        }
        let k = ls[1];
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::invalid("cross_entropy label", format!("must be < {k}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, k);
        let n = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -(probs[i * k + y].max(F::min_positive_value())).ln())
            .sum::<F>()
            / F::of(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("loss must be scalar", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
                .collect(),
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] / vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] - g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(va[i]);
                        d[i] = d[i] + g[i] * s * (F::one() + va[i] * (F::one() - s));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * y[i] * (F::one() - y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = if va[i] > F::zero() {
                            F::one()
                        } else if va[i] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        d[i] = d[i] + g[i] * s;
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Mean(a) => {
                let gm = g[0] / F::of(self.value(*a).len() as f64);
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d = *d + gm));
            }
            Op::Dense { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| matmul_into(n, dout, din, g, false, wv, true, d, F::one()));
                self.acc(grads, *w, |d| matmul_into(din, n, dout, xv, true, g, false, d, F::one()));
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(dout) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let os = out.shape();
                let hw = os[2] * os[3];
                let ckk = cin * k * k;
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for sample in g.chunks(cout * hw) {
                            for (co, plane) in sample.chunks(hw).enumerate() {
                                d[co] = d[co] + plane.iter().copied().sum::<F>();
                            }
                        }
                    });
                }
                let mut cols = vec![F::zero(); ckk * hw];
                if self.ng(*w) {
                    let mut dw = vec![F::zero(); cout * ckk];
                    for s in 0..n {
                        let img = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                        let src: &[F] = if direct {
                            img
                        } else {
                            im2col(img, cin, h, wd, k, *stride, *pad, &mut cols);
                            &cols
                        };
                        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                        matmul_into(cout, hw, ckk, gs, false, src, true, &mut dw, F::one());
                    }
                    self.acc(grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(d, &v)| *d = *d + v));
                }
                self.acc(grads, *x, |d| {
                    for s in 0..n {
                        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                        let di = &mut d[s * cin * h * wd..(s + 1) * cin * h * wd];
                        if direct {
                            matmul_into(ckk, cout, hw, wv, true, gs, false, di, F::one());
                        } else {
                            matmul_into(ckk, cout, hw, wv, true, gs, false, &mut cols, F::zero());
                            col2im(&cols, cin, h, wd, k, *stride, *pad, di);
                        }
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                let xs = self.shape(*x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let per_sample = self.shape(*b).len() == 2;
                self.acc(grads, *b, |d| {
                    for (s, sample) in g.chunks(c * inner).enumerate() {
                        for (ch, plane) in sample.chunks(inner).enumerate() {
                            let i = if per_sample { s * c + ch } else { ch };
                            d[i] = d[i] + plane.iter().copied().sum::<F>();
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                self.acc(grads, *x, |d| {
                    for p in 0..nc {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for x2 in 0..2 * w {
                                let i = p * h * w + (y / 2) * w + x2 / 2;
                                d[i] = d[i] + gp[y * 2 * w + x2];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (h2, w2) = (h / 2, w / 2);
                let q = F::of(0.25);
                self.acc(grads, *x, |d| {
                    for p in 0..nc {
                        for y in 0..h {
                            for x2 in 0..w {
                                let i = p * h * w + y * w + x2;
                                d[i] = d[i] + g[p * h2 * w2 + (y / 2) * w2 + x2 / 2] * q;
                            }
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let cpg = c / groups;
                let gsize = cpg * inner;
                let xv = self.value(*x).data();
                let ga = self.value(*gamma).data();
                let cnt = F::of(gsize as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); xv.len()];
                for (gi, (xc, gc)) in xv.chunks(gsize).zip(g.chunks(gsize)).enumerate() {
                    let (m, r) = (mean[gi], rstd[gi]);
                    let g0 = (gi % groups) * cpg;
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for ci in 0..cpg {
                        let ch = g0 + ci;
                        for j in 0..inner {
                            let idx = ci * inner + j;
                            let xhat = (xc[idx] - m) * r;
                            let gv = gc[idx];
                            dgamma[ch] = dgamma[ch] + gv * xhat;
                            dbeta[ch] = dbeta[ch] + gv;
                            let dxhat = gv * ga[ch];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                    }
                    let (md, mdx) = (sum_dxhat / cnt, sum_dxhat_xhat / cnt);
                    let dst = &mut dx[gi * gsize..(gi + 1) * gsize];
                    for ci in 0..cpg {
                        let ch = g0 + ci;
                        for j in 0..inner {
                            let idx = ci * inner + j;
                            let xhat = (xc[idx] - m) * r;
                            dst[idx] = r * (gc[idx] * ga[ch] - md - xhat * mdx);
                        }
                    }
                }
                self.acc(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(d, &v)| *d = *d + v));
                self.acc(grads, *gamma, |d| d.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d = *d + v));
                self.acc(grads, *beta, |d| d.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d = *d + v));
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let n = sa[0];
                self.acc(grads, *a, |d| {
                    for s in 0..n {
                        let src = &g[s * (ca + cb)..s * (ca + cb) + ca];
                        d[s * ca..(s + 1) * ca].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                    }
                });
                self.acc(grads, *b, |d| {
                    for s in 0..n {
                        let src = &g[s * (ca + cb) + ca..(s + 1) * (ca + cb)];
                        d[s * cb..(s + 1) * cb].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.shape(*q);
                let (n, c) = (qs[0], qs[1]);
                let l: usize = qs[2..].iter().product();
                let d = c / heads;
                let scale = F::one() / F::of(d as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); qv.len()];
                let mut dv = vec![F::zero(); qv.len()];
                let mut dp = vec![F::zero(); l * l];
                for s in 0..n {
                    for h in 0..*heads {
                        let off = s * c * l + h * d * l;
                        let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                        let go = &g[off..off + d * l];
                        matmul_into(d, l, l, go, false, p, false, &mut dv[off..off + d * l], F::zero());
                        matmul_into(l, d, l, go, true, &vv[off..off + d * l], false, &mut dp, F::zero());
                        for (prow, dprow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                            let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dpv, &pv) in dprow.iter_mut().zip(prow) {
                                *dpv = pv * (*dpv - dot) * scale;
                            }
                        }
                        matmul_into(d, l, l, &kv[off..off + d * l], false, &dp, true, &mut dq[off..off + d * l], F::zero());
                        matmul_into(d, l, l, &qv[off..off + d * l], false, &dp, false, &mut dk[off..off + d * l], F::zero());
                    }
                }
                self.acc(grads, *q, |d| d.iter_mut().zip(&dq).for_each(|(d, &v)| *d = *d + v));
                self.acc(grads, *k, |d| d.iter_mut().zip(&dk).for_each(|(d, &v)| *d = *d + v));
                self.acc(grads, *v, |d| d.iter_mut().zip(&dv).for_each(|(d, &v)| *d = *d + v));
            }
            Op::MeanTokens(x) => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let inv = F::one() / F::of(inner as f64);
                self.acc(grads, *x, |d| {
                    for (plane, &gv) in d.chunks_mut(inner).zip(g) {
                        plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                });
            }
            Op::Gather { table, idx } => {
                let dd = self.shape(*table)[1];
                self.acc(grads, *table, |d| {
                    for (row, &i) in g.chunks(dd).zip(idx) {
                        d[i * dd..(i + 1) * dd].iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let inv = g[0] / F::of(labels.len() as f64);
                self.acc(grads, *logits, |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == y { F::one() } else { F::zero() };
                            d[i * k + j] = d[i * k + j] + (probs[i * k + j] - t) * inv;
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: IndexMap<String, Var>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient with respect to any recorded value; `None` when it does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter of `params`; parameters not touched by
    /// the loss get zeros.
    pub fn for_params(&self, params: &ParamSet<F>) -> super::Gradients<F> {
        let mut out = IndexMap::new();
        for (name, t) in params.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| self.grads[v.0].clone())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        super::Gradients::from_map(out)
    }
}
