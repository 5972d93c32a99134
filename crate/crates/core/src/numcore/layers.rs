//! Network layers built from tape operations.
//!
//! Shape algebra (feature maps are `[N, C, H, W]`):
//! - `conv2d`: 3x3 (or 1x1) kernel, stride 1, same padding.
//! - `down2`: 3x3 stride-2 convolution, halves `H` and `W`.
//! - `up2`: nearest 2x upsample followed by a 3x3 convolution.
//! - `mha`: attention over the `H*W` flattened tokens, channels split evenly over heads.
//! - `resblock`: `x' + proj(x)` with `x'` = (norm, silu, conv) twice.

use super::{Init, ParamSet, Scalar, Tape, Var};
use crate::error::Result;

pub const GROUPS: usize = 8;

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Dense {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        p.add(
            &format!("{}.w", self.name),
            &[self.din, self.dout],
            Init::GlorotUniform {
                fan_in: self.din,
                fan_out: self.dout,
            },
        )?;
        p.add(&format!("{}.b", self.name), &[self.dout], Init::Zeros)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let w = tape.param(p, &format!("{}.w", self.name))?;
        let b = tape.param(p, &format!("{}.b", self.name))?;
        tape.dense(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: 1,
        }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        let kk = self.kernel * self.kernel;
        p.add(
            &format!("{}.w", self.name),
            &[self.cout, self.cin, self.kernel, self.kernel],
            Init::GlorotUniform {
                fan_in: self.cin * kk,
                fan_out: self.cout * kk,
            },
        )?;
        p.add(&format!("{}.b", self.name), &[self.cout], Init::Zeros)
    }

    /// Re-draws the kernel as zeros (used for residual output heads).
    pub fn zero<F: Scalar>(&self, p: &mut ParamSet<F>) {
        if let Some(w) = p.get_mut(&format!("{}.w", self.name)) {
            w.data_mut().fill(F::zero());
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let w = tape.param(p, &format!("{}.w", self.name))?;
        let b = tape.param(p, &format!("{}.b", self.name))?;
        tape.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        GroupNorm {
            name: name.into(),
            channels,
            groups: GROUPS.min(channels),
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        p.add(&format!("{}.g", self.name), &[self.channels], Init::Ones)?;
        p.add(&format!("{}.b", self.name), &[self.channels], Init::Zeros)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let g = tape.param(p, &format!("{}.g", self.name))?;
        let b = tape.param(p, &format!("{}.b", self.name))?;
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Extra conditioning added inside a residual block after its first convolution.
#[derive(Clone, Copy, Debug)]
pub enum Cond {
    /// `[C]` or `[N, C]`, broadcast over space.
    Channel(Var),
    /// A full `[N, C, H, W]` map.
    Map(Var),
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        let name = name.into();
        ResBlock {
            norm1: GroupNorm::new(format!("{name}.norm1"), cin),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            norm2: GroupNorm::new(format!("{name}.norm2"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
            proj: (cin != cout).then(|| Conv2d::new(format!("{name}.proj"), cin, cout, 1)),
            name,
            cin,
            cout,
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        self.norm1.register(p)?;
        self.conv1.register(p)?;
        self.norm2.register(p)?;
        self.conv2.register(p)?;
        if let Some(proj) = &self.proj {
            proj.register(p)?;
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        self.forward_cond(tape, p, x, &[])
    }

    pub fn forward_cond<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var, cond: &[Cond]) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let mut h = self.conv1.forward(tape, p, h)?;
        for c in cond {
            h = match *c {
                Cond::Channel(b) => tape.channel_bias(h, b)?,
                Cond::Map(m) => tape.add(h, m)?,
            };
        }
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Multi-head self-attention over flattened spatial tokens, with 1x1
/// query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    o: Conv2d,
}

impl Mha {
    pub fn new(name: impl Into<String>, channels: usize, heads: usize) -> Self {
        let name = name.into();
        let proj = |s: &str| Conv2d::new(format!("{name}.{s}"), channels, channels, 1);
        Mha {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            o: proj("o"),
            name,
            channels,
            heads,
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        for c in [&self.q, &self.k, &self.v, &self.o] {
            c.register(p)?;
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.o.forward(tape, p, a)
    }
}

/// Pre-norm attention with a residual connection: `x + mha(norm(x))`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    norm: GroupNorm,
    mha: Mha,
}

impl AttnBlock {
    pub fn new(name: &str, channels: usize, heads: usize) -> Self {
        AttnBlock {
            norm: GroupNorm::new(format!("{name}.norm"), channels),
            mha: Mha::new(format!("{name}.mha"), channels, heads),
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        self.norm.register(p)?;
        self.mha.register(p)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.mha.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Up2 {
    conv: Conv2d,
}

impl Up2 {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Up2 {
            conv: Conv2d::new(name, cin, cout, 3),
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        self.conv.register(p)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        let u = tape.upsample2(x)?;
        self.conv.forward(tape, p, u)
    }
}

#[derive(Clone, Debug)]
pub struct Down2 {
    conv: Conv2d,
}

impl Down2 {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Down2 {
            conv: Conv2d::new(name, cin, cout, 3).strided(2),
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        self.conv.register(p)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        self.conv.forward(tape, p, x)
    }
}

/// Every documented layer kind behind one forward entry point.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ResBlock(ResBlock),
    Mha(Mha),
    GroupNorm(GroupNorm),
    Silu,
    Up2(Up2),
    Down2(Down2),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::ResBlock(_) => "resblock",
            Layer::Mha(_) => "mha",
            Layer::GroupNorm(_) => "groupnorm",
            Layer::Silu => "silu",
            Layer::Up2(_) => "up2",
            Layer::Down2(_) => "down2",
        }
    }

    pub fn register<F: Scalar>(&self, p: &mut ParamSet<F>) -> Result<()> {
        match self {
            Layer::Dense(l) => l.register(p),
            Layer::Conv2d(l) => l.register(p),
            Layer::ResBlock(l) => l.register(p),
            Layer::Mha(l) => l.register(p),
            Layer::GroupNorm(l) => l.register(p),
            Layer::Silu => Ok(()),
            Layer::Up2(l) => l.register(p),
            Layer::Down2(l) => l.register(p),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &ParamSet<F>, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(l) => l.forward(tape, p, x),
            Layer::Conv2d(l) => l.forward(tape, p, x),
            Layer::ResBlock(l) => l.forward(tape, p, x),
            Layer::Mha(l) => l.forward(tape, p, x),
            Layer::GroupNorm(l) => l.forward(tape, p, x),
            Layer::Silu => Ok(tape.silu(x)),
            Layer::Up2(l) => l.forward(tape, p, x),
            Layer::Down2(l) => l.forward(tape, p, x),
        }
    }
}

/// Forward value of a single layer on a fresh tape.
pub fn layer_forward<F: Scalar>(layer: &Layer, params: &ParamSet<F>, input: super::Tensor<F>) -> Result<super::Tensor<F>> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let y = layer.forward(&mut tape, params, x)?;
    Ok(tape.value(y).clone())
}
