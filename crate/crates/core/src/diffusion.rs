//! Conditional latent DDPM: linear noise schedule, forward corruption, the
//! epsilon-prediction U-Net and ancestral sampling.
//!
//! Timesteps are 1-based (`1..=T`) throughout; arrays are indexed at `t - 1`.
//!
//! U-Net layout for a `16x16x1` latent with `channels = [c0, .., c4]`:
//! encoder block `i` runs at `16 / 2^i` (resblock, attention, then `down2`
//! except after the last); decoder block `j` concatenates the output of
//! encoder block `4 - j`, runs a resblock and attention, then `up2` except
//! after the last. Time and class embeddings enter every resblock as a
//! per-channel bias; the shape embedding (bias) and the anatomy embedding
//! (a pooled 2D map) enter decoder resblocks only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anatomy::{AnatomyConditionVector, ANATOMY_TOKENS};
use crate::autoencoder::batch_indices;
use crate::descriptors::ShapeConditioning;
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::numcore::{
    adam_step, grad, AdamConfig, AdamState, AttnBlock, Cond, Conv2d, Dense, Down2, GroupNorm, Init, Mha, ParamSet, ResBlock, Tape, Tensor, Up2, Var,
};
use crate::phantom::ClassLabel;

pub const LEVELS: usize = 5;
const TIME_FREQS: usize = 16;

/// `beta`, `alpha = 1 - beta` and `alpha_bar` (running product) for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// `beta_t = beta_start + (t - 1)(beta_end - beta_start)/(T - 1)`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid("timesteps", "need at least 2"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid("beta range", format!("need 0 < {beta_start} <= {beta_end} < 1")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + i as f64 * (beta_end - beta_start) / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Linear schedule whose reference endpoints (quoted for `T = 1000`) are
/// multiplied by `1000 / T` and capped at 0.999, so short chains still reach
/// near-total corruption.
pub fn scaled_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    let f = 1000.0 / steps.max(1) as f64;
    make_linear_schedule(steps, (beta_start * f).min(0.999), (beta_end * f).min(0.999))
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("beta", "need at least 2 values in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid("timestep", format!("{t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

fn same_len(ctx: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(ctx, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Result<Vec<f32>> {
    let i = s.check_t(t)?;
    same_len("q_sample noise", x0, eps)?;
    let (a, b) = (s.alpha_bar[i].sqrt(), (1.0 - s.alpha_bar[i]).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

/// One step of the forward chain: `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_step(x_prev: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Result<Vec<f32>> {
    let i = s.check_t(t)?;
    same_len("q_step noise", x_prev, eps)?;
    let (a, b) = (s.alpha[i].sqrt(), s.beta[i].sqrt());
    Ok(x_prev.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect())
}

/// Reverse step given a noise estimate:
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sqrt(beta_t) z`,
/// with `z` ignored at `t = 1`.
pub fn p_sample_from_eps(x_t: &[f32], eps: &[f32], t: usize, z: Option<&[f32]>, s: &NoiseSchedule) -> Result<Vec<f32>> {
    let i = s.check_t(t)?;
    same_len("reverse step noise estimate", x_t, eps)?;
    let coef = s.beta[i] / (1.0 - s.alpha_bar[i]).sqrt();
    let inv = 1.0 / s.alpha[i].sqrt();
    let sigma = s.beta[i].sqrt();
    let z = if t == 1 { None } else { z };
    if let Some(z) = z {
        same_len("reverse step noise", x_t, z)?;
    }
    Ok(x_t
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(k, (&x, &e))| {
            let mu = inv * (x as f64 - coef * e as f64);
            (mu + z.map_or(0.0, |z| sigma * z[k] as f64)) as f32
        })
        .collect())
}

/// Which decoder-side guidance inputs are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GuidanceFlags {
    pub shape_on: bool,
    pub anatomy_on: bool,
}

impl GuidanceFlags {
    pub const NONE: GuidanceFlags = GuidanceFlags { shape_on: false, anatomy_on: false };
    pub const SHAPE: GuidanceFlags = GuidanceFlags { shape_on: true, anatomy_on: false };
    pub const FULL: GuidanceFlags = GuidanceFlags { shape_on: true, anatomy_on: true };

    /// Table row name for this setting.
    pub fn label(&self) -> &'static str {
        match (self.shape_on, self.anatomy_on) {
            (false, false) => "LDM",
            (true, false) => "LDM + Shape Guidance",
            (false, true) => "LDM + Anatomy Guidance",
            (true, true) => "Ours (LDM + Shape & Anatomy Guidance)",
        }
    }
}

/// Dataset-level conditioning constants, one entry per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Standardized shape vectors.
    pub shape: Vec<Vec<f32>>,
    /// Anatomy tokens per class.
    pub anatomy: Vec<AnatomyConditionVector>,
}

impl Conditioning {
    pub fn new(shape: &ShapeConditioning, anatomy: Vec<AnatomyConditionVector>) -> Result<Self> {
        if anatomy.len() != 3 {
            return Err(Error::invalid("anatomy conditioning", "need one entry per class"));
        }
        let shape = ClassLabel::ALL
            .iter()
            .map(|&c| shape.standardized(c).into_iter().map(|v| v as f32).collect())
            .collect();
        Ok(Conditioning { shape, anatomy })
    }

    pub fn bundle(&self, class_label: ClassLabel, guidance: GuidanceFlags) -> ConditionBundle {
        let a = &self.anatomy[class_label.index()];
        ConditionBundle {
            class_label,
            shape_vec: self.shape[class_label.index()].clone(),
            anatomy_tokens: a.flat(),
            guidance,
        }
    }
}

/// The conditioning input of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub class_label: ClassLabel,
    pub shape_vec: Vec<f32>,
    /// `ANATOMY_TOKENS` tokens of `latent H * W` values, token-major.
    pub anatomy_tokens: Vec<f32>,
    pub guidance: GuidanceFlags,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsConfig {
    pub latent_size: usize,
    pub channels: [usize; LEVELS],
    pub heads: usize,
    pub emb_dim: usize,
    pub shape_len: usize,
    pub anatomy_heads: usize,
    pub guidance: GuidanceFlags,
    pub seed: u64,
}

impl Default for EpsConfig {
    fn default() -> Self {
        EpsConfig {
            latent_size: 16,
            channels: [32, 32, 48, 64, 64],
            heads: 4,
            emb_dim: 64,
            shape_len: 32,
            anatomy_heads: 4,
            guidance: GuidanceFlags::FULL,
            seed: 0,
        }
    }
}

impl EpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size % (1 << (LEVELS - 1)) != 0 || self.latent_size == 0 {
            return Err(Error::invalid("ldm.latent_size", format!("must be a multiple of {}", 1 << (LEVELS - 1))));
        }
        if self.channels.iter().any(|&c| c == 0 || c % 8 != 0 || c % self.heads.max(1) != 0) {
            return Err(Error::invalid("ldm.channels", "each must be a positive multiple of 8 divisible by heads"));
        }
        if self.heads == 0 {
            return Err(Error::invalid("ldm.heads", "must be positive"));
        }
        let tok = self.latent_size * self.latent_size;
        if self.anatomy_heads == 0 || tok % self.anatomy_heads != 0 {
            return Err(Error::invalid("ldm.anatomy_heads", "must divide the latent token length"));
        }
        if self.emb_dim == 0 || self.shape_len == 0 {
            return Err(Error::invalid("ldm.emb_dim", "must be positive"));
        }
        Ok(())
    }
}

struct EncBlock {
    res: ResBlock,
    attn: AttnBlock,
    emb: Dense,
    down: Option<Down2>,
}

struct DecBlock {
    level: usize,
    res: ResBlock,
    attn: AttnBlock,
    emb: Dense,
    shape: Option<Dense>,
    anatomy: Option<Conv2d>,
    up: Option<Up2>,
}

/// Per-block outputs recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    pub encoder: Vec<Tensor<f32>>,
    pub decoder: Vec<Tensor<f32>>,
}

/// Epsilon-prediction U-Net.
pub struct EpsNetwork {
    pub config: EpsConfig,
    pub params: ParamSet<f32>,
    conv_in: Conv2d,
    time1: Dense,
    time2: Dense,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    shape_in: Option<Dense>,
    anatomy_mha: Option<Mha>,
    anatomy_dense: Option<Dense>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl std::fmt::Debug for EpsNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpsNetwork")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

const CLASS_TABLE: &str = "class_emb";

impl EpsNetwork {
    /// Fresh network with Glorot weights and a zero output head.
    pub fn new(config: EpsConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let d = config.emb_dim;
        let mut p = ParamSet::new(config.seed);
        let conv_in = Conv2d::new("conv_in", 1, ch[0], 3);
        conv_in.register(&mut p)?;
        let time1 = Dense::new("time1", 2 * TIME_FREQS, d);
        let time2 = Dense::new("time2", d, d);
        time1.register(&mut p)?;
        time2.register(&mut p)?;
        p.add(CLASS_TABLE, &[3, d], Init::GlorotUniform { fan_in: 3, fan_out: d })?;

        let mut enc = Vec::with_capacity(LEVELS);
        let mut cin = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let b = EncBlock {
                res: ResBlock::new(format!("enc{i}.res"), cin, c),
                attn: AttnBlock::new(&format!("enc{i}.attn"), c, config.heads),
                emb: Dense::new(format!("enc{i}.emb"), d, c),
                down: (i + 1 < LEVELS).then(|| Down2::new(format!("enc{i}.down"), c, c)),
            };
            b.res.register(&mut p)?;
            b.attn.register(&mut p)?;
            b.emb.register(&mut p)?;
            if let Some(down) = &b.down {
                down.register(&mut p)?;
            }
            enc.push(b);
            cin = c;
        }

        let g = config.guidance;
        let shape_in = g.shape_on.then(|| Dense::new("shape_in", config.shape_len, d));
        if let Some(s) = &shape_in {
            s.register(&mut p)?;
        }
        let tok = config.latent_size * config.latent_size;
        let (anatomy_mha, anatomy_dense) = if g.anatomy_on {
            let m = Mha::new("anatomy.mha", tok, config.anatomy_heads);
            let dn = Dense::new("anatomy.dense", tok, tok);
            m.register(&mut p)?;
            dn.register(&mut p)?;
            (Some(m), Some(dn))
        } else {
            (None, None)
        };

        let mut dec = Vec::with_capacity(LEVELS);
        let mut cur = ch[LEVELS - 1];
        for j in 0..LEVELS {
            let level = LEVELS - 1 - j;
            let c = ch[level];
            let b = DecBlock {
                level,
                res: ResBlock::new(format!("dec{j}.res"), cur + c, c),
                attn: AttnBlock::new(&format!("dec{j}.attn"), c, config.heads),
                emb: Dense::new(format!("dec{j}.emb"), d, c),
                shape: g.shape_on.then(|| Dense::new(format!("dec{j}.shape"), d, c)),
                anatomy: g.anatomy_on.then(|| Conv2d::new(format!("dec{j}.anatomy"), 1, c, 1)),
                up: (level > 0).then(|| Up2::new(format!("dec{j}.up"), c, c)),
            };
            b.res.register(&mut p)?;
            b.attn.register(&mut p)?;
            b.emb.register(&mut p)?;
            if let Some(s) = &b.shape {
                s.register(&mut p)?;
            }
            if let Some(a) = &b.anatomy {
                a.register(&mut p)?;
            }
            if let Some(up) = &b.up {
                up.register(&mut p)?;
            }
            dec.push(b);
            cur = c;
        }
        let norm_out = GroupNorm::new("norm_out", ch[0]);
        let conv_out = Conv2d::new("conv_out", ch[0], 1, 3);
        norm_out.register(&mut p)?;
        conv_out.register(&mut p)?;
        conv_out.zero(&mut p);
        Ok(EpsNetwork {
            config,
            params: p,
            conv_in,
            time1,
            time2,
            enc,
            dec,
            shape_in,
            anatomy_mha,
            anatomy_dense,
            norm_out,
            conv_out,
        })
    }

    /// Rebuilds the graph for `config` around stored weights.
    pub fn from_params(config: EpsConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.params.check_layout(&params)?;
        net.params = params;
        Ok(net)
    }

    /// Re-draws the output head so a fresh network is not identically zero.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(w) = self.params.get_mut("conv_out.w") {
            w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }

    fn time_features(t: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(t.len() * 2 * TIME_FREQS);
        for &ti in t {
            let sin = (0..TIME_FREQS).map(|k| {
                let f = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
                ti as f64 * f
            });
            let args: Vec<f64> = sin.collect();
            data.extend(args.iter().map(|a| a.sin() as f32));
            data.extend(args.iter().map(|a| a.cos() as f32));
        }
        Tensor::new(&[t.len(), 2 * TIME_FREQS], data).expect("time feature size")
    }

    fn check_inputs(&self, x: &[Image2D], t: &[usize], cond: &[ConditionBundle]) -> Result<()> {
        let s = self.config.latent_size;
        if x.len() != t.len() || x.len() != cond.len() || x.is_empty() {
            return Err(Error::shape("eps_forward batch", &[x.len(), x.len()], &[t.len(), cond.len()]));
        }
        for im in x {
            if im.shape() != [s, s] {
                return Err(Error::shape("eps_forward latent", &[s, s], &im.shape()));
            }
        }
        let tok = s * s * ANATOMY_TOKENS;
        for c in cond {
            if c.guidance.shape_on && self.config.guidance.shape_on && c.shape_vec.len() != self.config.shape_len {
                return Err(Error::shape("shape condition", &[self.config.shape_len], &[c.shape_vec.len()]));
            }
            if c.guidance.anatomy_on && self.config.guidance.anatomy_on && c.anatomy_tokens.len() != tok {
                return Err(Error::shape("anatomy condition", &[tok], &[c.anatomy_tokens.len()]));
            }
        }
        Ok(())
    }

    /// Builds the forward graph on `tape`; `x` is `[N, 1, S, S]`.
    fn forward_var(&self, tape: &mut Tape<f32>, x: Var, t: &[usize], cond: &[ConditionBundle], mut taps: Option<&mut Taps>) -> Result<Var> {
        let p = &self.params;
        let n = cond.len();
        let s = self.config.latent_size;
        let labels: Vec<usize> = cond.iter().map(|c| c.class_label.index()).collect();

        let tf = tape.constant(Self::time_features(t));
        let e = self.time1.forward(tape, p, tf)?;
        let e = tape.silu(e);
        let e = self.time2.forward(tape, p, e)?;
        let table = tape.param(p, CLASS_TABLE)?;
        let ce = tape.gather(table, &labels)?;
        let e = tape.add(e, ce)?;
        let e = tape.silu(e);

        // Every sample must opt in for a guidance input to be used.
        let shape_on = self.config.guidance.shape_on && cond.iter().all(|c| c.guidance.shape_on);
        let anatomy_on = self.config.guidance.anatomy_on && cond.iter().all(|c| c.guidance.anatomy_on);
        let shape_emb = match (&self.shape_in, shape_on) {
            (Some(layer), true) => {
                let v: Vec<f32> = cond.iter().flat_map(|c| c.shape_vec.iter().copied()).collect();
                let v = tape.constant(Tensor::new(&[n, self.config.shape_len], v)?);
                let h = layer.forward(tape, p, v)?;
                Some(tape.silu(h))
            }
            _ => None,
        };
        let mut anatomy_maps: Vec<Option<Var>> = vec![None; LEVELS];
        if let (Some(mha), Some(dense), true) = (&self.anatomy_mha, &self.anatomy_dense, anatomy_on) {
            let tok = s * s;
            // Tokens become channels: [N, H*W, 8, 1].
            let mut data = vec![0f32; n * tok * ANATOMY_TOKENS];
            for (k, c) in cond.iter().enumerate() {
                for ti in 0..ANATOMY_TOKENS {
                    for j in 0..tok {
                        data[k * tok * ANATOMY_TOKENS + j * ANATOMY_TOKENS + ti] = c.anatomy_tokens[ti * tok + j];
                    }
                }
            }
            let a = tape.constant(Tensor::new(&[n, tok, ANATOMY_TOKENS, 1], data)?);
            let a = mha.forward(tape, p, a)?;
            let a = tape.mean_tokens(a)?;
            let a = dense.forward(tape, p, a)?;
            let mut m = tape.reshape(a, &[n, 1, s, s])?;
            for slot in anatomy_maps.iter_mut() {
                *slot = Some(m);
                if tape.shape(m)[2] > 1 {
                    m = tape.avg_pool2(m)?;
                }
            }
        }

        let mut h = self.conv_in.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for b in &self.enc {
            let bias = b.emb.forward(tape, p, e)?;
            h = b.res.forward_cond(tape, p, h, &[Cond::Channel(bias)])?;
            h = b.attn.forward(tape, p, h)?;
            if let Some(t) = taps.as_deref_mut() {
                t.encoder.push(tape.value(h).clone());
            }
            skips.push(h);
            if let Some(down) = &b.down {
                h = down.forward(tape, p, h)?;
            }
        }
        for b in &self.dec {
            h = tape.concat(h, skips[b.level])?;
            let mut conds = vec![Cond::Channel(b.emb.forward(tape, p, e)?)];
            if let (Some(layer), Some(se)) = (&b.shape, shape_emb) {
                conds.push(Cond::Channel(layer.forward(tape, p, se)?));
            }
            if let (Some(layer), Some(map)) = (&b.anatomy, anatomy_maps[b.level]) {
                conds.push(Cond::Map(layer.forward(tape, p, map)?));
            }
            h = b.res.forward_cond(tape, p, h, &conds)?;
            h = b.attn.forward(tape, p, h)?;
            if let Some(t) = taps.as_deref_mut() {
                t.decoder.push(tape.value(h).clone());
            }
            if let Some(up) = &b.up {
                h = up.forward(tape, p, h)?;
            }
        }
        let h = self.norm_out.forward(tape, p, h)?;
        let h = tape.silu(h);
        self.conv_out.forward(tape, p, h)
    }

    fn stack(&self, x: &[Image2D]) -> Result<Tensor<f32>> {
        let s = self.config.latent_size;
        Tensor::new(&[x.len(), 1, s, s], x.iter().flat_map(|im| im.data.iter().copied()).collect())
    }

    /// Noise estimate for each latent in the batch.
    pub fn eps_forward(&self, x: &[Image2D], t: &[usize], cond: &[ConditionBundle]) -> Result<Vec<Image2D>> {
        self.eps_forward_taps(x, t, cond, None)
    }

    pub fn eps_forward_taps(&self, x: &[Image2D], t: &[usize], cond: &[ConditionBundle], taps: Option<&mut Taps>) -> Result<Vec<Image2D>> {
        self.check_inputs(x, t, cond)?;
        let mut tape = Tape::new();
        let xv = tape.constant(self.stack(x)?);
        let out = self.forward_var(&mut tape, xv, t, cond, taps)?;
        let s = self.config.latent_size;
        let v = tape.value(out);
        Ok((0..x.len()).map(|i| Image2D::new(s, s, v.slab(i).to_vec()).expect("latent size")).collect())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Draws `t` uniformly in `1..=T` and `eps ~ N(0, I)` per example and returns
/// the tape, the loss node and the mean squared error value.
fn diffusion_loss_graph(
    net: &EpsNetwork,
    x0: &[Image2D],
    cond: &[ConditionBundle],
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape<f32>, Var, f64)> {
    if x0.is_empty() {
        return Err(Error::InsufficientSamples("diffusion loss needs a non-empty batch".into()));
    }
    let mut ts = Vec::with_capacity(x0.len());
    let mut xt = Vec::with_capacity(x0.len());
    let mut eps_all = Vec::new();
    for x in x0 {
        let t = rng.random_range(1..=s.steps());
        let eps = normal_vec(rng, x.len());
        xt.push(Image2D::new(x.height, x.width, q_sample(&x.data, t, &eps, s)?)?);
        eps_all.extend(eps);
        ts.push(t);
    }
    net.check_inputs(&xt, &ts, cond)?;
    let mut tape = Tape::new();
    let xv = tape.constant(net.stack(&xt)?);
    let pred = net.forward_var(&mut tape, xv, &ts, cond, None)?;
    let shape = tape.shape(pred).to_vec();
    let target = tape.constant(Tensor::new(&shape, eps_all)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).data()[0] as f64;
    Ok((tape, loss, value))
}

/// Mean squared noise-prediction error over the batch and all elements.
pub fn diffusion_loss(net: &EpsNetwork, x0: &[Image2D], cond: &[ConditionBundle], s: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(diffusion_loss_graph(net, x0, cond, s, rng)?.2)
}

/// One reverse step using the network's noise estimate.
pub fn p_sample_step(
    net: &EpsNetwork,
    x_t: &[Image2D],
    t: usize,
    cond: &[ConditionBundle],
    s: &NoiseSchedule,
    z: Option<&[Vec<f32>]>,
) -> Result<Vec<Image2D>> {
    let eps = net.eps_forward(x_t, &vec![t; x_t.len()], cond)?;
    x_t.iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (x, e))| {
            let zi = z.map(|z| z[i].as_slice());
            Image2D::new(x.height, x.width, p_sample_from_eps(&x.data, &e.data, t, zi, s)?)
        })
        .collect()
}

/// Ancestral sampling of `n` latents from `x_T ~ N(0, I)`. Chains are run in
/// batches of `batch`; all noise comes from one stream seeded by `seed`.
pub fn sample(net: &EpsNetwork, cond: &ConditionBundle, n: usize, seed: u64, s: &NoiseSchedule, batch: usize) -> Result<Vec<Image2D>> {
    let size = net.config.latent_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let batch = batch.max(1);
    let mut done = 0;
    while done < n {
        let m = batch.min(n - done);
        let mut x: Vec<Image2D> = (0..m)
            .map(|_| Image2D::new(size, size, normal_vec(&mut rng, size * size)).expect("latent size"))
            .collect();
        let conds = vec![cond.clone(); m];
        for t in (1..=s.steps()).rev() {
            let z: Option<Vec<Vec<f32>>> = (t > 1).then(|| (0..m).map(|_| normal_vec(&mut rng, size * size)).collect());
            x = p_sample_step(net, &x, t, &conds, s, z.as_deref())?;
        }
        out.extend(x);
        done += m;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmConfig {
    pub timesteps: usize,
    /// Reference endpoints for a 1000-step chain; see [`scaled_linear_schedule`].
    pub beta_start: f64,
    pub beta_end: f64,
    pub scale_betas: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        LdmConfig {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
            scale_betas: true,
            lr: 5e-4,
            batch_size: 8,
            steps: 2000,
            seed: 0,
        }
    }
}

impl LdmConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        if self.scale_betas {
            scaled_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
        } else {
            make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("ldm.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("ldm.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Standardized training latents with their labels and the class conditions.
#[derive(Clone, Debug)]
pub struct LatentDataset {
    pub latents: Vec<Image2D>,
    pub labels: Vec<ClassLabel>,
    pub conditioning: Conditioning,
}

/// Resumable Adam training of the noise predictor. Step `k` draws its batch
/// and noise from streams keyed on `(seed, k)` only.
pub struct LdmTrainer {
    pub net: EpsNetwork,
    pub adam: AdamState<f32>,
    pub config: LdmConfig,
    pub schedule: NoiseSchedule,
    pub losses: Vec<f64>,
}

impl LdmTrainer {
    pub fn new(net: EpsNetwork, config: LdmConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            &net.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(LdmTrainer {
            schedule: config.schedule()?,
            net,
            adam,
            config,
            losses: Vec::new(),
        })
    }

    /// Continues from saved weights and optimizer state.
    pub fn resume(net: EpsNetwork, adam: AdamState<f32>, config: LdmConfig, losses: Vec<f64>) -> Result<Self> {
        config.validate()?;
        for (name, p) in net.params.iter() {
            for acc in [&adam.m, &adam.v] {
                let got = acc.get(name).ok_or_else(|| Error::Missing(format!("optimizer state for {name}")))?;
                if got.shape() != p.shape() {
                    return Err(Error::shape("optimizer state", p.shape(), got.shape()));
                }
            }
        }
        Ok(LdmTrainer {
            schedule: config.schedule()?,
            net,
            adam,
            config,
            losses,
        })
    }

    pub fn step(&self) -> usize {
        self.adam.step as usize
    }

    pub fn train_step(&mut self, data: &LatentDataset) -> Result<f64> {
        if data.latents.is_empty() {
            return Err(Error::InsufficientSamples("no training latents".into()));
        }
        let k = self.step();
        let bs = self.config.batch_size.min(data.latents.len());
        let idx = batch_indices(data.latents.len(), bs, self.config.seed, k);
        let x0: Vec<Image2D> = idx.iter().map(|&i| data.latents[i].clone()).collect();
        let cond: Vec<ConditionBundle> = idx
            .iter()
            .map(|&i| data.conditioning.bundle(data.labels[i], self.net.config.guidance))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(k as u64 + 1);
        let (tape, loss, value) = diffusion_loss_graph(&self.net, &x0, &cond, &self.schedule, &mut rng)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: format!("diffusion loss is {value}"),
            });
        }
        let g = grad(&tape, loss, &self.net.params)?;
        adam_step(&mut self.net.params, &g, &mut self.adam)?;
        self.losses.push(value);
        Ok(value)
    }

    /// Trains until `until` total steps have been taken.
    pub fn run_until(&mut self, data: &LatentDataset, until: usize, mut on_step: impl FnMut(usize, f64)) -> Result<()> {
        while self.step() < until {
            let k = self.step();
            let loss = self.train_step(data)?;
            on_step(k, loss);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_linear_schedule(1, 1e-4, 2e-2).is_err());
        assert!(make_linear_schedule(10, 0.0, 2e-2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn scaled_schedule_endpoints() {
        let s = scaled_linear_schedule(200, 1e-4, 2e-2).unwrap();
        assert!((s.beta[0] - 5e-4).abs() < 1e-15);
        assert!((s.beta[199] - 0.1).abs() < 1e-15);
        assert!(s.alpha_bar[199] < 5e-5);
    }

    #[test]
    fn timestep_bounds() {
        let s = make_linear_schedule(10, 1e-4, 2e-2).unwrap();
        assert!(q_sample(&[0.0], 0, &[0.0], &s).is_err());
        assert!(q_sample(&[0.0], 11, &[0.0], &s).is_err());
        assert!(p_sample_from_eps(&[0.0], &[0.0], 0, None, &s).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EpsConfig { latent_size: 12, ..Default::default() }.validate().is_err());
        assert!(EpsConfig { channels: [32, 32, 20, 64, 64], ..Default::default() }.validate().is_err());
        assert!(EpsConfig::default().validate().is_ok());
    }
}
