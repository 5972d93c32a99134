//! Image autoencoder: 64x64 MIPs to a 16x16x1 latent and back, trained with
//! an L1 + Dice objective on a single sigmoid output head.
//!
//! Encoder: `conv 1->c1`, `down2 c1->c2`, `down2 c2->c2`, resblock and
//! attention at the bottleneck, `norm, silu, conv c2->1`.
//! Decoder: `conv 1->c2`, resblock and attention, `up2 c2->c2`, `up2 c2->c1`,
//! `norm, silu, conv c1->1`, sigmoid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::numcore::{adam_step, grad, AdamConfig, AdamState, AttnBlock, Conv2d, Down2, GroupNorm, ParamSet, ResBlock, Tape, Tensor, Up2, Var};
use crate::phantom::{DatasetManifest, Split};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AeConfig {
    pub image_size: usize,
    pub channels_hi: usize,
    pub channels_lo: usize,
    pub heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            image_size: 64,
            channels_hi: 16,
            channels_lo: 32,
            heads: 4,
            lr: 5e-4,
            batch_size: 4,
            steps: 600,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::invalid("ae.image_size", "must be a multiple of 4 and at least 8"));
        }
        for (field, c) in [("ae.channels_hi", self.channels_hi), ("ae.channels_lo", self.channels_lo)] {
            if c == 0 || (c > 8 && c % 8 != 0) {
                return Err(Error::invalid(field, "must be positive and a multiple of 8 above 8"));
            }
        }
        if self.heads == 0 || self.channels_lo % self.heads != 0 {
            return Err(Error::invalid("ae.heads", "must divide channels_lo"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("ae.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("ae.batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }
}

/// Scalar latent normalization constants over the training latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

impl LatentStats {
    pub fn from_latents(latents: &[Image2D]) -> Result<Self> {
        let n: usize = latents.iter().map(|l| l.len()).sum();
        if n < 2 {
            return Err(Error::InsufficientSamples("latent statistics need at least 2 values".into()));
        }
        let mean = latents.iter().flat_map(|l| &l.data).map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = latents.iter().flat_map(|l| &l.data).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::Rejected("latents have zero spread".into()));
        }
        Ok(LatentStats { mean, std })
    }

    pub fn normalize(&self, latent: &Image2D) -> Image2D {
        latent.map(|v| ((v as f64 - self.mean) / self.std) as f32)
    }

    pub fn denormalize(&self, latent: &Image2D) -> Image2D {
        latent.map(|v| (v as f64 * self.std + self.mean) as f32)
    }
}

struct Encoder {
    conv_in: Conv2d,
    down1: Down2,
    down2: Down2,
    res: ResBlock,
    attn: AttnBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

struct Decoder {
    conv_in: Conv2d,
    res: ResBlock,
    attn: AttnBlock,
    up1: Up2,
    up2: Up2,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Autoencoder weights plus the layer graph they belong to.
pub struct AeNetwork {
    pub config: AeConfig,
    pub params: ParamSet<f32>,
    enc: Encoder,
    dec: Decoder,
}

impl std::fmt::Debug for AeNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AeNetwork")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

impl AeNetwork {
    pub fn new(config: AeConfig) -> Result<Self> {
        config.validate()?;
        let (hi, lo) = (config.channels_hi, config.channels_lo);
        let enc = Encoder {
            conv_in: Conv2d::new("enc.conv_in", 1, hi, 3),
            down1: Down2::new("enc.down1", hi, lo),
            down2: Down2::new("enc.down2", lo, lo),
            res: ResBlock::new("enc.res", lo, lo),
            attn: AttnBlock::new("enc.attn", lo, config.heads),
            norm_out: GroupNorm::new("enc.norm_out", lo),
            conv_out: Conv2d::new("enc.conv_out", lo, 1, 3),
        };
        let dec = Decoder {
            conv_in: Conv2d::new("dec.conv_in", 1, lo, 3),
            res: ResBlock::new("dec.res", lo, lo),
            attn: AttnBlock::new("dec.attn", lo, config.heads),
            up1: Up2::new("dec.up1", lo, lo),
            up2: Up2::new("dec.up2", lo, hi),
            norm_out: GroupNorm::new("dec.norm_out", hi),
            conv_out: Conv2d::new("dec.conv_out", hi, 1, 3),
        };
        let mut params = ParamSet::new(config.seed);
        enc.conv_in.register(&mut params)?;
        enc.down1.register(&mut params)?;
        enc.down2.register(&mut params)?;
        enc.res.register(&mut params)?;
        enc.attn.register(&mut params)?;
        enc.norm_out.register(&mut params)?;
        enc.conv_out.register(&mut params)?;
        dec.conv_in.register(&mut params)?;
        dec.res.register(&mut params)?;
        dec.attn.register(&mut params)?;
        dec.up1.register(&mut params)?;
        dec.up2.register(&mut params)?;
        dec.norm_out.register(&mut params)?;
        dec.conv_out.register(&mut params)?;
        Ok(AeNetwork { config, params, enc, dec })
    }

    /// Rebuilds the graph for `config` around previously trained weights.
    pub fn from_params(config: AeConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.params.check_layout(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.config.latent_size();
        [s, s, 1]
    }

    fn encode_var(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let (e, p) = (&self.enc, &self.params);
        let h = e.conv_in.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = e.down1.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = e.down2.forward(tape, p, h)?;
        let h = e.res.forward(tape, p, h)?;
        let h = e.attn.forward(tape, p, h)?;
        let h = e.norm_out.forward(tape, p, h)?;
        let h = tape.silu(h);
        e.conv_out.forward(tape, p, h)
    }

    fn decode_var(&self, tape: &mut Tape<f32>, z: Var) -> Result<Var> {
        let (d, p) = (&self.dec, &self.params);
        let h = d.conv_in.forward(tape, p, z)?;
        let h = d.res.forward(tape, p, h)?;
        let h = d.attn.forward(tape, p, h)?;
        let h = d.up1.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = d.up2.forward(tape, p, h)?;
        let h = d.norm_out.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = d.conv_out.forward(tape, p, h)?;
        Ok(tape.sigmoid(h))
    }

    fn stack(&self, images: &[Image2D], size: usize, ctx: &'static str) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(images.len() * size * size);
        for im in images {
            if im.shape() != [size, size] {
                return Err(Error::shape(ctx, &[size, size], &im.shape()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), 1, size, size], data)
    }

    fn unstack(t: &Tensor<f32>) -> Vec<Image2D> {
        let (h, w) = (t.shape()[2], t.shape()[3]);
        (0..t.shape()[0])
            .map(|i| Image2D::new(h, w, t.slab(i).to_vec()).expect("slab size"))
            .collect()
    }

    pub fn encode(&self, images: &[Image2D]) -> Result<Vec<Image2D>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let mut tape = Tape::new();
            let x = tape.constant(self.stack(chunk, self.config.image_size, "encoder input")?);
            let z = self.encode_var(&mut tape, x)?;
            out.extend(Self::unstack(tape.value(z)));
        }
        Ok(out)
    }

    pub fn decode(&self, latents: &[Image2D]) -> Result<Vec<Image2D>> {
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(8) {
            let mut tape = Tape::new();
            let z = tape.constant(self.stack(chunk, self.config.latent_size(), "decoder input")?);
            let y = self.decode_var(&mut tape, z)?;
            out.extend(Self::unstack(tape.value(y)));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, images: &[Image2D]) -> Result<Vec<Image2D>> {
        self.decode(&self.encode(images)?)
    }
}

/// `mean|pred - target| + 1 - (2 sum(pred * bin) + eps) / (sum(pred) + sum(bin) + eps)`
/// where `bin` is `target > 0.5`.
pub fn ae_loss(pred: &Image2D, target: &Image2D) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("ae loss", &target.shape(), &pred.shape()));
    }
    let mut l1 = 0.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let (p, t) = (p as f64, t as f64);
        let b = if t > 0.5 { 1.0 } else { 0.0 };
        l1 += (p - t).abs();
        inter += p * b;
        sp += p;
        st += b;
    }
    Ok(l1 / pred.len() as f64 + 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

/// Tape form of [`ae_loss`], pooling the Dice sums over the whole batch.
pub fn ae_loss_var(tape: &mut Tape<f32>, pred: Var, target: &Tensor<f32>) -> Result<Var> {
    let bin = target.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let bin_sum: f32 = bin.data().iter().sum();
    let t = tape.constant(target.clone());
    let b = tape.constant(bin);
    let diff = tape.sub(pred, t)?;
    let diff = tape.abs(diff);
    let l1 = tape.mean(diff);
    let inter = tape.mul(pred, b)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0);
    let num = tape.offset(num, DICE_EPS as f32);
    let sp = tape.sum(pred);
    let den = tape.offset(sp, bin_sum + DICE_EPS as f32);
    let ratio = tape.div(num, den)?;
    let dice = tape.scale(ratio, -1.0);
    let dice = tape.offset(dice, 1.0);
    tape.add(l1, dice)
}

/// Dice overlap of `pred > 0.5` with `target > 0.5`.
pub fn binary_dice(pred: &Image2D, target: &Image2D) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("dice", &target.shape(), &pred.shape()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Indices of the batch used at `step`: an epoch-wise shuffle keyed on the
/// seed and epoch, so any step can be reproduced without replaying earlier ones.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let (epoch, slot) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order[slot * batch_size..((slot + 1) * batch_size).min(n)].to_vec()
}

#[derive(Clone, Debug, Default)]
pub struct AeTrainLog {
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl AeTrainLog {
    /// Mean loss of each complete epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses
            .chunks(self.steps_per_epoch.max(1))
            .filter(|c| c.len() == self.steps_per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Trains on `images` for `config.steps` Adam steps. `on_step` sees
/// `(step, loss)` after every update.
pub fn train_autoencoder_on(
    images: &[Image2D],
    config: &AeConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(AeNetwork, LatentStats, AeTrainLog)> {
    if images.is_empty() {
        return Err(Error::InsufficientSamples("autoencoder training split is empty".into()));
    }
    let mut net = AeNetwork::new(config.clone())?;
    let mut adam = AdamState::new(
        &net.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let bs = config.batch_size.min(images.len());
    let mut log = AeTrainLog {
        losses: Vec::with_capacity(config.steps),
        steps_per_epoch: images.len().div_ceil(bs),
    };
    for step in 0..config.steps {
        let idx = batch_indices(images.len(), bs, config.seed, step);
        let batch: Vec<Image2D> = idx.iter().map(|&i| images[i].clone()).collect();
        let target = net.stack(&batch, config.image_size, "autoencoder input")?;
        let mut tape = Tape::new();
        let x = tape.constant(target.clone());
        let z = net.encode_var(&mut tape, x)?;
        let y = net.decode_var(&mut tape, z)?;
        let loss = ae_loss_var(&mut tape, y, &target)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("autoencoder loss is {value}"),
            });
        }
        let g = grad(&tape, loss, &net.params)?;
        adam_step(&mut net.params, &g, &mut adam)?;
        log.losses.push(value);
        on_step(step, value);
    }
    let latents = net.encode(images)?;
    let stats = LatentStats::from_latents(&latents)?;
    Ok((net, stats, log))
}

/// Trains on the manifest's training MIPs.
pub fn train_autoencoder(manifest: &DatasetManifest, config: &AeConfig, on_step: impl FnMut(usize, f64)) -> Result<(AeNetwork, LatentStats, AeTrainLog)> {
    let images: Vec<Image2D> = manifest.load_mips(Split::Train)?.into_iter().map(|(im, _)| im).collect();
    train_autoencoder_on(&images, config, on_step)
}
