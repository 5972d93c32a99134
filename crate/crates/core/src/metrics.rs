//! Evaluation metrics: MS-SSIM, gradient-region SSIM ("4-G-R"), and the
//! Frechet distance over features of a small task-trained classifier.
//!
//! Frechet values use this crate's extractor, not a natural-image network,
//! so they are only comparable between runs of this crate.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::batch_indices;
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::numcore::{adam_step, grad, AdamConfig, AdamState, Conv2d, Dense, ParamSet, Tape, Tensor, Var};
use crate::phantom::ClassLabel;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const DEFAULT_SCALES: usize = 3;

// Plain f64 planes keep the SSIM arithmetic out of f32.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn of(img: &Image2D) -> Self {
        Plane {
            h: img.height,
            w: img.width,
            v: img.data.iter().map(|&x| x as f64).collect(),
        }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }

    fn half(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let s = self.v[2 * y * self.w + 2 * x]
                    + self.v[2 * y * self.w + 2 * x + 1]
                    + self.v[(2 * y + 1) * self.w + 2 * x]
                    + self.v[(2 * y + 1) * self.w + 2 * x + 1];
                v[y * w + x] = s / 4.0;
            }
        }
        Plane { h, w, v }
    }

    /// Separable "valid" filtering with kernel `k`.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (h, w) = (self.h - n + 1, self.w - n + 1);
        let mut rows = vec![0.0; self.h * w];
        for y in 0..self.h {
            for x in 0..w {
                rows[y * w + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (0..n).map(|i| k[i] * rows[(y + i) * w + x]).sum();
            }
        }
        Plane { h, w, v }
    }
}

/// Normalized Gaussian of `size` taps (odd) and width `sigma`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// 11-tap window, shrunk (to an odd size) when the plane is smaller.
fn window_for(h: usize, w: usize) -> Vec<f64> {
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    gaussian_window(size.max(1), 1.5)
}

/// Per-pixel luminance and contrast-structure maps.
struct SsimMaps {
    lum: Vec<f64>,
    cs: Vec<f64>,
    h: usize,
    w: usize,
}

fn ssim_maps(a: &Plane, b: &Plane) -> SsimMaps {
    let k = window_for(a.h, a.w);
    let (ma, mb) = (a.filter(&k), b.filter(&k));
    let (saa, sbb, sab) = (a.mul(a).filter(&k), b.mul(b).filter(&k), a.mul(b).filter(&k));
    let n = ma.v.len();
    let mut lum = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, my) = (ma.v[i], mb.v[i]);
        let vx = saa.v[i] - mx * mx;
        let vy = sbb.v[i] - my * my;
        let cxy = sab.v[i] - mx * my;
        lum.push((2.0 * mx * my + C1) / (mx * mx + my * my + C1));
        cs.push((2.0 * cxy + C2) / (vx + vy + C2));
    }
    SsimMaps { lum, cs, h: ma.h, w: ma.w }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_pair(ctx: &'static str, a: &Image2D, b: &Image2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// Single-scale SSIM (mean of the SSIM map).
pub fn ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.height < 11 || a.width < 11 {
        return Err(Error::invalid("image size", "smaller than the 11x11 window"));
    }
    let m = ssim_maps(&Plane::of(a), &Plane::of(b));
    Ok(mean(&m.lum.iter().zip(&m.cs).map(|(l, c)| l * c).collect::<Vec<_>>()))
}

/// Multi-scale SSIM with `DEFAULT_SCALES` scales.
pub fn ms_ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    ms_ssim_scales(a, b, DEFAULT_SCALES)
}

/// `l_1^{w_M} * prod_j cs_j^{w_j}`: contrast-structure at every scale,
/// luminance at the finest scale, the first `scales` standard weights
/// renormalized to sum to 1. Negative `cs` means are clamped to 0.
pub fn ms_ssim_scales(a: &Image2D, b: &Image2D, scales: usize) -> Result<f64> {
    check_pair("ms_ssim", a, b)?;
    if scales == 0 || scales > MS_WEIGHTS.len() {
        return Err(Error::invalid("ms_ssim scales", format!("must be in 1..={}", MS_WEIGHTS.len())));
    }
    let min_side = 8usize << (scales - 1);
    if a.height < min_side.max(11) || a.width < min_side.max(11) {
        return Err(Error::invalid(
            "image size",
            format!("{scales}-scale MS-SSIM needs at least {0}x{0}", min_side.max(11)),
        ));
    }
    let total: f64 = MS_WEIGHTS[..scales].iter().sum();
    let w: Vec<f64> = MS_WEIGHTS[..scales].iter().map(|v| v / total).collect();
    let (mut pa, mut pb) = (Plane::of(a), Plane::of(b));
    let mut score = 1.0;
    for (j, wj) in w.iter().enumerate() {
        let m = ssim_maps(&pa, &pb);
        if j == 0 {
            score *= mean(&m.lum).max(0.0).powf(w[scales - 1]);
        }
        score *= mean(&m.cs).max(0.0).powf(*wj);
        if j + 1 < scales {
            pa = pa.half();
            pb = pb.half();
        }
    }
    Ok(score)
}

fn sobel(p: &Plane) -> Plane {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, p.h as isize - 1) as usize;
        let x = x.clamp(0, p.w as isize - 1) as usize;
        p.v[y * p.w + x]
    };
    let mut v = vec![0.0; p.h * p.w];
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y, x - 1) - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1);
            v[y as usize * p.w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Plane { h: p.h, w: p.w, v }
}

pub const EDGE_FRACTION: f64 = 0.12;
pub const SMOOTH_FRACTION: f64 = 0.06;

/// Four-region gradient SSIM.
///
/// Sobel gradient magnitudes `ga`, `gb`; with `m = max(ga)`, every pixel is
/// edge (both above `0.12 m`), smooth (both at most `0.06 m`), changed edge
/// (exactly one above `0.12 m`) or texture (the rest). The SSIM map of `ga`
/// against `gb` is averaged per region, and region means are combined with
/// equal weights over the non-empty regions. Map pixels are classified at
/// their window centres.
pub fn fourg_r_ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_pair("4-G-R SSIM", a, b)?;
    if a.height < 11 || a.width < 11 {
        return Err(Error::invalid("image size", "smaller than the 11x11 window"));
    }
    let (ga, gb) = (sobel(&Plane::of(a)), sobel(&Plane::of(b)));
    let m = ssim_maps(&ga, &gb);
    let off = (ga.h - m.h) / 2;
    let gmax = ga.v.iter().cloned().fold(0.0, f64::max);
    let (t1, t2) = (EDGE_FRACTION * gmax, SMOOTH_FRACTION * gmax);
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for y in 0..m.h {
        for x in 0..m.w {
            let i = (y + off) * ga.w + x + off;
            let (va, vb) = (ga.v[i], gb.v[i]);
            let region = if va > t1 && vb > t1 {
                0
            } else if va <= t2 && vb <= t2 {
                2
            } else if (va > t1) != (vb > t1) {
                1
            } else {
                3
            };
            let k = y * m.w + x;
            sums[region] += m.lum[k] * m.cs[k];
            counts[region] += 1;
        }
    }
    let used: Vec<f64> = (0..4).filter(|&r| counts[r] > 0).map(|r| sums[r] / counts[r] as f64).collect();
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let sqrt_psd = |m: &DMatrix<f64>| {
        let e = SymmetricEigen::new(m.clone());
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    };
    let ra = sqrt_psd(cov_a);
    let mid = &ra * cov_b * &ra;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

fn gaussian_fit(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("Frechet distance needs at least 2 samples per set, got {n}")));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features", "vectors differ in length"));
    }
    let mu = DVector::from_fn(d, |j, _| feats.iter().map(|f| f[j]).sum::<f64>() / n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j] - mu[j]);
    let cov = x.transpose() * &x / (n - 1) as f64 + DMatrix::identity(d, d) * 1e-6;
    Ok((mu, cov))
}

/// Frechet distance between Gaussian fits (unbiased covariance plus `1e-6 I`).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::shape("frechet features", &[ma.len()], &[mb.len()]));
    }
    Ok(frechet_from_stats(&ma, &ca, &mb, &cb))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub image_size: usize,
    pub feature_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            image_size: 64,
            feature_dim: 64,
            lr: 1e-3,
            batch_size: 16,
            steps: 300,
            min_accuracy: 0.9,
            seed: 0,
        }
    }
}

/// Three stride-2 convolutions, a `feature_dim` dense layer (the features)
/// and a 3-way classification head.
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub params: ParamSet<f32>,
    pub val_accuracy: f64,
    convs: [Conv2d; 3],
    feat: Dense,
    head: Dense,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("config", &self.config)
            .field("val_accuracy", &self.val_accuracy)
            .finish()
    }
}

const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 32];

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.image_size % 8 != 0 || config.image_size == 0 {
            return Err(Error::invalid("extractor.image_size", "must be a positive multiple of 8"));
        }
        if config.feature_dim == 0 {
            return Err(Error::invalid("extractor.feature_dim", "must be positive"));
        }
        let [a, b, c] = EXTRACTOR_CHANNELS;
        let convs = [
            Conv2d::new("fx.conv1", 1, a, 3).strided(2),
            Conv2d::new("fx.conv2", a, b, 3).strided(2),
            Conv2d::new("fx.conv3", b, c, 3).strided(2),
        ];
        let flat = c * (config.image_size / 8).pow(2);
        let feat = Dense::new("fx.feat", flat, config.feature_dim);
        let head = Dense::new("fx.head", config.feature_dim, 3);
        let mut params = ParamSet::new(config.seed);
        for cv in &convs {
            cv.register(&mut params)?;
        }
        feat.register(&mut params)?;
        head.register(&mut params)?;
        Ok(FeatureExtractor {
            config,
            params,
            val_accuracy: 0.0,
            convs,
            feat,
            head,
        })
    }

    pub fn from_params(config: ExtractorConfig, params: ParamSet<f32>, val_accuracy: f64) -> Result<Self> {
        let mut fx = Self::new(config)?;
        fx.params.check_layout(&params)?;
        fx.params = params;
        fx.val_accuracy = val_accuracy;
        Ok(fx)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<(Var, Var)> {
        let p = &self.params;
        let mut h = x;
        for cv in &self.convs {
            h = cv.forward(tape, p, h)?;
            h = tape.silu(h);
        }
        let n = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat])?;
        let f = self.feat.forward(tape, p, h)?;
        let f = tape.silu(f);
        let logits = self.head.forward(tape, p, f)?;
        Ok((f, logits))
    }

    fn stack(&self, images: &[&Image2D]) -> Result<Tensor<f32>> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for im in images {
            if im.shape() != [s, s] {
                return Err(Error::shape("extractor input", &[s, s], &im.shape()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), 1, s, s], data)
    }

    fn run(&self, images: &[&Image2D]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::new();
            let x = tape.constant(self.stack(chunk)?);
            let (f, logits) = self.forward(&mut tape, x)?;
            let fv = tape.value(f);
            let lv = tape.value(logits);
            for i in 0..chunk.len() {
                feats.push(fv.slab(i).iter().map(|&v| v as f64).collect());
                let row = lv.slab(i);
                let best = (0..3).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                preds.push(best);
            }
        }
        Ok((feats, preds))
    }

    /// Penultimate-layer activations.
    pub fn features(&self, images: &[&Image2D]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.0)
    }

    pub fn predict(&self, images: &[&Image2D]) -> Result<Vec<ClassLabel>> {
        self.run(images)?.1.into_iter().map(ClassLabel::from_index).collect()
    }

    pub fn accuracy(&self, data: &[(Image2D, ClassLabel)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientSamples("accuracy needs labelled images".into()));
        }
        let imgs: Vec<&Image2D> = data.iter().map(|(im, _)| im).collect();
        let preds = self.predict(&imgs)?;
        let hits = preds.iter().zip(data).filter(|(p, (_, l))| *p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Trains the classifier and keeps it only if validation accuracy reaches
/// `config.min_accuracy`. With `shuffle_labels`, training and validation
/// labels are permuted independently (a control that should fail the floor).
pub fn train_feature_extractor(
    train: &[(Image2D, ClassLabel)],
    val: &[(Image2D, ClassLabel)],
    config: &ExtractorConfig,
    shuffle_labels: bool,
) -> Result<FeatureExtractor> {
    let fx = fit_extractor(train, val, config, shuffle_labels)?;
    if fx.val_accuracy < config.min_accuracy {
        return Err(Error::Rejected(format!(
            "feature extractor reached {:.3} validation accuracy, below the {:.2} floor; unfit for Frechet features",
            fx.val_accuracy, config.min_accuracy
        )));
    }
    Ok(fx)
}

/// Training without the accuracy floor.
pub fn fit_extractor(train: &[(Image2D, ClassLabel)], val: &[(Image2D, ClassLabel)], config: &ExtractorConfig, shuffle_labels: bool) -> Result<FeatureExtractor> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientSamples("extractor needs train and validation images".into()));
    }
    let mut fx = FeatureExtractor::new(config.clone())?;
    let mut labels: Vec<usize> = train.iter().map(|(_, l)| l.index()).collect();
    if shuffle_labels {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    }
    let mut adam = AdamState::new(
        &fx.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let bs = config.batch_size.min(train.len());
    for step in 0..config.steps {
        let idx = batch_indices(train.len(), bs, config.seed, step);
        let imgs: Vec<&Image2D> = idx.iter().map(|&i| &train[i].0).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(fx.stack(&imgs)?);
        let (_, logits) = fx.forward(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, &y)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("extractor loss is {v}"),
            });
        }
        let g = grad(&tape, loss, &fx.params)?;
        adam_step(&mut fx.params, &g, &mut adam)?;
    }
    fx.val_accuracy = if shuffle_labels {
        let mut val_labels: Vec<ClassLabel> = val.iter().map(|(_, l)| *l).collect();
        val_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xa11d));
        let relabelled: Vec<(Image2D, ClassLabel)> = val.iter().zip(val_labels).map(|((img, _), l)| (img.clone(), l)).collect();
        fx.accuracy(&relabelled)?
    } else {
        fx.accuracy(val)?
    };
    Ok(fx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValues {
    pub frechet: f64,
    pub ms_ssim: f64,
    pub fourg_r_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// `Class 1`, `Class 2`, `Class 3` or `Overall`.
    pub name: String,
    pub n_real: usize,
    pub n_synth: usize,
    /// `None` when the class is missing from either set.
    pub values: Option<MetricValues>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub config_hash: String,
}

const REPORT_NOTE: &str = "frechet uses features of the task-trained extractor; SSIM metrics pair each synthetic image with its nearest real image (same class, extractor feature space)";

fn nearest(feat: &[f64], pool: &[Vec<f64>]) -> usize {
    let d = |p: &Vec<f64>| p.iter().zip(feat).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..pool.len()).fold(0, |best, i| if d(&pool[i]) < d(&pool[best]) { i } else { best })
}

/// Per-class and pooled metrics of `synth` against `real`.
///
/// Each synthetic image is paired with its nearest real image of the same
/// class in feature space; MS-SSIM and 4-G-R SSIM are averaged over those
/// pairs. A class with fewer than two images on either side gets an absent
/// row; the overall row pools every class present in both sets.
pub fn evaluate(real: &[(Image2D, ClassLabel)], synth: &[(Image2D, ClassLabel)], extractor: &FeatureExtractor, config_hash: &str) -> Result<MetricsReport> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::InsufficientSamples("evaluation needs real and synthetic images".into()));
    }
    let feats = |set: &[(Image2D, ClassLabel)]| extractor.features(&set.iter().map(|(im, _)| im).collect::<Vec<_>>());
    let (fr, fs) = (feats(real)?, feats(synth)?);
    let mut rows = Vec::with_capacity(4);
    let (mut all_r, mut all_s) = (Vec::new(), Vec::new());
    let (mut ms_all, mut g_all) = (Vec::new(), Vec::new());
    for c in ClassLabel::ALL {
        let ri: Vec<usize> = (0..real.len()).filter(|&i| real[i].1 == c).collect();
        let si: Vec<usize> = (0..synth.len()).filter(|&i| synth[i].1 == c).collect();
        let name = format!("Class {}", c.number());
        if ri.len() < 2 || si.len() < 2 {
            rows.push(MetricsRow {
                name,
                n_real: ri.len(),
                n_synth: si.len(),
                values: None,
            });
            continue;
        }
        let rf: Vec<Vec<f64>> = ri.iter().map(|&i| fr[i].clone()).collect();
        let sf: Vec<Vec<f64>> = si.iter().map(|&i| fs[i].clone()).collect();
        let (mut ms, mut g) = (Vec::new(), Vec::new());
        for (k, &i) in si.iter().enumerate() {
            let partner = &real[ri[nearest(&sf[k], &rf)]].0;
            ms.push(ms_ssim(&synth[i].0, partner)?);
            g.push(fourg_r_ssim(&synth[i].0, partner)?);
        }
        rows.push(MetricsRow {
            name,
            n_real: ri.len(),
            n_synth: si.len(),
            values: Some(MetricValues {
                frechet: frechet_distance(&rf, &sf)?,
                ms_ssim: mean(&ms),
                fourg_r_ssim: mean(&g),
            }),
        });
        all_r.extend(rf);
        all_s.extend(sf);
        ms_all.extend(ms);
        g_all.extend(g);
    }
    let overall = if all_r.len() >= 2 && all_s.len() >= 2 {
        Some(MetricValues {
            frechet: frechet_distance(&all_r, &all_s)?,
            ms_ssim: mean(&ms_all),
            fourg_r_ssim: mean(&g_all),
        })
    } else {
        None
    };
    rows.push(MetricsRow {
        name: "Overall".into(),
        n_real: all_r.len(),
        n_synth: all_s.len(),
        values: overall,
    });
    Ok(MetricsReport {
        rows,
        config_hash: config_hash.to_string(),
    })
}

fn key(name: &str) -> String {
    name.to_lowercase().replace(' ', "")
}

impl MetricsReport {
    pub fn row(&self, name: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn overall(&self) -> Option<MetricValues> {
        self.row("Overall").and_then(|r| r.values)
    }

    /// `key = value` lines, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {REPORT_NOTE}\nconfig_hash = {}\n", self.config_hash);
        for r in &self.rows {
            let k = key(&r.name);
            let _ = writeln!(s, "{k}.n_real = {}", r.n_real);
            let _ = writeln!(s, "{k}.n_synth = {}", r.n_synth);
            match r.values {
                Some(v) => {
                    let _ = writeln!(s, "{k}.frechet = {:.6}", v.frechet);
                    let _ = writeln!(s, "{k}.ms_ssim = {:.6}", v.ms_ssim);
                    let _ = writeln!(s, "{k}.fourg_r_ssim = {:.6}", v.fourg_r_ssim);
                }
                None => {
                    let _ = writeln!(s, "{k}.absent = true");
                }
            }
        }
        s
    }

    /// Aligned class-wise table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>6} {:>10} {:>9} {:>12}\n", "", "n", "Frechet", "MS-SSIM", "4-G-R SSIM");
        for r in &self.rows {
            match r.values {
                Some(v) => {
                    let _ = writeln!(s, "{:<10} {:>6} {:>10.4} {:>9.4} {:>12.4}", r.name, r.n_synth, v.frechet, v.ms_ssim, v.fourg_r_ssim);
                }
                None => {
                    let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>9} {:>12}", r.name, r.n_synth, "absent", "-", "-");
                }
            }
        }
        s
    }
}

/// Model-comparison table from the overall row of each report.
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$} {:>10} {:>9} {:>12}\n", "Model", "FID", "MS-SSIM", "4-G-R SSIM");
    for (name, rep) in rows {
        match rep.overall() {
            Some(v) => {
                let _ = writeln!(s, "{name:<width$} {:>10.4} {:>9.4} {:>12.4}", v.frechet, v.ms_ssim, v.fourg_r_ssim);
            }
            None => {
                let _ = writeln!(s, "{name:<width$} {:>10} {:>9} {:>12}", "absent", "-", "-");
            }
        }
    }
    s
}
