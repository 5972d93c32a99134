//! Run orchestration: data generation, training, sampling, evaluation and
//! rendering, with every artifact stamped by the producing config hash.
//!
//! Output layout under `paths.out_dir`:
//!
//! ```text
//! ae.ckpt                  autoencoder + latent statistics
//! ldm-<guidance>.ckpt      noise predictor, optimizer state, conditioning
//! extractor.ckpt           evaluation feature extractor
//! samples/<guidance>/      latents (.vsv), decoded MIPs (.png), samples.tsv, grid.png
//! ```

pub mod checkpoint;
pub mod cli;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;

use crate::anatomy::{build_anatomy_condition, fit_class_pca, AnatomyConditionVector, ANATOMY_TOKENS};
use crate::autoencoder::{train_autoencoder, AeConfig, AeNetwork, LatentStats};
use crate::descriptors::ShapeConditioning;
use crate::diffusion::{sample as sample_chain, Conditioning, EpsNetwork, LatentDataset, LdmTrainer};
use crate::error::{Error, Result};
use crate::image::{tile, Image2D};
use crate::metrics::{comparison_table, evaluate as evaluate_sets, train_feature_extractor, FeatureExtractor, MetricsReport};
use crate::numcore::{AdamConfig, AdamState, Tensor};
use crate::phantom::{dataset_hash, generate_dataset, mip_render, read_volume, write_volume, Axis, ClassLabel, DatasetManifest, PhantomVolume, Split, MANIFEST_FILE};
use crate::util::{deterministic_mode, short_digest};

pub use checkpoint::{Block, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{guidance_slug, RunConfig};

pub const AE_CHECKPOINT: &str = "ae.ckpt";
pub const EXTRACTOR_CHECKPOINT: &str = "extractor.ckpt";
pub const SAMPLES_MANIFEST: &str = "samples.tsv";
pub const REPORT_FILE: &str = "report.txt";

/// Line-oriented progress log: `stage=.. step=.. loss=.. wall=..s`.
/// Wall time is left out in deterministic mode so logs are reproducible too.
pub struct Log<'a> {
    sink: Option<&'a mut dyn Write>,
    start: Instant,
    every: usize,
    wall: bool,
}

impl<'a> Log<'a> {
    pub fn new(sink: &'a mut dyn Write, every: usize) -> Self {
        Log {
            sink: Some(sink),
            start: Instant::now(),
            every: every.max(1),
            wall: !deterministic_mode(),
        }
    }

    pub fn silent() -> Log<'static> {
        Log {
            sink: None,
            start: Instant::now(),
            every: usize::MAX,
            wall: false,
        }
    }

    pub fn line(&mut self, text: &str) {
        let wall = self.wall.then(|| format!(" wall={:.1}s", self.start.elapsed().as_secs_f64()));
        if let Some(s) = self.sink.as_mut() {
            let _ = writeln!(s, "{text}{}", wall.unwrap_or_default());
        }
    }

    fn step(&mut self, stage: &str, step: usize, total: usize, loss: f64) {
        if step % self.every == 0 || step + 1 == total {
            self.line(&format!("stage={stage} step={step} loss={loss:.6}"));
        }
    }
}

fn stage_key(parts: &[String]) -> String {
    short_digest(parts.join("\n").as_bytes())
}

fn section<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("section serializes")
}

fn ae_key(cfg: &RunConfig) -> String {
    stage_key(&[section(&cfg.data), section(&cfg.ae)])
}

/// Key of everything an LDM run depends on except its step budget.
fn ldm_key(cfg: &RunConfig) -> String {
    let mut ldm = cfg.ldm.clone();
    ldm.steps = 0;
    ldm.checkpoint_every = 0;
    stage_key(&[section(&cfg.data), section(&cfg.ae), section(&ldm)])
}

fn extractor_key(cfg: &RunConfig) -> String {
    stage_key(&[section(&cfg.data), section(&cfg.extractor)])
}

pub fn ldm_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join(format!("{}.ckpt", guidance_slug(cfg.guidance())))
}

pub fn samples_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("samples").join(guidance_slug(cfg.guidance()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_generator(found: &str, expected: &str, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{what} was built from phantom generator {found}, but the dataset is {expected}; refusing to mix them"
        )));
    }
    Ok(())
}

/// Generates the phantom corpus, or reuses it when the manifest already
/// records the same generator hash.
pub fn gen_data(cfg: &RunConfig, log: &mut Log) -> Result<DatasetManifest> {
    let dir = &cfg.paths.data_dir;
    let expected = dataset_hash(&cfg.data.template(), cfg.data.n_per_class, cfg.data.seed);
    if dir.join(MANIFEST_FILE).exists() {
        let m = DatasetManifest::load(dir)?;
        if m.generator_hash == expected {
            log.line(&format!("stage=gen-data reused={} volumes={}", m.generator_hash, m.entries.len()));
            return Ok(m);
        }
    }
    let m = generate_dataset(dir, cfg.data.n_per_class, &cfg.data.template(), cfg.data.seed)?;
    log.line(&format!("stage=gen-data generator={} volumes={}", m.generator_hash, m.entries.len()));
    Ok(m)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    if !cfg.paths.data_dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Missing(format!(
            "dataset manifest in {} (run gen-data first)",
            cfg.paths.data_dir.display()
        )));
    }
    let m = DatasetManifest::load(&cfg.paths.data_dir)?;
    let expected = dataset_hash(&cfg.data.template(), cfg.data.n_per_class, cfg.data.seed);
    check_generator(&m.generator_hash, &expected, "the dataset on disk")?;
    Ok(m)
}

/// Trained autoencoder and the statistics used to standardize its latents.
#[derive(Debug)]
pub struct AeArtifact {
    pub net: AeNetwork,
    pub stats: LatentStats,
    pub generator_hash: String,
    pub losses: Vec<f64>,
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Config(format!("bad number {x:?} in checkpoint"))))
        .collect()
}

pub fn save_ae(path: &Path, a: &AeArtifact, config_hash: &str, key: &str) -> Result<()> {
    let mut b = Block::with_params(&a.net.params);
    let c = &a.net.config;
    b.set_meta("key", key)
        .set_meta("generator_hash", &a.generator_hash)
        .set_meta("image_size", c.image_size)
        .set_meta("channels_hi", c.channels_hi)
        .set_meta("channels_lo", c.channels_lo)
        .set_meta("heads", c.heads)
        .set_meta("latent_mean", format!("{:?}", a.stats.mean))
        .set_meta("latent_std", format!("{:?}", a.stats.std))
        .set_meta("losses", join_f64(&a.losses));
    let mut ck = Checkpoint::new(config_hash);
    ck.insert("ae", b);
    ck.save(path)
}

pub fn load_ae(path: &Path) -> Result<AeArtifact> {
    let ck = Checkpoint::load(path)?;
    let b = ck.block("ae")?;
    let config = AeConfig {
        image_size: b.parse_meta("image_size")?,
        channels_hi: b.parse_meta("channels_hi")?,
        channels_lo: b.parse_meta("channels_lo")?,
        heads: b.parse_meta("heads")?,
        ..AeConfig::default()
    };
    Ok(AeArtifact {
        net: AeNetwork::from_params(config, b.params(0))?,
        stats: LatentStats {
            mean: b.parse_meta("latent_mean")?,
            std: b.parse_meta("latent_std")?,
        },
        generator_hash: b.meta("generator_hash")?.to_string(),
        losses: split_f64(b.meta("losses")?)?,
    })
}

fn stored_key(path: &Path, block: &str) -> Option<String> {
    let ck = Checkpoint::load(path).ok()?;
    ck.block(block).ok()?.meta("key").ok().map(str::to_string)
}

/// Trains the autoencoder on the training MIPs, or reuses `ae.ckpt` when it
/// was trained from identical data and AE settings.
pub fn train_ae(cfg: &RunConfig, log: &mut Log) -> Result<AeArtifact> {
    let path = cfg.paths.out_dir.join(AE_CHECKPOINT);
    let key = ae_key(cfg);
    if stored_key(&path, "ae").as_deref() == Some(key.as_str()) {
        let a = load_ae(&path)?;
        log.line(&format!("stage=train-ae reused={}", path.display()));
        return Ok(a);
    }
    let manifest = load_dataset(cfg)?;
    let ae_cfg = cfg.ae_config();
    let (net, stats, trace) = train_autoencoder(&manifest, &ae_cfg, |k, loss| log.step("ae", k, ae_cfg.steps, loss))?;
    let a = AeArtifact {
        net,
        stats,
        generator_hash: manifest.generator_hash.clone(),
        losses: trace.losses,
    };
    ensure_dir(&cfg.paths.out_dir)?;
    save_ae(&path, &a, &cfg.config_hash(), &key)?;
    log.line(&format!("stage=train-ae saved={}", path.display()));
    Ok(a)
}

fn conditioning_block(c: &Conditioning) -> Result<Block> {
    let mut b = Block::default();
    for class in ClassLabel::ALL {
        let i = class.index();
        let s = &c.shape[i];
        b.tensors.insert(format!("shape.{}", class.number()), Tensor::new(&[s.len()], s.clone())?);
        let a = &c.anatomy[i];
        b.tensors.insert(
            format!("anatomy.{}", class.number()),
            Tensor::new(&[a.tokens.len(), a.height, a.width], a.flat())?,
        );
    }
    Ok(b)
}

fn conditioning_from_block(b: &Block) -> Result<Conditioning> {
    let mut shape = Vec::new();
    let mut anatomy = Vec::new();
    for class in ClassLabel::ALL {
        shape.push(b.tensor(&format!("shape.{}", class.number()))?.data().to_vec());
        let t = b.tensor(&format!("anatomy.{}", class.number()))?;
        let &[k, height, width] = t.shape() else {
            return Err(Error::Config("anatomy conditioning tensor is not 3-D".into()));
        };
        let tokens = t.data().chunks(height * width).map(<[f32]>::to_vec).collect::<Vec<_>>();
        debug_assert_eq!(tokens.len(), k);
        anatomy.push(AnatomyConditionVector { height, width, tokens });
    }
    Ok(Conditioning { shape, anatomy })
}

/// Shape and anatomy constants of every class at latent resolution.
pub fn build_conditioning(manifest: &DatasetManifest, zernike_order: usize, latent_size: usize) -> Result<Conditioning> {
    let shape = ShapeConditioning::build(manifest, zernike_order)?;
    let anatomy = ClassLabel::ALL
        .iter()
        .map(|&c| build_anatomy_condition(&fit_class_pca(manifest, c)?, latent_size, latent_size))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(anatomy.iter().all(|a| a.tokens.len() == ANATOMY_TOKENS));
    Conditioning::new(&shape, anatomy)
}

/// Standardized training latents with labels and class conditions.
pub fn latent_dataset(cfg: &RunConfig, manifest: &DatasetManifest, ae: &AeArtifact) -> Result<LatentDataset> {
    let train = manifest.load_mips(Split::Train)?;
    let images: Vec<Image2D> = train.iter().map(|(im, _)| im.clone()).collect();
    let latents = ae.net.encode(&images)?.iter().map(|z| ae.stats.normalize(z)).collect();
    Ok(LatentDataset {
        latents,
        labels: train.iter().map(|(_, c)| *c).collect(),
        conditioning: build_conditioning(manifest, cfg.ldm.zernike_order, ae.net.config.latent_size())?,
    })
}

/// A noise predictor with its training state and the conditioning it was
/// trained with.
pub struct LdmArtifact {
    pub trainer: LdmTrainer,
    pub conditioning: Conditioning,
    pub generator_hash: String,
}

impl LdmArtifact {
    pub fn net(&self) -> &EpsNetwork {
        &self.trainer.net
    }
}

pub fn save_ldm(path: &Path, a: &LdmArtifact, config_hash: &str, key: &str) -> Result<()> {
    let t = &a.trainer;
    let mut ldm = Block::with_params(&t.net.params);
    ldm.set_meta("key", key)
        .set_meta("generator_hash", &a.generator_hash)
        .set_meta("guidance", guidance_slug(t.net.config.guidance))
        .set_meta("step", t.step());
    let mut opt = Block::default();
    for (k, v) in &t.adam.m {
        opt.tensors.insert(format!("m.{k}"), v.clone());
    }
    for (k, v) in &t.adam.v {
        opt.tensors.insert(format!("v.{k}"), v.clone());
    }
    opt.set_meta("step", t.adam.step).set_meta("losses", join_f64(&t.losses));
    let mut ck = Checkpoint::new(config_hash);
    ck.insert("ldm", ldm);
    ck.insert("ldm_optimizer", opt);
    ck.insert("conditioning", conditioning_block(&a.conditioning)?);
    ck.save(path)
}

/// Loads an LDM checkpoint. Architecture and schedule come from `cfg`, whose
/// LDM key must match the one stored at training time.
pub fn load_ldm(path: &Path, cfg: &RunConfig) -> Result<LdmArtifact> {
    let ck = Checkpoint::load(path)?;
    let b = ck.block("ldm")?;
    let key = ldm_key(cfg);
    if b.meta("key")? != key {
        return Err(Error::Config(format!(
            "{} was trained with different data, autoencoder or diffusion settings",
            path.display()
        )));
    }
    let net = EpsNetwork::from_params(cfg.eps_config()?, b.params(cfg.ldm.seed))?;
    let o = ck.block("ldm_optimizer")?;
    let mut adam = AdamState {
        config: AdamConfig {
            lr: cfg.ldm.lr,
            ..AdamConfig::default()
        },
        step: o.parse_meta("step")?,
        m: IndexMap::new(),
        v: IndexMap::new(),
    };
    for (k, t) in &o.tensors {
        if let Some(name) = k.strip_prefix("m.") {
            adam.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = k.strip_prefix("v.") {
            adam.v.insert(name.to_string(), t.clone());
        }
    }
    let losses = split_f64(o.meta("losses")?)?;
    Ok(LdmArtifact {
        trainer: LdmTrainer::resume(net, adam, cfg.ldm_config(), losses)?,
        conditioning: conditioning_from_block(ck.block("conditioning")?)?,
        generator_hash: b.meta("generator_hash")?.to_string(),
    })
}

/// Trains the noise predictor for `ldm.steps` optimizer steps, resuming
/// from an existing checkpoint of the same run and saving every
/// `ldm.checkpoint_every` steps.
pub fn train_ldm(cfg: &RunConfig, log: &mut Log) -> Result<LdmArtifact> {
    let path = ldm_checkpoint_path(cfg);
    let key = ldm_key(cfg);
    let manifest = load_dataset(cfg)?;
    let ae = load_ae(&cfg.paths.out_dir.join(AE_CHECKPOINT))?;
    check_generator(&ae.generator_hash, &manifest.generator_hash, "the autoencoder")?;
    let data = latent_dataset(cfg, &manifest, &ae)?;
    let mut art = match stored_key(&path, "ldm") {
        Some(k) if k == key => {
            let a = load_ldm(&path, cfg)?;
            log.line(&format!("stage=train-ldm resumed={} step={}", path.display(), a.trainer.step()));
            a
        }
        _ => LdmArtifact {
            trainer: LdmTrainer::new(EpsNetwork::new(cfg.eps_config()?)?, cfg.ldm_config())?,
            conditioning: data.conditioning.clone(),
            generator_hash: manifest.generator_hash.clone(),
        },
    };
    let total = cfg.ldm.steps;
    let every = if cfg.ldm.checkpoint_every == 0 { total.max(1) } else { cfg.ldm.checkpoint_every };
    let stage = guidance_slug(cfg.guidance());
    ensure_dir(&cfg.paths.out_dir)?;
    let hash = cfg.config_hash();
    while art.trainer.step() < total {
        let next = ((art.trainer.step() / every + 1) * every).min(total);
        art.trainer.run_until(&data, next, |k, loss| log.step(stage, k, total, loss))?;
        save_ldm(&path, &art, &hash, &key)?;
        log.line(&format!("stage={stage} checkpoint={} step={}", path.display(), art.trainer.step()));
    }
    if !path.exists() {
        save_ldm(&path, &art, &hash, &key)?;
    }
    Ok(art)
}

/// Decoded samples of one class.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub class_label: ClassLabel,
    /// Latents in autoencoder units (de-standardized).
    pub latents: Vec<Image2D>,
    pub images: Vec<Image2D>,
}

/// Per-class chain seed when several classes are sampled in one call.
pub fn class_seed(seed: u64, class_label: ClassLabel) -> u64 {
    seed.wrapping_add((class_label.index() as u64) << 32)
}

fn latent_volume(z: &Image2D, class_label: ClassLabel) -> Result<PhantomVolume> {
    PhantomVolume::new(1, z.height, z.width, z.data.clone(), class_label)
}

/// Samples `n` latents per requested class, decodes them and writes
/// `<out>/c<k>_<i>.vsv`, `.png`, `samples.tsv` and `grid.png`.
pub fn sample(cfg: &RunConfig, classes: &[(ClassLabel, u64)], n: usize, out: &Path, log: &mut Log) -> Result<Vec<SampleSet>> {
    if n == 0 || classes.is_empty() {
        return Err(Error::invalid("n", "must sample at least one image"));
    }
    let ae = load_ae(&cfg.paths.out_dir.join(AE_CHECKPOINT))?;
    let ldm = load_ldm(&ldm_checkpoint_path(cfg), cfg)?;
    check_generator(&ldm.generator_hash, &ae.generator_hash, "the diffusion model")?;
    let guidance = cfg.guidance();
    let schedule = cfg.ldm_config().schedule()?;
    ensure_dir(out)?;
    let mut sets = Vec::new();
    let mut tsv = format!(
        "# config_hash={}\n# generator_hash={}\n# model={}\nfile\tclass\tindex\tseed\n",
        cfg.config_hash(),
        ae.generator_hash,
        guidance.label()
    );
    for &(class, seed) in classes {
        let bundle = ldm.conditioning.bundle(class, guidance);
        let z = sample_chain(ldm.net(), &bundle, n, seed, &schedule, cfg.sample.batch)?;
        let latents: Vec<Image2D> = z.iter().map(|x| ae.stats.denormalize(x)).collect();
        let images = ae.net.decode(&latents)?;
        for (i, (zl, im)) in latents.iter().zip(&images).enumerate() {
            let stem = format!("c{}_{i:04}", class.number());
            write_volume(&out.join(format!("{stem}.vsv")), &latent_volume(zl, class)?)?;
            im.write_png(&out.join(format!("{stem}.png")))?;
            let _ = writeln!(tsv, "{stem}.vsv\t{}\t{i}\t{seed}", class.number());
        }
        log.line(&format!("stage=sample class={} n={n} seed={seed}", class.number()));
        sets.push(SampleSet {
            class_label: class,
            latents,
            images,
        });
    }
    let all: Vec<Image2D> = sets.iter().flat_map(|s| s.images.iter().cloned()).collect();
    tile(&all, n)?.write_png(&out.join("grid.png"))?;
    let path = out.join(SAMPLES_MANIFEST);
    fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    Ok(sets)
}

/// Contents of a `samples.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleManifest {
    pub dir: PathBuf,
    pub config_hash: String,
    pub generator_hash: String,
    pub model: String,
    pub entries: Vec<(PathBuf, ClassLabel)>,
}

impl SampleManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SAMPLES_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("sample manifest {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.clone(),
            reason,
        };
        let mut header = IndexMap::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                if let Some((k, v)) = h.split_once('=') {
                    header.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            if line.starts_with("file\t") || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(corrupt(format!("bad row {line:?}")));
            }
            let class: ClassLabel = cols[1].parse()?;
            entries.push((dir.join(cols[0]), class));
        }
        let get = |k: &str| header.get(k).cloned().ok_or_else(|| corrupt(format!("missing header {k}")));
        Ok(SampleManifest {
            dir: dir.to_path_buf(),
            config_hash: get("config_hash")?,
            generator_hash: get("generator_hash")?,
            model: get("model")?,
            entries,
        })
    }
}

pub fn save_extractor(path: &Path, fx: &FeatureExtractor, config_hash: &str, key: &str, generator_hash: &str) -> Result<()> {
    let mut b = Block::with_params(&fx.params);
    b.set_meta("key", key)
        .set_meta("generator_hash", generator_hash)
        .set_meta("feature_dim", fx.config.feature_dim)
        .set_meta("val_accuracy", format!("{:?}", fx.val_accuracy));
    let mut ck = Checkpoint::new(config_hash);
    ck.insert("extractor", b);
    ck.save(path)
}

/// Loads the extractor, rejecting a checkpoint whose feature width differs
/// from the configured one.
pub fn load_extractor(path: &Path, cfg: &RunConfig) -> Result<(FeatureExtractor, String)> {
    let ck = Checkpoint::load(path)?;
    let b = ck.block("extractor")?;
    let dim: usize = b.parse_meta("feature_dim")?;
    if dim != cfg.extractor.feature_dim {
        return Err(Error::invalid(
            "extractor.feature_dim",
            format!("config asks for {} but {} holds a {dim}-wide extractor", cfg.extractor.feature_dim, path.display()),
        ));
    }
    let fx = FeatureExtractor::from_params(cfg.extractor_config(), b.params(0), b.parse_meta("val_accuracy")?)?;
    Ok((fx, b.meta("generator_hash")?.to_string()))
}

/// Loads `extractor.ckpt` or trains (and saves) it on the dataset.
pub fn ensure_extractor(cfg: &RunConfig, manifest: &DatasetManifest, log: &mut Log) -> Result<FeatureExtractor> {
    let path = cfg.paths.out_dir.join(EXTRACTOR_CHECKPOINT);
    if path.exists() {
        let (fx, generator) = load_extractor(&path, cfg)?;
        check_generator(&generator, &manifest.generator_hash, "the feature extractor")?;
        if stored_key(&path, "extractor").as_deref() == Some(extractor_key(cfg).as_str()) {
            log.line(&format!("stage=extractor reused={} val_accuracy={:.4}", path.display(), fx.val_accuracy));
            return Ok(fx);
        }
    }
    let train = manifest.load_mips(Split::Train)?;
    let val = manifest.load_mips(Split::Val)?;
    let fx = train_feature_extractor(&train, &val, &cfg.extractor_config(), false)?;
    ensure_dir(&cfg.paths.out_dir)?;
    save_extractor(&path, &fx, &cfg.config_hash(), &extractor_key(cfg), &manifest.generator_hash)?;
    log.line(&format!("stage=extractor saved={} val_accuracy={:.4}", path.display(), fx.val_accuracy));
    Ok(fx)
}

/// Evaluates each sample directory against the training MIPs and writes
/// `report.txt` next to its samples. Returns `(model name, report)` pairs.
pub fn evaluate(cfg: &RunConfig, sample_dirs: &[PathBuf], log: &mut Log) -> Result<Vec<(String, MetricsReport)>> {
    if sample_dirs.is_empty() {
        return Err(Error::invalid("samples", "no sample directories given"));
    }
    let manifest = load_dataset(cfg)?;
    let fx = ensure_extractor(cfg, &manifest, log)?;
    let ae = load_ae(&cfg.paths.out_dir.join(AE_CHECKPOINT))?;
    check_generator(&ae.generator_hash, &manifest.generator_hash, "the autoencoder")?;
    let real = manifest.load_mips(Split::Train)?;
    let mut out = Vec::new();
    for dir in sample_dirs {
        let sm = SampleManifest::load(dir)?;
        check_generator(&sm.generator_hash, &manifest.generator_hash, &format!("samples in {}", dir.display()))?;
        let latents = sm
            .entries
            .iter()
            .map(|(p, c)| read_volume(p, *c).map(|v| v.slice(0)))
            .collect::<Result<Vec<_>>>()?;
        let images = ae.net.decode(&latents)?;
        let synth: Vec<(Image2D, ClassLabel)> = images.into_iter().zip(sm.entries.iter().map(|(_, c)| *c)).collect();
        let report = evaluate_sets(&real, &synth, &fx, &sm.config_hash)?;
        let path = dir.join(REPORT_FILE);
        let text = format!("# model = {}\n{}", sm.model, report.to_text());
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        log.line(&format!("stage=evaluate model={:?} report={}", sm.model, path.display()));
        out.push((sm.model, report));
    }
    Ok(out)
}

/// Renders MIPs: one volume file to `out`, or a per-class grid of the first
/// `n` dataset volumes (one row per class).
pub fn render_mip(cfg: &RunConfig, volume: Option<&Path>, n: usize, out: &Path, log: &mut Log) -> Result<Image2D> {
    let img = match volume {
        Some(p) => mip_render(&read_volume(p, ClassLabel::Class1)?, Axis::Z),
        None => {
            let manifest = load_dataset(cfg)?;
            let n = n.max(1);
            let mut rows = Vec::new();
            for c in ClassLabel::ALL {
                let picked: Vec<Image2D> = manifest
                    .entries
                    .iter()
                    .filter(|e| e.class_label == c)
                    .take(n)
                    .map(|e| manifest.load_volume(e).map(|v| mip_render(&v, Axis::Z)))
                    .collect::<Result<_>>()?;
                if picked.len() < n {
                    return Err(Error::InsufficientSamples(format!("class {} has {} volumes, {n} requested", c.number(), picked.len())));
                }
                rows.extend(picked);
            }
            tile(&rows, n)?
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    if out.extension().is_some_and(|e| e == "pgm") {
        img.write_pgm(out)?;
    } else {
        img.write_png(out)?;
    }
    log.line(&format!("stage=render-mip out={}", out.display()));
    Ok(img)
}

/// Result of a full ablation run.
pub struct AblationResult {
    pub reports: Vec<(String, MetricsReport)>,
    pub table: String,
}

/// Runs the three guidance settings end to end on one corpus, autoencoder
/// and extractor, and aggregates the overall rows into one table.
pub fn run_ablation(cfg: &RunConfig, log: &mut Log) -> Result<AblationResult> {
    gen_data(cfg, log)?;
    train_ae(cfg, log)?;
    let mut dirs = Vec::new();
    for c in cfg.ablation_matrix() {
        train_ldm(&c, log)?;
        let dir = samples_dir(&c);
        let classes: Vec<(ClassLabel, u64)> = ClassLabel::ALL.iter().map(|&k| (k, class_seed(c.sample.seed, k))).collect();
        sample(&c, &classes, c.sample.n_per_class, &dir, log)?;
        dirs.push(dir);
    }
    let reports = evaluate(cfg, &dirs, log)?;
    let table = comparison_table(&reports);
    let path = cfg.paths.out_dir.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(AblationResult { reports, table })
}

