//! Run configuration: one TOML file with sections, plus `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anatomy::PCA_COMPONENTS;
use crate::autoencoder::AeConfig;
use crate::descriptors::{shape_vector_len, DEFAULT_ZERNIKE_ORDER};
use crate::diffusion::{EpsConfig, GuidanceFlags, LdmConfig, LEVELS};
use crate::error::{Error, Result};
use crate::metrics::ExtractorConfig;
use crate::phantom::{train_count, PhantomSpec};
use crate::util::short_digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("run/data"),
            out_dir: PathBuf::from("run/out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_per_class: usize,
    pub seed: u64,
    pub image_size: usize,
    pub depth: usize,
    pub tube_sigma: f64,
    pub jitter_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PhantomSpec::default();
        DataSection {
            n_per_class: 108,
            seed: 0,
            image_size: p.image_size,
            depth: p.depth,
            tube_sigma: p.tube_sigma,
            jitter_amplitude: p.jitter_amplitude,
            noise_sigma: p.noise_sigma,
        }
    }
}

impl DataSection {
    pub fn template(&self) -> PhantomSpec {
        PhantomSpec {
            image_size: self.image_size,
            depth: self.depth,
            tube_sigma: self.tube_sigma,
            jitter_amplitude: self.jitter_amplitude,
            noise_sigma: self.noise_sigma,
            ..PhantomSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub channels_hi: usize,
    pub channels_lo: usize,
    pub heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AeSection {
    fn default() -> Self {
        let c = AeConfig::default();
        AeSection {
            channels_hi: c.channels_hi,
            channels_lo: c.channels_lo,
            heads: c.heads,
            lr: c.lr,
            batch_size: c.batch_size,
            steps: c.steps,
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub scale_betas: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub emb_dim: usize,
    pub anatomy_heads: usize,
    pub shape_guidance: bool,
    pub anatomy_guidance: bool,
    pub zernike_order: usize,
    /// Optimizer steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for LdmSection {
    fn default() -> Self {
        let l = LdmConfig::default();
        let e = EpsConfig::default();
        LdmSection {
            timesteps: l.timesteps,
            beta_start: l.beta_start,
            beta_end: l.beta_end,
            scale_betas: l.scale_betas,
            lr: l.lr,
            batch_size: l.batch_size,
            steps: l.steps,
            seed: l.seed,
            channels: e.channels.to_vec(),
            heads: e.heads,
            emb_dim: e.emb_dim,
            anatomy_heads: e.anatomy_heads,
            shape_guidance: true,
            anatomy_guidance: true,
            zernike_order: DEFAULT_ZERNIKE_ORDER,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub feature_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        let c = ExtractorConfig::default();
        ExtractorSection {
            feature_dim: c.feature_dim,
            lr: c.lr,
            batch_size: c.batch_size,
            steps: c.steps,
            min_accuracy: c.min_accuracy,
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n_per_class: usize,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n_per_class: 20,
            seed: 0,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub data: DataSection,
    pub ae: AeSection,
    pub ldm: LdmSection,
    pub extractor: ExtractorSection,
    pub sample: SampleSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a scalar override value: TOML literal if it parses, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Applies `section.key=value` overrides on the parsed document before
    /// typing it, so overrides go through the same unknown-key check.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key {key:?} is not section.field")))?;
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{section:?} is not a section")))?;
            table.insert(field.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("config file {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of every section except `paths`, so relocating a run keeps its hash.
    pub fn config_hash(&self) -> String {
        let hashed = RunConfig {
            paths: PathsSection::default(),
            ..self.clone()
        };
        short_digest(hashed.to_toml().as_bytes())
    }

    pub fn guidance(&self) -> GuidanceFlags {
        GuidanceFlags {
            shape_on: self.ldm.shape_guidance,
            anatomy_on: self.ldm.anatomy_guidance,
        }
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            image_size: self.data.image_size,
            channels_hi: self.ae.channels_hi,
            channels_lo: self.ae.channels_lo,
            heads: self.ae.heads,
            lr: self.ae.lr,
            batch_size: self.ae.batch_size,
            steps: self.ae.steps,
            seed: self.ae.seed,
        }
    }

    pub fn ldm_config(&self) -> LdmConfig {
        LdmConfig {
            timesteps: self.ldm.timesteps,
            beta_start: self.ldm.beta_start,
            beta_end: self.ldm.beta_end,
            scale_betas: self.ldm.scale_betas,
            lr: self.ldm.lr,
            batch_size: self.ldm.batch_size,
            steps: self.ldm.steps,
            seed: self.ldm.seed,
        }
    }

    pub fn eps_config(&self) -> Result<EpsConfig> {
        let channels: [usize; LEVELS] = self.ldm.channels.as_slice().try_into().map_err(|_| {
            Error::invalid("ldm.channels", format!("expected {LEVELS} entries, got {}", self.ldm.channels.len()))
        })?;
        Ok(EpsConfig {
            latent_size: self.ae_config().latent_size(),
            channels,
            heads: self.ldm.heads,
            emb_dim: self.ldm.emb_dim,
            shape_len: shape_vector_len(self.ldm.zernike_order),
            anatomy_heads: self.ldm.anatomy_heads,
            guidance: self.guidance(),
            seed: self.ldm.seed,
        })
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            image_size: self.data.image_size,
            feature_dim: self.extractor.feature_dim,
            lr: self.extractor.lr,
            batch_size: self.extractor.batch_size,
            steps: self.extractor.steps,
            min_accuracy: self.extractor.min_accuracy,
            seed: self.extractor.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if train_count(self.data.n_per_class) < PCA_COMPONENTS + 1 {
            return Err(Error::invalid(
                "data.n_per_class",
                format!("class-wise PCA needs {} training images per class", PCA_COMPONENTS + 1),
            ));
        }
        self.data.template().validate()?;
        self.ae_config().validate()?;
        self.ldm_config().validate()?;
        self.eps_config()?.validate()?;
        if self.extractor.feature_dim == 0 {
            return Err(Error::invalid("extractor.feature_dim", "must be positive"));
        }
        if self.sample.batch == 0 {
            return Err(Error::invalid("sample.batch", "must be positive"));
        }
        Ok(())
    }

    /// Three configs identical except for the guidance flags:
    /// (off, off), (on, off), (on, on).
    pub fn ablation_matrix(&self) -> [RunConfig; 3] {
        [GuidanceFlags::NONE, GuidanceFlags::SHAPE, GuidanceFlags::FULL].map(|g| {
            let mut c = self.clone();
            c.ldm.shape_guidance = g.shape_on;
            c.ldm.anatomy_guidance = g.anatomy_on;
            c
        })
    }
}

/// File-name slug for a guidance setting.
pub fn guidance_slug(g: GuidanceFlags) -> &'static str {
    match (g.shape_on, g.anatomy_on) {
        (false, false) => "ldm",
        (true, false) => "ldm-shape",
        (true, true) => "ldm-shape-anatomy",
        (false, true) => "ldm-anatomy",
    }
}
