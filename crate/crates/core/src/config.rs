//! Run configuration, stored as TOML with one table per concern. Unknown tables
//! and keys are rejected; serialization is canonical so that
//! `parse(serialize(c)) == c`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeArch, LossWeights};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::transformer::TransformerArch;

/// Which stage-1 model to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Svqvae,
    Svqgan,
    BaselineVqvae,
    BaselineVqgan,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineVqvae,
        Variant::Svqvae,
        Variant::BaselineVqgan,
        Variant::Svqgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Svqvae => "svqvae",
            Variant::Svqgan => "svqgan",
            Variant::BaselineVqvae => "baseline-vqvae",
            Variant::BaselineVqgan => "baseline-vqgan",
        }
    }

    /// Row label in the comparison table (stage-1 model + Transformer).
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::Svqvae => "sVQVAE-T",
            Variant::Svqgan => "sVQGAN-T",
            Variant::BaselineVqvae => "VQVAE-T",
            Variant::BaselineVqgan => "VQGAN-T",
        }
    }

    pub fn is_coupled(self) -> bool {
        matches!(self, Variant::Svqvae | Variant::Svqgan)
    }

    pub fn uses_gan(self) -> bool {
        matches!(self, Variant::Svqgan | Variant::BaselineVqgan)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (svqvae | svqgan | baseline-vqvae | baseline-vqgan)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [model]
    pub variant: Variant,
    pub image_size: usize,
    pub num_classes: usize,
    pub latent_size: usize,
    pub channels: usize,
    pub code_dim: usize,
    pub k_image: usize,
    pub k_semantic: usize,
    pub lambda: f64,
    pub beta: f64,
    pub w_gan: f64,
    /// Fraction of stage-1 steps before the adversarial terms switch on.
    pub gan_warmup: f64,
    pub disc_channels: usize,
    // [transformer]
    pub ar_width: usize,
    pub ar_layers: usize,
    pub ar_heads: usize,
    // [train]
    pub ae_steps: usize,
    pub ar_steps: usize,
    pub batch_size: usize,
    pub ae_lr: f64,
    pub ar_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub log_every: usize,
    pub grid_every: usize,
    // [data]
    pub n_samples: usize,
    pub n_eval: usize,
    pub data_seed: u64,
    // [sample]
    pub temperature: f64,
    pub top_k: usize,
    pub samples_per_map: usize,
    // [run]
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Svqvae,
            image_size: 32,
            num_classes: crate::data::NUM_CLASSES,
            latent_size: 8,
            channels: 32,
            code_dim: 64,
            k_image: 512,
            k_semantic: 64,
            lambda: 0.1,
            beta: 0.25,
            w_gan: 0.1,
            gan_warmup: 0.25,
            disc_channels: 32,
            ar_width: 128,
            ar_layers: 4,
            ar_heads: 4,
            ae_steps: 12000,
            ar_steps: 3000,
            batch_size: 8,
            ae_lr: 2e-4,
            ar_lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            log_every: 100,
            grid_every: 1000,
            n_samples: 2000,
            n_eval: 200,
            data_seed: 0,
            temperature: 1.0,
            top_k: 64,
            samples_per_map: 3,
            seed: 0,
            out_dir: "runs".to_string(),
        }
    }
}

impl RunConfig {
    pub fn arch(&self) -> AeArch {
        AeArch {
            image_size: self.image_size,
            num_classes: self.num_classes,
            latent_size: self.latent_size,
            channels: self.channels,
            code_dim: self.code_dim,
            k_image: self.k_image,
            k_semantic: self.k_semantic,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
            w_gan: self.w_gan,
        }
    }

    pub fn transformer_arch(&self) -> TransformerArch {
        TransformerArch {
            k_semantic: self.k_semantic,
            k_image: self.k_image,
            semantic_shape: (self.latent_size, self.latent_size),
            image_shape: (self.latent_size, self.latent_size),
            width: self.ar_width,
            layers: self.ar_layers,
            heads: self.ar_heads,
        }
    }

    pub fn ae_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.ae_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn ar_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.ar_lr,
            ..self.ae_adam()
        }
    }

    /// Step at which the adversarial terms activate.
    pub fn gan_start(&self) -> usize {
        (self.gan_warmup * self.ae_steps as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.transformer_arch().validate()?;
        let positive = [
            ("disc_channels", self.disc_channels),
            ("batch_size", self.batch_size),
            ("n_samples", self.n_samples),
            ("log_every", self.log_every),
            ("grid_every", self.grid_every),
            ("top_k", self.top_k),
            ("samples_per_map", self.samples_per_map),
            ("ar_layers", self.ar_layers),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [("lambda", self.lambda), ("beta", self.beta), ("w_gan", self.w_gan)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{k}` must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gan_warmup) {
            return Err(Error::config("`gan_warmup` must lie in [0, 1]"));
        }
        for (k, v) in [("ae_lr", self.ae_lr), ("ar_lr", self.ar_lr), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{k}` must be finite and > 0, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("`{k}` must lie in [0, 1)")));
            }
        }
        if self.n_eval >= self.n_samples {
            return Err(Error::config("`n_eval` must be smaller than `n_samples`"));
        }
        Ok(())
    }

    /// Canonical TOML text; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> Result<String> {
        toml::to_string(&ConfigFile::from(self)).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses a config; keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg = RunConfig::from(file);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_file(path, self.serialize()?.as_bytes())
    }
}

// ---- file layout ------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    variant: Variant,
    image_size: usize,
    num_classes: usize,
    latent_size: usize,
    channels: usize,
    code_dim: usize,
    k_image: usize,
    k_semantic: usize,
    lambda: f64,
    beta: f64,
    w_gan: f64,
    gan_warmup: f64,
    disc_channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TransformerSection {
    width: usize,
    layers: usize,
    heads: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    ae_steps: usize,
    ar_steps: usize,
    batch_size: usize,
    ae_lr: f64,
    ar_lr: f64,
    beta1: f64,
    beta2: f64,
    log_every: usize,
    grid_every: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    n_samples: usize,
    n_eval: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SampleSection {
    temperature: f64,
    top_k: usize,
    samples_per_map: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    seed: u64,
    out_dir: String,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    model: ModelSection,
    transformer: TransformerSection,
    train: TrainSection,
    data: DataSection,
    sample: SampleSection,
    run: RunSection,
}

macro_rules! section_default {
    ($($ty:ident => $field:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                ConfigFile::from(&RunConfig::default()).$field
            }
        }
    )*};
}

section_default!(
    ModelSection => model,
    TransformerSection => transformer,
    TrainSection => train,
    DataSection => data,
    SampleSection => sample,
    RunSection => run
);

impl From<&RunConfig> for ConfigFile {
    fn from(c: &RunConfig) -> Self {
        ConfigFile {
            model: ModelSection {
                variant: c.variant,
                image_size: c.image_size,
                num_classes: c.num_classes,
                latent_size: c.latent_size,
                channels: c.channels,
                code_dim: c.code_dim,
                k_image: c.k_image,
                k_semantic: c.k_semantic,
                lambda: c.lambda,
                beta: c.beta,
                w_gan: c.w_gan,
                gan_warmup: c.gan_warmup,
                disc_channels: c.disc_channels,
            },
            transformer: TransformerSection {
                width: c.ar_width,
                layers: c.ar_layers,
                heads: c.ar_heads,
            },
            train: TrainSection {
                ae_steps: c.ae_steps,
                ar_steps: c.ar_steps,
                batch_size: c.batch_size,
                ae_lr: c.ae_lr,
                ar_lr: c.ar_lr,
                beta1: c.beta1,
                beta2: c.beta2,
                log_every: c.log_every,
                grid_every: c.grid_every,
            },
            data: DataSection {
                n_samples: c.n_samples,
                n_eval: c.n_eval,
                seed: c.data_seed,
            },
            sample: SampleSection {
                temperature: c.temperature,
                top_k: c.top_k,
                samples_per_map: c.samples_per_map,
            },
            run: RunSection {
                seed: c.seed,
                out_dir: c.out_dir.clone(),
            },
        }
    }
}

impl From<ConfigFile> for RunConfig {
    fn from(f: ConfigFile) -> Self {
        let ConfigFile {
            model: m,
            transformer: t,
            train: tr,
            data: d,
            sample: s,
            run: r,
        } = f;
        RunConfig {
            variant: m.variant,
            image_size: m.image_size,
            num_classes: m.num_classes,
            latent_size: m.latent_size,
            channels: m.channels,
            code_dim: m.code_dim,
            k_image: m.k_image,
            k_semantic: m.k_semantic,
            lambda: m.lambda,
            beta: m.beta,
            w_gan: m.w_gan,
            gan_warmup: m.gan_warmup,
            disc_channels: m.disc_channels,
            ar_width: t.width,
            ar_layers: t.layers,
            ar_heads: t.heads,
            ae_steps: tr.ae_steps,
            ar_steps: tr.ar_steps,
            batch_size: tr.batch_size,
            ae_lr: tr.ae_lr,
            ar_lr: tr.ar_lr,
            beta1: tr.beta1,
            beta2: tr.beta2,
            log_every: tr.log_every,
            grid_every: tr.grid_every,
            n_samples: d.n_samples,
            n_eval: d.n_eval,
            data_seed: d.seed,
            temperature: s.temperature,
            top_k: s.top_k,
            samples_per_map: s.samples_per_map,
            seed: r.seed,
            out_dir: r.out_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig {
            variant: Variant::BaselineVqgan,
            lambda: 0.01,
            ae_lr: 1.0e-3 / 3.0,
            out_dir: "some dir/x".into(),
            ..RunConfig::default()
        };
        let text = c.serialize().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().serialize().unwrap(), text);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::parse("[model]\nlamda = 0.1\n").is_err());
        assert!(RunConfig::parse("[modle]\n").is_err());
        assert!(RunConfig::parse("lambda = 0.1\n").is_err());
        assert!(RunConfig::parse("[model]\nlambda = -1\n").is_err());
        assert!(RunConfig::parse("[model]\nlambda = x\n").is_err());
        assert!(RunConfig::parse("[model]\nvariant = \"vqvae\"\n").is_err());
        assert!(RunConfig::parse("[model]\nvariant = svqvae\n").is_err());
        assert!(RunConfig::parse("[model]\nlambda = 1\nlambda = 2\n").is_err());
        assert!(RunConfig::parse("[model]\nlatent_size = 7\n").is_err());
        let c = RunConfig::parse("# comment\n[model]\nlambda = 1.0  # trailing\nvariant = \"baseline-vqgan\"\n").unwrap();
        assert_eq!((c.lambda, c.variant), (1.0, Variant::BaselineVqgan));
    }

    #[test]
    fn desk_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.transformer_arch().seq_len(), 128);
        assert_eq!((c.k_image, c.k_semantic, c.code_dim), (512, 64, 64));
        assert_eq!(c.gan_start(), 3000);
    }
}
