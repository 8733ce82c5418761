//! Model, training and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// λ values of the prompt-tuned rate points.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0018, 0.0035, 0.013, 0.025, 0.0483];
/// λ the backbone is pretrained at.
pub const DEFAULT_LAMBDA0: f64 = 0.0067;

/// Architecture hyperparameters. Every tensor shape in the codec follows
/// from these values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels per encoder stage; the decoder mirrors them.
    pub widths: Vec<usize>,
    /// Transformer layers per stage.
    pub depths: Vec<usize>,
    /// Attention window extent `d` in tokens.
    pub window: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    /// Stride-2 convolutions between the latent and the hyperlatent.
    pub hyper_depth: usize,
    pub pad_multiple: usize,
    pub mlp_ratio: usize,
    pub head_dim: usize,
    /// Width of the encoder prompt generator's basic blocks.
    pub epg_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            widths: vec![48, 64, 80, 96],
            depths: vec![1, 1, 2, 1],
            window: 8,
            latent_channels: 96,
            hyper_channels: 64,
            hyper_depth: 2,
            pad_multiple: 64,
            mlp_ratio: 2,
            head_dim: 16,
            epg_channels: 16,
        }
    }

    /// Transformer-codec scale used for parameter accounting.
    pub fn paper_scale() -> Self {
        Self {
            widths: vec![128, 128, 128, 128],
            depths: vec![2, 4, 6, 2],
            window: 8,
            latent_channels: 192,
            hyper_channels: 128,
            hyper_depth: 2,
            pad_multiple: 64,
            mlp_ratio: 2,
            head_dim: 32,
            epg_channels: 16,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Decoder stage widths, stage 1 first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.widths.iter().rev().copied().collect()
    }

    pub fn decoder_depths(&self) -> Vec<usize> {
        self.depths.iter().rev().copied().collect()
    }

    pub fn heads(&self, channels: usize) -> usize {
        channels / self.head_dim
    }

    /// Total spatial downsampling from image to hyperlatent.
    pub fn total_downsample(&self) -> usize {
        1 << (self.stages() + self.hyper_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return fail(format!(
                "widths {:?} and depths {:?} must be nonempty and equal length",
                self.widths, self.depths
            ));
        }
        if self.depths.contains(&0) {
            return fail("every stage needs at least one layer".into());
        }
        if self.window < 4 || !self.window.is_multiple_of(4) {
            return fail(format!(
                "window {} must be a positive multiple of 4 (prompt windows are d/2, prompt shifts d/4)",
                self.window
            ));
        }
        if self.head_dim == 0 {
            return fail("head_dim must be positive".into());
        }
        for &c in self.widths.iter().chain([&self.latent_channels]) {
            if c == 0 || c % self.head_dim != 0 {
                return fail(format!(
                    "width {c} is not a multiple of head_dim {}",
                    self.head_dim
                ));
            }
        }
        if self.hyper_depth == 0 || self.hyper_channels == 0 || self.mlp_ratio == 0 {
            return fail("hyper_depth, hyper_channels and mlp_ratio must be positive".into());
        }
        let need = self.total_downsample().max(4 << self.stages());
        if self.pad_multiple == 0 || !self.pad_multiple.is_multiple_of(need) {
            return fail(format!(
                "pad_multiple {} must be a multiple of {need}",
                self.pad_multiple
            ));
        }
        if self.epg_channels == 0 {
            return fail("epg_channels must be positive".into());
        }
        Ok(())
    }

    /// Deterministic text form; the model id hashes it.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// FNV-1a of [`ModelConfig::canonical`].
    pub fn model_id(&self) -> u32 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda0: f64,
    pub lambdas: Vec<f64>,
    pub lr: f64,
    /// Learning rate for prompt tuning; falls back to `lr`.
    pub prompt_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub crop: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda0: DEFAULT_LAMBDA0,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            lr: 1e-4,
            prompt_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            stage1_steps: 3000,
            stage2_steps: 600,
            crop: 64,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) || self.lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("every λ must be positive".into()));
        }
        if self.lambdas.len() > 255 {
            return Err(Error::Config("at most 255 prompt sets".into()));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch_size and crop must be positive".into()));
        }
        if !(self.lr > 0.0) || self.prompt_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn stage2_lr(&self) -> f64 {
        self.prompt_lr.unwrap_or(self.lr)
    }

    pub fn lambda(&self, lambda_id: u8) -> Result<f64> {
        self.lambdas
            .get(lambda_id as usize)
            .copied()
            .ok_or_else(|| Error::Config(format!("no λ with id {lambda_id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: String,
    pub checkpoints: String,
    pub metrics: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data/train".into(),
            checkpoints: "checkpoints".into(),
            metrics: "metrics.csv".into(),
        }
    }
}

/// Everything a CLI invocation reads from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if !cfg.train.crop.is_multiple_of(cfg.model.pad_multiple) {
            return Err(Error::Config(format!(
                "crop {} is not a multiple of pad_multiple {}",
                cfg.train.crop, cfg.model.pad_multiple
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_crop_off_the_padding_grid() {
        let text = "[train]\ncrop = 32\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
        RunConfig::parse("[train]\ncrop = 128\n").unwrap();
    }

    #[test]
    fn rejects_bad_window() {
        let cfg = ModelConfig {
            window: 6,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unpadded_multiple() {
        let cfg = ModelConfig {
            pad_multiple: 32,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[model]\nwidths = [48]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(RunConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn canonical_round_trip_and_stable_id() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.model.model_id(), again.model.model_id());
        let other = ModelConfig {
            latent_channels: 64,
            ..ModelConfig::desk()
        };
        assert_ne!(other.model_id(), cfg.model.model_id());
    }

    #[test]
    fn fnv_reference() {
        assert_eq!(fnv1a(b""), 0x811c_9dc5);
        assert_eq!(fnv1a(b"a"), 0xe40c_292c);
    }

    #[test]
    fn paper_lambdas() {
        let t = TrainConfig::default();
        assert_eq!(t.lambda0, 0.0067);
        assert_eq!(t.lambdas, vec![0.0018, 0.0035, 0.013, 0.025, 0.0483]);
        assert_eq!(t.lr, 1e-4);
    }
}
