//! Run configuration: model widths, per-stage optimisation settings and
//! ablation switches, read from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{AdapterSpec, EncoderContext};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// Overrides `train.seed` when set.
pub const SEED_ENV: &str = "PROSO_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Word embedding width.
    pub d: usize,
    /// Utterance vector width.
    pub r: usize,
    pub context: EncoderContext,
    /// Per-direction hidden width of both acoustic predictors; `d / 2` when
    /// unset, so each bidirectional layer outputs `d` columns.
    pub predictor_hidden: Option<usize>,
    pub predictor_layers: usize,
    pub classifier_hidden: usize,
    /// Width of the additive attention projection in the discourse model.
    pub attention_dim: usize,
    /// z-normalise pitch and energy with corpus statistics.
    pub normalize_acoustics: bool,
    pub encoder_adapter: Option<AdapterSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            r: 32,
            context: EncoderContext::Recurrent,
            predictor_hidden: None,
            predictor_layers: 2,
            classifier_hidden: 32,
            attention_dim: 32,
            normalize_acoustics: false,
            encoder_adapter: None,
        }
    }
}

impl ModelConfig {
    pub fn predictor_hidden(&self) -> usize {
        self.predictor_hidden.unwrap_or((self.d / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("r", self.r),
            ("predictor_hidden", self.predictor_hidden()),
            ("predictor_layers", self.predictor_layers),
            ("classifier_hidden", self.classifier_hidden),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.r.is_multiple_of(2) {
            return Err(Error::Config(
                "model.r must be even (the discourse context network splits it over two directions)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Table-1 style ablations. Each removes one input path from the
/// utterance-level model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Replace the length-regulated word features with zeros.
    pub no_word: bool,
    /// Replace the phoneme and tone embeddings with zeros.
    pub no_phn: bool,
    /// Predict LPE from the fused phoneme features alone.
    pub no_pe: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 3] = ["no_word", "no_phn", "no_pe"];

    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for flag in flags {
            match flag.as_ref() {
                "no_word" => a.no_word = true,
                "no_phn" => a.no_phn = true,
                "no_pe" => a.no_pe = true,
                other => {
                    return Err(Error::Unknown {
                        what: "ablation flag",
                        value: other.to_string(),
                        known: Self::FLAGS.join(", "),
                    })
                }
            }
        }
        Ok(a)
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let on = [self.no_word, self.no_phn, self.no_pe];
        Self::FLAGS
            .iter()
            .zip(on)
            .filter_map(|(f, b)| b.then_some(*f))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_pitch: f64,
    pub lambda_energy: f64,
    pub lambda_lpe: f64,
    pub lambda_gse: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_rest: 1e-3,
            batch_size: 16,
            epochs: 40,
            lambda_pitch: 0.05,
            lambda_energy: 0.0025,
            lambda_lpe: 1.0,
            lambda_gse: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_lpe: f64,
    pub lambda_gse: f64,
    /// Compute the frozen stage-1 outputs once instead of every epoch.
    pub cache_stage1: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 32,
            epochs: 40,
            lambda_lpe: 1.0,
            lambda_gse: 1.0,
            cache_stage1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Held-out fraction of discourses used by `split`.
    pub test_fraction: f64,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            grad_clip: None,
            adam: AdamConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s1 = &self.train.stage1;
        let s2 = &self.train.stage2;
        let rates = [
            ("train.stage1.lr_encoder", s1.lr_encoder),
            ("train.stage1.lr_rest", s1.lr_rest),
            ("train.stage2.lr", s2.lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if s1.batch_size == 0 || s2.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let lambdas = [
            s1.lambda_pitch,
            s1.lambda_energy,
            s1.lambda_lpe,
            s1.lambda_gse,
            s2.lambda_lpe,
            s2.lambda_gse,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        let f = self.train.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(
                "train.test_fraction must lie in (0, 1)".into(),
            ));
        }
        if let Some(c) = self.train.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = Config::default();
        let s1 = c.train.stage1;
        assert_eq!((s1.batch_size, s1.epochs), (16, 40));
        assert_eq!((s1.lr_encoder, s1.lr_rest), (1e-5, 1e-3));
        assert_eq!(
            (
                s1.lambda_pitch,
                s1.lambda_energy,
                s1.lambda_lpe,
                s1.lambda_gse
            ),
            (0.05, 0.0025, 1.0, 1.0)
        );
        let s2 = c.train.stage2;
        assert_eq!((s2.batch_size, s2.epochs, s2.lr), (32, 40, 2e-4));
        assert_eq!((s2.lambda_lpe, s2.lambda_gse), (1.0, 1.0));
        let a = c.train.adam;
        assert_eq!((a.beta1, a.beta2, a.eps), (0.9, 0.999, 1e-8));
        assert_eq!(c.ablation, Ablation::default());
    }

    #[test]
    fn toml_sections_and_round_trip() {
        let text = "[model]\nd = 16\nr = 8\n\n[train]\nseed = 7\n\n[train.stage1]\nepochs = 3\n\n[train.stage2]\ncache_stage1 = true\n\n[ablation]\nno_word = true\n";
        let c = Config::from_toml_str(text).unwrap();
        assert_eq!(
            (c.model.d, c.model.r, c.model.predictor_hidden()),
            (16, 8, 8)
        );
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.stage1.epochs, 3);
        assert_eq!(c.train.stage1.batch_size, 16);
        assert!(c.train.stage2.cache_stage1);
        assert_eq!(c.ablation.flags(), ["no_word"]);
        let again = Config::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("[train.stage1]\nlr_rest = 0.0\n").is_err());
        assert!(Config::from_toml_str("[model]\nr = 5\n").is_err());
        assert!(Config::from_toml_str("[ablation]\nno_tone = true\n").is_err());
        assert!(Config::from_toml_str("[train]\ntest_fraction = 1.0\n").is_err());
    }

    #[test]
    fn ablation_flags() {
        let a = Ablation::from_flags(&["no_pe", "no_phn"]).unwrap();
        assert!(a.no_pe && a.no_phn && !a.no_word);
        assert!(matches!(
            Ablation::from_flags(&["no_spk"]),
            Err(Error::Unknown { .. })
        ));
        assert_eq!(
            Ablation::from_flags::<&str>(&[]).unwrap(),
            Ablation::default()
        );
    }
}
