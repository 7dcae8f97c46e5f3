//! Run configuration: plain `key = value` sections (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::StftConfig;
use crate::codec::{CodecConfig, CodecError};
use crate::experiment::ToyDataConfig;
use crate::flow::{CfgScales, DropoutProbs, TrainConfig};
use crate::scenarios::{DESK_COUNTS, FULL_COUNTS};
use crate::triattn::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub patch_t: usize,
    pub patch_f: usize,
    pub seed: u64,
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub val_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub stage1_clips: usize,
    pub stage2_clips: usize,
    pub val_clips: usize,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub bench_counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub griffin_lim_iters: usize,
    pub s1: [f64; 3],
    pub s2: [f64; 3],
    pub s3: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub codec: CodecSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub sample: SampleSection,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            stft: StftConfig::desk(),
            codec: CodecSection { patch_t: 2, patch_f: 2, seed: 0, keep: 4 },
            train: TrainSection {
                stage1_steps: 150,
                stage2_steps: 400,
                batch: 8,
                lr: 2e-3,
                weight_decay: 1e-2,
                dropout: 0.1,
                val_every: 50,
                checkpoint_every: 0,
            },
            data: DataSection {
                stage1_clips: 96,
                stage2_clips: 192,
                val_clips: 48,
                snr_lo: -5.0,
                snr_hi: 20.0,
                bench_counts: DESK_COUNTS,
            },
            sample: SampleSection {
                steps: 50,
                griffin_lim_iters: 32,
                s1: [5.0, 0.5, 2.5],
                s2: [0.5, 2.5, 7.5],
                s3: [5.0, 2.5, 2.5],
            },
        }
    }

    pub fn full_scale() -> Self {
        let d = RunConfig::desk();
        RunConfig {
            model: ModelConfig::full_scale(),
            stft: StftConfig::full_scale(),
            codec: CodecSection { patch_t: 4, patch_f: 4, seed: 0, keep: 8 },
            train: TrainSection { lr: 5e-5, batch: 64, stage1_steps: 100_000, stage2_steps: 200_000, ..d.train },
            data: DataSection { bench_counts: FULL_COUNTS, ..d.data },
            ..d
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.stft.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (pt, pf) = (self.codec.patch_t, self.codec.patch_f);
        if pt == 0 || pf == 0 || !self.stft.frames.is_multiple_of(pt) || !self.stft.n_mels.is_multiple_of(pf) {
            return Err(ConfigError::Invalid("mel grid not divisible by codec patch".into()));
        }
        let latent = [self.codec.keep, self.stft.frames / pt, self.stft.n_mels / pf];
        if latent != self.model.latent {
            return Err(ConfigError::Invalid(format!(
                "codec produces latents {latent:?} but the model expects {:?}",
                self.model.latent
            )));
        }
        if !(0.0..1.0).contains(&self.train.dropout) || self.train.batch == 0 {
            return Err(ConfigError::Invalid("dropout must be in [0, 1) and batch positive".into()));
        }
        if self.data.snr_lo.is_nan() || self.data.snr_hi.is_nan() || self.data.snr_lo > self.data.snr_hi {
            return Err(ConfigError::Invalid("snr_lo > snr_hi".into()));
        }
        for s in [self.sample.s1, self.sample.s2, self.sample.s3] {
            CfgScales::new(s[0], s[1], s[2]).map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn codec_config(&self) -> Result<CodecConfig, ConfigError> {
        let c = &self.codec;
        Ok(CodecConfig::calibrated(c.patch_t, c.patch_f, c.seed, c.keep, &self.stft)?)
    }

    pub fn preset(&self, scenario: u8) -> Option<CfgScales> {
        let s = match scenario {
            1 => self.sample.s1,
            2 => self.sample.s2,
            3 => self.sample.s3,
            _ => return None,
        };
        Some(CfgScales { on: s[0], off: s[1], sp: s[2] })
    }

    pub fn toy_data(&self) -> ToyDataConfig {
        ToyDataConfig {
            stage1_clips: self.data.stage1_clips,
            stage2_clips: self.data.stage2_clips,
            val_clips: self.data.val_clips,
            snr_db: (self.data.snr_lo, self.data.snr_hi),
            seed: self.seed.wrapping_add(2024),
        }
    }

    /// Training settings for one stage (1 or 2).
    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: if stage == 1 { t.stage1_steps } else { t.stage2_steps },
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            dropout: DropoutProbs::uniform(t.dropout),
            seed: if stage == 1 { self.seed } else { self.seed ^ 0xABCD },
            val_every: t.val_every,
            checkpoint_every: t.checkpoint_every,
            out_dir: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse_and_match_builtins() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&root.join("desk.toml")).unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::load(&root.join("full_scale.toml")).unwrap(), RunConfig::full_scale());
    }

    #[test]
    fn roundtrip_and_hash() {
        let c = RunConfig::desk();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.preset(2), CfgScales::preset(2));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(RunConfig::parse("seed = 1"), Err(ConfigError::Parse(_))));
        let mut c = RunConfig::desk();
        c.codec.keep = 3;
        assert!(matches!(RunConfig::parse(&c.to_toml()), Err(ConfigError::Invalid(_))));
        let extra = format!("{}\n[extra]\nx = 1\n", RunConfig::desk().to_toml());
        assert!(RunConfig::parse(&extra).is_err());
    }

    #[test]
    fn desk_codec_matches_model() {
        let c = RunConfig::desk();
        let codec = crate::codec::Codec::new(c.codec_config().unwrap()).unwrap();
        assert_eq!(codec.latent_shape(c.stft.frames, c.stft.n_mels).unwrap(), c.model.latent);
    }
}
