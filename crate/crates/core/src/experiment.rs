//! The synthetic toy experiment: scenario mixtures → latents → two-stage
//! training, with an optional frozen-gate variant for comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{StftConfig, StftProcessor};
use crate::codec::{Codec, CodecConfig};
use crate::flow::{train, FlowExample, Stage, TrainConfig, TrainError, TrainReport};
use crate::numerics::Rng;
use crate::scenarios::{
    build_training_sample, DatasetFile, LibrarySpec, SampleManifest, ScenarioError, SCHEMA_VERSION,
};
use crate::triattn::{ModelConfig, TriAttnDit};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataConfig {
    pub stage1_clips: usize,
    pub stage2_clips: usize,
    pub val_clips: usize,
    pub snr_db: (f64, f64),
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig { stage1_clips: 96, stage2_clips: 192, val_clips: 48, snr_db: (-5.0, 20.0), seed: 2024 }
    }
}

pub struct ToyData {
    pub stage1: Vec<FlowExample>,
    pub stage2: Vec<FlowExample>,
    /// Scenario mixtures (1..=3, round robin) held out for validation.
    pub val: Vec<FlowExample>,
}

impl ToyData {
    /// `(train, validation)` examples for a stage. Stage 1 holds out every
    /// fourth speech clip.
    pub fn stage_sets(&self, stage: Stage) -> (Vec<FlowExample>, Vec<FlowExample>) {
        match stage {
            Stage::One => {
                let (v, t): (Vec<_>, Vec<_>) = self.stage1.iter().enumerate().partition(|(i, _)| i % 4 == 0);
                (t.into_iter().map(|p| p.1.clone()).collect(), v.into_iter().map(|p| p.1.clone()).collect())
            }
            Stage::Two => (self.stage2.clone(), self.val.clone()),
        }
    }
}

impl ToyDataConfig {
    pub fn library(&self) -> LibrarySpec {
        LibrarySpec::new(240, 200, self.seed)
    }
}

/// Draws the manifests of a toy dataset. Each clip owns the rng stream
/// `(seed, split, index)`.
pub fn plan_toy_dataset(data: &ToyDataConfig, clip_len: usize) -> Result<DatasetFile, ExperimentError> {
    let spec = data.library();
    let lib = spec.build();
    let root = Rng::new(data.seed).derive_str("toy-data");
    let make = |split: &str, n: usize, pick: &(dyn Fn(&mut Rng, usize) -> u8 + Sync)| {
        let base = root.derive_str(split);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = base.derive(i as u64);
                let scenario = pick(&mut rng, i);
                let mut m = build_training_sample(scenario, &lib, &mut rng, data.snr_db, clip_len)?.manifest;
                m.index = i;
                Ok(m)
            })
            .collect::<Result<Vec<_>, ScenarioError>>()
    };
    Ok(DatasetFile {
        schema_version: SCHEMA_VERSION,
        library: spec.clone(),
        clip_len,
        stage1: make("stage1", data.stage1_clips, &|_, _| 0)?,
        stage2: make("stage2", data.stage2_clips, &|rng, _| 1 + rng.below(3) as u8)?,
        val: make("val", data.val_clips, &|_, i| 1 + (i % 3) as u8)?,
    })
}

/// Rebuilds mixtures from manifests, analyses them and encodes latents.
pub fn load_toy_data(
    file: &DatasetFile,
    model: &ModelConfig,
    stft: &StftConfig,
    codec: &Codec,
) -> Result<ToyData, ExperimentError> {
    if file.clip_len != stft.clip_len() {
        return Err(ExperimentError::Setup(format!(
            "dataset clips have {} samples, STFT setup expects {}",
            file.clip_len,
            stft.clip_len()
        )));
    }
    let proc = StftProcessor::new(stft).map_err(|e| ExperimentError::Setup(e.to_string()))?;
    let lib = file.library.build();
    let enc = crate::conditioners::EnvEncoder::new(model.d_env, model.env_seed);
    let convert = |items: &[SampleManifest]| {
        items
            .par_iter()
            .map(|m| {
                let mel = proc.mel_spectrogram(&m.reconstruct(&lib, file.clip_len)?);
                let x1 = codec.encode(&mel).map_err(|e| ExperimentError::Setup(e.to_string()))?;
                if x1.shape() != model.latent {
                    return Err(ExperimentError::Setup(format!(
                        "codec latent {:?} does not match model latent {:?}",
                        x1.shape(),
                        model.latent
                    )));
                }
                let cond = m.conditions(&enc, model.n_visual, model.d_vis, model.max_chars);
                Ok(FlowExample { x1, cond, scenario: m.scenario })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()
    };
    Ok(ToyData { stage1: convert(&file.stage1)?, stage2: convert(&file.stage2)?, val: convert(&file.val)? })
}

pub fn build_toy_data(
    data: &ToyDataConfig,
    model: &ModelConfig,
    stft: &StftConfig,
    codec: &Codec,
) -> Result<ToyData, ExperimentError> {
    load_toy_data(&plan_toy_dataset(data, stft.clip_len())?, model, stft, codec)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub stage1: TrainReport,
    pub stage2: TrainReport,
}

impl TwoStageReport {
    /// Final stage-2 validation loss relative to the zero-velocity baseline.
    pub fn relative_final(&self) -> f64 {
        self.stage2.final_val() / self.stage2.zero_baseline
    }
}

/// Stage 1 on speech-only clips (every fourth one held out for validation),
/// then stage 2 on scenario mixtures validated on `data.val`.
pub fn run_two_stage(
    model: &mut TriAttnDit<f32>,
    data: &ToyData,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    codec: Option<&CodecConfig>,
) -> Result<TwoStageReport, ExperimentError> {
    let (t1, v1) = data.stage_sets(Stage::One);
    let r1 = train(model, Stage::One, &t1, &v1, stage1, codec)?;
    let (t2, v2) = data.stage_sets(Stage::Two);
    let r2 = train(model, Stage::Two, &t2, &v2, stage2, codec)?;
    Ok(TwoStageReport { stage1: r1, stage2: r2 })
}

/// Desk defaults for the toy experiment.
pub fn desk_schedule(seed: u64) -> (TrainConfig, TrainConfig) {
    let base = TrainConfig { batch: 8, lr: 2e-3, weight_decay: 1e-2, seed, val_every: 50, ..Default::default() };
    (TrainConfig { steps: 150, ..base.clone() }, TrainConfig { steps: 400, seed: seed ^ 0xABCD, ..base })
}
