use super::{euler_sample, CfgScales, VelocityModel};
use crate::audio::{griffin_lim, MelSpec, StftProcessor, Waveform};
use crate::codec::Codec;
use crate::conditioners::ConditionSet;
use crate::numerics::{NumericsError, Result};

#[derive(Clone, Debug)]
pub struct Generated {
    pub waveform: Waveform,
    pub mel: MelSpec,
}

/// Prior sample → guided Euler → codec decode → Griffin-Lim, trimmed or
/// padded to one clip.
#[allow(clippy::too_many_arguments)]
pub fn generate<M: VelocityModel + ?Sized>(
    model: &M,
    codec: &Codec,
    proc: &StftProcessor,
    cond: &ConditionSet,
    scales: CfgScales,
    steps: usize,
    seed: u64,
    gl_iters: usize,
) -> Result<Generated> {
    let shape = codec
        .latent_shape(proc.cfg.frames, proc.cfg.n_mels)
        .map_err(|e| NumericsError::Invalid(e.to_string()))?;
    let z = euler_sample(model, cond, scales, steps, seed, shape)?;
    let mel = codec.decode(&z).map_err(|e| NumericsError::Invalid(e.to_string()))?;
    let waveform = griffin_lim(&mel, proc, gl_iters).fix_length_to(proc.cfg.clip_len());
    Ok(Generated { waveform, mel })
}
