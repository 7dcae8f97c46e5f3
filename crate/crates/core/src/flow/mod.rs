//! Flow matching: interpolation paths, guided velocities, Euler sampling and
//! training.

pub mod checkpoint;
mod generate;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointManifest};
pub use generate::{generate, Generated};
pub use train::{
    dropout_conditions, fm_loss, fm_loss_and_grads, train, AdamW, DropoutProbs, FlowBatch, FlowExample, Stage,
    TrainConfig, TrainError, TrainReport, validation_batch, zero_model_loss,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::conditioners::{ConditionSet, DropFlags, EnvEncoder};
use crate::numerics::{NumericsError, Result, Rng};
use crate::triattn::TriAttnDit;

/// `(1 − t)·x0 + t·x1`
pub fn interpolate(x0: &Latent, x1: &Latent, t: f64) -> Latent {
    assert_eq!(x0.shape(), x1.shape(), "interpolate shapes");
    let data = x0
        .data
        .iter()
        .zip(&x1.data)
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    Latent::new(x0.channels, x0.time, x0.freq, data)
}

/// Guidance scales `(λ_on, λ_off, λ_sp)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgScales {
    pub on: f64,
    pub off: f64,
    pub sp: f64,
}

impl CfgScales {
    pub const ZERO: CfgScales = CfgScales { on: 0.0, off: 0.0, sp: 0.0 };

    pub fn new(on: f64, off: f64, sp: f64) -> std::result::Result<Self, String> {
        let s = CfgScales { on, off, sp };
        s.validate()?;
        Ok(s)
    }

    /// Scenario presets: 1 = on-env + off-speech, 2 = on-speech + off-env,
    /// 3 = on-env + off-env + off-speech.
    pub fn preset(scenario: u8) -> Option<Self> {
        match scenario {
            1 => Some(CfgScales { on: 5.0, off: 0.5, sp: 2.5 }),
            2 => Some(CfgScales { on: 0.5, off: 2.5, sp: 7.5 }),
            3 => Some(CfgScales { on: 5.0, off: 2.5, sp: 2.5 }),
            _ => None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (n, v) in [("on", self.on), ("off", self.off), ("sp", self.sp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("guidance scale {n} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Parses `"λon,λoff,λsp"`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad scale {p:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts.as_slice() {
            [a, b, c] => CfgScales::new(*a, *b, *c),
            _ => Err(format!("expected three comma-separated scales, got {s:?}")),
        }
    }
}

/// Anything that predicts a velocity for `(x_t, t, conditions)`.
pub trait VelocityModel: Sync {
    fn velocity(&self, x: &Latent, t: f64, cond: &ConditionSet) -> Result<Latent>;
    /// Encoder used to build the EMPTY caption for null branches.
    fn env_encoder(&self) -> &EnvEncoder;
}

impl VelocityModel for TriAttnDit<f32> {
    fn velocity(&self, x: &Latent, t: f64, cond: &ConditionSet) -> Result<Latent> {
        TriAttnDit::velocity(self, x, t, cond)
    }

    fn env_encoder(&self) -> &EnvEncoder {
        &self.env
    }
}

/// The five condition sets of one guided step: all text, only on, only
/// off, only speech, no text. Visual is never dropped here.
pub fn cfg_branches(enc: &EnvEncoder, cond: &ConditionSet) -> [ConditionSet; 5] {
    let drop = |on, off, sp| cond.with_dropped(enc, DropFlags { on, off, sp, vis: false });
    [
        cond.clone(),
        drop(false, true, true),
        drop(true, false, true),
        drop(true, true, false),
        drop(true, true, true),
    ]
}

/// `Ṽ = V(all) + Σ_i λ_i (V(only i) − V(none))`, five model calls.
pub fn cfg_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    x: &Latent,
    t: f64,
    cond: &ConditionSet,
    scales: CfgScales,
) -> Result<Latent> {
    scales.validate().map_err(NumericsError::Invalid)?;
    let branches = cfg_branches(model.env_encoder(), cond);
    let v: Vec<Latent> = branches
        .par_iter()
        .map(|c| model.velocity(x, t, c))
        .collect::<Result<_>>()?;
    let lambdas = [scales.on, scales.off, scales.sp];
    let data = (0..x.len())
        .map(|k| {
            let none = v[4].data[k] as f64;
            let mut acc = v[0].data[k] as f64;
            for (i, &l) in lambdas.iter().enumerate() {
                acc += l * (v[i + 1].data[k] as f64 - none);
            }
            acc as f32
        })
        .collect();
    Ok(Latent::new(x.channels, x.time, x.freq, data))
}

/// Explicit Euler from `t = 0` to `1` over `steps` uniform steps.
pub fn euler_integrate(
    x0: Latent,
    steps: usize,
    mut field: impl FnMut(&Latent, f64) -> Result<Latent>,
) -> Result<Latent> {
    Ok(euler_trajectory(x0, steps, &mut field)?.pop().expect("at least the start point"))
}

/// Every intermediate state, `steps + 1` entries.
pub fn euler_trajectory(
    x0: Latent,
    steps: usize,
    mut field: impl FnMut(&Latent, f64) -> Result<Latent>,
) -> Result<Vec<Latent>> {
    if steps == 0 {
        return Err(NumericsError::Invalid("euler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut traj = Vec::with_capacity(steps + 1);
    let mut x = x0;
    for k in 0..steps {
        let v = field(&x, k as f64 * dt)?;
        let next = x
            .data
            .iter()
            .zip(&v.data)
            .map(|(&a, &b)| (a as f64 + dt * b as f64) as f32)
            .collect();
        let nx = Latent::new(x.channels, x.time, x.freq, next);
        traj.push(std::mem::replace(&mut x, nx));
    }
    traj.push(x);
    Ok(traj)
}

/// Seeded standard-normal start, guided Euler integration.
pub fn euler_sample<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &ConditionSet,
    scales: CfgScales,
    steps: usize,
    seed: u64,
    shape: [usize; 3],
) -> Result<Latent> {
    let x0 = Latent::randn(shape, &mut Rng::new(seed).derive_str("prior"));
    euler_integrate(x0, steps, |x, t| cfg_velocity(model, x, t, cond, scales))
}
