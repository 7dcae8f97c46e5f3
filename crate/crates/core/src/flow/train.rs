use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{save_checkpoint, CheckpointError};
use super::interpolate;
use crate::codec::{CodecConfig, Latent};
use crate::conditioners::{ConditionSet, DropFlags, EnvEncoder};
use crate::numerics::{NumericsError, ParamStore, Rng, Tape};
use crate::triattn::TriAttnDit;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at stage {stage} step {step} (last finite loss {last:?})")]
    NonFinite { stage: u8, step: usize, last: Option<f64> },
    #[error("stage 1 example {0} carries a non-empty environmental caption")]
    StageOneCaption(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Clean latent with its conditions.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub x1: Latent,
    pub cond: ConditionSet,
    /// 0 for speech-only stage-1 data, 1..=3 otherwise.
    pub scenario: u8,
}

#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x1: Vec<Latent>,
    pub x0: Vec<Latent>,
    pub t: Vec<f64>,
    pub cond: Vec<ConditionSet>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs {
    pub on: f64,
    pub off: f64,
    pub sp: f64,
    pub vis: f64,
}

impl DropoutProbs {
    pub fn uniform(p: f64) -> Self {
        DropoutProbs { on: p, off: p, sp: p, vis: p }
    }
}

impl Default for DropoutProbs {
    fn default() -> Self {
        DropoutProbs::uniform(0.1)
    }
}

/// Each condition independently replaced by its null with its probability.
pub fn dropout_conditions(cond: &ConditionSet, p: DropoutProbs, rng: &mut Rng, enc: &EnvEncoder) -> ConditionSet {
    let flags = DropFlags {
        on: rng.bernoulli(p.on),
        off: rng.bernoulli(p.off),
        sp: rng.bernoulli(p.sp),
        vis: rng.bernoulli(p.vis),
    };
    cond.with_dropped(enc, flags)
}

/// `‖V(x_t, t, c) − (x1 − x0)‖²` averaged over elements, then over the batch.
pub fn fm_loss(model: &TriAttnDit<f32>, batch: &FlowBatch) -> Result<f64, NumericsError> {
    let losses: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let xt = interpolate(&batch.x0[i], &batch.x1[i], batch.t[i]);
            let v = model.velocity(&xt, batch.t[i], &batch.cond[i])?;
            let n = v.len() as f64;
            Ok(v.data
                .iter()
                .zip(batch.x1[i].data.iter().zip(&batch.x0[i].data))
                .map(|(&p, (&a, &b))| (p as f64 - (a as f64 - b as f64)).powi(2))
                .sum::<f64>()
                / n)
        })
        .collect::<Result<_, NumericsError>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len().max(1) as f64)
}

/// Batch loss and gradients (averaged over the batch), one tape per element.
pub fn fm_loss_and_grads(model: &TriAttnDit<f32>, batch: &FlowBatch) -> Result<(f64, Vec<Vec<f32>>), NumericsError> {
    let per: Vec<(f64, std::collections::BTreeMap<usize, Vec<f32>>)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let xt = interpolate(&batch.x0[i], &batch.x1[i], batch.t[i]);
            let target: Vec<f32> = batch.x1[i].data.iter().zip(&batch.x0[i].data).map(|(a, b)| a - b).collect();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &xt.to_tensor(), batch.t[i], &batch.cond[i])?;
            let target = crate::numerics::Tensor::new(model.cfg.latent.to_vec(), target)?;
            let loss = tape.mse(out.velocity, target)?;
            let l = tape.value(loss).data()[0] as f64;
            Ok((l, tape.backward(loss)?.into_params()))
        })
        .collect::<Result<_, NumericsError>>()?;
    let b = batch.len().max(1) as f32;
    let mut grads: Vec<Vec<f32>> = model.store.ids().map(|id| vec![0.0; model.store.get(id).len()]).collect();
    let mut total = 0.0;
    // fixed summation order keeps runs bit-reproducible
    for (l, g) in per {
        total += l;
        for (id, gv) in g {
            for (a, v) in grads[id].iter_mut().zip(gv) {
                *a += v / b;
            }
        }
    }
    Ok((total / batch.len().max(1) as f64, grads))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<(), NumericsError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v, g) = (&mut self.m[id.0], &mut self.v[id.0], &grads[id.0]);
            let t = store.get(id);
            let mut data = t.to_f64_vec();
            for k in 0..data.len() {
                let gk = g[k] as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[k]);
            }
            let shape = t.shape().to_vec();
            store.set(id, crate::numerics::Tensor::from_f64(&shape, &data)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Speech-only data, env captions empty.
    One,
    /// Scenario mixtures.
    Two,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: DropoutProbs,
    pub seed: u64,
    pub val_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch: 8,
            lr: 5e-5,
            weight_decay: 1e-2,
            dropout: DropoutProbs::default(),
            seed: 0,
            val_every: 50,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<(usize, f64)>,
    /// `(step, validation loss)`; step 0 is before any update.
    pub val: Vec<(usize, f64)>,
    /// Validation loss of the all-zero velocity on the same draws.
    pub zero_baseline: f64,
}

impl TrainReport {
    pub fn initial_val(&self) -> f64 {
        self.val.first().map(|v| v.1).unwrap_or(f64::NAN)
    }

    pub fn final_val(&self) -> f64 {
        self.val.last().map(|v| v.1).unwrap_or(f64::NAN)
    }
}

/// Fixed `(x0, t)` draws for validation.
pub fn validation_batch(val: &[FlowExample], seed: u64) -> FlowBatch {
    let mut rng = Rng::new(seed).derive_str("validation");
    let mut b = FlowBatch { x1: vec![], x0: vec![], t: vec![], cond: vec![] };
    for ex in val {
        b.x0.push(Latent::randn(ex.x1.shape(), &mut rng));
        b.t.push(rng.uniform());
        b.x1.push(ex.x1.clone());
        b.cond.push(ex.cond.clone());
    }
    b
}

/// `mean ‖x1 − x0‖²`: the loss of a network that always predicts zero.
pub fn zero_model_loss(batch: &FlowBatch) -> f64 {
    let mut total = 0.0;
    for (a, b) in batch.x1.iter().zip(&batch.x0) {
        total += a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    }
    total / batch.len().max(1) as f64
}

/// Runs one training stage in place. Deterministic given `cfg.seed`.
pub fn train(
    model: &mut TriAttnDit<f32>,
    stage: Stage,
    data: &[FlowExample],
    val: &[FlowExample],
    cfg: &TrainConfig,
    codec: Option<&CodecConfig>,
) -> Result<TrainReport, TrainError> {
    if data.is_empty() || val.is_empty() || cfg.batch == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if stage == Stage::One {
        let empty = model.env.empty();
        for (i, ex) in data.iter().enumerate() {
            if ex.cond.on_env != empty || ex.cond.off_env != empty {
                return Err(TrainError::StageOneCaption(i));
            }
        }
    }
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let vb = validation_batch(val, cfg.seed ^ 0x5EED);
    let mut report = TrainReport { zero_baseline: zero_model_loss(&vb), ..Default::default() };
    let mut logs = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut l = File::create(dir.join(format!("loss_stage{}.csv", stage.id())))?;
            let mut v = File::create(dir.join(format!("val_stage{}.csv", stage.id())))?;
            writeln!(l, "step,stage,loss")?;
            writeln!(v, "step,stage,val_loss")?;
            Some((l, v))
        }
        None => None,
    };
    let root = Rng::new(cfg.seed).derive(stage.id() as u64);
    let record_val = |model: &TriAttnDit<f32>, step: usize, report: &mut TrainReport, logs: &mut Option<(File, File)>| {
        let v = fm_loss(model, &vb)?;
        report.val.push((step, v));
        if let Some((_, vf)) = logs {
            writeln!(vf, "{step},{},{v}", stage.id())?;
        }
        Ok::<(), TrainError>(())
    };
    record_val(model, 0, &mut report, &mut logs)?;

    for step in 1..=cfg.steps {
        let mut rng = root.derive(step as u64);
        let mut batch = FlowBatch { x1: vec![], x0: vec![], t: vec![], cond: vec![] };
        for _ in 0..cfg.batch {
            let ex = &data[rng.below(data.len())];
            batch.x0.push(Latent::randn(ex.x1.shape(), &mut rng));
            batch.t.push(rng.uniform());
            batch.cond.push(dropout_conditions(&ex.cond, cfg.dropout, &mut rng, &model.env));
            batch.x1.push(ex.x1.clone());
        }
        let (loss, grads) = fm_loss_and_grads(model, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { stage: stage.id(), step, last: report.losses.last().map(|l| l.1) });
        }
        opt.step(&mut model.store, &grads)?;
        report.losses.push((step, loss));
        if let Some((lf, _)) = &mut logs {
            writeln!(lf, "{step},{},{loss}", stage.id())?;
        }
        if step % cfg.val_every.max(1) == 0 || step == cfg.steps {
            record_val(model, step, &mut report, &mut logs)?;
            log::info!("stage {} step {step}: loss {loss:.4} val {:.4}", stage.id(), report.final_val());
        }
        if let (Some(dir), true) = (&cfg.out_dir, cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            if let Some(codec) = codec {
                save_checkpoint(&dir.join(format!("ckpt_stage{}_step{step}", stage.id())), model, codec)?;
            }
        }
    }
    Ok(report)
}
