//! Finite-difference gradient suites over the network's building blocks,
//! run in f64.

use crate::conditioners::{synth_visual_features, ConditionSet};
use crate::numerics::gradcheck::{finite_diff_coords, rel_error};
use crate::numerics::{Binder, ParamStore, Result, Rng, Tape, Tensor, Var};

use super::{assemble_condition_streams, frame_aligned_adaln, fuse_visual_time, moe_gate, ModelConfig, TriAttnDit};

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub rel_error: f64,
    pub coords: usize,
}

impl SuiteReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    /// Negative control: damage the analytic gradient before comparing.
    pub corrupt: bool,
    /// Coordinates probed per parameter tensor.
    pub per_tensor: usize,
}

type Objective = dyn Fn(&mut Tape<f64>, &TriAttnDit<f64>) -> Result<Var>;

fn check(name: &'static str, model: &TriAttnDit<f64>, params: &[&str], obj: &Objective, opts: SuiteOptions) -> Result<SuiteReport> {
    let store = &model.store;
    // flat offsets of trainable tensors
    let mut offsets = Vec::new();
    let mut off = 0;
    for id in store.ids() {
        if store.is_trainable(id) {
            offsets.push((id, off));
            off += store.get(id).len();
        }
    }
    let mut rng = Rng::new(0x6C).derive_str(name);
    let mut coords = Vec::new();
    for &(id, start) in &offsets {
        if !params.iter().any(|p| store.name(id).starts_with(p)) {
            continue;
        }
        let n = store.get(id).len();
        let k = opts.per_tensor.max(1).min(n);
        let mut picked: Vec<usize> = (0..k).map(|_| rng.below(n)).collect();
        picked.sort_unstable();
        picked.dedup();
        coords.extend(picked.into_iter().map(|i| start + i));
    }

    let mut tape = Tape::new();
    let loss = obj(&mut tape, model)?;
    let grads = tape.backward(loss)?;
    let mut analytic = vec![0.0; off];
    for &(id, start) in &offsets {
        if let Some(g) = grads.param(id.0) {
            analytic[start..start + g.len()].copy_from_slice(g);
        }
    }
    let mut analytic: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    if opts.corrupt {
        if let Some(a) = analytic.first_mut() {
            *a = *a * 1.5 + 1e-3;
        }
    }

    let flat = store.flatten_trainable();
    let mut probe = model.clone();
    let numeric = finite_diff_coords(
        |x| {
            probe.store.load_trainable(x).expect("same layout");
            let mut t = Tape::new();
            let l = obj(&mut t, &probe).expect("objective");
            t.value(l).data()[0]
        },
        &flat,
        &coords,
        1e-5,
    );
    Ok(SuiteReport { name, rel_error: rel_error(&analytic, &numeric), coords: coords.len() })
}

/// Weighted sum with a fixed random probe, so every output element matters.
fn probe_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let p = tape.constant(Tensor::randn(&shape, 1.0, &mut Rng::new(seed)));
    let m = tape.mul(v, p)?;
    tape.sum(m)
}

fn gradcheck_model() -> Result<TriAttnDit<f64>> {
    let mut m = TriAttnDit::<f64>::new(ModelConfig::desk(), 17)?;
    m.store.perturb(0.1, &mut Rng::new(18));
    Ok(m)
}

fn sample_cond(m: &TriAttnDit<f64>, on: &str) -> ConditionSet {
    let v = synth_visual_features(4, m.cfg.n_visual, "gradcheck", m.cfg.d_vis);
    ConditionSet::new(&m.env, on, "light rain", "hello world", v, m.cfg.max_chars)
}

pub fn durator_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let m = gradcheck_model()?;
    let c = sample_cond(&m, "");
    let obj = move |tape: &mut Tape<f64>, m: &TriAttnDit<f64>| {
        let mut bind = Binder::new(&m.store);
        let out = m.layout.speech.forward(tape, &mut bind, &c.speech_ids, false, m.cfg.t_tok())?;
        probe_sum(tape, out.rows, 1)
    };
    check("durator", &m, &["speech."], &obj, opts)
}

pub fn adaln_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let m = gradcheck_model()?;
    let c = sample_cond(&m, "dog barking");
    let x = Tensor::randn(&[m.cfg.n_tok(), m.cfg.hidden], 1.0, &mut Rng::new(2));
    let obj = move |tape: &mut Tape<f64>, m: &TriAttnDit<f64>| {
        let mut bind = Binder::new(&m.store);
        let l = &m.layout;
        let tf = tape.constant(super::time_features(0.37, m.cfg.time_dim)?);
        let t_emb = l.t_mlp.forward(tape, &mut bind, tf)?;
        let cv = tape.constant(c.visual.frames.cast());
        let cvt = fuse_visual_time(tape, &mut bind, &l.w_vt, cv, t_emb)?;
        let a = frame_aligned_adaln(tape, &mut bind, &l.blocks[0].ada, cvt, m.cfg.t_tok(), m.cfg.f_tok())?;
        let xv = tape.constant(x.clone());
        let ln = tape.layer_norm(xv, m.cfg.ln_eps)?;
        let s = tape.mul(ln, a.alpha1)?;
        let y = tape.add(ln, s)?;
        let y = tape.add(y, a.beta1)?;
        let y = tape.mul(y, a.gamma1)?;
        let rest = tape.concat_cols(&[a.alpha2, a.beta2, a.gamma2])?;
        let s1 = probe_sum(tape, y, 3)?;
        let s2 = probe_sum(tape, rest, 4)?;
        tape.add(s1, s2)
    };
    check("adaln", &m, &["block0.ada", "w_vt", "time."], &obj, opts)
}

pub fn rope_attention_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let m = gradcheck_model()?;
    let c = sample_cond(&m, "engine humming");
    let y = Tensor::randn(&[m.cfg.n_tok(), m.cfg.hidden], 1.0, &mut Rng::new(5));
    let obj = move |tape: &mut Tape<f64>, m: &TriAttnDit<f64>| {
        let mut bind = Binder::new(&m.store);
        let l = &m.layout;
        let sp = l.speech.forward(tape, &mut bind, &c.speech_ids, false, m.cfg.t_tok())?;
        let cv = tape.constant(c.visual.frames.cast());
        let s = assemble_condition_streams(tape, &mut bind, l, &m.cfg, &c, sp.rows, cv)?;
        let yv = tape.constant(y.clone());
        let qp: Vec<Option<f64>> = (0..m.cfg.n_tok()).map(|k| Some((k / m.cfg.f_tok()) as f64)).collect();
        let kp = s.key_positions(tape, s.on);
        let b = &l.blocks[0];
        let on = b.ca_on.forward(tape, &mut bind, yv, s.on, &qp, kp, m.cfg.heads, m.cfg.rope_base)?;
        let kp = s.key_positions(tape, s.sp);
        let sp = b.ca_sp.forward(tape, &mut bind, yv, s.sp, &qp, kp, m.cfg.heads, m.cfg.rope_base)?;
        let both = tape.concat_cols(&[on, sp])?;
        probe_sum(tape, both, 6)
    };
    check("rope_attention", &m, &["block0.ca_env", "block0.ca_sp", "w_env"], &obj, opts)
}

pub fn moe_gate_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let m = gradcheck_model()?;
    let c = sample_cond(&m, "birds chirping");
    let obj = move |tape: &mut Tape<f64>, m: &TriAttnDit<f64>| {
        let mut bind = Binder::new(&m.store);
        let l = &m.layout;
        let sp = l.speech.forward(tape, &mut bind, &c.speech_ids, false, m.cfg.t_tok())?;
        let cv = tape.constant(c.visual.frames.cast());
        let s = assemble_condition_streams(tape, &mut bind, l, &m.cfg, &c, sp.rows, cv)?;
        let g = moe_gate(tape, &mut bind, &l.blocks[0].gate, &s, true)?;
        probe_sum(tape, g, 7)
    };
    check("moe_gate", &m, &["block0.gate", "speech."], &obj, opts)
}

/// Flow-matching loss of the whole 2-block network against a random target.
pub fn full_model_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let m = gradcheck_model()?;
    let c = sample_cond(&m, "");
    let x = Tensor::randn(&m.cfg.latent, 1.0, &mut Rng::new(8));
    let target = Tensor::randn(&m.cfg.latent, 1.0, &mut Rng::new(9));
    let obj = move |tape: &mut Tape<f64>, m: &TriAttnDit<f64>| {
        let out = m.forward(tape, &x, 0.61, &c)?;
        tape.mse(out.velocity, target.clone())
    };
    check("full_model", &m, &[""], &obj, opts)
}

pub fn all_suites(opts: SuiteOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        durator_suite(opts)?,
        adaln_suite(opts)?,
        rope_attention_suite(opts)?,
        moe_gate_suite(opts)?,
        full_model_suite(opts)?,
    ])
}

/// Convenience for callers that only hold an f32 store.
pub fn trainable_len(store: &ParamStore<f32>) -> usize {
    store.trainable_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_corruption_fails() {
        let opts = SuiteOptions { corrupt: false, per_tensor: 3 };
        for r in all_suites(opts).unwrap() {
            assert!(r.passed(1e-4), "{} {}", r.name, r.rel_error);
            assert!(r.coords > 0);
        }
        let bad = durator_suite(SuiteOptions { corrupt: true, per_tensor: 3 }).unwrap();
        assert!(!bad.passed(1e-4), "{}", bad.rel_error);
    }
}
