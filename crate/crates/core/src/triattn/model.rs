use crate::codec::Latent;
use crate::conditioners::{ConditionSet, EnvEncoder, OnScreenKind, SpeechEncoder, SpeechOut};
use crate::nn::{Init, Linear, Mlp};
use crate::numerics::{Binder, NumericsError, ParamId, ParamStore, Result, Rng, Scalar, Tape, Tensor, Var};

use super::{time_features, ModelConfig};

/// `softmax(q_h k_hᵀ / √hd) v_h` per head, heads concatenated.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (hd as f64).sqrt())?;
        let a = tape.softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat_cols(&outs)
}

#[derive(Clone, Debug)]
pub struct CrossAttn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttn {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, d_kv: usize, out: Init, rng: &mut Rng) -> Self {
        CrossAttn {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, Init::FanIn, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, false, Init::FanIn, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, false, Init::FanIn, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, out, rng),
        }
    }

    /// Queries rotated at `q_pos`, keys at `k_pos` (`None` = unrotated);
    /// values never rotated.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binder<T>,
        y: Var,
        kv: Var,
        q_pos: &[Option<f64>],
        k_pos: Vec<Option<f64>>,
        heads: usize,
        base: f64,
    ) -> Result<Var> {
        let hd = self.q.d_out / heads;
        let q = self.q.forward(tape, bind, y)?;
        let q = tape.rope(q, q_pos.to_vec(), hd, base)?;
        let k = self.k.forward(tape, bind, kv)?;
        let k = tape.rope(k, k_pos, hd, base)?;
        let v = self.v.forward(tape, bind, kv)?;
        let a = attend(tape, q, k, v, heads)?;
        self.o.forward(tape, bind, a)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ada: Linear,
    pub ca_on: CrossAttn,
    /// Separate off-screen attention when env weights are not shared.
    pub ca_off: Option<CrossAttn>,
    pub ca_sp: CrossAttn,
    pub gate: Mlp,
    pub mlp: Mlp,
    pub self_attn: Option<CrossAttn>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub input: Linear,
    pub pos: ParamId,
    pub t_mlp: Mlp,
    pub w_vt: Linear,
    pub w_env: ParamId,
    pub w_sp: ParamId,
    pub vis_null: ParamId,
    pub speech: SpeechEncoder,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Six `[n_tok, d]` modulation maps.
#[derive(Clone, Copy, Debug)]
pub struct AdaLn {
    pub alpha1: Var,
    pub beta1: Var,
    pub gamma1: Var,
    pub alpha2: Var,
    pub beta2: Var,
    pub gamma2: Var,
}

/// `c_v·W_vt + t_emb` on every visual row.
pub fn fuse_visual_time<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &mut Binder<T>,
    w_vt: &Linear,
    c_v: Var,
    t_emb: Var,
) -> Result<Var> {
    let p = w_vt.forward(tape, bind, c_v)?;
    tape.add_row(p, t_emb)
}

/// Projects `c_vt` to six maps and repeats visual row `⌊i·N/T_tok⌋` for
/// temporal token `i`, shared by its `f_tok` frequency tokens.
pub fn frame_aligned_adaln<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &mut Binder<T>,
    ada: &Linear,
    c_vt: Var,
    t_tok: usize,
    f_tok: usize,
) -> Result<AdaLn> {
    let n = tape.shape(c_vt)[0];
    let d = ada.d_out / 6;
    let h = tape.silu(c_vt)?;
    let p = ada.forward(tape, bind, h)?;
    let rows: Vec<usize> = (0..t_tok * f_tok).map(|k| (k / f_tok) * n / t_tok).collect();
    let g = tape.select_rows(p, &rows)?;
    let mut parts = [g; 6];
    for (i, part) in parts.iter_mut().enumerate() {
        *part = tape.slice_cols(g, i * d, d)?;
    }
    Ok(AdaLn {
        alpha1: parts[0],
        beta1: parts[1],
        gamma1: parts[2],
        alpha2: parts[3],
        beta2: parts[4],
        gamma2: parts[5],
    })
}

/// The three key/value streams with their text-only parts.
#[derive(Clone, Debug)]
pub struct ConditionStreams {
    pub on: Var,
    pub off: Var,
    pub sp: Var,
    pub on_text: Var,
    pub off_text: Var,
    pub sp_text: Var,
    pub n_visual: usize,
    /// Rotary positions of the appended visual rows.
    pub visual_pos: Vec<f64>,
}

impl ConditionStreams {
    pub fn key_positions<T: Scalar>(&self, tape: &Tape<T>, stream: Var) -> Vec<Option<f64>> {
        let text = tape.shape(stream)[0] - self.n_visual;
        std::iter::repeat_n(None, text).chain(self.visual_pos.iter().map(|&p| Some(p))).collect()
    }
}

/// Appends the projected visual rows to the stream that owns the on-screen
/// source and all-zero rows to the other two.
#[allow(clippy::too_many_arguments)]
pub fn assemble_condition_streams<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &mut Binder<T>,
    layout: &Layout,
    cfg: &ModelConfig,
    cond: &ConditionSet,
    speech_rows: Var,
    c_v: Var,
) -> Result<ConditionStreams> {
    let n = tape.shape(c_v)[0];
    let on_text = tape.constant(cond.on_env.tokens.cast());
    let off_text = tape.constant(cond.off_env.tokens.cast());
    let zeros_env = tape.constant(Tensor::zeros(&[n, cfg.d_env]));
    let zeros_sp = tape.constant(Tensor::zeros(&[n, cfg.d_sp]));
    let (vis_on, vis_sp) = match cond.kind() {
        OnScreenKind::Environment => {
            let w = bind.get(tape, layout.w_env);
            (tape.matmul(c_v, w)?, zeros_sp)
        }
        OnScreenKind::Speech => {
            let w = bind.get(tape, layout.w_sp);
            (zeros_env, tape.matmul(c_v, w)?)
        }
    };
    let on = tape.concat_rows(&[on_text, vis_on])?;
    let off = tape.concat_rows(&[off_text, zeros_env])?;
    let sp = tape.concat_rows(&[speech_rows, vis_sp])?;
    let t_tok = cfg.t_tok() as f64;
    Ok(ConditionStreams {
        on,
        off,
        sp,
        on_text,
        off_text,
        sp_text: speech_rows,
        n_visual: n,
        visual_pos: (0..n).map(|j| j as f64 * t_tok / n as f64).collect(),
    })
}

/// `[1, 3]` weights ordered `(ω_sp, ω_on, ω_off)` from mean text tokens.
pub fn moe_gate<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &mut Binder<T>,
    gate: &Mlp,
    streams: &ConditionStreams,
    enabled: bool,
) -> Result<Var> {
    if !enabled {
        return Ok(tape.constant(Tensor::filled(&[1, 3], T::of(1.0 / 3.0))));
    }
    let sp = tape.mean_rows(streams.sp_text)?;
    let on = tape.mean_rows(streams.on_text)?;
    let off = tape.mean_rows(streams.off_text)?;
    let x = tape.concat_cols(&[sp, on, off])?;
    let logits = gate.forward(tape, bind, x)?;
    tape.softmax(logits)
}

fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: Var, beta: Var, eps: f64) -> Result<Var> {
    let ln = tape.layer_norm(x, eps)?;
    let scaled = tape.mul(ln, alpha)?;
    let y = tape.add(ln, scaled)?;
    tape.add(y, beta)
}

impl Block {
    /// One block; `omega` is the `[1, 3]` gate output.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binder<T>,
        cfg: &ModelConfig,
        x: Var,
        streams: &ConditionStreams,
        ada: &AdaLn,
        omega: Var,
        q_pos: &[Option<f64>],
    ) -> Result<Var> {
        let (h, base) = (cfg.heads, cfg.rope_base);
        let y = modulate(tape, x, ada.alpha1, ada.beta1, cfg.ln_eps)?;
        let kp_on = streams.key_positions(tape, streams.on);
        let kp_off = streams.key_positions(tape, streams.off);
        let kp_sp = streams.key_positions(tape, streams.sp);
        let x_on = self.ca_on.forward(tape, bind, y, streams.on, q_pos, kp_on, h, base)?;
        let ca_off = self.ca_off.as_ref().unwrap_or(&self.ca_on);
        let x_off = ca_off.forward(tape, bind, y, streams.off, q_pos, kp_off, h, base)?;
        let x_sp = self.ca_sp.forward(tape, bind, y, streams.sp, q_pos, kp_sp, h, base)?;

        let mut fused = None;
        for (i, xi) in [x_sp, x_on, x_off].into_iter().enumerate() {
            let w = tape.slice_cols(omega, i, 1)?;
            let term = tape.mul_scalar(xi, w)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let fused = fused.expect("three branches");
        let g = tape.mul(ada.gamma1, fused)?;
        let mut x = tape.add(x, g)?;

        if let Some(sa) = &self.self_attn {
            let ln = tape.layer_norm(x, cfg.ln_eps)?;
            let a = sa.forward(tape, bind, ln, ln, q_pos, q_pos.to_vec(), h, base)?;
            x = tape.add(x, a)?;
        }

        let y2 = modulate(tape, x, ada.alpha2, ada.beta2, cfg.ln_eps)?;
        let m = self.mlp.forward(tape, bind, y2)?;
        let g2 = tape.mul(ada.gamma2, m)?;
        tape.add(x, g2)
    }
}

pub struct ForwardOut {
    /// `[C, T_l, F_l]`
    pub velocity: Var,
    /// Per-block gate outputs.
    pub gates: Vec<Var>,
    pub speech: SpeechOut,
}

#[derive(Clone, Debug)]
pub struct TriAttnDit<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub env: EnvEncoder,
    pub store: ParamStore<T>,
}

impl<T: Scalar> TriAttnDit<T> {
    /// Fresh network; adaLN projections, gate output layers, the duration
    /// head and the final head start at zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let d = cfg.hidden;
        let input = Linear::new(&mut store, "input", cfg.d_in(), d, true, Init::FanIn, &mut rng);
        let pos = store.add("pos", Tensor::randn(&[cfg.n_tok(), d], 0.02, &mut rng.derive_str("pos")), true);
        let t_mlp = Mlp::new(&mut store, "time", (cfg.time_dim, d, d), Init::FanIn, &mut rng);
        let w_vt = Linear::new(&mut store, "w_vt", cfg.d_vis, d, false, Init::FanIn, &mut rng);
        let mut r = rng.derive_str("vis");
        let inv = 1.0 / (cfg.d_vis as f64).sqrt();
        let w_env = store.add("w_env", Tensor::randn(&[cfg.d_vis, cfg.d_env], inv, &mut r), true);
        let w_sp = store.add("w_sp", Tensor::randn(&[cfg.d_vis, cfg.d_sp], inv, &mut r), true);
        let vis_null = store.add("vis_null", Tensor::randn(&[1, cfg.d_vis], 1.0, &mut r), true);
        let speech = SpeechEncoder::new(&mut store, cfg.d_sp, cfg.dur_hidden, cfg.max_chars, cfg.duration_mode, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    ada: Linear::new(&mut store, &format!("{n}.ada"), d, 6 * d, true, Init::Zeros, &mut rng),
                    ca_on: CrossAttn::new(&mut store, &format!("{n}.ca_env"), d, cfg.d_env, Init::FanIn, &mut rng),
                    ca_off: (!cfg.share_env_attention)
                        .then(|| CrossAttn::new(&mut store, &format!("{n}.ca_off"), d, cfg.d_env, Init::FanIn, &mut rng)),
                    ca_sp: CrossAttn::new(&mut store, &format!("{n}.ca_sp"), d, cfg.d_sp, Init::FanIn, &mut rng),
                    gate: Mlp::new(
                        &mut store,
                        &format!("{n}.gate"),
                        (2 * cfg.d_env + cfg.d_sp, cfg.gate_hidden, 3),
                        Init::Zeros,
                        &mut rng,
                    ),
                    mlp: Mlp::new(&mut store, &format!("{n}.mlp"), (d, cfg.mlp_ratio * d, d), Init::FanIn, &mut rng),
                    self_attn: cfg
                        .self_attention
                        .then(|| CrossAttn::new(&mut store, &format!("{n}.self"), d, d, Init::Zeros, &mut rng)),
                }
            })
            .collect();
        let head = Linear::new(&mut store, "head", d, cfg.d_in(), true, Init::Zeros, &mut rng);
        let env = EnvEncoder::new(cfg.d_env, cfg.env_seed);
        let layout = Layout { input, pos, t_mlp, w_vt, w_env, w_sp, vis_null, speech, blocks, head };
        Ok(TriAttnDit { cfg, layout, env, store })
    }

    pub fn cast<U: Scalar>(&self) -> TriAttnDit<U> {
        TriAttnDit { cfg: self.cfg.clone(), layout: self.layout.clone(), env: self.env, store: self.store.cast() }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.cfg.latent
    }

    /// Visual rows fed to the network: the features, or the learned null row
    /// repeated when dropped.
    fn visual<'a>(&self, tape: &mut Tape<T>, bind: &mut Binder<'a, T>, cond: &ConditionSet) -> Result<Var> {
        let n = cond.visual.frames.rows();
        if cond.drop.vis {
            let null = bind.get(tape, self.layout.vis_null);
            tape.select_rows(null, &vec![0; n])
        } else {
            if cond.visual.frames.cols() != self.cfg.d_vis {
                return Err(NumericsError::Invalid(format!(
                    "visual width {} != {}",
                    cond.visual.frames.cols(),
                    self.cfg.d_vis
                )));
            }
            Ok(tape.constant(cond.visual.frames.cast()))
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, t: f64, cond: &ConditionSet) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        if x.shape() != cfg.latent {
            return Err(NumericsError::ShapeMismatch {
                op: "velocity_forward",
                lhs: x.shape().to_vec(),
                rhs: cfg.latent.to_vec(),
            });
        }
        if cond.on_env.tokens.cols() != cfg.d_env || cond.off_env.tokens.cols() != cfg.d_env {
            return Err(NumericsError::Invalid("caption embedding width does not match d_env".into()));
        }
        let mut bind = Binder::new(&self.store);
        let l = &self.layout;
        let (t_tok, f_tok) = (cfg.t_tok(), cfg.f_tok());

        let xv = tape.constant(x.clone());
        let idx: std::sync::Arc<[usize]> = cfg.patch_index().into();
        let tokens = tape.gather(xv, idx.clone(), vec![cfg.n_tok(), cfg.d_in()])?;
        let h = l.input.forward(tape, &mut bind, tokens)?;
        let pos = bind.get(tape, l.pos);
        let mut h = tape.add(h, pos)?;

        let tf = tape.constant(time_features(t, cfg.time_dim)?);
        let t_emb = l.t_mlp.forward(tape, &mut bind, tf)?;
        let c_v = self.visual(tape, &mut bind, cond)?;
        let c_vt = fuse_visual_time(tape, &mut bind, &l.w_vt, c_v, t_emb)?;

        let speech = l.speech.forward(tape, &mut bind, &cond.speech_ids, cond.drop.sp, t_tok)?;
        let streams = assemble_condition_streams(tape, &mut bind, l, cfg, cond, speech.rows, c_v)?;
        let q_pos: Vec<Option<f64>> = (0..cfg.n_tok()).map(|k| Some((k / f_tok) as f64)).collect();

        let mut gates = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let ada = frame_aligned_adaln(tape, &mut bind, &b.ada, c_vt, t_tok, f_tok)?;
            let omega = moe_gate(tape, &mut bind, &b.gate, &streams, cfg.moe_gate)?;
            gates.push(omega);
            h = b.forward(tape, &mut bind, cfg, h, &streams, &ada, omega, &q_pos)?;
        }
        let h = tape.layer_norm(h, cfg.ln_eps)?;
        let out = l.head.forward(tape, &mut bind, h)?;
        // inverse permutation of the patch gather
        let mut inv = vec![0usize; idx.len()];
        for (k, &i) in idx.iter().enumerate() {
            inv[i] = k;
        }
        let velocity = tape.gather(out, inv.into(), cfg.latent.to_vec())?;
        Ok(ForwardOut { velocity, gates, speech })
    }
}

impl TriAttnDit<f32> {
    pub fn velocity(&self, x: &Latent, t: f64, cond: &ConditionSet) -> Result<Latent> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &x.to_tensor(), t, cond)?;
        Ok(Latent::from_tensor(tape.value(out.velocity)))
    }

    /// Gate weights of every block for a condition set.
    pub fn gate_weights(&self, cond: &ConditionSet) -> Result<Vec<[f32; 3]>> {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&self.cfg.latent);
        let out = self.forward(&mut tape, &x, 0.5, cond)?;
        Ok(out
            .gates
            .iter()
            .map(|&g| {
                let d = tape.value(g).data();
                [d[0], d[1], d[2]]
            })
            .collect())
    }
}
