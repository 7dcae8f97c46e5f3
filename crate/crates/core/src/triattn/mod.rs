//! TriAttn-DiT velocity network.

mod model;
pub mod suites;

pub use model::{
    assemble_condition_streams, attend, frame_aligned_adaln, fuse_visual_time, moe_gate, AdaLn, Block,
    ConditionStreams, CrossAttn, ForwardOut, Layout, TriAttnDit,
};

use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::conditioners::DurationMode;
use crate::numerics::{NumericsError, Result, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub d_env: usize,
    pub d_sp: usize,
    pub d_vis: usize,
    /// Visual frames per clip.
    pub n_visual: usize,
    /// `[C, T_l, F_l]`
    pub latent: [usize; 3],
    pub time_dim: usize,
    pub mlp_ratio: usize,
    pub dur_hidden: usize,
    pub gate_hidden: usize,
    pub max_chars: usize,
    pub rope_base: f64,
    /// `false` freezes the gate at 1/3 each.
    pub moe_gate: bool,
    pub share_env_attention: bool,
    pub self_attention: bool,
    pub duration_mode: DurationMode,
    pub env_seed: u64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            depth: 2,
            heads: 4,
            patch: 2,
            d_env: 32,
            d_sp: 32,
            d_vis: 16,
            n_visual: 4,
            latent: [4, 16, 8],
            time_dim: 32,
            mlp_ratio: 4,
            dur_hidden: 32,
            gate_hidden: 32,
            max_chars: 64,
            rope_base: 10_000.0,
            moe_gate: true,
            share_env_attention: true,
            self_attention: false,
            duration_mode: DurationMode::Rescale,
            env_seed: 0x0E11,
            ln_eps: 1e-6,
        }
    }

    /// Dimensions of the large configuration (hidden 1152, 28 blocks,
    /// 8×256×16 latents, 1024/769/512 condition widths).
    pub fn full_scale() -> Self {
        ModelConfig {
            hidden: 1152,
            depth: 28,
            heads: 16,
            patch: 2,
            d_env: 1024,
            d_sp: 769,
            d_vis: 512,
            n_visual: 40,
            latent: [8, 256, 16],
            time_dim: 256,
            mlp_ratio: 4,
            dur_hidden: 256,
            gate_hidden: 256,
            max_chars: 256,
            ..ModelConfig::desk()
        }
    }

    pub fn t_tok(&self) -> usize {
        self.latent[1] / self.patch
    }

    pub fn f_tok(&self) -> usize {
        self.latent[2] / self.patch
    }

    pub fn n_tok(&self) -> usize {
        self.t_tok() * self.f_tok()
    }

    pub fn d_in(&self) -> usize {
        self.latent[0] * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NumericsError::Invalid(format!("model config: {m}")));
        if self.patch == 0 || !self.latent[1].is_multiple_of(self.patch) || !self.latent[2].is_multiple_of(self.patch) {
            return bad("latent dims not divisible by patch");
        }
        if self.latent.contains(&0) || self.hidden == 0 || self.depth == 0 {
            return bad("zero dimension");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) || !self.head_dim().is_multiple_of(2) {
            return bad("hidden must split into heads of even width");
        }
        if !self.time_dim.is_multiple_of(2) || self.n_visual == 0 || self.max_chars == 0 {
            return bad("time_dim must be even, n_visual and max_chars positive");
        }
        Ok(())
    }

    /// Flat index map used by [`patchify`]: token-major, time-major tokens,
    /// features ordered `(channel, dt, df)`.
    pub fn patch_index(&self) -> Vec<usize> {
        patch_index(self.latent, self.patch)
    }
}

pub fn patch_index(latent: [usize; 3], p: usize) -> Vec<usize> {
    let [c, t, f] = latent;
    let (tt, ft) = (t / p, f / p);
    let mut idx = Vec::with_capacity(c * t * f);
    for ti in 0..tt {
        for fi in 0..ft {
            for ch in 0..c {
                for a in 0..p {
                    for b in 0..p {
                        idx.push((ch * t + ti * p + a) * f + fi * p + b);
                    }
                }
            }
        }
    }
    idx
}

/// `[C, T, F]` latent → `[(T/p)(F/p), C p²]` tokens.
pub fn patchify(x: &Latent, p: usize) -> Result<Tensor<f32>> {
    if p == 0 || !x.time.is_multiple_of(p) || !x.freq.is_multiple_of(p) {
        return Err(NumericsError::Invalid(format!("latent {:?} not divisible by patch {p}", x.shape())));
    }
    let idx = patch_index(x.shape(), p);
    let n_tok = (x.time / p) * (x.freq / p);
    Tensor::new(vec![n_tok, x.channels * p * p], idx.iter().map(|&i| x.data[i]).collect())
}

pub fn unpatchify(tokens: &Tensor<f32>, latent: [usize; 3], p: usize) -> Result<Latent> {
    let idx = patch_index(latent, p);
    if tokens.len() != idx.len() {
        return Err(NumericsError::Invalid("token count does not match latent".into()));
    }
    let mut data = vec![0.0f32; idx.len()];
    for (k, &i) in idx.iter().enumerate() {
        data[i] = tokens.data()[k];
    }
    Ok(Latent::new(latent[0], latent[1], latent[2], data))
}

/// Sinusoidal features of `1000·t`: `[cos(ω_i·1000t) …, sin(ω_i·1000t) …]`.
pub fn time_features<T: Scalar>(t: f64, dim: usize) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NumericsError::Invalid(format!("time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let arg = |i: usize| 1000.0 * t * (-(10_000f64).ln() * i as f64 / half as f64).exp();
    let data: Vec<f64> = (0..half).map(|i| arg(i).cos()).chain((0..half).map(|i| arg(i).sin())).collect();
    Tensor::from_f64(&[1, dim], &data)
}
