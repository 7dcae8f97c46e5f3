//! Lossless latent codec: orthonormal patch transform over log-mel grids.
//!
//! A `p_t × p_f` patch is flattened, rotated by a seeded orthonormal `Q`
//! and each output coordinate becomes one latent channel, standardized with
//! constants measured on a small synthetic calibration corpus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{MelSpec, StftConfig, StftProcessor, Waveform};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("grid {frames}x{bands} not divisible by patch {pt}x{pf}")]
    Indivisible { frames: usize, bands: usize, pt: usize, pf: usize },
    #[error("latent {got:?} does not match codec (expected {channels} channels)")]
    Mismatch { got: [usize; 3], channels: usize },
    #[error("invalid codec config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// `C × T_l × F_l`, channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub channels: usize,
    pub time: usize,
    pub freq: usize,
    pub data: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, time: usize, freq: usize, data: Vec<f32>) -> Self {
        assert_eq!(channels * time * freq, data.len(), "latent shape");
        Latent { channels, time, freq, data }
    }

    pub fn zeros(channels: usize, time: usize, freq: usize) -> Self {
        Latent::new(channels, time, freq, vec![0.0; channels * time * freq])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.time, self.freq]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.time + t) * self.freq + f
    }

    pub fn at(&self, c: usize, t: usize, f: usize) -> f32 {
        self.data[self.idx(c, t, f)]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("finite latent")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        assert_eq!(t.rank(), 3, "latent tensor must be rank 3");
        let s = t.shape();
        Latent::new(s[0], s[1], s[2], t.data().to_vec())
    }

    pub fn randn(shape: [usize; 3], rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Latent::new(shape[0], shape[1], shape[2], (0..n).map(|_| rng.normal() as f32).collect())
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_t: usize,
    pub patch_f: usize,
    pub seed: u64,
    /// Channels kept after rotation; fewer than `patch_t * patch_f` is lossy.
    pub keep: usize,
    /// Per-coordinate statistics, length `patch_t * patch_f`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CodecConfig {
    /// Unstandardized config (mean 0, std 1).
    pub fn raw(patch_t: usize, patch_f: usize, seed: u64) -> Self {
        let n = patch_t * patch_f;
        CodecConfig { patch_t, patch_f, seed, keep: n, mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Statistics measured on [`calibration_corpus`] for the given STFT setup.
    pub fn calibrated(patch_t: usize, patch_f: usize, seed: u64, keep: usize, stft: &StftConfig) -> Result<Self> {
        let raw = Codec::new(CodecConfig::raw(patch_t, patch_f, seed))?;
        let proc = StftProcessor::new(stft).map_err(|e| CodecError::Config(e.to_string()))?;
        let n = raw.patch_dim();
        let mut sum = vec![0.0f64; n];
        let mut sq = vec![0.0f64; n];
        let mut count = 0usize;
        for w in calibration_corpus(stft) {
            let mel = proc.mel_spectrogram(&w);
            for z in raw.rotated_patches(&mel)? {
                for (c, v) in z.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(CodecConfig { patch_t, patch_f, seed, keep, mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.patch_t * self.patch_f;
        if n == 0 || self.keep == 0 || self.keep > n {
            return Err(CodecError::Config(format!("patch {}x{} keep {}", self.patch_t, self.patch_f, self.keep)));
        }
        if self.mean.len() != n || self.std.len() != n {
            return Err(CodecError::Config("statistics length".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(CodecError::Config("non-finite or non-positive statistics".into()));
        }
        Ok(())
    }
}

/// Deterministic clips used for calibration: harmonic tones, noise beds and
/// silence gaps at a few levels.
pub fn calibration_corpus(stft: &StftConfig) -> Vec<Waveform> {
    let len = stft.clip_len();
    let sr = stft.sample_rate as f64;
    let mut rng = Rng::new(0xCA11_B4A7);
    (0..12)
        .map(|k| {
            let f0 = 110.0 * 2f64.powf(k as f64 / 3.0);
            let level = [0.05, 0.2, 0.6][k % 3];
            let noise = [0.0, 0.02, 0.1, 0.3][k % 4];
            let am = 0.5 + k as f64 * 0.7;
            let samples = (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = 0.5 + 0.5 * (std::f64::consts::TAU * am * t).sin();
                    let tone: f64 = (1..=4)
                        .map(|h| (std::f64::consts::TAU * f0 * h as f64 * t).sin() / h as f64)
                        .sum();
                    (level * env * tone + noise * rng.normal()).clamp(-1.0, 1.0) as f32
                })
                .collect();
            Waveform::new(samples, stft.sample_rate)
        })
        .collect()
}

/// Seeded orthonormal `n × n` matrix (row-major) via Gram–Schmidt with
/// positive diagonal, so `n = 1` gives `[1]`.
pub fn seeded_orthonormal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed).derive_str("codec-q");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= d * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        let j = cols.len();
        let sign = if v[j] < 0.0 { -1.0 } else { 1.0 };
        cols.push(v.iter().map(|x| sign * x / norm).collect());
    }
    // Q[i][j] = cols[j][i]
    let mut q = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q[i * n + j] = c[i];
        }
    }
    q
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    q: Vec<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let q = seeded_orthonormal(cfg.patch_t * cfg.patch_f, cfg.seed);
        Ok(Codec { cfg, q })
    }

    pub fn patch_dim(&self) -> usize {
        self.cfg.patch_t * self.cfg.patch_f
    }

    pub fn channels(&self) -> usize {
        self.cfg.keep
    }

    pub fn is_lossless(&self) -> bool {
        self.cfg.keep == self.patch_dim()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn latent_shape(&self, frames: usize, bands: usize) -> Result<[usize; 3]> {
        let (pt, pf) = (self.cfg.patch_t, self.cfg.patch_f);
        if !frames.is_multiple_of(pt) || !bands.is_multiple_of(pf) || frames == 0 || bands == 0 {
            return Err(CodecError::Indivisible { frames, bands, pt, pf });
        }
        Ok([self.cfg.keep, frames / pt, bands / pf])
    }

    /// `Q·v` for every patch, in (t, f) order.
    fn rotated_patches(&self, m: &MelSpec) -> Result<Vec<Vec<f64>>> {
        let [_, tl, fl] = self.latent_shape(m.frames, m.bands)?;
        let (pt, pf, n) = (self.cfg.patch_t, self.cfg.patch_f, self.patch_dim());
        let mut out = Vec::with_capacity(tl * fl);
        let mut v = vec![0.0f64; n];
        for t in 0..tl {
            for f in 0..fl {
                for a in 0..pt {
                    for b in 0..pf {
                        v[a * pf + b] = m.data[(t * pt + a) * m.bands + f * pf + b] as f64;
                    }
                }
                out.push(
                    (0..n)
                        .map(|i| self.q[i * n..(i + 1) * n].iter().zip(&v).map(|(x, y)| x * y).sum())
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    pub fn encode(&self, m: &MelSpec) -> Result<Latent> {
        let [c, tl, fl] = self.latent_shape(m.frames, m.bands)?;
        let mut lat = Latent::zeros(c, tl, fl);
        for (p, z) in self.rotated_patches(m)?.into_iter().enumerate() {
            let (t, f) = (p / fl, p % fl);
            for (ch, zc) in z.iter().take(c).enumerate() {
                let i = lat.idx(ch, t, f);
                lat.data[i] = ((zc - self.cfg.mean[ch]) / self.cfg.std[ch]) as f32;
            }
        }
        Ok(lat)
    }

    /// Inverse of [`Codec::encode`]; dropped channels are filled with their
    /// calibration mean.
    pub fn decode(&self, x: &Latent) -> Result<MelSpec> {
        if x.channels != self.cfg.keep {
            return Err(CodecError::Mismatch { got: x.shape(), channels: self.cfg.keep });
        }
        let (pt, pf, n) = (self.cfg.patch_t, self.cfg.patch_f, self.patch_dim());
        let (frames, bands) = (x.time * pt, x.freq * pf);
        let mut data = vec![0.0f32; frames * bands];
        let mut z = vec![0.0f64; n];
        for t in 0..x.time {
            for f in 0..x.freq {
                for (ch, zc) in z.iter_mut().enumerate() {
                    *zc = if ch < x.channels {
                        x.at(ch, t, f) as f64 * self.cfg.std[ch] + self.cfg.mean[ch]
                    } else {
                        self.cfg.mean[ch]
                    };
                }
                for a in 0..pt {
                    for b in 0..pf {
                        let j = a * pf + b;
                        // (Qᵀ z)_j
                        let v: f64 = (0..n).map(|i| self.q[i * n + j] * z[i]).sum();
                        data[(t * pt + a) * bands + f * pf + b] = v as f32;
                    }
                }
            }
        }
        Ok(MelSpec::new(frames, bands, data))
    }
}
