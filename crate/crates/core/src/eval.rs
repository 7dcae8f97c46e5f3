//! Objective metrics over precomputed features, posteriors and token
//! sequences, plus the toy feature extractors used by the desk pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::MelSpec;
use crate::numerics::{matmul_f64, matrix_sqrt_psd, NumericsError};

pub const KL_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least {need} rows, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("paired inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("zero vector in cosine score")]
    ZeroVector,
    #[error("posterior {0} does not sum to 1 (sum {1})")]
    NotDistribution(usize, f64),
    #[error("ragged feature rows")]
    Ragged,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `M × D` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EvalError::Ragged);
        }
        Ok(FeatureSet { rows: rows.len(), dim, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for i in 0..self.rows {
            for (m, v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= self.rows as f64);
        mu
    }

    /// Sample covariance with `1/(M−1)`.
    pub fn covariance(&self) -> Vec<f64> {
        let (m, d) = (self.rows, self.dim);
        let mu = self.mean();
        let mut c = vec![0.0; d * d];
        for i in 0..m {
            let r = self.row(i);
            for a in 0..d {
                let da = r[a] - mu[a];
                for b in a..d {
                    c[a * d + b] += da * (r[b] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = c[a * d + b] / (m as f64 - 1.0);
                c[a * d + b] = v;
                c[b * d + a] = v;
            }
        }
        c
    }
}

/// `‖μA−μB‖² + tr(ΣA + ΣB − 2·(ΣA ΣB)^{1/2})`, where the matrix root is
/// taken of the symmetric `ΣA^{1/2} ΣB ΣA^{1/2}` (same trace).
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(EvalError::DimMismatch(a.dim, b.dim));
    }
    for s in [a, b] {
        if s.rows < 2 {
            return Err(EvalError::TooFew { need: 2, got: s.rows });
        }
    }
    let d = a.dim;
    let (ma, mb) = (a.mean(), b.mean());
    let (ca, cb) = (a.covariance(), b.covariance());
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = matrix_sqrt_psd(&ca, d)?;
    let s = matmul_f64(&matmul_f64(&ra, &cb, d, d, d), &ra, d, d, d);
    let sym: Vec<f64> = (0..d * d).map(|k| 0.5 * (s[k] + s[(k % d) * d + k / d])).collect();
    let root = matrix_sqrt_psd(&sym, d)?;
    let tr = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    Ok((mean_term + tr(&ca) + tr(&cb) - 2.0 * tr(&root)).max(0.0))
}

fn check_posterior(i: usize, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < 0.0) {
        return Err(EvalError::NotDistribution(i, s));
    }
    Ok(())
}

/// Mean of `KL(ref ‖ gen)` over pairs, probabilities floored at [`KL_EPS`].
pub fn mean_kl(refs: &[Vec<f64>], gens: &[Vec<f64>]) -> Result<f64> {
    if refs.len() != gens.len() {
        return Err(EvalError::LengthMismatch(refs.len(), gens.len()));
    }
    if refs.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let kls: Vec<f64> = refs
        .par_iter()
        .zip(gens)
        .enumerate()
        .map(|(i, (p, q))| {
            check_posterior(i, p)?;
            check_posterior(i, q)?;
            if p.len() != q.len() {
                return Err(EvalError::DimMismatch(p.len(), q.len()));
            }
            Ok(p.iter()
                .zip(q)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi.max(KL_EPS) / qi.max(KL_EPS)).ln())
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(kls.iter().sum::<f64>() / kls.len() as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(ref, hyp) / |ref|`; WER, CER or PER depending on tokens.
pub fn edit_error_rate<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(levenshtein(reference, hyp) as f64 / reference.len() as f64)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn characters(s: &str) -> Vec<char> {
    s.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect()
}

/// Rule-based letter-to-symbol proxy for phonemes: digraphs `th sh ch ng ph
/// ck` map to one symbol, `c q` → `K`, `x` → `K S`, `y` → `I`, `w` → `U`,
/// doubled letters collapse, anything non-alphabetic is dropped.
pub fn phonemes(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.to_lowercase().chars().filter(|c| c.is_ascii_alphabetic() || c.is_whitespace()).collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied().unwrap_or(' ');
        let (sym, step): (&str, usize) = match (c, next) {
            ('t', 'h') => ("TH", 2),
            ('s', 'h') => ("SH", 2),
            ('c', 'h') => ("CH", 2),
            ('n', 'g') => ("NG", 2),
            ('p', 'h') => ("F", 2),
            ('c', 'k') => ("K", 2),
            ('c', _) | ('q', _) | ('k', _) => ("K", 1),
            ('x', _) => ("KS", 1),
            ('y', _) => ("I", 1),
            ('w', _) => ("U", 1),
            _ => ("", 1),
        };
        if sym == "KS" {
            out.extend(["K".to_string(), "S".to_string()]);
        } else {
            let s = if sym.is_empty() { c.to_ascii_uppercase().to_string() } else { sym.to_string() };
            if out.last() != Some(&s) || chars.get(i.wrapping_sub(1)).is_some_and(|p| p.is_whitespace()) {
                out.push(s);
            }
        }
        i += step;
    }
    out
}

/// `100 ×` mean cosine similarity of paired rows.
pub fn cosine_alignment_score(audio: &FeatureSet, cond: &FeatureSet) -> Result<f64> {
    if audio.dim != cond.dim {
        return Err(EvalError::DimMismatch(audio.dim, cond.dim));
    }
    if audio.rows != cond.rows {
        return Err(EvalError::LengthMismatch(audio.rows, cond.rows));
    }
    if audio.rows == 0 {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for i in 0..audio.rows {
        let (a, b) = (audio.row(i), cond.row(i));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(EvalError::ZeroVector);
        }
        total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    }
    Ok(100.0 * total / audio.rows as f64)
}

/// Per-band mean and standard deviation of a log-mel grid.
pub fn clip_features(mel: &MelSpec) -> Vec<f64> {
    let (t, f) = (mel.frames, mel.bands);
    let mut out = vec![0.0; 2 * f];
    for b in 0..f {
        let col: Vec<f64> = (0..t).map(|i| mel.data[i * f + b] as f64).collect();
        let mu = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t as f64;
        out[b] = mu;
        out[f + b] = var.sqrt();
    }
    out
}

/// Softmax over mean band energies: a stand-in for classifier posteriors.
pub fn band_posterior(mel: &MelSpec) -> Vec<f64> {
    let f = mel.bands;
    let means: Vec<f64> = clip_features(mel)[..f].to_vec();
    let mx = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = means.iter().map(|m| (m - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Toy recognizer: frames above the clip's median energy are labelled with
/// their dominant band quartile, then repeats are collapsed.
pub fn toy_transcribe(mel: &MelSpec) -> Vec<u8> {
    let (t, f) = (mel.frames, mel.bands);
    let energy: Vec<f32> = (0..t).map(|i| mel.row(i).iter().sum::<f32>() / f as f32).collect();
    let mut sorted = energy.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[t / 2];
    let mut out: Vec<u8> = Vec::new();
    let mut prev = None;
    for i in 0..t {
        let sym = if energy[i] > median {
            let row = mel.row(i);
            let arg = (0..f).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            Some((4 * arg / f) as u8)
        } else {
            None
        };
        if sym != prev {
            if let Some(s) = sym {
                out.push(s);
            }
            prev = sym;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,n\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.value, r.n));
    }
    s
}

/// Desk metric suite on paired generated/reference log-mels: `fad`, `mkl`,
/// `align` (cosine of clip features), `ter` (toy recognizer error rate).
pub fn evaluate_pairs(gen: &[MelSpec], refs: &[MelSpec]) -> Result<Vec<MetricRow>> {
    if gen.len() != refs.len() {
        return Err(EvalError::LengthMismatch(gen.len(), refs.len()));
    }
    let n = gen.len();
    let gf = FeatureSet::from_rows(&gen.iter().map(clip_features).collect::<Vec<_>>())?;
    let rf = FeatureSet::from_rows(&refs.iter().map(clip_features).collect::<Vec<_>>())?;
    let fad = frechet_distance(&gf, &rf)?;
    let mkl = mean_kl(&refs.iter().map(band_posterior).collect::<Vec<_>>(), &gen.iter().map(band_posterior).collect::<Vec<_>>())?;
    let align = cosine_alignment_score(&gf, &rf)?;
    let mut errs = Vec::new();
    for (g, r) in gen.iter().zip(refs) {
        let rt = toy_transcribe(r);
        if !rt.is_empty() {
            errs.push(edit_error_rate(&rt, &toy_transcribe(g))?);
        }
    }
    let ter = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
    Ok(vec![
        MetricRow { metric: "fad".into(), value: fad, n },
        MetricRow { metric: "mkl".into(), value: mkl, n },
        MetricRow { metric: "align".into(), value: align, n },
        MetricRow { metric: "ter".into(), value: ter, n: errs.len() },
    ])
}
