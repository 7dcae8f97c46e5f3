use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Floor added before the logarithm.
pub const LOG_EPS: f64 = 1e-5;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular, area-normalized HTK filterbank over `[0, f_max]`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `[n_mels, n_bins]`.
    pub weights: Vec<f64>,
    /// Edge frequencies, `n_mels + 2` points.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    /// `mel[m] = Σ_k w[m,k] · mag[k]`
    pub fn apply(&self, mag: &[f32], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self
                .row(m)
                .iter()
                .zip(mag)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, &x)| w * x as f64)
                .sum();
        }
    }
}

pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize, f_max: f64) -> MelFilterbank {
    let n_bins = fft_size / 2 + 1;
    let m_max = hz_to_mel(f_max);
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            weights[m * n_bins + k] = w * norm;
        }
    }
    MelFilterbank {
        n_mels,
        n_bins,
        weights,
        edges_hz,
    }
}

/// Log-mel grid, `T` rows (frames) by `F` columns (mel bands).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpec {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl MelSpec {
    pub fn new(frames: usize, bands: usize, data: Vec<f32>) -> Self {
        assert_eq!(frames * bands, data.len(), "MelSpec shape");
        MelSpec { frames, bands, data }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        assert_eq!(t.rank(), 2, "MelSpec needs a [T, F] tensor");
        MelSpec::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.frames, self.bands], self.data.clone()).expect("finite mel")
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    /// CSV grid: one line per frame, one column per band.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 10);
        for t in 0..self.frames {
            let line: Vec<String> = self.row(t).iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// 8-bit grayscale PGM (frequency increasing upwards, time to the right).
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-6);
        let mut out = format!("P5\n{} {}\n255\n", self.frames, self.bands).into_bytes();
        for f in (0..self.bands).rev() {
            for t in 0..self.frames {
                let v = (self.data[t * self.bands + f] - lo) / span;
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    /// Cosine similarity of the flattened grids.
    pub fn cosine(&self, other: &MelSpec) -> f64 {
        let dot: f64 = self.data.iter().zip(&other.data).map(|(&a, &b)| a as f64 * b as f64).sum();
        let na: f64 = self.data.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = other.data.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn filters_are_area_normalized_and_cover_range() {
        let fb = mel_filterbank(16_000, 1024, 64, 8000.0);
        assert_eq!(fb.weights.len(), 64 * 513);
        let bin_hz = 16_000.0 / 1024.0;
        for m in 0..64 {
            let area: f64 = fb.row(m).iter().sum::<f64>() * bin_hz;
            // Riemann sum of a unit-area triangle.
            assert!((area - 1.0).abs() < 0.2, "band {m}: {area}");
            assert!(fb.row(m).iter().any(|&w| w > 0.0), "empty band {m}");
        }
        assert!((fb.edges_hz[65] - 8000.0).abs() < 1e-6);
    }
}
