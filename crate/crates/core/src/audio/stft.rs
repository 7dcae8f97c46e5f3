use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::mel::{mel_filterbank, MelFilterbank, MelSpec, LOG_EPS};
use super::{AudioError, Result, Waveform, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub win_size: usize,
    pub n_mels: usize,
    /// Frames per clip; the fixed clip length is `frames * hop`.
    pub frames: usize,
    pub f_max: f64,
}

impl StftConfig {
    /// FFT 1024, hop 160, Hann 1024, 64 mel bands, 1024 frames at 16 kHz.
    pub fn full_scale() -> Self {
        StftConfig {
            sample_rate: SAMPLE_RATE,
            fft_size: 1024,
            hop: 160,
            win_size: 1024,
            n_mels: 64,
            frames: 1024,
            f_max: 8000.0,
        }
    }

    /// Small clips for laptop-scale training: 32 frames of hop 128.
    pub fn desk() -> Self {
        StftConfig {
            sample_rate: SAMPLE_RATE,
            fft_size: 256,
            hop: 128,
            win_size: 256,
            n_mels: 16,
            frames: 32,
            f_max: 8000.0,
        }
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AudioError::Config(m));
        if self.fft_size < 2 || self.hop == 0 || self.win_size == 0 || self.n_mels == 0 || self.frames == 0 {
            return bad(format!("zero-sized STFT parameter in {self:?}"));
        }
        if self.win_size > self.fft_size {
            return bad(format!("window {} exceeds FFT size {}", self.win_size, self.fft_size));
        }
        if self.f_max <= 0.0 || self.f_max > self.sample_rate as f64 / 2.0 {
            return bad(format!("f_max {} outside (0, Nyquist]", self.f_max));
        }
        Ok(())
    }
}

/// Complex STFT frames, `[frames][bins]` row-major.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex32>,
}

impl Spectrogram {
    pub fn magnitudes(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Planned FFTs, window and filterbank for one [`StftConfig`].
///
/// Frames are centered: frame `t` covers samples `[t*hop - fft/2, t*hop + fft/2)`
/// with zeros outside the signal, so a clip of `frames * hop` samples yields
/// exactly `frames` frames.
pub struct StftProcessor {
    pub cfg: StftConfig,
    fft: Arc<dyn Fft<f32>>,
    ifft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    pub filterbank: MelFilterbank,
    mel_pinv: OnceLock<Vec<f64>>,
}

impl std::fmt::Debug for StftProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftProcessor").field("cfg", &self.cfg).finish()
    }
}

impl StftProcessor {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(cfg.fft_size);
        let ifft = planner.plan_fft_inverse(cfg.fft_size);
        // Periodic Hann of win_size, centered inside the FFT frame.
        let mut window = vec![0.0f32; cfg.fft_size];
        let off = (cfg.fft_size - cfg.win_size) / 2;
        for i in 0..cfg.win_size {
            window[off + i] = (0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_size as f64).cos()) as f32;
        }
        let filterbank = mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.f_max);
        Ok(StftProcessor {
            cfg: cfg.clone(),
            fft,
            ifft,
            window,
            filterbank,
            mel_pinv: OnceLock::new(),
        })
    }

    /// Pseudo-inverse of the filterbank, `[n_bins, n_mels]` row-major.
    pub fn mel_pinv(&self) -> &[f64] {
        self.mel_pinv.get_or_init(|| {
            let fb = &self.filterbank;
            let m = nalgebra::DMatrix::from_row_slice(fb.n_mels, fb.n_bins, &fb.weights);
            let p = m.pseudo_inverse(1e-12).expect("filterbank pseudo-inverse");
            (0..fb.n_bins * fb.n_mels)
                .map(|i| p[(i / fb.n_mels, i % fb.n_mels)])
                .collect()
        })
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn stft(&self, x: &[f32]) -> Spectrogram {
        let (n, hop) = (self.cfg.fft_size, self.cfg.hop);
        let frames = self.cfg.frames_for(x.len());
        let bins = self.cfg.n_bins();
        let half = (n / 2) as isize;
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                *b = Complex32::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }

    /// Least-squares overlap-add inverse producing `len` samples.
    pub fn istft(&self, spec: &Spectrogram, len: usize) -> Vec<f32> {
        let (n, hop) = (self.cfg.fft_size, self.cfg.hop);
        let half = (n / 2) as isize;
        let mut acc = vec![0.0f64; len];
        let mut norm = vec![0.0f64; len];
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        let scale = 1.0 / n as f32;
        for t in 0..spec.frames {
            let row = &spec.data[t * spec.bins..(t + 1) * spec.bins];
            buf[..spec.bins].copy_from_slice(row);
            // Hermitian completion.
            for k in spec.bins..n {
                buf[k] = buf[n - k].conj();
            }
            self.ifft.process(&mut buf);
            let start = (t * hop) as isize - half;
            for i in 0..n {
                let idx = start + i as isize;
                if idx < 0 || idx as usize >= len {
                    continue;
                }
                let w = self.window[i] as f64;
                acc[idx as usize] += w * (buf[i].re * scale) as f64;
                norm[idx as usize] += w * w;
            }
        }
        // floor keeps the last half-window from amplifying inconsistent spectra
        let floor = 1e-2 * norm.iter().cloned().fold(0.0, f64::max);
        acc.iter()
            .zip(&norm)
            .map(|(&a, &w)| if w > 1e-10 { (a / w.max(floor)) as f32 } else { 0.0 })
            .collect()
    }

    pub fn mel_from_magnitudes(&self, mags: &[f32], frames: usize) -> MelSpec {
        let bins = self.cfg.n_bins();
        let f = self.cfg.n_mels;
        let mut out = Vec::with_capacity(frames * f);
        let mut row = vec![0.0f64; f];
        for t in 0..frames {
            self.filterbank.apply(&mags[t * bins..(t + 1) * bins], &mut row);
            out.extend(row.iter().map(|&v| (v + LOG_EPS).ln() as f32));
        }
        MelSpec::new(frames, f, out)
    }

    /// Log-mel spectrogram: `ln(filterbank · |STFT| + 1e-5)`.
    pub fn mel_spectrogram(&self, w: &Waveform) -> MelSpec {
        let spec = self.stft(&w.samples);
        self.mel_from_magnitudes(&spec.magnitudes(), spec.frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
            SAMPLE_RATE,
        )
    }

    #[test]
    fn full_scale_shape() {
        let cfg = StftConfig::full_scale();
        let p = StftProcessor::new(&cfg).unwrap();
        let w = Waveform::silence(3, SAMPLE_RATE).fix_length();
        let m = p.mel_spectrogram(&w);
        assert_eq!((m.frames, m.bands), (1024, 64));
    }

    #[test]
    fn shape_depends_only_on_length() {
        let p = StftProcessor::new(&StftConfig::desk()).unwrap();
        for len in [1, 127, 128, 129, 4096, 5000] {
            let m = p.mel_spectrogram(&Waveform::silence(len, SAMPLE_RATE));
            assert_eq!(m.frames, len.div_ceil(128));
            assert_eq!(m.bands, 16);
        }
    }

    #[test]
    fn zero_waveform_gives_log_eps() {
        let p = StftProcessor::new(&StftConfig::desk()).unwrap();
        let m = p.mel_spectrogram(&Waveform::silence(4096, SAMPLE_RATE));
        let floor = (LOG_EPS).ln() as f32;
        assert!(m.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_the_band_covering_its_frequency() {
        let cfg = StftConfig::full_scale();
        let p = StftProcessor::new(&cfg).unwrap();
        let m = p.mel_spectrogram(&tone(1000.0, 16_000, 0.5));
        // Oracle: evaluate every triangle at 1 kHz directly from its edges.
        let edges = &p.filterbank.edges_hz;
        let expected = (0..64)
            .map(|b| {
                let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let tri = if (lo..=c).contains(&1000.0) {
                    (1000.0 - lo) / (c - lo)
                } else if (c..hi).contains(&1000.0) {
                    (hi - 1000.0) / (hi - c)
                } else {
                    0.0
                };
                tri * 2.0 / (hi - lo)
            })
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        for t in 10..90 {
            let row = m.row(t);
            let arg = (0..64).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn istft_inverts_stft() {
        let p = StftProcessor::new(&StftConfig::desk()).unwrap();
        let mut rng = Rng::new(8);
        let x: Vec<f32> = (0..4096).map(|_| rng.uniform_range(-0.5, 0.5) as f32).collect();
        let y = p.istft(&p.stft(&x), x.len());
        let err = |r: std::ops::Range<usize>| {
            r.map(|i| (x[i] - y[i]).abs()).fold(0.0f32, f32::max)
        };
        // tails are covered by few window samples, so f32 round-off grows there
        assert!(err(128..4096 - 128) < 1e-5, "{}", err(128..3968));
        assert!(y.iter().all(|v| v.abs() <= 0.5 + 1e-5));
    }

    #[test]
    fn invalid_configs() {
        let mut c = StftConfig::desk();
        c.win_size = 512;
        assert!(StftProcessor::new(&c).is_err());
        let mut c = StftConfig::desk();
        c.f_max = 9000.0;
        assert!(c.validate().is_err());
    }
}
