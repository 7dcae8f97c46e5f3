use rustfft::num_complex::Complex32;

use super::mel::{MelSpec, LOG_EPS};
use super::{StftProcessor, Waveform};
use crate::numerics::Rng;

/// Linear magnitudes from a log-mel grid through the filterbank
/// pseudo-inverse, clamped to be nonnegative. `[frames][bins]`.
pub fn mel_to_linear(mel: &MelSpec, proc: &StftProcessor) -> Vec<f32> {
    let bins = proc.cfg.n_bins();
    let f = mel.bands;
    let pinv = proc.mel_pinv();
    let mut out = vec![0.0f32; mel.frames * bins];
    for t in 0..mel.frames {
        let energies: Vec<f64> = mel
            .row(t)
            .iter()
            .map(|&v| ((v as f64).exp() - LOG_EPS).max(0.0))
            .collect();
        for k in 0..bins {
            let v: f64 = pinv[k * f..(k + 1) * f]
                .iter()
                .zip(&energies)
                .map(|(a, b)| a * b)
                .sum();
            out[t * bins + k] = v.max(0.0) as f32;
        }
    }
    out
}

/// Phase reconstruction from a log-mel grid; output has `frames * hop` samples.
pub fn griffin_lim(mel: &MelSpec, proc: &StftProcessor, iters: usize) -> Waveform {
    griffin_lim_traced(mel, proc, iters).0
}

/// Like [`griffin_lim`], also returning the spectral inconsistency
/// `‖|STFT(x_i)| − S‖ / ‖S‖` after each iteration.
pub fn griffin_lim_traced(mel: &MelSpec, proc: &StftProcessor, iters: usize) -> (Waveform, Vec<f64>) {
    let iters = iters.max(1);
    let target = mel_to_linear(mel, proc);
    let len = mel.frames * proc.cfg.hop;
    let bins = proc.cfg.n_bins();
    let target_norm = target.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();

    let mut rng = Rng::new(0x6C1F);
    let mut phase: Vec<Complex32> = (0..target.len())
        .map(|_| {
            let a = rng.uniform() * std::f64::consts::TAU;
            Complex32::new(a.cos() as f32, a.sin() as f32)
        })
        .collect();
    let mut spec = proc.stft(&vec![0.0; len]);
    let mut trace = Vec::with_capacity(iters);
    let mut x = vec![0.0f32; len];
    for _ in 0..iters {
        for ((s, &mag), &ph) in spec.data.iter_mut().zip(&target).zip(&phase) {
            *s = ph * mag;
        }
        x = proc.istft(&spec, len);
        let re = proc.stft(&x);
        let mut err = 0.0f64;
        for (i, c) in re.data.iter().enumerate() {
            let n = c.norm();
            err += (n as f64 - target[i] as f64).powi(2);
            phase[i] = if n > 1e-12 { c / n } else { Complex32::new(1.0, 0.0) };
        }
        trace.push(if target_norm > 0.0 { err.sqrt() / target_norm } else { 0.0 });
        debug_assert_eq!(re.bins, bins);
    }
    (Waveform::new(x, proc.cfg.sample_rate), trace)
}
