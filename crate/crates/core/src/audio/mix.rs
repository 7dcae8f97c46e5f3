use serde::{Deserialize, Serialize};

use super::{AudioError, Result, Waveform};

/// Mean power `Σx² / n`, accumulated in f64.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

/// `10·log10(P_a / P_b)`.
pub fn measure_snr(a: &Waveform, b: &Waveform) -> Result<f64> {
    let (pa, pb) = (power(&a.samples), power(&b.samples));
    if pa == 0.0 {
        return Err(AudioError::ZeroPower("first"));
    }
    if pb == 0.0 {
        return Err(AudioError::ZeroPower("second"));
    }
    Ok(10.0 * (pa / pb).log10())
}

/// Gains applied while building a mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    /// Interferer gains, one per mixed-in source, before peak normalization.
    pub gains: Vec<f64>,
    /// Global scale applied afterwards so the peak stays within [-1, 1].
    pub norm_scale: f64,
}

fn snr_gain(p_primary: f64, interferer: &Waveform, snr_db: f64) -> Result<f64> {
    let pi = power(&interferer.samples);
    if pi == 0.0 {
        return Err(AudioError::ZeroPower("interferer"));
    }
    Ok((p_primary / (pi * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `primary + g·interferer` with `g = sqrt(P_p / (P_i · 10^(snr/10)))`, then
/// peak-normalized when the sum would clip.
pub fn mix_at_snr(primary: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<(Waveform, MixRecord)> {
    mix_many(primary, &[(interferer, snr_db)])
}

/// Mixes several interferers, each scaled relative to the primary's power.
pub fn mix_many(primary: &Waveform, interferers: &[(&Waveform, f64)]) -> Result<(Waveform, MixRecord)> {
    let pp = power(&primary.samples);
    if pp == 0.0 {
        return Err(AudioError::ZeroPower("primary"));
    }
    let mut acc: Vec<f64> = primary.samples.iter().map(|&v| v as f64).collect();
    let mut gains = Vec::with_capacity(interferers.len());
    for (w, snr) in interferers {
        if w.len() != primary.len() {
            return Err(AudioError::LengthMismatch(primary.len(), w.len()));
        }
        let g = snr_gain(pp, w, *snr)?;
        for (a, &v) in acc.iter_mut().zip(&w.samples) {
            *a += g * v as f64;
        }
        gains.push(g);
    }
    let peak = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let samples = acc.iter().map(|&v| (v * norm_scale) as f32).collect();
    Ok((
        Waveform::new(samples, primary.rate),
        MixRecord { gains, norm_scale },
    ))
}

/// Scales a waveform (used to re-derive stems from a [`MixRecord`]).
pub fn scaled(w: &Waveform, g: f64) -> Waveform {
    Waveform::new(w.samples.iter().map(|&v| (v as f64 * g) as f32).collect(), w.rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn unit_power(seed: u64, n: usize) -> Waveform {
        // ±0.1 square-ish signal then rescaled to power exactly 0.01
        let mut rng = Rng::new(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let p = raw.iter().map(|v| v * v).sum::<f64>() / n as f64;
        Waveform::new(raw.iter().map(|v| (0.1 * v / p.sqrt()) as f32).collect(), SAMPLE_RATE)
    }

    #[test]
    fn equal_power_zero_db_unit_gain() {
        let a = unit_power(1, 4000);
        let b = unit_power(2, 4000);
        let (_, rec) = mix_at_snr(&a, &b, 0.0).unwrap();
        assert!((rec.gains[0] - 1.0).abs() < 1e-5);
        let (_, rec) = mix_at_snr(&a, &b, 20.0).unwrap();
        assert!((rec.gains[0] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn measure_snr_cases() {
        let a = unit_power(3, 1000);
        assert!(measure_snr(&a, &a).unwrap().abs() < 1e-12);
        let b = scaled(&a, 0.1);
        assert!((measure_snr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(matches!(
            measure_snr(&a, &Waveform::silence(1000, SAMPLE_RATE)),
            Err(AudioError::ZeroPower(_))
        ));
    }

    #[test]
    fn zero_interferer_rejected() {
        let a = unit_power(3, 100);
        assert!(mix_at_snr(&a, &Waveform::silence(100, SAMPLE_RATE), 10.0).is_err());
        assert!(mix_at_snr(&a, &Waveform::silence(50, SAMPLE_RATE), 10.0).is_err());
    }

    #[test]
    fn clipping_mixes_are_peak_normalized() {
        let a = Waveform::new(vec![0.9; 64], SAMPLE_RATE);
        let b = Waveform::new(vec![0.9; 64], SAMPLE_RATE);
        let (m, rec) = mix_at_snr(&a, &b, 0.0).unwrap();
        assert!(m.peak() <= 1.0 + 1e-7);
        assert!((rec.norm_scale - 1.0 / 1.8).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn closed_loop_snr(snr in -10.0f64..30.0, s1 in 0u64..500, s2 in 500u64..1000) {
            let a = unit_power(s1, 2048);
            let b = unit_power(s2, 2048);
            let (_, rec) = mix_at_snr(&a, &b, snr).unwrap();
            let measured = measure_snr(&a, &scaled(&b, rec.gains[0])).unwrap();
            prop_assert!((measured - snr).abs() < 0.1);
        }
    }
}
