use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use log::warn;

use super::{AudioError, Result, Waveform, SAMPLE_RATE};

#[derive(Clone, Debug)]
pub struct WavReadOptions {
    /// Reject non-mono input and rate mismatches instead of adapting.
    pub strict: bool,
    pub expected_rate: u32,
}

impl Default for WavReadOptions {
    fn default() -> Self {
        WavReadOptions {
            strict: true,
            expected_rate: SAMPLE_RATE,
        }
    }
}

/// Reads 16-bit PCM. Samples map to `[-1, 1)` as `q / 32768`.
pub fn read_wav(path: &Path, opts: &WavReadOptions) -> Result<Waveform> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::Unsupported(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 && opts.strict {
        return Err(AudioError::NotMono(spec.channels));
    }
    // Resampling is out of scope, so a rate mismatch is always an error.
    if spec.sample_rate != opts.expected_rate {
        return Err(AudioError::RateMismatch {
            got: spec.sample_rate,
            expected: opts.expected_rate,
        });
    }
    let raw: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let ch = spec.channels as usize;
    if ch > 1 {
        warn!("{}: averaging {ch} channels to mono", path.display());
    }
    let samples = raw
        .chunks(ch)
        .map(|frame| frame.iter().map(|&q| q as f32 / 32768.0).sum::<f32>() / ch as f32)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

fn quantize(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
