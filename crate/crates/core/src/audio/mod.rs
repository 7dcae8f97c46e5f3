//! Waveform I/O, log-mel analysis, Griffin-Lim resynthesis and SNR mixing.

mod griffin_lim;
mod mel;
mod mix;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, mel_to_linear};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank, MelSpec, LOG_EPS};
pub use mix::{measure_snr, mix_at_snr, mix_many, power, scaled, MixRecord};
pub use stft::{Spectrogram, StftConfig, StftProcessor};
pub use wav::{read_wav, write_wav, WavReadOptions};

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
/// 1024 frames at hop 160.
pub const FULL_SCALE_SAMPLES: usize = 1024 * 160;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported encoding: {0}")]
    Unsupported(String),
    #[error("sample rate {got} Hz does not match expected {expected} Hz")]
    RateMismatch { got: u32, expected: u32 },
    #[error("{0}-channel input rejected in strict mode")]
    NotMono(u16),
    #[error("zero-power {0} signal")]
    ZeroPower(&'static str),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate: u32) -> Self {
        Waveform { samples, rate }
    }

    pub fn silence(len: usize, rate: u32) -> Self {
        Waveform::new(vec![0.0; len], rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Zero-pads at the end or truncates to exactly `len` samples.
    pub fn fix_length_to(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }

    /// Pads or crops to the full-scale duration of 1024×160 samples.
    pub fn fix_length(self) -> Self {
        self.fix_length_to(FULL_SCALE_SAMPLES)
    }
}
