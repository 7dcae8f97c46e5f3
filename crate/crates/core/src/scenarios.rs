//! Synthetic source library, scenario mixtures and the benchmark generator.
//!
//! Scenario ids: 1 = on-screen environment + off-screen speech, 2 = on-screen
//! speech + off-screen environment, 3 = on-screen environment + off-screen
//! environment + off-screen speech. Id 0 marks speech-only stage-1 clips.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioError, MixRecord, Waveform, SAMPLE_RATE};
use crate::conditioners::{synth_visual_features, ConditionSet, EnvEncoder};
use crate::numerics::Rng;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BLOCKLIST: [&str; 3] = ["speech", "voice", "say"];
pub const DESK_COUNTS: [usize; 3] = [12, 16, 12];
pub const FULL_COUNTS: [usize; 3] = [300, 401, 302];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0}")]
    UnknownScenario(u8),
    #[error("library has no {0} sources in the requested split")]
    MissingKind(&'static str),
    #[error("library too small: need {need} distinct {kind} sources, have {have}")]
    TooSmall { kind: &'static str, need: usize, have: usize },
    #[error("unknown {kind} recipe {id}")]
    UnknownRecipe { kind: &'static str, id: u32 },
    #[error("invalid SNR range [{0}, {1}]")]
    SnrRange(f64, f64),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub id: u8,
    pub on_screen: SourceKind,
    /// Off-screen sources in mixing order.
    pub off_screen: &'static [SourceKind],
}

impl ScenarioSpec {
    pub fn get(id: u8) -> Result<Self> {
        use SourceKind::*;
        let (on_screen, off_screen): (SourceKind, &'static [SourceKind]) = match id {
            0 => (Speech, &[]),
            1 => (Env, &[Speech]),
            2 => (Speech, &[Env]),
            3 => (Env, &[Env, Speech]),
            _ => return Err(ScenarioError::UnknownScenario(id)),
        };
        Ok(ScenarioSpec { id, on_screen, off_screen })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Env,
    Speech,
}

impl SourceKind {
    fn name(self) -> &'static str {
        match self {
            SourceKind::Env => "env",
            SourceKind::Speech => "speech",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Bench,
}

impl Split {
    /// Every fourth recipe id is held out for the benchmark.
    pub fn of(id: u32) -> Split {
        if id % 4 == 3 {
            Split::Bench
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    /// Harmonic stack with amplitude modulation.
    Tone { f0: f64, harmonics: u32, am_hz: f64 },
    /// Band of random sinusoids.
    Noise { lo: f64, hi: f64 },
    /// Decaying tone bursts.
    Pulses { freq: f64, rate: f64 },
    /// Repeated upward sweeps.
    Chirp { lo: f64, hi: f64, rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRecipe {
    pub id: u32,
    pub caption: String,
    /// Base class caption without modifier, used as the visual label.
    pub class: String,
    pub texture: Texture,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechRecipe {
    pub id: u32,
    pub transcript: String,
    pub f0: f64,
}

const ENV_CLASSES: &[(&str, Texture)] = &[
    ("dog barking", Texture::Pulses { freq: 620.0, rate: 3.0 }),
    ("heavy rain", Texture::Noise { lo: 2500.0, hi: 7000.0 }),
    ("car engine idling", Texture::Tone { f0: 55.0, harmonics: 8, am_hz: 9.0 }),
    ("birds chirping", Texture::Chirp { lo: 2600.0, hi: 4400.0, rate: 7.0 }),
    ("wind blowing", Texture::Noise { lo: 120.0, hi: 700.0 }),
    ("church bell ringing", Texture::Tone { f0: 440.0, harmonics: 3, am_hz: 0.8 }),
    ("a man says hello", Texture::Tone { f0: 120.0, harmonics: 10, am_hz: 4.0 }),
    ("water flowing", Texture::Noise { lo: 800.0, hi: 2200.0 }),
    ("clock ticking", Texture::Pulses { freq: 3200.0, rate: 2.0 }),
    ("crowd voices murmuring", Texture::Noise { lo: 300.0, hi: 3000.0 }),
    ("siren wailing", Texture::Chirp { lo: 700.0, hi: 1500.0, rate: 1.5 }),
    ("helicopter flying", Texture::Tone { f0: 90.0, harmonics: 5, am_hz: 18.0 }),
    ("keyboard typing", Texture::Pulses { freq: 2000.0, rate: 9.0 }),
    ("speech in a hall", Texture::Noise { lo: 200.0, hi: 2500.0 }),
    ("frog croaking", Texture::Pulses { freq: 350.0, rate: 5.0 }),
    ("violin playing", Texture::Tone { f0: 660.0, harmonics: 6, am_hz: 5.5 }),
];

const MODIFIERS: &[&str] = &["", "distant ", "loud ", "soft "];

const WORDS: &[&str] = &[
    "hello", "yes", "no", "good", "morning", "thank", "you", "see", "the", "river", "open", "door", "red", "blue",
    "coffee", "today", "later", "music", "stop", "go", "left", "right", "quiet", "please", "ten", "home", "window",
    "light", "fast", "slow", "rain", "sun",
];

/// Case-insensitive substring filter. Returns `(kept, removed)`.
pub fn filter_env_captions(captions: &[String], blocklist: &[&str]) -> (Vec<String>, Vec<String>) {
    let block: Vec<String> = blocklist.iter().map(|b| b.to_lowercase()).collect();
    captions
        .iter()
        .cloned()
        .partition(|c| {
            let lc = c.to_lowercase();
            !block.iter().any(|b| lc.contains(b.as_str()))
        })
}

/// Everything needed to regenerate a [`SourceLibrary`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub n_env: usize,
    pub n_speech: usize,
    pub seed: u64,
    pub blocklist: Vec<String>,
}

impl LibrarySpec {
    pub fn new(n_env: usize, n_speech: usize, seed: u64) -> Self {
        LibrarySpec { n_env, n_speech, seed, blocklist: DEFAULT_BLOCKLIST.map(String::from).to_vec() }
    }

    pub fn for_counts(counts: [usize; 3], seed: u64) -> Self {
        let env_need = counts[0] + counts[1] + 2 * counts[2];
        let sp_need = counts.iter().sum::<usize>();
        LibrarySpec::new(4 * env_need + 8, 4 * sp_need + 8, seed)
    }

    pub fn build(&self) -> SourceLibrary {
        let block: Vec<&str> = self.blocklist.iter().map(String::as_str).collect();
        SourceLibrary::synthetic(self.n_env, self.n_speech, self.seed, &block)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLibrary {
    pub env: Vec<EnvRecipe>,
    pub speech: Vec<SpeechRecipe>,
    /// Env class captions rejected by the speech-keyword filter.
    pub removed: Vec<String>,
}

impl SourceLibrary {
    /// Deterministic catalog of about `n_env` environmental and exactly
    /// `n_speech` speech recipes.
    pub fn synthetic(n_env: usize, n_speech: usize, seed: u64, blocklist: &[&str]) -> Self {
        let classes: Vec<String> = ENV_CLASSES.iter().map(|c| c.0.to_string()).collect();
        let (kept, removed) = filter_env_captions(&classes, blocklist);
        let kept: Vec<&(&str, Texture)> = ENV_CLASSES.iter().filter(|c| kept.iter().any(|k| k == c.0)).collect();
        let mut rng = Rng::new(seed).derive_str("library");
        let env = (0..n_env as u32)
            .map(|id| {
                let (class, tex) = kept[id as usize % kept.len()];
                let m = MODIFIERS[(id as usize / kept.len()) % MODIFIERS.len()];
                let gain = match m {
                    "distant " | "soft " => 0.4,
                    "loud " => 0.9,
                    _ => 0.65,
                };
                let jitter = 1.0 + 0.04 * (rng.uniform() - 0.5);
                let texture = match *tex {
                    Texture::Tone { f0, harmonics, am_hz } => Texture::Tone { f0: f0 * jitter, harmonics, am_hz },
                    Texture::Noise { lo, hi } => Texture::Noise { lo: lo * jitter, hi: hi * jitter },
                    Texture::Pulses { freq, rate } => Texture::Pulses { freq: freq * jitter, rate },
                    Texture::Chirp { lo, hi, rate } => Texture::Chirp { lo: lo * jitter, hi: hi * jitter, rate },
                };
                EnvRecipe { id, caption: format!("{m}{class}"), class: class.to_string(), texture, gain }
            })
            .collect();
        let speech = (0..n_speech as u32)
            .map(|id| {
                let n = 1 + rng.below(3);
                let words: Vec<&str> = (0..n).map(|_| WORDS[rng.below(WORDS.len())]).collect();
                SpeechRecipe { id, transcript: words.join(" "), f0: rng.uniform_range(95.0, 230.0) }
            })
            .collect();
        SourceLibrary { env, speech, removed }
    }

    /// Sized so the benchmark split can serve `counts` without reuse.
    pub fn for_counts(counts: [usize; 3], seed: u64) -> Self {
        LibrarySpec::for_counts(counts, seed).build()
    }

    pub fn ids(&self, kind: SourceKind, split: Split) -> Vec<u32> {
        match kind {
            SourceKind::Env => self.env.iter().map(|r| r.id).filter(|&i| Split::of(i) == split).collect(),
            SourceKind::Speech => self.speech.iter().map(|r| r.id).filter(|&i| Split::of(i) == split).collect(),
        }
    }

    pub fn env_recipe(&self, id: u32) -> Result<&EnvRecipe> {
        self.env.get(id as usize).ok_or(ScenarioError::UnknownRecipe { kind: "env", id })
    }

    pub fn speech_recipe(&self, id: u32) -> Result<&SpeechRecipe> {
        self.speech.get(id as usize).ok_or(ScenarioError::UnknownRecipe { kind: "speech", id })
    }

    pub fn render(&self, src: &SourceRef, len: usize) -> Result<Waveform> {
        Ok(match src.kind {
            SourceKind::Env => synth_env(self.env_recipe(src.recipe)?, src.seed, len),
            SourceKind::Speech => synth_speech(self.speech_recipe(src.recipe)?, src.seed, len),
        })
    }
}

/// Texture synthesis; deterministic in `(recipe, seed)`.
pub fn synth_env(r: &EnvRecipe, seed: u64, len: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let mut rng = Rng::new(seed).derive(r.id as u64);
    let phase0 = rng.uniform() * TAU;
    let mut out = vec![0.0f64; len];
    match r.texture {
        Texture::Tone { f0, harmonics, am_hz } => {
            for (n, o) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                let am = 0.6 + 0.4 * (TAU * am_hz * t + phase0).sin();
                let s: f64 = (1..=harmonics).map(|k| (TAU * f0 * k as f64 * t + phase0 * k as f64).sin() / k as f64).sum();
                *o = am * s;
            }
        }
        Texture::Noise { lo, hi } => {
            let parts: Vec<(f64, f64)> = (0..32).map(|_| (rng.uniform_range(lo, hi), rng.uniform() * TAU)).collect();
            for (n, o) in out.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *o = parts.iter().map(|(f, p)| (TAU * f * t + p).sin()).sum::<f64>() / 4.0;
            }
        }
        Texture::Pulses { freq, rate } => {
            // rate is per 0.256 s so short clips still contain bursts
            let period = (0.256 * sr / rate).max(1.0);
            let offset = rng.uniform() * period;
            for (n, o) in out.iter_mut().enumerate() {
                let local = (n as f64 + offset) % period / sr;
                *o = (-local * 60.0).exp() * (TAU * freq * local).sin() * 2.0;
            }
        }
        Texture::Chirp { lo, hi, rate } => {
            let period = (0.256 * sr / rate).max(1.0);
            let mut phase = phase0;
            for (n, o) in out.iter_mut().enumerate() {
                let frac = (n as f64 % period) / period;
                phase += TAU * (lo + (hi - lo) * frac) / sr;
                *o = phase.sin();
            }
        }
    }
    normalize_rms(&mut out, 0.1 * r.gain / 0.65);
    Waveform::new(out.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

/// `(F1, F2)` for vowels and voiced consonants; `None` marks a fricative.
fn formants(c: char) -> Option<Option<(f64, f64)>> {
    Some(match c {
        'a' => Some((730.0, 1090.0)),
        'e' => Some((530.0, 1840.0)),
        'i' | 'y' => Some((270.0, 2290.0)),
        'o' => Some((570.0, 840.0)),
        'u' | 'w' => Some((300.0, 870.0)),
        'm' | 'n' => Some((280.0, 1300.0)),
        'l' | 'r' => Some((360.0, 1400.0)),
        'b' | 'd' | 'g' | 'v' | 'j' => Some((250.0, 1000.0)),
        's' | 'f' | 'h' | 'z' | 'c' | 'x' => None,
        'p' | 't' | 'k' | 'q' => None,
        ' ' => return None,
        _ => Some((500.0, 1500.0)),
    })
}

/// Formant-like speech: one segment per character with voiced harmonics
/// shaped by two resonances, noise for fricatives, gaps for spaces.
pub fn synth_speech(r: &SpeechRecipe, seed: u64, len: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let chars: Vec<char> = r.transcript.to_lowercase().chars().collect();
    let mut rng = Rng::new(seed).derive(r.id as u64 | 1 << 40);
    let seg = (len / (chars.len() + 2)).max(1);
    let lead = seg;
    let mut out = vec![0.0f64; len];
    let mut phase = rng.uniform() * TAU;
    let n_harm = (4000.0 / r.f0) as usize;
    let fric: Vec<(f64, f64)> = (0..16).map(|_| (rng.uniform_range(3500.0, 7000.0), rng.uniform() * TAU)).collect();
    for (ci, &c) in chars.iter().enumerate() {
        let start = lead + ci * seg;
        let Some(kind) = formants(c) else { continue };
        let amps: Vec<f64> = match kind {
            Some((f1, f2)) => (1..=n_harm)
                .map(|k| {
                    let f = k as f64 * r.f0;
                    1.0 / (1.0 + ((f - f1) / 90.0).powi(2)) + 0.7 / (1.0 + ((f - f2) / 120.0).powi(2))
                })
                .collect(),
            None => vec![],
        };
        for n in start..(start + seg).min(len) {
            let local = (n - start) as f64 / seg as f64;
            let env = (std::f64::consts::PI * local).sin();
            let t = n as f64 / sr;
            let v = if amps.is_empty() {
                fric.iter().map(|(f, p)| (TAU * f * t + p).sin()).sum::<f64>() * 0.08
            } else {
                amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum::<f64>()
            };
            out[n] = env * v;
            phase += TAU * r.f0 * (1.0 + 0.05 * (TAU * 3.0 * t).sin()) / sr;
        }
    }
    normalize_rms(&mut out, 0.1);
    Waveform::new(out.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub kind: SourceKind,
    pub recipe: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffSource {
    pub source: SourceRef,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub index: usize,
    pub scenario: u8,
    pub seed: u64,
    pub on_source: SourceRef,
    pub off_sources: Vec<OffSource>,
    pub on_env_caption: String,
    pub off_env_caption: String,
    pub transcription: String,
    /// Label the visual stream is synthesized from.
    pub visual_label: String,
    pub mix: MixRecord,
}

impl SampleManifest {
    pub fn conditions(&self, enc: &EnvEncoder, n_visual: usize, d_vis: usize, max_chars: usize) -> ConditionSet {
        let vis = synth_visual_features(self.seed, n_visual, &self.visual_label, d_vis);
        ConditionSet::new(enc, &self.on_env_caption, &self.off_env_caption, &self.transcription, vis, max_chars)
    }

    /// Rebuilds the mixture from recipes and recorded gains.
    pub fn reconstruct(&self, lib: &SourceLibrary, len: usize) -> Result<Waveform> {
        let primary = lib.render(&self.on_source, len)?;
        let off = self.off_sources.iter().map(|o| lib.render(&o.source, len)).collect::<Result<Vec<_>>>()?;
        Ok(apply_mix(&primary, &off.iter().collect::<Vec<_>>(), &self.mix))
    }

    /// Each stem as it appears in the mixture (gains and normalization
    /// applied), on-screen source first.
    pub fn stems(&self, lib: &SourceLibrary, len: usize) -> Result<Vec<Waveform>> {
        let s = self.mix.norm_scale;
        let mut out = vec![crate::audio::scaled(&lib.render(&self.on_source, len)?, s)];
        for (o, g) in self.off_sources.iter().zip(&self.mix.gains) {
            out.push(crate::audio::scaled(&lib.render(&o.source, len)?, g * s));
        }
        Ok(out)
    }
}

/// Same arithmetic as [`crate::audio::mix_many`] with given gains.
pub fn apply_mix(primary: &Waveform, off: &[&Waveform], rec: &MixRecord) -> Waveform {
    let mut acc: Vec<f64> = primary.samples.iter().map(|&v| v as f64).collect();
    for (w, g) in off.iter().zip(&rec.gains) {
        for (a, &v) in acc.iter_mut().zip(&w.samples) {
            *a += g * v as f64;
        }
    }
    Waveform::new(acc.iter().map(|&v| (v * rec.norm_scale) as f32).collect(), primary.rate)
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub mixture: Waveform,
    pub manifest: SampleManifest,
}

/// Mixes one sample for `scenario` from the given recipe ids (on-screen
/// first, then off-screen in [`ScenarioSpec`] order).
fn assemble(
    lib: &SourceLibrary,
    spec: ScenarioSpec,
    recipes: &[u32],
    rng: &mut Rng,
    snr: (f64, f64),
    len: usize,
    index: usize,
) -> Result<TrainingSample> {
    let seed = rng.next_u64();
    let on_source = SourceRef { kind: spec.on_screen, recipe: recipes[0], seed: rng.next_u64() };
    let mut off_sources = Vec::new();
    for (k, &kind) in spec.off_screen.iter().enumerate() {
        let source = SourceRef { kind, recipe: recipes[k + 1], seed: rng.next_u64() };
        off_sources.push(OffSource { source, snr_db: rng.uniform_range(snr.0, snr.1) });
    }
    let primary = lib.render(&on_source, len)?;
    let off: Vec<Waveform> = off_sources.iter().map(|o| lib.render(&o.source, len)).collect::<Result<_>>()?;
    let pairs: Vec<(&Waveform, f64)> = off.iter().zip(&off_sources).map(|(w, o)| (w, o.snr_db)).collect();
    let (mixture, mix) = crate::audio::mix_many(&primary, &pairs)?;

    let mut on_env_caption = String::new();
    let mut off_env_caption = String::new();
    let mut transcription = String::new();
    let visual_label = match spec.on_screen {
        SourceKind::Env => {
            let r = lib.env_recipe(on_source.recipe)?;
            on_env_caption = r.caption.clone();
            format!("env:{}", r.class)
        }
        SourceKind::Speech => {
            transcription = lib.speech_recipe(on_source.recipe)?.transcript.clone();
            "speech:face".to_string()
        }
    };
    for o in &off_sources {
        match o.source.kind {
            SourceKind::Env => off_env_caption = lib.env_recipe(o.source.recipe)?.caption.clone(),
            SourceKind::Speech => transcription = lib.speech_recipe(o.source.recipe)?.transcript.clone(),
        }
    }
    Ok(TrainingSample {
        mixture,
        manifest: SampleManifest {
            index,
            scenario: spec.id,
            seed,
            on_source,
            off_sources,
            on_env_caption,
            off_env_caption,
            transcription,
            visual_label,
            mix,
        },
    })
}

fn check_snr(snr: (f64, f64)) -> Result<()> {
    if !(snr.0.is_finite() && snr.1.is_finite() && snr.0 <= snr.1) {
        return Err(ScenarioError::SnrRange(snr.0, snr.1));
    }
    Ok(())
}

/// Draws a training mixture for `scenario` (0..=3) from the train split.
pub fn build_training_sample(
    scenario: u8,
    lib: &SourceLibrary,
    rng: &mut Rng,
    snr: (f64, f64),
    len: usize,
) -> Result<TrainingSample> {
    check_snr(snr)?;
    let spec = ScenarioSpec::get(scenario)?;
    let mut recipes = Vec::new();
    for kind in std::iter::once(spec.on_screen).chain(spec.off_screen.iter().copied()) {
        let pool = lib.ids(kind, Split::Train);
        if pool.is_empty() {
            return Err(ScenarioError::MissingKind(kind.name()));
        }
        recipes.push(pool[rng.below(pool.len())]);
    }
    assemble(lib, spec, &recipes, rng, snr, len, 0)
}

/// Deterministic manifests for a benchmark with `counts` items per scenario.
/// Sources come from the held-out split and are never reused.
pub fn plan_bench(lib: &SourceLibrary, counts: [usize; 3], seed: u64, snr: (f64, f64), len: usize) -> Result<Vec<SampleManifest>> {
    check_snr(snr)?;
    let root = Rng::new(seed).derive_str("bench");
    let mut pools = [SourceKind::Env, SourceKind::Speech].map(|k| {
        let mut ids = lib.ids(k, Split::Bench);
        shuffle(&mut ids, &mut root.derive_str(k.name()));
        ids
    });
    let mut jobs = Vec::new();
    for (s, &n) in counts.iter().enumerate() {
        let spec = ScenarioSpec::get(s as u8 + 1)?;
        for _ in 0..n {
            let mut recipes = Vec::new();
            for kind in std::iter::once(spec.on_screen).chain(spec.off_screen.iter().copied()) {
                let pool = &mut pools[(kind == SourceKind::Speech) as usize];
                let need = match kind {
                    SourceKind::Env => counts[0] + counts[1] + 2 * counts[2],
                    SourceKind::Speech => counts.iter().sum(),
                };
                let have = lib.ids(kind, Split::Bench).len();
                recipes.push(pool.pop().ok_or(ScenarioError::TooSmall { kind: kind.name(), need, have })?);
            }
            jobs.push((spec, recipes));
        }
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, (spec, recipes))| {
            let mut rng = root.derive(i as u64);
            Ok(assemble(lib, spec, &recipes, &mut rng, snr, len, i)?.manifest)
        })
        .collect()
}

fn shuffle(v: &mut [u32], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

#[derive(Serialize, Deserialize)]
pub struct BenchFile {
    pub schema_version: u32,
    pub library: LibrarySpec,
    pub seed: u64,
    pub counts: [usize; 3],
    pub clip_len: usize,
    pub items: Vec<SampleManifest>,
}

/// Writes `manifest.json`, `wav/NNNN.wav` mixtures and `ref/NNNN_kK.wav` stems
/// (k = 0 on-screen, then off-screen sources).
pub fn build_bench(
    dir: &Path,
    spec: &LibrarySpec,
    counts: [usize; 3],
    seed: u64,
    snr: (f64, f64),
    len: usize,
) -> Result<Vec<SampleManifest>> {
    let lib = &spec.build();
    let items = plan_bench(lib, counts, seed, snr, len)?;
    fs::create_dir_all(dir.join("wav"))?;
    fs::create_dir_all(dir.join("ref"))?;
    items.par_iter().try_for_each(|m| -> Result<()> {
        write_wav(&dir.join("wav").join(format!("{:04}.wav", m.index)), &m.reconstruct(lib, len)?)?;
        for (k, stem) in m.stems(lib, len)?.iter().enumerate() {
            write_wav(&dir.join("ref").join(format!("{:04}_k{k}.wav", m.index)), stem)?;
        }
        Ok(())
    })?;
    let file =
        BenchFile { schema_version: SCHEMA_VERSION, library: spec.clone(), seed, counts, clip_len: len, items: items.clone() };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(items)
}

pub fn read_bench(dir: &Path) -> Result<BenchFile> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}

/// A mixed training set: manifests only, mixtures are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub library: LibrarySpec,
    pub clip_len: usize,
    pub stage1: Vec<SampleManifest>,
    pub stage2: Vec<SampleManifest>,
    pub val: Vec<SampleManifest>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{measure_snr, power, scaled};
    use proptest::prelude::{prop_assert, proptest};

    const LEN: usize = 4096;

    fn lib() -> SourceLibrary {
        SourceLibrary::for_counts(DESK_COUNTS, 7)
    }

    #[test]
    fn caption_filter() {
        let caps: Vec<String> = ["a man says hello", "dog barking", "Voice memo", "SPEECH"].map(String::from).to_vec();
        let (kept, removed) = filter_env_captions(&caps, &DEFAULT_BLOCKLIST);
        assert_eq!(kept, vec!["dog barking".to_string()]);
        assert_eq!(removed.len(), 3);
        assert_eq!(filter_env_captions(&[], &DEFAULT_BLOCKLIST), (vec![], vec![]));
        let l = lib();
        assert!(l.env.iter().all(|r| !DEFAULT_BLOCKLIST.iter().any(|b| r.caption.contains(b))));
        assert_eq!(l.removed.len(), 3);
    }

    #[test]
    fn splits_disjoint() {
        let l = lib();
        for kind in [SourceKind::Env, SourceKind::Speech] {
            let a = l.ids(kind, Split::Train);
            let b = l.ids(kind, Split::Bench);
            assert!(!a.is_empty() && !b.is_empty());
            assert!(a.iter().all(|i| !b.contains(i)));
        }
    }

    #[test]
    fn scenario_schemas() {
        let l = lib();
        let mut rng = Rng::new(3);
        let s1 = build_training_sample(1, &l, &mut rng, (-5.0, 20.0), LEN).unwrap().manifest;
        assert!(!s1.on_env_caption.is_empty() && s1.off_env_caption.is_empty() && !s1.transcription.is_empty());
        assert_eq!(s1.off_sources.len(), 1);
        let s2 = build_training_sample(2, &l, &mut rng, (-5.0, 20.0), LEN).unwrap().manifest;
        assert!(s2.on_env_caption.is_empty() && !s2.off_env_caption.is_empty());
        let s3 = build_training_sample(3, &l, &mut rng, (-5.0, 20.0), LEN).unwrap().manifest;
        assert_eq!(s3.off_sources.len(), 2);
        assert_eq!(s3.off_sources[0].source.kind, SourceKind::Env);
        assert_eq!(s3.off_sources[1].source.kind, SourceKind::Speech);
        let s0 = build_training_sample(0, &l, &mut rng, (-5.0, 20.0), LEN).unwrap().manifest;
        assert!(s0.on_env_caption.is_empty() && s0.off_env_caption.is_empty() && s0.off_sources.is_empty());
        assert!(build_training_sample(4, &l, &mut rng, (0.0, 1.0), LEN).is_err());
        assert!(build_training_sample(1, &l, &mut rng, (5.0, 1.0), LEN).is_err());
        let empty = SourceLibrary { env: vec![], speech: l.speech.clone(), removed: vec![] };
        assert!(matches!(build_training_sample(1, &empty, &mut rng, (0.0, 1.0), LEN), Err(ScenarioError::MissingKind("env"))));
    }

    #[test]
    fn sources_are_audible_and_distinct() {
        let l = lib();
        let a = synth_speech(&l.speech[0], 1, LEN);
        let b = synth_speech(&l.speech[0], 1, LEN);
        assert_eq!(a, b);
        assert!(power(&a.samples) > 1e-4);
        for r in l.env.iter().take(13) {
            let w = synth_env(r, 2, LEN);
            assert!(power(&w.samples) > 1e-4, "{}", r.caption);
            assert!(w.peak() < 1.0);
        }
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn mixture_snr_and_reconstruction(seed in 0u64..10_000, scenario in 1u8..=3) {
            let l = lib();
            let mut rng = Rng::new(seed);
            let s = build_training_sample(scenario, &l, &mut rng, (-5.0, 20.0), LEN).unwrap();
            let m = &s.manifest;
            let primary = l.render(&m.on_source, LEN).unwrap();
            for (o, g) in m.off_sources.iter().zip(&m.mix.gains) {
                let w = scaled(&l.render(&o.source, LEN).unwrap(), *g);
                prop_assert!((measure_snr(&primary, &w).unwrap() - o.snr_db).abs() < 0.1);
            }
            prop_assert!(m.reconstruct(&l, LEN).unwrap() == s.mixture);
        }
    }

    #[test]
    fn bench_counts_and_disjointness() {
        let l = SourceLibrary::for_counts(FULL_COUNTS, 1);
        let plan = plan_bench(&l, FULL_COUNTS, 5, (-5.0, 20.0), 256).unwrap();
        let count = |s| plan.iter().filter(|m| m.scenario == s).count();
        assert_eq!((count(1), count(2), count(3)), (300, 401, 302));
        let mut used = std::collections::HashSet::new();
        for m in &plan {
            for src in std::iter::once(&m.on_source).chain(m.off_sources.iter().map(|o| &o.source)) {
                assert_eq!(Split::of(src.recipe), Split::Bench);
                assert!(used.insert((src.kind, src.recipe)));
            }
        }
        let small = SourceLibrary::synthetic(20, 20, 1, &DEFAULT_BLOCKLIST);
        assert!(matches!(plan_bench(&small, DESK_COUNTS, 5, (-5.0, 20.0), 256), Err(ScenarioError::TooSmall { .. })));
    }

    #[test]
    fn bench_regenerates_byte_identically() {
        let spec = LibrarySpec::for_counts(DESK_COUNTS, 7);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let items = build_bench(a.path(), &spec, DESK_COUNTS, 11, (-5.0, 20.0), LEN).unwrap();
        build_bench(b.path(), &spec, DESK_COUNTS, 11, (-5.0, 20.0), LEN).unwrap();
        assert_eq!(items.len(), 40);
        for sub in ["manifest.json", "wav/0000.wav", "wav/0039.wav", "ref/0039_k2.wav"] {
            assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap(), "{sub}");
        }
        let back = read_bench(a.path()).unwrap();
        assert_eq!(back.schema_version, SCHEMA_VERSION);
        assert_eq!(back.items, items);
        let lib = back.library.build();
        assert_eq!(items[5].reconstruct(&lib, LEN).unwrap(), items[5].reconstruct(&spec.build(), LEN).unwrap());
    }
}
