//! Condition encoders: frozen hash-bucket captions, a trainable character
//! encoder with a differentiable duration upsampler, and synthetic visual
//! features.

use serde::{Deserialize, Serialize};

use crate::nn::{Init, Mlp};
use crate::numerics::{fnv1a, Binder, NumericsError, ParamId, ParamStore, Result, Rng, Scalar, Tape, Tensor, Var};

pub const ENV_VOCAB: usize = 4096;
/// Symbol count of the character encoder, including the reserved EMPTY id 0.
pub const N_SYMBOLS: usize = 40;

/// Token rows of one environmental-sound caption.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvEmbedding {
    pub tokens: Tensor<f32>,
}

impl EnvEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen caption encoder. Rows are regenerated from the seed on demand,
/// so there is no table to train or store.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvEncoder {
    pub d_env: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl EnvEncoder {
    pub fn new(d_env: usize, seed: u64) -> Self {
        EnvEncoder { d_env, vocab: ENV_VOCAB, seed }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.vocab as u64) as usize
    }

    fn row(&self, index: usize) -> Vec<f32> {
        let mut r = Rng::new(self.seed).derive_str("env-table").derive(index as u64);
        (0..self.d_env).map(|_| r.normal() as f32).collect()
    }

    /// The reserved EMPTY row (index `vocab`).
    pub fn empty(&self) -> EnvEmbedding {
        EnvEmbedding { tokens: Tensor::new(vec![1, self.d_env], self.row(self.vocab)).expect("finite") }
    }

    pub fn encode(&self, text: &str) -> EnvEmbedding {
        let lower = text.to_lowercase();
        let toks: Vec<&str> = lower.split_whitespace().collect();
        if toks.is_empty() {
            return self.empty();
        }
        let data = toks.iter().flat_map(|t| self.row(self.bucket(t))).collect();
        EnvEmbedding { tokens: Tensor::new(vec![toks.len(), self.d_env], data).expect("finite") }
    }
}

/// Character ids: a–z → 1..=26, digits → 27..=36, space 37, apostrophe 38,
/// anything else 39. Id 0 is EMPTY and never produced here.
pub fn tokenize_transcript(text: &str, max_chars: usize) -> Vec<usize> {
    text.trim()
        .to_lowercase()
        .chars()
        .map(|c| match c {
            'a'..='z' => c as usize - 'a' as usize + 1,
            '0'..='9' => c as usize - '0' as usize + 27,
            ' ' => 37,
            '\'' => 38,
            _ => 39,
        })
        .take(max_chars)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DurationMode {
    /// Stretch predicted durations to the requested frame count.
    #[default]
    Rescale,
    /// Use predicted durations as-is; frames past their total lean on the
    /// last token.
    PredictedTotal,
}

/// Frame-aligned output of [`durator`] plus its alignment matrix.
pub struct Aligned {
    pub rows: Var,
    pub weights: Var,
}

/// Differentiable duration upsampler.
///
/// `hidden` is `[L, d]`, `durations` `[L, 1]` positive. Token centres are
/// `c_l = Σ_{m≤l} d_m − d_l/2`; `W[t, l] = softmax_l(−(t + ½ − c_l)² / σ²)`
/// with `σ = max(mean d, 1)`.
pub fn durator<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: Var,
    durations: Var,
    target_frames: usize,
    mode: DurationMode,
) -> Result<Aligned> {
    let l = tape.shape(hidden)[0];
    if tape.value(durations).len() != l {
        return Err(NumericsError::Invalid(format!("{} durations for {l} tokens", tape.value(durations).len())));
    }
    if target_frames == 0 {
        return Err(NumericsError::Invalid("durator needs target_frames >= 1".into()));
    }
    if tape.value(durations).data().iter().any(|&d| d <= T::zero()) {
        return Err(NumericsError::Invalid("durations must be positive".into()));
    }
    let d = match mode {
        DurationMode::Rescale => tape.rescale_sum(durations, target_frames as f64)?,
        DurationMode::PredictedTotal => durations,
    };
    // σ only depends on the durations through the mean, which is a constant
    // under rescaling; predicted mode treats it as fixed.
    let mean: f64 = tape.value(d).data().iter().map(|v| v.f64()).sum::<f64>() / l as f64;
    let sigma = mean.max(1.0);
    let d = tape.reshape(d, vec![l, 1])?;

    let cum = Tensor::from_fn(&[l, l], |i| {
        let (r, c) = (i / l, i % l);
        T::of(if c < r { 1.0 } else if c == r { 0.5 } else { 0.0 })
    })?;
    let cum = tape.constant(cum);
    let centers = tape.matmul(cum, d)?;
    let centers = tape.reshape(centers, vec![1, l])?;
    let ones = tape.constant(Tensor::filled(&[target_frames, 1], T::one()));
    let cm = tape.matmul(ones, centers)?;
    let grid = tape.constant(Tensor::from_fn(&[target_frames, l], |i| T::of((i / l) as f64 + 0.5))?);
    let diff = tape.sub(grid, cm)?;
    let sq = tape.square(diff)?;
    let logits = tape.scale(sq, -1.0 / (sigma * sigma))?;
    let weights = tape.softmax(logits)?;
    let rows = tape.matmul(weights, hidden)?;
    Ok(Aligned { rows, weights })
}

/// Trainable transcription encoder: character + positional embeddings, a
/// softplus duration head and the duration upsampler.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub char_emb: ParamId,
    pub pos: ParamId,
    pub empty: ParamId,
    pub dur: Mlp,
    pub d_sp: usize,
    pub max_chars: usize,
    pub mode: DurationMode,
}

pub struct SpeechOut {
    pub rows: Var,
    /// `None` for the EMPTY / dropped path.
    pub weights: Option<Var>,
    pub durations: Option<Var>,
}

impl SpeechEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        d_sp: usize,
        dur_hidden: usize,
        max_chars: usize,
        mode: DurationMode,
        rng: &mut Rng,
    ) -> Self {
        let mut r = rng.derive_str("speech");
        let char_emb = store.add("speech.char_emb", Tensor::randn(&[N_SYMBOLS, d_sp], 1.0, &mut r), true);
        let pos = store.add("speech.pos", Tensor::randn(&[max_chars, d_sp], 0.1, &mut r), true);
        let empty = store.add("speech.empty", Tensor::randn(&[1, d_sp], 1.0, &mut r), true);
        let dur = Mlp::new(store, "speech.dur", (d_sp, dur_hidden, 1), Init::Zeros, &mut r);
        SpeechEncoder { char_emb, pos, empty, dur, d_sp, max_chars, mode }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binder<T>,
        ids: &[usize],
        dropped: bool,
        target_frames: usize,
    ) -> Result<SpeechOut> {
        if dropped || ids.is_empty() {
            let e = bind.get(tape, self.empty);
            let rows = tape.select_rows(e, &vec![0; target_frames.max(1)])?;
            return Ok(SpeechOut { rows, weights: None, durations: None });
        }
        let ids = &ids[..ids.len().min(self.max_chars)];
        let emb = bind.get(tape, self.char_emb);
        let emb = tape.select_rows(emb, ids)?;
        let pos = bind.get(tape, self.pos);
        let pos = tape.select_rows(pos, &(0..ids.len()).collect::<Vec<_>>())?;
        let hidden = tape.add(emb, pos)?;
        let raw = self.dur.forward(tape, bind, hidden)?;
        let sp = tape.softplus(raw)?;
        let durations = tape.offset(sp, 1e-3)?;
        let a = durator(tape, hidden, durations, target_frames, self.mode)?;
        Ok(SpeechOut { rows: a.rows, weights: Some(a.weights), durations: Some(durations) })
    }

    /// Evaluates the encoder outside of training.
    pub fn encode_transcription(
        &self,
        store: &ParamStore<f32>,
        text: &str,
        target_frames: usize,
    ) -> Result<SpeechEmbedding> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(store);
        let ids = tokenize_transcript(text, self.max_chars);
        let out = self.forward(&mut tape, &mut bind, &ids, false, target_frames)?;
        Ok(SpeechEmbedding {
            tokens: tape.value(out.rows).clone(),
            alignment: out.weights.map(|w| tape.value(w).clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEmbedding {
    pub tokens: Tensor<f32>,
    pub alignment: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    /// `N × d_vis`
    pub frames: Tensor<f32>,
    pub fps: f64,
}

/// Nominal clip duration used for the fps metadata (seconds).
pub const CLIP_SECONDS: f64 = 10.24;

/// Class embedding for `kind_label` plus a small seeded per-frame drift.
pub fn synth_visual_features(scenario_seed: u64, n: usize, kind_label: &str, d_vis: usize) -> VisualFeatures {
    let n = n.max(1);
    let mut class = Rng::new(fnv1a(kind_label.as_bytes())).derive_str("visual-class");
    let base: Vec<f64> = (0..d_vis).map(|_| class.normal()).collect();
    let mut drift = Rng::new(scenario_seed).derive_str("visual-drift");
    let data = (0..n * d_vis).map(|i| (base[i % d_vis] + 0.05 * drift.normal()) as f32).collect();
    VisualFeatures {
        frames: Tensor::new(vec![n, d_vis], data).expect("finite"),
        fps: n as f64 / CLIP_SECONDS,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OnScreenKind {
    Environment,
    Speech,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropFlags {
    pub on: bool,
    pub off: bool,
    pub sp: bool,
    pub vis: bool,
}

impl DropFlags {
    pub const NONE: DropFlags = DropFlags { on: false, off: false, sp: false, vis: false };
}

/// Everything the velocity network is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub on_env: EnvEmbedding,
    pub off_env: EnvEmbedding,
    pub transcription: String,
    pub speech_ids: Vec<usize>,
    pub visual: VisualFeatures,
    kind: OnScreenKind,
    pub drop: DropFlags,
}

impl ConditionSet {
    /// The on-screen kind is `Speech` exactly when `on_caption` is empty.
    pub fn new(
        enc: &EnvEncoder,
        on_caption: &str,
        off_caption: &str,
        transcription: &str,
        visual: VisualFeatures,
        max_chars: usize,
    ) -> Self {
        let kind = if on_caption.trim().is_empty() { OnScreenKind::Speech } else { OnScreenKind::Environment };
        ConditionSet {
            on_env: enc.encode(on_caption),
            off_env: enc.encode(off_caption),
            transcription: transcription.to_string(),
            speech_ids: tokenize_transcript(transcription, max_chars),
            visual,
            kind,
            drop: DropFlags::NONE,
        }
    }

    pub fn kind(&self) -> OnScreenKind {
        self.kind
    }

    /// Applies drop flags: dropped captions become the EMPTY row, speech and
    /// visual nulls are substituted by the network.
    pub fn with_dropped(&self, enc: &EnvEncoder, flags: DropFlags) -> Self {
        let mut c = self.clone();
        if flags.on {
            c.on_env = enc.empty();
        }
        if flags.off {
            c.off_env = enc.empty();
        }
        c.drop = DropFlags {
            on: self.drop.on || flags.on,
            off: self.drop.off || flags.off,
            sp: self.drop.sp || flags.sp,
            vis: self.drop.vis || flags.vis,
        };
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad, rel_error};

    #[test]
    fn env_captions() {
        let enc = EnvEncoder::new(32, 7);
        let e = enc.encode("");
        assert_eq!(e.len(), 1);
        assert_eq!(e, enc.empty());
        assert_eq!(enc.encode("   "), enc.empty());
        let a = enc.encode("Dog barking");
        assert_eq!(a.len(), 2);
        assert_eq!(a.tokens.data(), enc.encode("dog   BARKING").tokens.data());
        assert_ne!(a.tokens.row(0), enc.empty().tokens.row(0));
        assert_eq!(a.tokens.row(0), enc.encode("dog").tokens.row(0));
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize_transcript("Ab 9'!", 64), vec![1, 2, 37, 36, 38, 39]);
        assert_eq!(tokenize_transcript("abcdef", 3).len(), 3);
        assert!(tokenize_transcript("  ", 8).is_empty());
    }

    /// Straight evaluation of the Gaussian alignment kernel.
    fn kernel_oracle(durs: &[f64], target: usize) -> Vec<Vec<f64>> {
        let total: f64 = durs.iter().sum();
        let d: Vec<f64> = durs.iter().map(|x| x * target as f64 / total).collect();
        let sigma = (d.iter().sum::<f64>() / d.len() as f64).max(1.0);
        let mut acc = 0.0;
        let centers: Vec<f64> = d
            .iter()
            .map(|x| {
                acc += x;
                acc - x / 2.0
            })
            .collect();
        (0..target)
            .map(|t| {
                let logits: Vec<f64> = centers.iter().map(|c| -(t as f64 + 0.5 - c).powi(2) / sigma.powi(2)).collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                logits.iter().map(|v| (v - m).exp() / z).collect()
            })
            .collect()
    }

    fn run_durator(h: &[f64], l: usize, d: usize, durs: &[f64], target: usize) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(Tensor::from_f64(&[l, d], h).unwrap());
        let dv = tape.constant(Tensor::from_f64(&[l, 1], durs).unwrap());
        let a = durator(&mut tape, hv, dv, target, DurationMode::Rescale).unwrap();
        (tape.value(a.rows).to_f64_vec(), tape.value(a.weights).to_f64_vec())
    }

    #[test]
    fn durator_single_token_repeats() {
        let (rows, w) = run_durator(&[1.0, -2.0, 3.0], 1, 3, &[0.7], 5);
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        for t in 0..5 {
            assert_eq!(&rows[t * 3..t * 3 + 3], &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn durator_two_tokens_symmetric() {
        let (_, w) = run_durator(&[1.0, 0.0, 0.0, 1.0], 2, 2, &[0.3, 0.3], 6);
        let oracle = kernel_oracle(&[0.3, 0.3], 6);
        for t in 0..6 {
            assert!((w[t * 2] + w[t * 2 + 1] - 1.0).abs() < 1e-6);
            assert!((w[t * 2] - oracle[t][0]).abs() < 1e-12);
            assert!((w[t * 2] - w[(5 - t) * 2 + 1]).abs() < 1e-12);
        }
        assert!(w[0] > w[1]);
        assert!(w[5 * 2 + 1] > w[5 * 2]);
    }

    #[test]
    fn durator_matches_oracle_uneven() {
        let durs = [0.5, 2.0, 1.0, 0.25];
        let (_, w) = run_durator(&[0.0; 4], 4, 1, &durs, 9);
        let oracle = kernel_oracle(&durs, 9);
        for t in 0..9 {
            for l in 0..4 {
                assert!((w[t * 4 + l] - oracle[t][l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn durator_gradient_wrt_durations() {
        let (l, d, target) = (3, 2, 7);
        let h = [0.3, -1.2, 0.8, 0.1, -0.5, 0.9];
        let probe = [0.2, -0.4, 1.1, 0.6, 0.0, -0.3, 0.5, 0.2, 0.7, -0.1, 0.4, 0.3, -0.6, 0.1];
        let f = |durs: &[f64]| -> f64 {
            let (rows, _) = run_durator(&h, l, d, durs, target);
            rows.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let durs = [0.9, 1.7, 0.6];
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(Tensor::from_f64(&[l, d], &h).unwrap());
        let dv = tape.param(0, Tensor::from_f64(&[l, 1], &durs).unwrap());
        let a = durator(&mut tape, hv, dv, target, DurationMode::Rescale).unwrap();
        let pv = tape.constant(Tensor::from_f64(&[target, d], &probe).unwrap());
        let m = tape.mul(a.rows, pv).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        let numeric = finite_diff_grad(f, &durs, 1e-5);
        let err = rel_error(g.param(0).unwrap(), &numeric);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn durator_rejects_bad_input() {
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap());
        let dv = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
        assert!(durator(&mut tape, hv, dv, 4, DurationMode::Rescale).is_err());
        let dv = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        assert!(durator(&mut tape, hv, dv, 0, DurationMode::Rescale).is_err());
    }

    fn speech_encoder() -> (ParamStore<f32>, SpeechEncoder) {
        let mut store = ParamStore::new();
        let enc = SpeechEncoder::new(&mut store, 8, 16, 32, DurationMode::Rescale, &mut Rng::new(3));
        (store, enc)
    }

    #[test]
    fn transcription_single_char() {
        let (store, enc) = speech_encoder();
        let e = enc.encode_transcription(&store, "a", 4).unwrap();
        assert_eq!(e.tokens.shape(), &[4, 8]);
        for t in 1..4 {
            assert_eq!(e.tokens.row(t), e.tokens.row(0));
        }
    }

    #[test]
    fn transcription_two_chars_alignment() {
        let (store, enc) = speech_encoder();
        let e = enc.encode_transcription(&store, "ab", 4).unwrap();
        let w = e.alignment.unwrap();
        assert!(w.at(&[0, 0]) > w.at(&[0, 1]));
        for t in 0..4 {
            let s: f32 = w.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(w.row(t).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn empty_transcription_uses_empty_token() {
        let (store, enc) = speech_encoder();
        let e = enc.encode_transcription(&store, "", 5).unwrap();
        assert_eq!(e.tokens.shape(), &[5, 8]);
        assert!(e.alignment.is_none());
        assert_eq!(e.tokens.row(3), store.get(enc.empty).data());
    }

    #[test]
    fn visual_features() {
        let a = synth_visual_features(5, 4, "dog", 16);
        assert_eq!(a, synth_visual_features(5, 4, "dog", 16));
        assert_eq!(synth_visual_features(5, 1, "dog", 16).frames.rows(), 1);
        assert_ne!(a.frames.data(), synth_visual_features(6, 4, "dog", 16).frames.data());
        let cos = |x: &[f32], y: &[f32]| {
            let d: f32 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            d / (x.iter().map(|v| v * v).sum::<f32>().sqrt() * y.iter().map(|v| v * v).sum::<f32>().sqrt())
        };
        let b = synth_visual_features(5, 4, "speech", 16);
        assert!(cos(a.frames.row(0), b.frames.row(0)) < 0.5);
        // near-constant across frames
        assert!(cos(a.frames.row(0), a.frames.row(3)) > 0.98);
    }

    #[test]
    fn kind_follows_on_caption() {
        let enc = EnvEncoder::new(8, 1);
        let v = synth_visual_features(1, 2, "x", 4);
        let s = ConditionSet::new(&enc, "", "rain", "hello", v.clone(), 16);
        assert_eq!(s.kind(), OnScreenKind::Speech);
        let e = ConditionSet::new(&enc, "dog barking", "", "hello", v, 16);
        assert_eq!(e.kind(), OnScreenKind::Environment);
        let d = e.with_dropped(&enc, DropFlags { on: true, ..DropFlags::NONE });
        assert_eq!(d.on_env, enc.empty());
        assert_eq!(d.kind(), OnScreenKind::Environment);
        assert!(d.drop.on && !d.drop.sp);
    }
}
