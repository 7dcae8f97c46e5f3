//! Acceptance suite. One line per criterion; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use hagen::audio::{measure_snr, mix_at_snr, scaled, StftConfig, StftProcessor, Waveform};
use hagen::codec::{Codec, Latent};
use hagen::conditioners::{ConditionSet, EnvEncoder};
use hagen::config::RunConfig;
use hagen::eval::{edit_error_rate, frechet_distance, mean_kl, FeatureSet};
use hagen::experiment::{build_toy_data, desk_schedule, run_two_stage, ToyDataConfig};
use hagen::flow::{
    cfg_velocity, dropout_conditions, euler_integrate, euler_sample, load_checkpoint, save_checkpoint, CfgScales,
    DropoutProbs, VelocityModel,
};
use hagen::numerics::{Binder, Result as NResult, Rng, Tape};
use hagen::scenarios::{
    build_bench, plan_bench, LibrarySpec, SampleManifest, SourceLibrary, DESK_COUNTS, FULL_COUNTS,
};
use hagen::triattn::suites::{all_suites, SuiteOptions};
use hagen::triattn::{assemble_condition_streams, ModelConfig, TriAttnDit};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Check {
    let t = Instant::now();
    let reports = all_suites(SuiteOptions { corrupt: false, per_tensor: 3 }).map_err(err)?;
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let names: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.name, r.rel_error)).collect();
    for r in &reports {
        ensure(r.passed(1e-4), format!("{} rel error {:.3e}", r.name, r.rel_error))?;
    }
    ensure(reports.len() == 5, format!("expected 5 suites, got {}", reports.len()))?;
    let corrupted = all_suites(SuiteOptions { corrupt: true, per_tensor: 1 }).map_err(err)?;
    ensure(corrupted.iter().all(|r| !r.passed(1e-4)), "corrupted gradients were accepted")?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("worst {worst:.2e} ≤ 1e-4 in {:.1}s [{}]", elapsed.as_secs_f64(), names.join(" ")))
}

// ---------------------------------------------------------------- guidance

struct Linear {
    env: EnvEncoder,
    a: f64,
    b: [f64; 3],
    calls: AtomicUsize,
}

impl Linear {
    fn signal(&self, c: &ConditionSet) -> [f64; 3] {
        let empty = self.env.empty();
        let env = |e: &hagen::conditioners::EnvEmbedding| {
            if *e == empty {
                0.0
            } else {
                e.tokens.data().iter().map(|&v| v as f64).sum::<f64>() / e.tokens.len() as f64
            }
        };
        let sp = if c.drop.sp || c.speech_ids.is_empty() {
            0.0
        } else {
            c.speech_ids.iter().sum::<usize>() as f64 / 100.0
        };
        [env(&c.on_env), env(&c.off_env), sp]
    }
}

impl VelocityModel for Linear {
    fn velocity(&self, x: &Latent, _t: f64, c: &ConditionSet) -> NResult<Latent> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let e = self.signal(c);
        let shift: f64 = (0..3).map(|i| self.b[i] * e[i]).sum();
        let data = x.data.iter().map(|&v| (self.a * v as f64 + shift) as f32).collect();
        Ok(Latent::new(x.channels, x.time, x.freq, data))
    }

    fn env_encoder(&self) -> &EnvEncoder {
        &self.env
    }
}

fn desk_manifests(seed: u64) -> std::result::Result<Vec<SampleManifest>, String> {
    let lib = SourceLibrary::for_counts(DESK_COUNTS, seed);
    plan_bench(&lib, DESK_COUNTS, seed, (-5.0, 20.0), StftConfig::desk().clip_len()).map_err(err)
}

fn first_of(items: &[SampleManifest], scenario: u8) -> &SampleManifest {
    items.iter().find(|m| m.scenario == scenario).expect("scenario present")
}

fn guidance() -> Check {
    let cfg = RunConfig::desk();
    let codec = cfg.codec_config().map_err(err)?;
    let mut m = TriAttnDit::<f32>::new(cfg.model.clone(), 3).map_err(err)?;
    m.store.perturb(0.05, &mut Rng::new(17));
    let dir = tempfile::tempdir().map_err(err)?;
    save_checkpoint(dir.path(), &m, &codec).map_err(err)?;
    let (m, _) = load_checkpoint(dir.path(), Some((&cfg.model, &codec))).map_err(err)?;

    let items = desk_manifests(5)?;
    let c = |s| first_of(&items, s).conditions(&m.env, m.cfg.n_visual, m.cfg.d_vis, m.cfg.max_chars);
    let x = Latent::randn(m.latent_shape(), &mut Rng::new(9));

    // (a) zero scales
    let s1 = c(1);
    let plain = m.velocity(&x, 0.4, &s1).map_err(err)?;
    ensure(plain.data.iter().any(|&v| v != 0.0), "checkpoint predicts zero velocity")?;
    let zero = cfg_velocity(&m, &x, 0.4, &s1, CfgScales::ZERO).map_err(err)?;
    ensure(zero == plain, "λ = 0 differs from V(all)")?;

    // (b) on-screen caption is null in S2, so λ_on must add nothing
    let s2 = c(2);
    let base = m.velocity(&x, 0.6, &s2).map_err(err)?;
    let guided = cfg_velocity(&m, &x, 0.6, &s2, CfgScales { on: 4.0, off: 0.0, sp: 0.0 }).map_err(err)?;
    ensure(guided == base, "null on-screen branch changed the velocity")?;
    let other = cfg_velocity(&m, &x, 0.6, &s2, CfgScales { on: 0.0, off: 4.0, sp: 0.0 }).map_err(err)?;
    ensure(other != base, "non-null branch contributed nothing")?;

    // (c) linear oracle
    let o = Linear { env: EnvEncoder::new(8, 3), a: -0.7, b: [1.3, -0.4, 2.1], calls: AtomicUsize::new(0) };
    let oc = first_of(&items, 3).conditions(&o.env, 2, 4, 32);
    let ox = Latent::randn([2, 3, 4], &mut Rng::new(5));
    let mut worst = 0.0f64;
    for s in [CfgScales::preset(1), CfgScales::preset(2), CfgScales::preset(3)].into_iter().flatten() {
        let got = cfg_velocity(&o, &ox, 0.3, &oc, s).map_err(err)?;
        let e = o.signal(&oc);
        let l = [s.on, s.off, s.sp];
        for (k, &v) in got.data.iter().enumerate() {
            let want = o.a * ox.data[k] as f64 + (0..3).map(|i| (1.0 + l[i]) * o.b[i] * e[i]).sum::<f64>();
            worst = worst.max((v as f64 - want).abs());
        }
    }
    ensure(o.calls.load(Ordering::SeqCst) == 15, "expected five model calls per guided step")?;
    ensure(worst <= 1e-5, format!("linear oracle error {worst:.2e}"))?;
    Ok(format!("λ=0 bit-exact, null branch bit-exact, oracle error {worst:.1e} ≤ 1e-5"))
}

// ---------------------------------------------------------------- ODE

fn ode() -> Check {
    let x0 = Latent::randn([1, 4, 4], &mut Rng::new(2));
    let c = Latent::new(1, 4, 4, (0..16).map(|i| i as f32 * 0.125 - 1.0).collect());
    let mut worst = 0.0f64;
    for steps in [1, 10, 100] {
        let out = euler_integrate(x0.clone(), steps, |_, _| Ok(c.clone())).map_err(err)?;
        for k in 0..16 {
            worst = worst.max((out.data[k] as f64 - (x0.data[k] as f64 + c.data[k] as f64)).abs());
        }
    }
    ensure(worst < 1e-5, format!("constant field error {worst:.2e}"))?;

    let exact: Vec<f64> = x0.data.iter().map(|&v| v as f64 * (-1f64).exp()).collect();
    let error = |steps| -> std::result::Result<f64, String> {
        let out = euler_integrate(x0.clone(), steps, |x, _| {
            Ok(Latent::new(1, 4, 4, x.data.iter().map(|v| -v).collect()))
        })
        .map_err(err)?;
        Ok(out.data.iter().zip(&exact).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max))
    };
    let order = (error(10)? / error(100)?).log10();
    ensure((order - 1.0).abs() <= 0.3, format!("empirical order {order:.3}"))?;

    let mut m = TriAttnDit::<f32>::new(ModelConfig::desk(), 4).map_err(err)?;
    m.store.perturb(0.05, &mut Rng::new(8));
    let item = desk_manifests(6)?.remove(0);
    let cond = item.conditions(&m.env, m.cfg.n_visual, m.cfg.d_vis, m.cfg.max_chars);
    let s = CfgScales::preset(item.scenario).unwrap();
    let a = euler_sample(&m, &cond, s, 4, 42, m.latent_shape()).map_err(err)?;
    let b = euler_sample(&m, &cond, s, 4, 42, m.latent_shape()).map_err(err)?;
    let d = euler_sample(&m, &cond, s, 4, 43, m.latent_shape()).map_err(err)?;
    ensure(a == b, "same seed gave different trajectories")?;
    ensure(a != d, "different seeds gave the same trajectory")?;
    Ok(format!("constant field error {worst:.1e}, order {order:.3} (1 ± 0.3), seeded runs identical"))
}

// ---------------------------------------------------------------- audio

fn audio() -> Check {
    let t = Instant::now();
    let full = StftConfig::full_scale();
    let proc = StftProcessor::new(&full).map_err(err)?;
    let mut rng = Rng::new(12);
    let len = full.clip_len();
    let tone = Waveform::new(
        (0..len).map(|i| (0.3 * (i as f64 * 0.031).sin() + 0.05 * rng.normal()) as f32).collect(),
        full.sample_rate,
    );
    let mel = proc.mel_spectrogram(&tone);
    ensure((mel.frames, mel.bands) == (1024, 64), format!("mel is {}×{}", mel.frames, mel.bands))?;

    let noise = Waveform::new((0..len).map(|_| rng.normal() as f32 * 0.4).collect(), full.sample_rate);
    let mut snr_err = 0.0f64;
    for target in [-5.0, 0.0, 10.0, 20.0] {
        let (mix, rec) = mix_at_snr(&tone, &noise, target).map_err(err)?;
        let clean = scaled(&tone, rec.norm_scale);
        let residual = Waveform::new(
            mix.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect(),
            full.sample_rate,
        );
        snr_err = snr_err.max((measure_snr(&clean, &residual).map_err(err)? - target).abs());
    }
    ensure(snr_err <= 0.1, format!("SNR off by {snr_err:.3} dB"))?;

    let desk = RunConfig::desk();
    let codec = Codec::new(desk.codec_config().map_err(err)?).map_err(err)?;
    let dproc = StftProcessor::new(&desk.stft).map_err(err)?;
    let dmel = dproc.mel_spectrogram(&tone.clone().fix_length_to(desk.stft.clip_len()));
    let back = codec.decode(&codec.encode(&dmel).map_err(err)?).map_err(err)?;
    let mel_err = dmel.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    ensure(mel_err <= 1e-5, format!("desk codec mel round trip {mel_err:.2e}"))?;

    let big = RunConfig::full_scale();
    let fcodec = Codec::new(big.codec_config().map_err(err)?).map_err(err)?;
    let z = Latent::randn(big.model.latent, &mut Rng::new(13));
    let z2 = fcodec.encode(&fcodec.decode(&z).map_err(err)?).map_err(err)?;
    let lat_err = z.max_abs_diff(&z2);
    ensure(lat_err <= 1e-5, format!("full-scale latent round trip {lat_err:.2e}"))?;
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "mel 1024×64, SNR error {snr_err:.1e} dB, codec {mel_err:.1e}/{lat_err:.1e} ≤ 1e-5, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- architecture

/// Visual tails of the (on, off, speech) streams: whether any entry is non-zero.
fn visual_rows_nonzero(m: &TriAttnDit<f32>, c: &ConditionSet) -> std::result::Result<[bool; 3], String> {
    let mut tape = Tape::new();
    let mut bind = Binder::new(&m.store);
    let sp = m.layout.speech.forward(&mut tape, &mut bind, &c.speech_ids, false, m.cfg.t_tok()).map_err(err)?;
    let cv = tape.constant(c.visual.frames.clone());
    let s = assemble_condition_streams(&mut tape, &mut bind, &m.layout, &m.cfg, c, sp.rows, cv).map_err(err)?;
    let n = s.n_visual;
    let tail = |v| {
        let t = tape.value(v);
        t.data()[(t.rows() - n) * t.cols()..].iter().any(|&x| x != 0.0)
    };
    Ok([tail(s.on), tail(s.off), tail(s.sp)])
}

fn architecture() -> Check {
    let m = TriAttnDit::<f32>::new(ModelConfig::desk(), 1).map_err(err)?;
    let items = desk_manifests(8)?;
    let cond = |m: &TriAttnDit<f32>, s| first_of(&items, s).conditions(&m.env, m.cfg.n_visual, m.cfg.d_vis, m.cfg.max_chars);
    let x = Latent::randn(m.latent_shape(), &mut Rng::new(2));
    for s in 1..=3 {
        let v = m.velocity(&x, 0.3, &cond(&m, s)).map_err(err)?;
        ensure(v.data.iter().all(|&a| a == 0.0), "zero-init network predicts non-zero velocity")?;
        for g in m.gate_weights(&cond(&m, s)).map_err(err)? {
            ensure(g.iter().all(|w| (w - 1.0 / 3.0).abs() <= 1e-6), format!("init gate {g:?}"))?;
        }
    }
    let mut p = m.clone();
    p.store.perturb(0.3, &mut Rng::new(3));
    let mut moved = false;
    for s in 1..=3 {
        for g in p.gate_weights(&cond(&p, s)).map_err(err)? {
            let sum: f32 = g.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-6, format!("gate sums to {sum}"))?;
            moved |= g.iter().any(|w| (w - 1.0 / 3.0).abs() > 1e-3);
        }
    }
    ensure(moved, "perturbed gate stayed uniform")?;
    // expected (on, off, speech) visual rows: S1 and S3 env on screen, S2 speech
    let want = [(1, [true, false, false]), (2, [false, false, true]), (3, [true, false, false])];
    for (s, w) in want {
        let got = visual_rows_nonzero(&p, &cond(&p, s))?;
        ensure(got == w, format!("S{s} visual rows {got:?}, expected {w:?}"))?;
    }
    Ok("zero-init velocity 0, gates 1/3 at init and sum to 1, placeholder rows match S1/S2/S3".into())
}

// ---------------------------------------------------------------- toy training

fn toy() -> Check {
    let t = Instant::now();
    let cfg = RunConfig::desk();
    let codec = Codec::new(cfg.codec_config().map_err(err)?).map_err(err)?;
    let data = build_toy_data(&ToyDataConfig::default(), &cfg.model, &cfg.stft, &codec).map_err(err)?;
    let runs: Vec<(u64, bool)> = (0..3u64).flat_map(|s| [(s, true), (s, false)]).collect();
    let results: BTreeMap<(u64, bool), (f64, f64)> = runs
        .par_iter()
        .map(|&(seed, gate)| {
            let mut mc = cfg.model.clone();
            mc.moe_gate = gate;
            let mut m = TriAttnDit::<f32>::new(mc, seed).map_err(err)?;
            let (a, b) = desk_schedule(seed);
            let r = run_two_stage(&mut m, &data, &a, &b, None).map_err(err)?;
            Ok(((seed, gate), (r.stage2.final_val(), r.relative_final())))
        })
        .collect::<std::result::Result<_, String>>()?;
    let mut detail = Vec::new();
    let mut wins = 0;
    for seed in 0..3 {
        let (full, rel) = results[&(seed, true)];
        let (frozen, _) = results[&(seed, false)];
        ensure(rel <= 0.7, format!("seed {seed}: validation loss only {:.0}% below baseline", 100.0 * (1.0 - rel)))?;
        wins += (frozen > full) as usize;
        detail.push(format!("s{seed} {full:.6}/{frozen:.6}"));
    }
    let worst_rel = (0..3).map(|s| results[&(s, true)].1).fold(0.0, f64::max);
    let msg = format!(
        "converged ({:.0}%+ below zero baseline); gated/frozen val {}; frozen worse in {wins}/3 seeds; {:.0}s",
        100.0 * (1.0 - worst_rel),
        detail.join(", "),
        t.elapsed().as_secs_f64()
    );
    if wins >= 2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- metrics

fn edit_oracle(a: &[u8], b: &[u8], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let (ha, ta) = (a[0], &a[1..]);
    let (hb, tb) = (b[0], &b[1..]);
    let v = (edit_oracle(ta, tb, memo) + (ha != hb) as usize)
        .min(edit_oracle(ta, b, memo) + 1)
        .min(edit_oracle(a, tb, memo) + 1);
    memo.insert((a.len(), b.len()), v);
    v
}

fn metrics() -> Check {
    let mut rng = Rng::new(31);
    let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
    let a = FeatureSet::from_rows(&rows).map_err(err)?;
    let self_fd = frechet_distance(&a, &a).map_err(err)?;
    ensure(self_fd.abs() <= 1e-6, format!("FD(A, A) = {self_fd:.2e}"))?;

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let g0 = FeatureSet::from_rows(&[vec![-h], vec![h]]).map_err(err)?;
    let g1 = FeatureSet::from_rows(&[vec![1.0 - h], vec![1.0 + h]]).map_err(err)?;
    let fd1 = frechet_distance(&g0, &g1).map_err(err)?;
    ensure((fd1 - 1.0).abs() <= 1e-9, format!("1-D case {fd1}"))?;

    let kl = mean_kl(&[vec![1.0, 0.0, 0.0, 0.0]], &[vec![0.25; 4]]).map_err(err)?;
    ensure((kl - 4f64.ln()).abs() <= 1e-6, format!("KL {kl}"))?;

    for i in 0..100 {
        let mut gen = |n| (0..1 + rng.below(n)).map(|_| b'a' + rng.below(4) as u8).collect::<Vec<u8>>();
        let (r, h) = (gen(12), gen(12));
        let want = edit_oracle(&r, &h, &mut BTreeMap::new()) as f64 / r.len() as f64;
        let got = edit_error_rate(&r, &h).map_err(err)?;
        ensure(got == want, format!("pair {i}: {got} vs {want}"))?;
    }
    Ok(format!("FD(A,A) {self_fd:.1e}, 1-D FD {fd1:.6}, KL {kl:.6} = ln 4, 100/100 edit rates exact"))
}

// ---------------------------------------------------------------- benchmark

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn benchmark() -> Check {
    let len = StftConfig::desk().clip_len();
    let spec = LibrarySpec::for_counts(DESK_COUNTS, 21);
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    build_bench(a.path(), &spec, DESK_COUNTS, 22, (-5.0, 20.0), len).map_err(err)?;
    build_bench(b.path(), &spec, DESK_COUNTS, 22, (-5.0, 20.0), len).map_err(err)?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure(fa.len() > 40, format!("only {} files written", fa.len()))?;
    ensure(fa == fb, "benchmark directories differ")?;

    let lib = SourceLibrary::for_counts(FULL_COUNTS, 23);
    let plan = plan_bench(&lib, FULL_COUNTS, 24, (-5.0, 20.0), len).map_err(err)?;
    let count = |s| plan.iter().filter(|m| m.scenario == s).count();
    let got = [count(1), count(2), count(3)];
    ensure(got == [300, 401, 302], format!("counts {got:?}"))?;
    Ok(format!("{} files byte-identical on regeneration; full counts {got:?}", fa.len()))
}

// ---------------------------------------------------------------- dropout

fn dropout() -> Check {
    let m = TriAttnDit::<f32>::new(ModelConfig::desk(), 0).map_err(err)?;
    let item = desk_manifests(9)?.remove(0);
    let cond = item.conditions(&m.env, m.cfg.n_visual, m.cfg.d_vis, m.cfg.max_chars);
    let p = DropoutProbs::uniform(0.1);
    let mut rng = Rng::new(77);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        let c = dropout_conditions(&cond, p, &mut rng, &m.env);
        for (k, f) in [c.drop.on, c.drop.off, c.drop.sp, c.drop.vis].into_iter().enumerate() {
            counts[k] += f as usize;
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    for (name, r) in ["on", "off", "speech", "visual"].iter().zip(&rates) {
        ensure((r - 0.1).abs() <= 0.02, format!("{name} dropped at {r:.4}"))?;
    }
    Ok(format!("rates on/off/speech/visual {rates:.4?} within 0.1 ± 0.02"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradients),
        ("cfg algebra", guidance),
        ("ode suite", ode),
        ("audio pipeline", audio),
        ("architecture contracts", architecture),
        ("toy end-to-end + ablation", toy),
        ("metrics", metrics),
        ("benchmark generator", benchmark),
        ("condition dropout", dropout),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("[PASS] {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failures += 1;
                println!("[FAIL] {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
