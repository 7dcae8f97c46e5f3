use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use hagen::audio::{read_wav, write_wav, MelSpec, StftProcessor, WavReadOptions};
use hagen::codec::{Codec, CodecConfig};
use hagen::config::RunConfig;
use hagen::eval::{evaluate_pairs, metrics_csv};
use hagen::experiment::{load_toy_data, plan_toy_dataset};
use hagen::flow::{generate, load_checkpoint, save_checkpoint, train as run_stage, CfgScales, CheckpointError, Stage};
use hagen::numerics::Rng;
use hagen::scenarios::{build_bench, read_bench, DatasetFile, LibrarySpec, SampleManifest};
use hagen::triattn::suites::{all_suites, SuiteOptions};
use hagen::triattn::TriAttnDit;

use crate::{fail, CliResult, ConfigArg, WithCode, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_EVAL, EXIT_FAIL};

const DATASET_FILE: &str = "dataset.json";

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p).code(EXIT_CONFIG),
        None => Ok(RunConfig::desk()),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v).code(EXIT_FAIL)?).code(EXIT_FAIL)
}

fn open_checkpoint(dir: &Path, cfg: &RunConfig, codec: &CodecConfig) -> CliResult<TriAttnDit<f32>> {
    match load_checkpoint(dir, Some((&cfg.model, codec))) {
        Ok((m, _)) => Ok(m),
        Err(e @ CheckpointError::ConfigMismatch { .. }) => Err(crate::CliError { code: EXIT_CHECKPOINT, err: e.into() }),
        Err(e @ CheckpointError::Corrupt(_)) => Err(crate::CliError { code: EXIT_CHECKPOINT, err: e.into() }),
        Err(e) => Err(crate::CliError { code: EXIT_CONFIG, err: e.into() }),
    }
}

fn checkpoint_hashes(dir: &Path) -> (String, String) {
    let m: Option<hagen::flow::CheckpointManifest> =
        fs::read(dir.join("manifest.json")).ok().and_then(|b| serde_json::from_slice(&b).ok());
    m.map(|m| (m.config_hash, m.content_hash)).unwrap_or_default()
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Directory written by `hagen mix`.
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint to continue from (stage 2).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Allow stage 2 without a stage-1 checkpoint.
    #[arg(long)]
    cold_start: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    config_hash: String,
    checkpoint_config_hash: String,
    checkpoint_content_hash: String,
    zero_baseline: f64,
    initial_val: f64,
    final_val: f64,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dataset: DatasetFile = {
        let path = a.data.join(DATASET_FILE);
        let bytes = fs::read(&path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display())).code(EXIT_CONFIG)?;
        serde_json::from_slice(&bytes).code(EXIT_CONFIG)?
    };
    let codec_cfg = cfg.codec_config().code(EXIT_CONFIG)?;
    let codec = Codec::new(codec_cfg.clone()).code(EXIT_CONFIG)?;
    let stage = if a.stage == 1 { Stage::One } else { Stage::Two };
    let mut model = match (&a.from, stage) {
        (Some(dir), _) => open_checkpoint(dir, &cfg, &codec_cfg)?,
        (None, Stage::Two) if !a.cold_start => {
            return fail(EXIT_CONFIG, "stage 2 needs --from <stage-1 checkpoint> or --cold-start")
        }
        (None, _) => TriAttnDit::new(cfg.model.clone(), cfg.seed).code(EXIT_CONFIG)?,
    };
    let data = load_toy_data(&dataset, &cfg.model, &cfg.stft, &codec).code(EXIT_CONFIG)?;
    let (train_set, val_set) = data.stage_sets(stage);
    let mut tc = cfg.train_config(a.stage);
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    tc.out_dir = Some(a.out.clone());
    let report = run_stage(&mut model, stage, &train_set, &val_set, &tc, Some(&codec_cfg)).code(EXIT_FAIL)?;
    let ckpt = a.out.join("checkpoint");
    let man = save_checkpoint(&ckpt, &model, &codec_cfg).code(EXIT_FAIL)?;
    let summary = TrainSummary {
        stage: a.stage,
        config_hash: cfg.hash(),
        checkpoint_config_hash: man.config_hash,
        checkpoint_content_hash: man.content_hash,
        zero_baseline: report.zero_baseline,
        initial_val: report.initial_val(),
        final_val: report.final_val(),
    };
    write_json(&a.out.join("train_report.json"), &summary)?;
    println!(
        "stage {}: val {:.4} -> {:.4} (zero-model {:.4}); checkpoint {}",
        a.stage,
        summary.initial_val,
        summary.final_val,
        summary.zero_baseline,
        ckpt.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct MixArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write every mixture as WAV.
    #[arg(long)]
    wav: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn mix(a: MixArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let file = plan_toy_dataset(&cfg.toy_data(), cfg.stft.clip_len()).code(EXIT_CONFIG)?;
    fs::create_dir_all(&a.out).code(EXIT_CONFIG)?;
    write_json(&a.out.join(DATASET_FILE), &file)?;
    if a.wav {
        let lib = file.library.build();
        let dir = a.out.join("wav");
        fs::create_dir_all(&dir).code(EXIT_FAIL)?;
        let all: Vec<(&str, &SampleManifest)> = [("stage1", &file.stage1), ("stage2", &file.stage2), ("val", &file.val)]
            .into_iter()
            .flat_map(|(n, v)| v.iter().map(move |m| (n, m)))
            .collect();
        all.par_iter().try_for_each(|(n, m)| -> CliResult<()> {
            let w = m.reconstruct(&lib, file.clip_len).code(EXIT_FAIL)?;
            write_wav(&dir.join(format!("{n}_{:04}.wav", m.index)), &w).code(EXIT_FAIL)
        })?;
    }
    println!(
        "mixed {} stage-1, {} stage-2 and {} validation clips into {}",
        file.stage1.len(),
        file.stage2.len(),
        file.val.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Per-scenario counts `n1,n2,n3`; defaults to the config.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_counts(s: &str) -> CliResult<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .code(EXIT_CONFIG)?;
    match v.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => fail(EXIT_CONFIG, format!("expected three counts, got {s:?}")),
    }
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let counts = match &a.counts {
        Some(s) => parse_counts(s)?,
        None => cfg.data.bench_counts,
    };
    let seed = a.seed.unwrap_or(cfg.seed);
    let spec = LibrarySpec::for_counts(counts, seed);
    let items = build_bench(&a.out, &spec, counts, seed, (cfg.data.snr_lo, cfg.data.snr_hi), cfg.stft.clip_len())
        .code(EXIT_CONFIG)?;
    println!("wrote {} benchmark items ({:?}) to {}", items.len(), counts, a.out.display());
    Ok(())
}

/// Resolves `--manifest` given as a benchmark directory or its JSON file.
fn bench_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn scales_for(
    cfg: &RunConfig,
    preset: Option<&str>,
    scales: Option<&str>,
    scenario: u8,
) -> CliResult<CfgScales> {
    if let Some(s) = scales {
        return CfgScales::parse(s).map_err(anyhow::Error::msg).code(EXIT_CONFIG);
    }
    let id = match preset {
        Some(p) => match p.to_ascii_lowercase().as_str() {
            "s1" => 1,
            "s2" => 2,
            "s3" => 3,
            other => return fail(EXIT_CONFIG, format!("unknown preset {other:?} (s1, s2, s3)")),
        },
        None => scenario,
    };
    cfg.preset(id).ok_or_else(|| anyhow::anyhow!("no preset for scenario {id}")).code(EXIT_CONFIG)
}

#[derive(Serialize)]
struct SampleEntry {
    index: usize,
    scenario: u8,
    seed: u64,
    scales: CfgScales,
    wav: String,
}

#[derive(Serialize)]
struct SampleReport {
    config_hash: String,
    checkpoint_config_hash: String,
    checkpoint_content_hash: String,
    steps: usize,
    entries: Vec<SampleEntry>,
}

struct Generator {
    cfg: RunConfig,
    model: TriAttnDit<f32>,
    codec: Codec,
    proc: StftProcessor,
}

impl Generator {
    fn open(config: &ConfigArg, checkpoint: &Path) -> CliResult<Self> {
        let cfg = load_config(config)?;
        let codec_cfg = cfg.codec_config().code(EXIT_CONFIG)?;
        let model = open_checkpoint(checkpoint, &cfg, &codec_cfg)?;
        let codec = Codec::new(codec_cfg).code(EXIT_CONFIG)?;
        let proc = StftProcessor::new(&cfg.stft).code(EXIT_CONFIG)?;
        Ok(Generator { cfg, model, codec, proc })
    }

    fn run(&self, m: &SampleManifest, scales: CfgScales, steps: usize, seed: u64) -> CliResult<hagen::flow::Generated> {
        let c = &self.model.cfg;
        let cond = m.conditions(&self.model.env, c.n_visual, c.d_vis, c.max_chars);
        generate(&self.model, &self.codec, &self.proc, &cond, scales, steps, seed, self.cfg.sample.griffin_lim_iters)
            .code(EXIT_FAIL)
    }
}

fn item_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).derive(index as u64).next_u64()
}

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark directory or its manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// `λon,λoff,λsp`; overrides --preset.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only the first N entries.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write grayscale PGM spectrograms.
    #[arg(long)]
    pgm: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn sample(a: SampleArgs) -> CliResult<()> {
    let g = Generator::open(&a.config, &a.checkpoint)?;
    let bench = read_bench(&bench_dir(&a.manifest)).code(EXIT_CONFIG)?;
    let steps = a.steps.unwrap_or(g.cfg.sample.steps);
    if steps == 0 {
        return fail(EXIT_CONFIG, "--steps must be at least 1");
    }
    let items: Vec<&SampleManifest> = bench.items.iter().take(a.limit.unwrap_or(usize::MAX)).collect();
    for sub in ["wav", "mel"] {
        fs::create_dir_all(a.out.join(sub)).code(EXIT_FAIL)?;
    }
    let entries = items
        .par_iter()
        .map(|m| -> CliResult<SampleEntry> {
            let scales = scales_for(&g.cfg, a.preset.as_deref(), a.scales.as_deref(), m.scenario)?;
            let seed = item_seed(a.seed, m.index);
            let out = g.run(m, scales, steps, seed)?;
            let wav = format!("wav/{:04}.wav", m.index);
            write_wav(&a.out.join(&wav), &out.waveform).code(EXIT_FAIL)?;
            fs::write(a.out.join(format!("mel/{:04}.csv", m.index)), out.mel.to_csv()).code(EXIT_FAIL)?;
            if a.pgm {
                fs::write(a.out.join(format!("mel/{:04}.pgm", m.index)), out.mel.to_pgm()).code(EXIT_FAIL)?;
            }
            Ok(SampleEntry { index: m.index, scenario: m.scenario, seed, scales, wav })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (ch, ct) = checkpoint_hashes(&a.checkpoint);
    let report =
        SampleReport { config_hash: g.cfg.hash(), checkpoint_config_hash: ch, checkpoint_content_hash: ct, steps, entries };
    write_json(&a.out.join("run_report.json"), &report)?;
    println!("generated {} clips into {}", report.entries.len(), a.out.display());
    Ok(())
}

fn wav_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let wav = dir.join("wav");
    let root = if wav.is_dir() { wav } else { dir.to_path_buf() };
    let rd = fs::read_dir(&root)
        .map_err(|e| anyhow::anyhow!("cannot list {}: {e}", root.display()))
        .code(EXIT_EVAL)?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    files.sort();
    Ok(files)
}

fn mels_of(files: &[PathBuf], proc: &StftProcessor) -> CliResult<Vec<MelSpec>> {
    let opts = WavReadOptions { strict: false, expected_rate: proc.cfg.sample_rate };
    files
        .par_iter()
        .map(|f| {
            let w = read_wav(f, &opts).code(EXIT_EVAL)?.fix_length_to(proc.cfg.clip_len());
            Ok(proc.mel_spectrogram(&w))
        })
        .collect()
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Generated clips (a directory of WAVs or one with a wav/ subdirectory).
    #[arg(long)]
    gen: PathBuf,
    /// Reference clips, paired with --gen by sorted file name.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let proc = StftProcessor::new(&cfg.stft).code(EXIT_CONFIG)?;
    let (g, r) = (wav_files(&a.gen)?, wav_files(&a.reference)?);
    if g.len() != r.len() {
        return fail(EXIT_EVAL, format!("{} generated clips but {} references", g.len(), r.len()));
    }
    if g.len() < 2 {
        return fail(EXIT_EVAL, "need at least two clip pairs");
    }
    let rows = evaluate_pairs(&mels_of(&g, &proc)?, &mels_of(&r, &proc)?).code(EXIT_EVAL)?;
    let csv = metrics_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv).code(EXIT_FAIL)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Negative control: damage analytic gradients before comparing.
    #[arg(long)]
    corrupt_grad: bool,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let reports = all_suites(SuiteOptions { corrupt: a.corrupt_grad, per_tensor: a.per_tensor }).code(EXIT_FAIL)?;
    let mut ok = true;
    println!("{:<16} {:>12} {:>8}  result", "suite", "rel_error", "coords");
    for r in &reports {
        let pass = r.passed(a.tol);
        ok &= pass;
        println!("{:<16} {:>12.3e} {:>8}  {}", r.name, r.rel_error, r.coords, if pass { "pass" } else { "FAIL" });
    }
    if ok {
        Ok(())
    } else {
        fail(EXIT_FAIL, format!("gradient check above tolerance {:e}", a.tol))
    }
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark directory.
    #[arg(long)]
    bench: PathBuf,
    /// Points `λon,λoff,λsp` separated by `;`.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let g = Generator::open(&a.config, &a.checkpoint)?;
    let dir = bench_dir(&a.bench);
    let bench = read_bench(&dir).code(EXIT_CONFIG)?;
    let steps = a.steps.unwrap_or(g.cfg.sample.steps);
    let grid: Vec<CfgScales> = a
        .grid
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| CfgScales::parse(s).map_err(anyhow::Error::msg).code(EXIT_CONFIG))
        .collect::<CliResult<_>>()?;
    if grid.is_empty() {
        return fail(EXIT_CONFIG, "empty grid");
    }
    let items: Vec<&SampleManifest> = bench.items.iter().take(a.limit.unwrap_or(usize::MAX)).collect();
    if items.len() < 2 {
        return fail(EXIT_EVAL, "sweep needs at least two benchmark items");
    }
    let ref_files: Vec<PathBuf> = items.iter().map(|m| dir.join("wav").join(format!("{:04}.wav", m.index))).collect();
    let refs = mels_of(&ref_files, &g.proc)?;
    let mut csv = String::from("lambda_on,lambda_off,lambda_sp,fad,align,error_rate\n");
    for s in &grid {
        let gens = items
            .par_iter()
            .map(|m| Ok(g.run(m, *s, steps, item_seed(a.seed, m.index))?.mel))
            .collect::<CliResult<Vec<_>>>()?;
        let rows = evaluate_pairs(&gens, &refs).code(EXIT_EVAL)?;
        let get = |k: &str| rows.iter().find(|r| r.metric == k).map(|r| r.value).unwrap_or(f64::NAN);
        csv.push_str(&format!("{},{},{},{},{},{}\n", s.on, s.off, s.sp, get("fad"), get("align"), get("ter")));
    }
    match &a.out {
        Some(p) => fs::write(p, &csv).code(EXIT_FAIL)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct MelArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    wav: PathBuf,
    /// CSV grid output (frames × bands).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

pub fn mel(a: MelArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let proc = StftProcessor::new(&cfg.stft).code(EXIT_CONFIG)?;
    let opts = WavReadOptions { strict: false, expected_rate: cfg.stft.sample_rate };
    let w = read_wav(&a.wav, &opts).code(EXIT_CONFIG)?.fix_length_to(cfg.stft.clip_len());
    let m = proc.mel_spectrogram(&w);
    fs::write(&a.out, m.to_csv()).code(EXIT_FAIL)?;
    if let Some(p) = &a.pgm {
        fs::write(p, m.to_pgm()).code(EXIT_FAIL)?;
    }
    println!("{} frames x {} bands", m.frames, m.bands);
    Ok(())
}
