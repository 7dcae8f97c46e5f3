use std::path::Path;
use std::process::{Command, Output};

fn hagen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hagen")).args(args).output().expect("spawn hagen")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn mix_train_sample_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hagen(&["mix", "--out", p(&d.join("data"))]));
    ok(&hagen(&["bench", "--counts", "2,2,2", "--out", p(&d.join("bench"))]));

    let s1 = d.join("s1");
    ok(&hagen(&["train", "--stage", "1", "--steps", "4", "--data", p(&d.join("data")), "--out", p(&s1)]));
    assert!(s1.join("loss_stage1.csv").exists());

    // stage 2 refuses to start from nothing
    let out = hagen(&["train", "--stage", "2", "--data", p(&d.join("data")), "--out", p(&d.join("bad"))]);
    assert_eq!(out.status.code(), Some(2));

    let s2 = d.join("s2");
    let ck1 = s1.join("checkpoint");
    ok(&hagen(&["train", "--stage", "2", "--steps", "4", "--from", p(&ck1), "--data", p(&d.join("data")), "--out", p(&s2)]));
    let ck = s2.join("checkpoint");

    let gen = d.join("gen");
    let bench = d.join("bench");
    let args = ["sample", "--checkpoint", p(&ck), "--manifest", p(&bench), "--steps", "4", "--seed", "7"];
    ok(&hagen(&[&args[..], &["--out", p(&gen), "--pgm"]].concat()));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(gen.join("run_report.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 6);
    assert_eq!(report["checkpoint_content_hash"].as_str().unwrap().len(), 64);
    assert!(gen.join("mel/0000.pgm").exists());

    // same seed, same bytes
    let again = d.join("gen2");
    ok(&hagen(&[&args[..], &["--out", p(&again)]].concat()));
    assert_eq!(std::fs::read(gen.join("wav/0003.wav")).unwrap(), std::fs::read(again.join("wav/0003.wav")).unwrap());

    let csv = d.join("metrics.csv");
    ok(&hagen(&["eval", "--gen", p(&gen), "--ref", p(&d.join("bench")), "--out", p(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,value,n\n"));
    for m in ["fad", "mkl", "align", "ter"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{m},"))), "{m} missing:\n{text}");
    }

    let sweep = d.join("sweep.csv");
    let grid = "5,0.5,2.5;1,1,1";
    ok(&hagen(&["sweep", "--checkpoint", p(&ck), "--bench", p(&d.join("bench")), "--grid", grid, "--steps", "2", "--out", p(&sweep)]));
    assert_eq!(std::fs::read_to_string(&sweep).unwrap().lines().count(), 3);

    let mel = d.join("m.csv");
    ok(&hagen(&["mel", "--wav", p(&d.join("bench/wav/0000.wav")), "--out", p(&mel)]));
    assert_eq!(std::fs::read_to_string(&mel).unwrap().lines().count(), 32);
}

#[test]
fn checkpoint_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hagen(&["mix", "--out", p(&d.join("data"))]));
    ok(&hagen(&["bench", "--counts", "1,1,1", "--out", p(&d.join("bench"))]));
    ok(&hagen(&["train", "--stage", "1", "--steps", "1", "--data", p(&d.join("data")), "--out", p(&d.join("s1"))]));
    let cfg = d.join("other.toml");
    let mut c = hagen::config::RunConfig::desk();
    c.model.env_seed += 1;
    std::fs::write(&cfg, c.to_toml()).unwrap();
    let out = hagen(&[
        "sample", "--config", p(&cfg), "--checkpoint", p(&d.join("s1/checkpoint")),
        "--manifest", p(&d.join("bench")), "--out", p(&d.join("gen")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_inputs_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = hagen(&["train", "--stage", "1", "--data", p(&d.join("none")), "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = hagen(&["eval", "--gen", p(&d.join("a")), "--ref", p(&d.join("b"))]);
    assert_eq!(out.status.code(), Some(4));
    std::fs::write(d.join("bad.toml"), "seed = 1\n").unwrap();
    let out = hagen(&["mix", "--config", p(&d.join("bad.toml")), "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = hagen(&["gradcheck", "--per-tensor", "1"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() > 2);
    let bad = hagen(&["gradcheck", "--per-tensor", "1", "--corrupt-grad"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn thread_env_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_hagen"))
        .args(["gradcheck", "--per-tensor", "1"])
        .env("OMNISONIC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
