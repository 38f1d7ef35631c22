use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctl")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = ctl(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", stderr(&out));
    out
}

const SMALL: &str = "\
synth_scenes=80
split_train=0.6
split_val=0.2
split_test=0.2
synth_products=6
synth_categories=3
synth_image_size=48
feature_d1=16
feature_d2=8
embed_dim=8
epochs=2
validate_every=1
batch_size=8
random_scorers=10
monte_carlo_trials=200
";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth -> generate -> split -> features under `dir`, returning the config path.
fn prepare(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let c = s(&cfg);
    ok(&["--config", c, "synth", "--out", s(&dir.join("data"))]);
    ok(&["--config", c, "generate", "--stl", s(&dir.join("data/stl.jsonl")), "--out", s(&dir.join("ctl.jsonl"))]);
    ok(&["--config", c, "split", "--ctl", s(&dir.join("ctl.jsonl")), "--out", s(&dir.join("split.tsv"))]);
    ok(&["--config", c, "features", "--ctl", s(&dir.join("ctl.jsonl")), "--out", s(&dir.join("features.bin"))]);
    cfg
}

fn data_args(dir: &Path) -> Vec<String> {
    ["--ctl", "ctl.jsonl", "--split", "split.tsv", "--features", "features.bin"]
        .iter()
        .enumerate()
        .map(|(i, a)| if i % 2 == 1 { dir.join(a).to_string_lossy().into_owned() } else { a.to_string() })
        .collect()
}

fn run_with(cfg: &Path, cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config".to_string(), s(cfg).to_string(), cmd.to_string()];
    args.extend(data_args(dir));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = ctl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let help = stdout(&ok(&["--help"]));
    for cmd in ["generate", "split", "synth", "features", "train", "ablate", "eval", "topk", "attention", "baseline"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
        let sub = stdout(&ok(&[cmd, "--help"]));
        assert!(sub.contains("--config") && sub.contains("--set"), "{cmd} help lacks global flags");
    }
    let train = stdout(&ok(&["train", "--help"]));
    for flag in ["--ctl", "--split", "--features", "--epochs", "--variant", "--out-dir", "--resume"] {
        assert!(train.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctl(&["generate", "--stl", s(&dir.path().join("absent.jsonl")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"));
    let out = ctl(&["split", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_override_is_a_usage_error() {
    let out = ctl(&["--set", "novalue", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn module_errors_exit_one_with_their_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctl(&["--set", "colour=red", "synth", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("InvalidConfig"), "{}", stderr(&out));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    let out = ctl(&["generate", "--stl", s(&bad), "--out", s(&dir.path().join("ctl.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ManifestParse"), "{}", stderr(&out));
}

#[test]
fn generate_prints_stats_and_writes_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", s(&d.join("data")), "--scenes", "10", "--products", "4", "--categories", "2"]);
    let out = ok(&["generate", "--stl", s(&d.join("data/stl.jsonl")), "--out", s(&d.join("ctl.jsonl")), "--mode", "fashion"]);
    let text = stdout(&out);
    assert!(text.contains("input pairs: 20") && text.contains("kept:"), "{text}");
    let meta = fs::read_to_string(d.join("ctl.jsonl.meta.json")).unwrap();
    for field in ["config_hash", "seeds", "artifact_version", "\"generate\""] {
        assert!(meta.contains(field), "{meta}");
    }
    assert!(d.join("data/stl.jsonl.meta.json").exists());

    let same = ctl(&["generate", "--stl", s(&d.join("ctl.jsonl")), "--out", s(&d.join("ctl.jsonl"))]);
    assert_eq!(same.status.code(), Some(2), "output may not overwrite the input");
}

#[test]
fn pipeline_is_byte_reproducible() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        let d = dir.path();
        let cfg = prepare(d);
        run_with(&cfg, "train", d, &["--out-dir", s(&d.join("ckpt"))]);
        run_with(&cfg, "eval", d, &["--checkpoint", s(&d.join("ckpt/best.ckpt")), "--out", s(&d.join("report.json"))]);
    }
    let files = [
        "data/stl.jsonl",
        "ctl.jsonl",
        "split.tsv",
        "features.bin",
        "ckpt/best.ckpt",
        "ckpt/last.ckpt",
        "ckpt/history.json",
        "report.json",
        "report.json.meta.json",
        "ckpt/best.ckpt.meta.json",
    ];
    for f in files {
        let a = fs::read(runs[0].path().join(f)).unwrap();
        let b = fs::read(runs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn every_evaluation_command_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = prepare(d);
    run_with(&cfg, "train", d, &["--out-dir", s(&d.join("ckpt"))]);
    let ckpt = d.join("ckpt/best.ckpt");

    let topk = run_with(&cfg, "topk", d, &["--checkpoint", s(&ckpt), "--k", "1,3", "--out", s(&d.join("topk.csv"))]);
    assert!(stdout(&topk).contains("top-3"));
    let csv = fs::read_to_string(d.join("topk.csv")).unwrap();
    assert!(csv.starts_with("K,accuracy\n1,"), "{csv}");

    run_with(&cfg, "topk", d, &["--scorer", "random", "--out", s(&d.join("topk_random.csv"))]);
    let curve = fs::read_to_string(d.join("topk_random.csv")).unwrap();
    assert!(curve.trim_end().ends_with(",1"), "largest K must reach 1: {curve}");

    let maps = d.join("maps");
    run_with(&cfg, "attention", d, &["--checkpoint", s(&ckpt), "--out", s(&d.join("att.json")), "--maps", s(&maps)]);
    assert!(fs::read_to_string(d.join("att.json")).unwrap().contains("random_top1_analytic"));
    let pgm = fs::read_dir(&maps).unwrap().next().unwrap().unwrap().path();
    assert!(fs::read(pgm).unwrap().starts_with(b"P5\n7 7\n255\n"));

    for scorer in ["popularity", "rawfeature", "linear-metric", "random"] {
        let out = d.join(format!("{scorer}.json"));
        let text = stdout(&run_with(&cfg, "baseline", d, &["--scorer", scorer, "--out", s(&out)]));
        assert!(text.contains("binary_accuracy"), "{text}");
        assert!(out.with_file_name(format!("{scorer}.json.meta.json")).exists());
    }

    let ablate = run_with(&cfg, "ablate", d, &["--out", s(&d.join("ablate.json"))]);
    for v in ["G+L0", "G+L", "G ", "L "] {
        assert!(stdout(&ablate).contains(v), "{}", stdout(&ablate));
    }
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = prepare(d);
    run_with(&cfg, "train", d, &["--out-dir", s(&d.join("full")), "--epochs", "3"]);
    let stopped = run_with(&cfg, "train", d, &["--out-dir", s(&d.join("part")), "--epochs", "3", "--stop-after", "1"]);
    assert!(stdout(&stopped).contains("stopped after epoch 1"));
    assert_ne!(fs::read(d.join("full/last.ckpt")).unwrap(), fs::read(d.join("part/last.ckpt")).unwrap());
    run_with(&cfg, "train", d, &["--out-dir", s(&d.join("part")), "--resume"]);
    for f in ["last.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(d.join("full").join(f)).unwrap(), fs::read(d.join("part").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_checkpoint_reports_checksum_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = prepare(d);
    run_with(&cfg, "train", d, &["--out-dir", s(&d.join("ckpt"))]);
    let path = d.join("ckpt/best.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let mut args = vec!["--config".to_string(), s(&cfg).to_string(), "eval".to_string()];
    args.extend(data_args(d));
    args.extend(["--checkpoint", s(&path), "--out", s(&d.join("r.json"))].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ctl(&refs);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ChecksumMismatch"), "{}", stderr(&out));
}
