use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rnadot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnadot")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rnadot(args);
    assert!(
        out.status.success(),
        "rnadot {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn oracle_check_passes() {
    let out = ok(&["oracle-check", "--n-max", "12", "--cases", "10", "--seed", "3"]);
    assert!(out.contains("ok"), "{out}");
}

#[test]
fn bppm_render_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let fasta = dir.path().join("in.fasta");
    fs::write(&fasta, ">DEMO/hairpin\nGAAAC\n>other\nGGGGAAACCCCAUAGGGAAACCC\n").unwrap();
    let bppm_dir = dir.path().join("bppm");
    ok(&["bppm", "--in", p(&fasta), "--out", p(&bppm_dir), "--family", "RF1"]);
    let text = fs::read_to_string(bppm_dir.join("DEMO__hairpin.bppm")).unwrap();
    let b = rnadot::bppm::Bppm::from_text(&text).unwrap();
    let w = (3.0f64 / 0.6163).exp();
    assert!((b.get(1, 5) - w / (1.0 + w)).abs() < 1e-12);
    assert!(bppm_dir.join("RF1__other.bppm").exists());

    let again = dir.path().join("again");
    ok(&["bppm", "--in", p(&fasta), "--out", p(&again), "--family", "RF1", "--import-bppm", p(&bppm_dir)]);
    assert_eq!(fs::read(again.join("RF1__other.bppm")).unwrap(), fs::read(bppm_dir.join("RF1__other.bppm")).unwrap());

    let plots = dir.path().join("plots");
    ok(&["render", "--bppm", p(&bppm_dir), "--side", "16", "--out", p(&plots)]);
    let img = rnadot::imaging::read_pgm(&fs::read(plots.join("RF1__other.pgm")).unwrap()).unwrap();
    assert_eq!(img.side(), 16);
    assert!(img.is_symmetric());
}

#[test]
fn bppm_reports_bad_residue() {
    let dir = tempfile::tempdir().unwrap();
    let fasta = dir.path().join("in.fasta");
    fs::write(&fasta, ">F/x\nGGNAAACC\n").unwrap();
    let out = rnadot(&["bppm", "--in", p(&fasta), "--out", p(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('N') && err.contains('3'), "{err}");
}

#[test]
fn dataset_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let summary = ok(&[
        "dataset", "--synth", "5,3,40,0.1", "--min-len", "1", "--split", "3,1,1", "--reps", "2", "--side", "16", "--seed", "4", "--out",
        p(&data),
    ]);
    assert!(summary.contains("train/val/test: 3/1/1"), "{summary}");
    // one validation family: no different-family val records, so no validation
    ok(&[
        "train", "--data", p(&data), "--arch", "linear", "--batch", "4", "--ratio", "1:1", "--iters", "5", "--out",
        p(&run),
    ]);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("iter\tlr\tloss"));

    let data2 = dir.path().join("data2");
    ok(&[
        "dataset", "--synth", "6,3,40,0.1", "--min-len", "1", "--split", "2,2,2", "--reps", "2", "--side", "16", "--seed", "4", "--out",
        p(&data2),
    ]);
    ok(&[
        "train", "--data", p(&data2), "--arch", "linear", "--batch", "4", "--iters", "10", "--validate-every", "5",
        "--out", p(&run),
    ]);
    // the best logged validation row is reproduced by eval on the checkpoint
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    let best = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split('\t').nth(5)?.parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max);
    let ckpt = run.join("best.ckpt");
    let out = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data2), "--split", "val"]);
    let json: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(json["avg"].as_f64().unwrap(), best);
    assert!(out.contains("acc_diff "));

    let test = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data2)]);
    assert!(test.starts_with("split test"));
}

#[test]
fn train_rejects_indivisible_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = rnadot(&["train", "--data", p(dir.path()), "--batch", "32", "--ratio", "4:1", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}
