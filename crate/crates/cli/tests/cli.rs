use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pemoe::corpus::load_corpus;
use pemoe::textprep::{default_keyword_list, sanitize_directional};
use pemoe::EvalReport;
use tempfile::TempDir;

fn pemoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pemoe"))
        .args(args)
        .env_remove("PEMOE_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pemoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    ok(&["gen", "--locations", "6", "--queries-per-location", "3", "--d-t", "8", "--d-v", "8", "--seed", "5", "-o", s(&path)]);
    path
}

fn write_config(dir: &Path, corpus: &Path, extra: &str) -> PathBuf {
    let path = dir.join("pipeline.conf");
    fs::write(
        &path,
        format!(
            "seed = 1\noutput_dir = out\ncorpus = {}\nstage1_epochs = 4\nstage2_epochs = 2\nbatch_size = 8\n\
             model.d_e = 8\nmodel.h_g = 8\nmodel.h_e = 8\n{extra}",
            s(corpus)
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_counts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    ok(&["gen", "--locations", "10", "--seed", "7", "-o", s(&a)]);
    ok(&["gen", "--locations", "10", "--seed", "7", "-o", s(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("G ")).count(), 30);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_rejects_zero_dimension() {
    let dir = TempDir::new().unwrap();
    let out = pemoe(&["gen", "--d-t", "0", "-o", s(&dir.path().join("x.txt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--d-t"));
}

#[test]
fn sanitize_scopes_platforms_and_counts() {
    let dir = TempDir::new().unwrap();
    let input = gen_small(dir.path(), "c.txt");
    let output = dir.path().join("s.txt");
    let stdout = ok(&["sanitize", "-i", s(&input), "-o", s(&output), "--platforms", "sat"]);

    let before = load_corpus(&input).unwrap();
    let after = load_corpus(&output).unwrap();
    let kw = default_keyword_list();
    let mut expected = 0;
    for (a, b) in before.gallery().iter().zip(after.gallery()) {
        if a.platform == pemoe::Platform::Satellite {
            let (caption, report) = sanitize_directional(&a.caption, &kw);
            assert_eq!(b.caption, caption);
            expected += report.removed_sentence_count;
        } else {
            assert_eq!(a.caption, b.caption);
        }
    }
    assert!(stdout.contains(&format!("total={expected}")), "{stdout}");

    // A second pass finds nothing left to remove and changes no bytes.
    let again = dir.path().join("s2.txt");
    let stdout = ok(&["sanitize", "-i", s(&output), "-o", s(&again), "--platforms", "sat"]);
    assert!(stdout.contains("total=0"));
    assert_eq!(fs::read(&output).unwrap(), fs::read(&again).unwrap());

    let out = pemoe(&["sanitize", "-i", s(&input), "-o", s(&again), "--platforms", "moon"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staged_training_matches_all_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let corpus = gen_small(dir.path(), "c.txt");
    let staged = write_config(dir.path(), &corpus, "");
    for stage in ["1", "mine", "2"] {
        ok(&["train", "--config", s(&staged), "--stage", stage]);
    }
    let out = dir.path().join("out");
    let staged_files: Vec<Vec<u8>> = ["stage1.ckpt", "triplets.txt", "model.ckpt"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    for _ in 0..2 {
        ok(&["train", "--config", s(&staged), "--stage", "all"]);
        for (f, bytes) in ["stage1.ckpt", "triplets.txt", "model.ckpt"].iter().zip(&staged_files) {
            assert_eq!(&fs::read(out.join(f)).unwrap(), bytes, "{f}");
        }
    }
    assert!(fs::read_to_string(out.join("stage1.log")).unwrap().contains("phase=A"));
    assert!(fs::read_to_string(out.join("stage2.log")).unwrap().contains("phase=stage2"));
}

#[test]
fn config_from_environment_and_missing_key() {
    let dir = TempDir::new().unwrap();
    let corpus = gen_small(dir.path(), "c.txt");
    let config = write_config(dir.path(), &corpus, "");
    let out = Command::new(env!("CARGO_BIN_EXE_pemoe"))
        .args(["train", "--stage", "1"])
        .env("PEMOE_CONFIG", &config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/stage1.ckpt").is_file());

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, format!("output_dir = out\ncorpus = {}\n", s(&corpus))).unwrap();
    let out = pemoe(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`seed`"));

    let out = pemoe(&["train", "--config", s(&dir.path().join("absent.conf"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_reports_monotone_recall_and_rejects_mismatch() {
    let dir = TempDir::new().unwrap();
    let corpus = gen_small(dir.path(), "c.txt");
    let config = write_config(dir.path(), &corpus, "");
    ok(&["train", "--config", s(&config)]);
    let ckpt = dir.path().join("out/model.ckpt");

    let json = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--ks", "1,5,10,20", "--json"]);
    let reports: Vec<EvalReport> = serde_json::from_str(&json).unwrap();
    let r: Vec<f64> = reports[0].r_at.values().copied().collect();
    assert_eq!(r.len(), 4);
    assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");

    // Worker count does not change the report.
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    ok(&["--workers", "1", "eval", "--checkpoint", s(&ckpt), "--config", s(&config), "--report", s(&a)]);
    ok(&["--workers", "3", "eval", "--checkpoint", s(&ckpt), "--config", s(&config), "--report", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read_to_string(&a).unwrap().contains("metric=composite k=0"));

    let other = dir.path().join("wide.txt");
    ok(&["gen", "--locations", "3", "--d-t", "5", "--d-v", "8", "-o", s(&other)]);
    let out = pemoe(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&other)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn ablate_prints_four_rows_matching_json() {
    let dir = TempDir::new().unwrap();
    let corpus = gen_small(dir.path(), "c.txt");
    let config = write_config(dir.path(), &corpus, "");
    let table = ok(&["ablate", "--config", s(&config)]);
    let json = ok(&["ablate", "--config", s(&config), "--json"]);
    let reports: Vec<EvalReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(reports.len(), 4);
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .collect();
    assert_eq!(rows.len(), 4);
    for (row, report) in rows.iter().zip(&reports) {
        assert!(row.starts_with(&report.config_label));
        let r1: f64 = row[report.config_label.len()..].split_whitespace().next().unwrap().parse().unwrap();
        assert!((r1 - report.recall(1) * 100.0).abs() <= 0.005 + 1e-9, "{row}");
    }
}

#[test]
fn gradcheck_exit_codes() {
    assert!(ok(&["gradcheck"]).contains("max_relative_error"));
    ok(&["gradcheck", "--loss", "triplet"]);
    ok(&["gradcheck", "--loss", "infonce", "--seed", "3"]);
    assert_eq!(pemoe(&["gradcheck", "--eps", "0"]).status.code(), Some(1));
    let out = pemoe(&["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("worst per tensor"));
}
