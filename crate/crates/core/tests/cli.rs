use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kgram::constructions::{build, recommended_kappa, Construction};
use kgram::model::{init_weights, load_checkpoint, save_checkpoint};
use serde_json::Value;

fn kgram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgram"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_header_and_binary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for out in [&a, &b] {
        let o = kgram(&[
            "gen-data",
            "--S",
            "2",
            "--k",
            "1",
            "--T",
            "32",
            "--n",
            "10",
            "--seed",
            "7",
            "--out",
            path(out),
        ]);
        assert_eq!(code(&o), 0, "{o:?}");
        assert!(stdout(&o).contains("checksum"));
    }
    let text = fs::read_to_string(&a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("S=2 k=1 T=32 seed=7"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for r in rows {
        let syms: Vec<&str> = r.split(' ').collect();
        assert_eq!(syms.len(), 32);
        assert!(syms.iter().all(|s| *s == "0" || *s == "1"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.txt.manifest.json").exists());
}

#[test]
fn gen_data_rejects_order_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.txt");
    let o = kgram(&[
        "gen-data",
        "--S",
        "2",
        "--k",
        "0",
        "--T",
        "32",
        "--n",
        "10",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 64);
}

#[test]
fn gen_data_unwritable_path_fails() {
    let o = kgram(&[
        "gen-data",
        "--S",
        "2",
        "--k",
        "1",
        "--T",
        "8",
        "--n",
        "1",
        "--out",
        "/nonexistent/dir/x.txt",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_t4_order_four_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = kgram(&[
        "verify",
        "--construction",
        "t4",
        "--S",
        "2",
        "--k",
        "4",
        "--T",
        "64",
        "--n-seqs",
        "100",
        "--kappa",
        "auto",
        "--tol",
        "1e-3",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["max_abs_err"].as_f64().unwrap() <= 1e-3);
    assert_eq!(report["kappa"].as_f64().unwrap(), recommended_kappa(4, 64, 1e-3).unwrap());
}

#[test]
fn verify_zero_tolerance_fails() {
    let o = kgram(&["verify", "--construction", "t1", "--S", "2", "--k", "1", "--tol", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_t2_first_order_agrees_with_t1() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for c in ["t1", "t2"] {
        let out = dir.path().join(format!("{c}.json"));
        let o = kgram(&[
            "verify",
            "--construction",
            c,
            "--S",
            "3",
            "--k",
            "1",
            "--n-seqs",
            "20",
            "--out",
            path(&out),
        ]);
        assert_eq!(code(&o), 0);
        let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        reports.push(r);
    }
    assert_eq!(reports[0]["evaluated"], reports[1]["evaluated"]);
    assert_eq!(reports[0]["skipped"], reports[1]["skipped"]);
}

#[test]
fn verify_with_nothing_defined_is_inconclusive() {
    let o = kgram(&[
        "verify",
        "--construction",
        "t1",
        "--S",
        "200",
        "--k",
        "1",
        "--T",
        "2",
        "--n-seqs",
        "1",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = kgram(&[
        "verify",
        "--construction",
        "t3",
        "--S",
        "2",
        "--k",
        "2",
        "--n-seqs",
        "10",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0);
    let first = fs::read(&out).unwrap();
    let manifest_path = dir.path().join("r.json.manifest.json");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "verify");
    assert!(manifest["wall_clock_secs"].as_f64().is_some());
    assert_eq!(manifest["outputs"][0], path(&out));
    fs::remove_file(&out).unwrap();
    let o = kgram(&["replay", path(&manifest_path)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn train_with_zero_learning_rate_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "s = 2\nk = 1\nt = 16\nlayers = 1\nheads = 1\nd = 8\nlr = 0.0\nbatch = 2\niterations = 3\neval_every = 1\neval_seqs = 4\nseeds = [5]\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = kgram(&["train", "--config", path(&cfg), "--out-dir", path(&out)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let (spec, w) = load_checkpoint(&out.join("seed5/checkpoint.json")).unwrap();
    let init = init_weights(&spec, 5).unwrap();
    for (name, t) in w.iter() {
        assert_eq!(t.data(), init.get(name).unwrap().data(), "{name}");
    }
    let log = fs::read_to_string(out.join("seed5/log.csv")).unwrap();
    assert!(log.starts_with("iteration,train_loss,test_loss,bayes_loss,gap\n"));
    assert_eq!(log.lines().count(), 1 + 4);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn train_missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = kgram(&["train", "--config", "/nonexistent.toml", "--out-dir", path(dir.path())]);
    assert_eq!(code(&o), 64);
}

#[test]
fn analyze_normerror_reports_distance() {
    let o = kgram(&["analyze", "--mode", "normerror", "--S", "2", "--k", "4"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["min_distance"].as_f64().unwrap() >= 0.0123);
}

#[test]
fn analyze_gradcheck_passes() {
    let o = kgram(&["analyze", "--mode", "gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn analyze_ih_audit_on_t4_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("t4.json");
    let (spec, w) = build(Construction::T4, 2, 2, recommended_kappa(2, 64, 1e-3).unwrap(), 64).unwrap();
    save_checkpoint(&ck, &spec, &w).unwrap();
    let o = kgram(&[
        "analyze",
        "--mode",
        "ih-audit",
        "--checkpoint",
        path(&ck),
        "--S",
        "2",
        "--k",
        "2",
        "--T",
        "64",
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["pass_rate"].as_f64(), Some(1.0));
}

#[test]
fn analyze_attention_stats_and_sweep_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats");
    let o = kgram(&[
        "analyze",
        "--mode",
        "attn-stats",
        "--construction",
        "t1",
        "--S",
        "3",
        "--k",
        "1",
        "--T",
        "16",
        "--n-seqs",
        "8",
        "--out",
        path(&stats),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let slice = fs::read_to_string(stats.join("attention_slice.csv")).unwrap();
    assert_eq!(slice.lines().next(), Some("layer,head,i,mean,std"));
    assert_eq!(slice.lines().count(), 1 + 2 * 11);
    assert!(stats.join("attention_stats.csv").exists());
    assert!(stats.join("manifest.json").exists());

    let sweep = dir.path().join("sweep.csv");
    let o = kgram(&[
        "analyze",
        "--mode",
        "sweep",
        "--construction",
        "t2",
        "--S",
        "2",
        "--k",
        "2",
        "--T",
        "32",
        "--n-seqs",
        "4",
        "--kappas",
        "5,10,20",
        "--out",
        path(&sweep),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let text = fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
}

#[test]
fn bad_flags_exit_64() {
    assert_eq!(code(&kgram(&["analyze", "--mode", "bogus"])), 64);
    assert_eq!(
        code(&kgram(&[
            "verify",
            "--construction",
            "t1",
            "--S",
            "2",
            "--k",
            "1",
            "--kappa",
            "hot"
        ])),
        64
    );
    assert_eq!(code(&kgram(&["--help"])), 0);
}
