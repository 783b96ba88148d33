use std::path::Path;
use std::process::{Command, Output};

use cider::evaluation::read_csv;

fn cider(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cider"))
        .args(args)
        .current_dir(dir)
        .env_remove("CIDER_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cider(dir, args);
    assert!(
        out.status.success(),
        "cider {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, n: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--n", n, "--cls", "2", "--bias", "0.5", "--seed", "1", "--out", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

const TINY: &[&str] = &["--d", "8", "--epochs", "3", "--batch-size", "16", "--seed", "2"];

#[test]
fn synth_writes_one_line_per_sample_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a.jsonl", "200", &[]);
    synth(dir.path(), "b.jsonl", "200", &[]);
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 200);
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = cider(dir.path(), &["synth", "--n", "5", "--cls", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let out = cider(dir.path(), &["train", "--data", "missing.jsonl", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(out.stdout.is_empty());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_cider"))
            .args(["synth", "--n", "20", "--out", out])
            .current_dir(dir.path())
            .env("CIDER_SEED", seed)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("5", "a.jsonl");
    assert_eq!(a, run("5", "b.jsonl"));
    assert_ne!(a, run("6", "c.jsonl"));
    ok(dir.path(), &["synth", "--n", "20", "--seed", "5", "--out", "d.jsonl"]);
    assert_eq!(a, std::fs::read(dir.path().join("d.jsonl")).unwrap());

    let bad = Command::new(env!("CARGO_BIN_EXE_cider"))
        .args(["synth", "--n", "20", "--out", "e.jsonl"])
        .current_dir(dir.path())
        .env("CIDER_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("CIDER_SEED"));
}

#[test]
fn train_logs_each_epoch_and_resume_continues_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", &[]);
    let start = std::time::Instant::now();
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "m.ckpt", "--log", "log.jsonl"];
    args.extend_from_slice(TINY);
    ok(d, &args);
    assert!(start.elapsed().as_secs() < 60);

    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3]);

    ok(
        d,
        &["train", "--data", "d.jsonl", "--resume", "m.ckpt", "--out", "m2.ckpt", "--log", "log.jsonl", "--epochs", "5"],
    );
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [1, 2, 3, 4, 5]);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", &[]);
    for out in ["a.ckpt", "b.ckpt"] {
        let mut args = vec!["train", "--data", "d.jsonl", "--out", out];
        args.extend_from_slice(TINY);
        ok(d, &args);
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", &[]);
    std::fs::write(
        d.join("run.cfg"),
        "# tiny run\nd = 4\nd_l = 4\nepochs = 1\nbatch_size = 16\ndata = d.jsonl\n",
    )
    .unwrap();
    ok(d, &["train", "--config", "run.cfg", "--out", "m.ckpt", "--d", "8"]);
    let ck = cider::checkpoint::Checkpoint::load(&d.join("m.ckpt")).unwrap();
    assert_eq!((ck.config.d, ck.config.epochs), (8, 1));

    std::fs::write(d.join("bad.cfg"), "depth = 3\n").unwrap();
    let out = cider(d, &["train", "--config", "bad.cfg", "--data", "d.jsonl", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "40", &[]);
    let mut args = vec![
        "train", "--data", "d.jsonl", "--out", "m.ckpt", "--no-recon", "--no-attn", "--no-joint", "--no-mcm", "--no-cf",
        "--no-wsam",
    ];
    args.extend_from_slice(TINY);
    ok(d, &args);
    let ck = cider::checkpoint::Checkpoint::load(&d.join("m.ckpt")).unwrap();
    let c = &ck.config;
    assert_eq!((c.alpha, c.beta, c.gamma), (0.0, 0.0, 0.0));
    assert!(!c.use_mcm && !c.use_cf && !c.use_wsam);
    assert!(ck.class_table.is_none() && ck.cf_vocab.is_none());
}

#[test]
fn full_pipeline_produces_eleven_rows_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "80", &["--aligned"]);
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "m.ckpt"];
    args.extend_from_slice(TINY);
    ok(d, &args);

    let stdout = ok(
        d,
        &["eval-robustness", "--ckpt", "m.ckpt", "--data", "d.jsonl", "--scenario", "rmfm,tmfm", "--out", "c.csv"],
    );
    let rows = read_csv(&d.join("c.csv")).unwrap();
    assert_eq!(rows.len(), 22);
    for sc in ["rmfm", "tmfm"] {
        let rates: Vec<f64> = rows.iter().filter(|r| r.scenario == sc).map(|r| r.rate).collect();
        assert_eq!(rates.len(), 11);
        assert_eq!(rates[10], 1.0);
    }
    assert!(rows.iter().all(|r| r.acc7.is_none()));
    let header = std::fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(header.starts_with("scenario,rate,acc2,f1,acc7\n"));

    let printed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let again: serde_json::Value = serde_json::from_str(&ok(d, &["auilc", "--in", "c.csv"])).unwrap();
    assert_eq!(printed, again);
    assert!(printed["rmfm"]["acc2"].as_f64().is_some());

    let stdout2 = ok(
        d,
        &["eval-robustness", "--ckpt", "m.ckpt", "--data", "d.jsonl", "--scenario", "rmfm,tmfm", "--out", "c2.csv"],
    );
    assert_eq!(stdout, stdout2);
}

#[test]
fn smm_ignores_the_rate_and_maci_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "80", &[]);
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "m.ckpt"];
    args.extend_from_slice(TINY);
    ok(d, &args);

    let base = ["eval-robustness", "--ckpt", "m.ckpt", "--data", "d.jsonl"];
    let mut smm = base.to_vec();
    smm.extend(["--scenario", "smm", "--smm-keep", "l", "--out", "smm.csv"]);
    ok(d, &smm);
    let rows = read_csv(&d.join("smm.csv")).unwrap();
    assert!(rows.iter().all(|r| r.acc2 == rows[0].acc2 && r.f1 == rows[0].f1));

    // Language-only by a different route: RMM flags at rate 0 vs SMM. Both
    // must agree with a direct evaluation of the zeroed features.
    let ck = cider::checkpoint::Checkpoint::load(&d.join("m.ckpt")).unwrap();
    let model = ck.model().unwrap();
    let ds = cider::data::Dataset::load(&d.join("d.jsonl")).unwrap();
    let p = cider::model::InferenceModel {
        model: &model,
        table: ck.class_table.as_ref().map(|t| t.uniform()),
        vocab: ck.cf_vocab.as_ref(),
        tau: model.cfg.tau,
    };
    let test = ds.split_vec(cider::data::Split::Test);
    let mut preds = Vec::new();
    for s in &test {
        let mut s = s.clone();
        s.audio.fill(0.0);
        s.vision.fill(0.0);
        preds.push(cider::evaluation::Predictor::predict(&p, &s).unwrap());
    }
    let labels: Vec<usize> = test.iter().map(|s| s.label(2)).collect();
    let m = cider::evaluation::metrics(&preds, &labels, 2).unwrap();
    assert_eq!(rows[0].acc2, m.acc2);

    let mut off = base.to_vec();
    off.extend(["--scenario", "rmfm", "--rates", "0", "--maci", "off", "--out", "off.csv"]);
    ok(d, &off);
    let mut on = base.to_vec();
    on.extend(["--scenario", "rmfm", "--rates", "0", "--out", "on.csv"]);
    ok(d, &on);
    assert_eq!(read_csv(&d.join("off.csv")).unwrap().len(), 1);
    assert_eq!(read_csv(&d.join("on.csv")).unwrap().len(), 1);
}

#[test]
fn mismatched_checkpoint_and_data_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "40", &[]);
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "m.ckpt"];
    args.extend_from_slice(TINY);
    ok(d, &args);
    let wide = cider::data::synth_dataset_with(
        40,
        2,
        0.0,
        1,
        &cider::data::SynthConfig {
            d_a: 9,
            ..Default::default()
        },
    )
    .unwrap();
    wide.save(&d.join("wide.jsonl")).unwrap();
    let bad = cider(d, &["eval-robustness", "--ckpt", "m.ckpt", "--data", "wide.jsonl", "--out", "c.csv"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("checkpoint"));

    let bad = cider(d, &["train", "--data", "wide.jsonl", "--resume", "m.ckpt", "--out", "m2.ckpt"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn build_cf_vocab_writes_tab_separated_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n", "100", "--cls", "2", "--bias", "1", "--seed", "3", "--out", "d.jsonl"]);
    ok(d, &["build-cf-vocab", "--data", "d.jsonl", "--cls", "2", "--out", "v.tsv"]);
    let text = std::fs::read_to_string(d.join("v.tsv")).unwrap();
    for l in text.lines() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 3);
        f[0].parse::<usize>().unwrap();
        f[1].parse::<f64>().unwrap();
        assert!(f[2] == "0" || f[2] == "1");
    }
    let vocab = cider::causal::CounterfactualVocab::load(&d.join("v.tsv")).unwrap();
    assert!(!vocab.retained.is_empty());
}
