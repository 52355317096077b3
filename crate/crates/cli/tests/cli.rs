use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use trajformer::config::{valid_keys, RunConfig};

const SMALL: &[&str] = &[
    "syn.duration=150",
    "model.d_model=8",
    "model.n_heads=2",
    "model.n_enc=1",
    "model.n_dec=1",
    "model.d_ff=16",
    "train.total_steps=3",
    "train.warmup_steps=1",
    "train.batch_size=4",
    "finetune.total_steps=2",
    "finetune.warmup_steps=1",
    "finetune.batch_size=4",
    "eval.max_samples=6",
    "split.test_fraction=0.3",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajformer"));
    c.env_remove("TRAJFORMER_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let mut c = bin();
    c.current_dir(dir).arg("--threads=1");
    for s in SMALL {
        c.arg("--set").arg(s);
    }
    c.args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn pipeline(dir: &Path) {
    ok(dir, &["syngen", "--out", "tracks.csv"]);
    ok(dir, &["preprocess", "--input", "tracks.csv", "--out", "data.jsonl"]);
    ok(dir, &["pretrain", "--data", "data.jsonl", "--out", "pre.ckpt", "--trace", "trace.csv"]);
}

#[test]
fn param_count_of_the_two_dim_model_is_160() {
    let o = bin()
        .args([
            "--set", "model.d_model=2", "--set", "model.d_ff=4", "--set", "domain.max_slots=1",
            "--set", "model.n_heads=1", "--set", "model.n_enc=1", "--set", "model.n_dec=1",
            "param-count",
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "160");
}

#[test]
fn unknown_key_exits_2_and_lists_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\nmodel.depth = 4\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("param-count").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("model.depth"));
    assert!(err.contains("model.d_model") && err.contains("rollout.loops"));

    let o = bin().args(["--set", "nope=1", "param-count"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_value_exits_2() {
    let o = bin().args(["--set", "train.batch_size=0", "param-count"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["--set", "model.n_heads=3", "param-count"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_3_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["preprocess", "--input", "absent.csv", "--out", "data.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# seed = "));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);

    ok(d, &["finetune", "--checkpoint", "pre.ckpt", "--data", "data.jsonl", "--out", "ft.ckpt"]);
    ok(d, &["rollout", "--checkpoint", "pre.ckpt", "--data", "data.jsonl", "--loops", "20", "--out", "roll.csv"]);
    let roll = fs::read_to_string(d.join("roll.csv")).unwrap();
    let rows: Vec<&str> = roll.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 200 * 10);
    assert!(roll.contains("# checkpoint = "));

    ok(d, &["predict", "--checkpoint", "pre.ckpt", "--data", "data.jsonl", "--out", "pred.csv"]);
    let pred = fs::read_to_string(d.join("pred.csv")).unwrap();
    assert_eq!(pred.lines().filter(|l| !l.starts_with('#')).count(), 1 + 10 * 10);

    for task in ["prediction", "compensation"] {
        let o = ok(d, &[
            "evaluate", "--checkpoint", "ft.ckpt", "--data", "data.jsonl", "--task", task,
            "--out", "report.json", "--csv", "report.csv",
        ]);
        assert!(String::from_utf8(o.stdout).unwrap().contains("rmse eq2"));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
        assert_eq!(v["metrics"]["task"], task);
        assert_eq!(v["checkpoint_sha256"].as_str().unwrap().len(), 64);
    }

    ok(d, &["export", "--data", "data.jsonl", "--out-dir", "export"]);
    assert!(d.join("export/ground_truth.csv").exists());
    assert!(d.join("export/noised.jsonl").exists());
}

#[test]
fn checkpoint_for_another_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let o = run(d, &[
        "--set", "model.d_model=16", "predict", "--checkpoint", "pre.ckpt", "--data", "data.jsonl", "--out", "p.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("d_model"));
    assert!(!d.join("p.csv").exists());
}

#[test]
fn single_threaded_runs_are_bitwise_identical() {
    let reports: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            pipeline(d);
            ok(d, &["evaluate", "--checkpoint", "pre.ckpt", "--data", "data.jsonl", "--out", "r.json"]);
            fs::read(d.join("r.json")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn env_seed_is_used_below_the_flag() {
    let o = bin().env("TRAJFORMER_SEED", "notanumber").arg("param-count").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .env("TRAJFORMER_SEED", "notanumber")
        .args(["--seed", "4", "param-count"])
        .output()
        .unwrap();
    // The env value is applied before the flag and must still parse.
    assert_eq!(o.status.code(), Some(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flags_beat_env_beat_file_beat_default(
        file_seed in proptest::option::of(0u64..1000),
        env_seed in proptest::option::of(0u64..1000),
        flag_seed in proptest::option::of(0u64..1000),
        keys in proptest::sample::subsequence(vec!["train.base_lr", "noise.lambda", "presence.eps_w"], 0..=3),
        in_flags in proptest::collection::vec(any::<bool>(), 3),
    ) {
        let mut file = String::new();
        if let Some(s) = file_seed {
            file.push_str(&format!("seed = {s}\n"));
        }
        let mut flags = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            file.push_str(&format!("{k} = 0.25\n"));
            if in_flags[i] {
                flags.push((k.to_string(), "0.125".to_string()));
            }
        }
        if let Some(s) = flag_seed {
            flags.push(("seed".into(), s.to_string()));
        }
        let env = env_seed.map(|s| s.to_string());
        let cfg = RunConfig::resolve(Some(&file), env.as_deref(), &flags).unwrap();
        let want_seed = flag_seed.or(env_seed).or(file_seed).unwrap_or(RunConfig::default().seed);
        prop_assert_eq!(cfg.seed, want_seed);
        prop_assert_eq!(cfg.train.seed, want_seed);
        for (i, k) in keys.iter().enumerate() {
            let want = if in_flags[i] { "0.125" } else { "0.25" };
            prop_assert_eq!(cfg.get(k).unwrap(), want);
        }
        for k in ["noise.lambda", "presence.eps_w", "train.base_lr"] {
            if !keys.contains(&k) {
                prop_assert_eq!(cfg.get(k), RunConfig::default().get(k));
            }
        }
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1.0) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("train.base_lr", &lr.to_string()).unwrap();
        cfg.sync();
        let back = RunConfig::resolve(Some(&cfg.to_text()), None, &[]).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(valid_keys().len(), cfg.to_text().lines().count());
    }
}
