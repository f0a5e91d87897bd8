use std::path::Path;
use std::process::{Command, Output};

fn sen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sen")).args(args).output().unwrap()
}

const TINY: &[&str] = &[
    "--seed=5",
    "--synth_classes=3",
    "--synth_train_per_class=6",
    "--synth_test_per_class=4",
    "--channels=4",
    "--lstm_hidden=6",
    "--epochs=2",
    "--head_epochs=2",
    "--knn_k=3",
];

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gradcheck_passes() {
    let o = sen(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("conv1d") && text.contains("sen+pairwise"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&sen(&["frobnicate"])), 1);
    assert_eq!(code(&sen(&["eval", "--epochs=2"])), 1, "seed is mandatory");
    assert_eq!(code(&sen(&["eval", "--seed=1", "--no_such_key=3"])), 1);
    assert_eq!(
        code(&sen(&["eval", "--config", "/definitely/missing.cfg", "--seed=1"])),
        2
    );
    assert_eq!(code(&sen(&["--help"])), 0);
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("--output_dir={}", dir.path().join("train").display());
    let o = sen(&with_tiny("train", &[&out]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("train/sen.senw");
    assert!(ckpt.exists());

    let ckpt_s = ckpt.display().to_string();
    let eval_out = format!("--output_dir={}", dir.path().join("eval").display());
    let mut args = vec!["eval", "--checkpoint", &ckpt_s];
    args.extend_from_slice(TINY);
    args.push(&eval_out);
    args.push("--classifiers=sm,knn");
    let o = sen(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["metrics"]["sm"]["accuracy"].is_number());
    assert!(dir.path().join("eval/manifest.json").exists());

    // A checkpoint for a different architecture is a data error.
    let mut args = vec!["eval", "--checkpoint", &ckpt_s];
    args.extend_from_slice(TINY);
    args.push(&eval_out);
    args.push("--channels=5");
    let o = sen(&args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("filters"));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let mut text = TINY
        .iter()
        .map(|s| s.trim_start_matches("--"))
        .collect::<Vec<_>>()
        .join("\n");
    text.push_str(&format!(
        "\noutput_dir={}\nstress_sizes=2,3\n",
        dir.path().join("s").display()
    ));
    std::fs::write(&cfg, text).unwrap();
    let cfg_s = cfg.display().to_string();
    let o = sen(&["stress", "--config", &cfg_s, "--stress_sizes=2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert!(Path::new(&dir.path().join("s/stress.csv")).exists());
}

#[test]
fn noise_and_denoise_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("--output_dir={}", dir.path().display());
    let o = sen(&with_tiny("noise", &[&out, "--noise_rates=0.2", "--head_epochs=1"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let o = sen(&with_tiny(
        "denoise",
        &[&out, "--noise_rate=0.3", "--denoise_clean_per_class=4"],
    ));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["denoise.csv", "qq.csv", "distance_stats.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn synth_and_prep() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.sens");
    let p = path.display().to_string();
    let o = sen(&[
        "synth",
        "--classes",
        "2",
        "--per-class",
        "3",
        "--seed",
        "1",
        "--out",
        &p,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(path.exists());

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/usc_had");
    let data = format!("--data_path={}", fixtures.display());
    let cache = format!("--cache={}", dir.path().join("usc.sens").display());
    let o = sen(&["prep", "--seed=1", "--dataset=usc_had", &data, &cache]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("usc.sens").exists());

    // Prep without a cache path is a usage error.
    assert_eq!(code(&sen(&["prep", "--seed=1", "--dataset=usc_had", &data])), 1);
}
