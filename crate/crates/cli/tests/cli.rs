use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "stage_channels=4,8",
    "reduction=2",
    "image_size=16",
    "classes=3",
    "train_per_class=4",
    "val_per_class=2",
    "test_per_class=2",
    "batch_size=4",
    "epochs=1",
];

fn crossx(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crossx"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("crossx runs")
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train".to_string(), "--out".into(), out.display().to_string()];
    for kv in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(kv.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    crossx(&refs, &[])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn one_epoch_writes_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,lr,loss_total"));
    for f in ["last.ckpt", "best.ckpt", "effective-config.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_tiny(a.path(), &["epochs=2"]).status.success());
    assert!(train_tiny(b.path(), &["epochs=2"]).status.success());
    for f in ["metrics.csv", "last.ckpt", "effective-config.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_key_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["momentun=0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("momentun"), "{}", stderr(&out));
}

#[test]
fn missing_config_and_bad_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(crossx(&["train", "--config", "no-such-preset", "--out", &out], &[]).status.code(), Some(1));
    assert_eq!(crossx(&["train"], &[]).status.code(), Some(1));
    assert_eq!(crossx(&["frobnicate"], &[]).status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["lr=1e30", "epochs=3"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(dir.path().join("last.ckpt").is_file());
}

#[test]
fn injected_fault_fails_gradcheck_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossx(&["gradcheck", "--out", &dir.path().display().to_string()], &[("CROSSX_INJECT_FAULT", "c3s_loss")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("c3s_loss"), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("c3s_loss") && l.contains("FAIL")));
}

#[test]
fn oracle_suite_passes() {
    let out = crossx(&["oracle"], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().skip(1).all(|l| l.ends_with("ok")), "{table}");
}

#[test]
fn eval_and_cam_export_read_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &[]).status.success());
    let ckpt = run.join("last.ckpt").display().to_string();
    let mut base: Vec<String> = Vec::new();
    for kv in TINY {
        base.push("--set".into());
        base.push(kv.to_string());
    }
    let eval_dir = dir.path().join("eval").display().to_string();
    let mut args: Vec<String> = vec!["eval".into(), "--out".into(), eval_dir.clone(), "--checkpoint".into(), ckpt.clone()];
    args.extend(base.iter().cloned());
    let out = crossx(&args.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("split,count,accuracy"));

    let bad: Vec<String> = args.iter().map(|a| if *a == ckpt { "missing.ckpt".into() } else { a.clone() }).collect();
    assert_eq!(crossx(&bad.iter().map(String::as_str).collect::<Vec<_>>(), &[]).status.code(), Some(1));

    let mut cfg = crossx_core::CrossXConfig::default();
    let pairs: Vec<_> = TINY.iter().map(|kv| crossx_core::config::parse_override(kv).unwrap()).collect();
    cfg.apply_pairs(&pairs).unwrap();
    let splits = crossx_core::data::synth_dataset(&cfg.data, cfg.seed).unwrap();
    let data_dir = dir.path().join("data");
    crossx_core::data::export_dataset(&splits.test, &data_dir).unwrap();
    let cam_dir = dir.path().join("cams");
    let mut args: Vec<String> = vec![
        "export-cam".into(),
        "--out".into(),
        cam_dir.display().to_string(),
        "--checkpoint".into(),
        ckpt,
        "--images".into(),
        data_dir.join("images.bin").display().to_string(),
        "--limit".into(),
        "2".into(),
    ];
    args.extend(base);
    let out = crossx(&args.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pgm = std::fs::read_dir(&cam_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgm, 2 * 9);
}
