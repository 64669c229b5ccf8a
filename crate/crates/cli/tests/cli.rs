use std::path::Path;
use std::process::{Command, Output};

fn radiant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiant"))
        .args(args)
        .output()
        .expect("spawn radiant")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_row(o: &Output) -> Vec<String> {
    let text = String::from_utf8(o.stdout.clone()).expect("utf-8 stdout");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scene,views,psnr,ssim,abs_rel,sq_rel,rmse,rmse_log,s"));
    lines.next().expect("data row").split(',').map(str::to_owned).collect()
}

#[test]
fn generate_train_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"total_steps": 30, "unseen_warmup": 10, "pixel_batch": 64, "grid_resolution": 12,
            "n_samples": 16, "seen_patch": {"size": 8, "stride": 1},
            "unseen_patch": {"size": 6, "stride": 2}, "mask_refresh": 10, "checkpoint_every": 15}"#,
    )
    .unwrap();

    let g = radiant(&["generate", "--scene", "two-box", "--views", "8", "--out", p(&ds), "--resolution", "16"]);
    assert!(g.status.success(), "{}", stderr(&g));
    assert!(ds.join("views.json").exists() && ds.join("test/views.json").exists());

    let t = radiant(&["train", "--data", p(&ds), "--config", p(&cfg), "--out", p(&run), "--threads", "1"]);
    assert!(t.status.success(), "{}", stderr(&t));
    for f in ["field.bin", "provider.json", "provider.bin", "loss_log.csv", "config.json", "stats.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(run.join("ckpt_000015/field.bin").exists());

    let e = radiant(&["evaluate", "--data", p(&ds), "--ckpt", p(&run)]);
    assert!(e.status.success(), "{}", stderr(&e));
    let row = csv_row(&e);
    assert_eq!(row[0], "two-box");
    assert_eq!(row[1], "8");
    assert!(row[2..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), "{row:?}");

    let r = radiant(&["render", "--ckpt", p(&run), "--data", p(&ds), "--out", p(&tmp.path().join("renders"))]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(tmp.path().join("renders/render_0.ppm").exists());

    let masks = tmp.path().join("masks");
    let m = radiant(&["mask-dump", "--data", p(&ds), "--ckpt", p(&run), "--out", p(&masks)]);
    assert!(m.status.success(), "{}", stderr(&m));
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 8);
}

#[test]
fn training_is_reproducible_with_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"total_steps": 12, "unseen_warmup": 4, "pixel_batch": 32, "grid_resolution": 8, "n_samples": 8,
            "seen_patch": {"size": 6, "stride": 1}, "unseen_patch": {"size": 4, "stride": 2}, "mask_refresh": 4}"#,
    )
    .unwrap();
    assert!(radiant(&["generate", "--scene", "box", "--views", "4", "--out", p(&ds), "--resolution", "12"])
        .status
        .success());
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let t = radiant(&["train", "--data", p(&ds), "--config", p(&cfg), "--out", p(&out), "--seed", "7"]);
            assert!(t.status.success(), "{}", stderr(&t));
            std::fs::read(out.join("loss_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn one_view_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let g = radiant(&["generate", "--scene", "sphere", "--views", "1", "--out", p(&ds), "--resolution", "8"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let t = radiant(&["train", "--data", p(&ds), "--out", p(&tmp.path().join("run")), "--steps", "5"]);
    assert_eq!(t.status.code(), Some(2));
    assert!(stderr(&t).contains("≥ 2 views required"), "{}", stderr(&t));
}

#[test]
fn ground_truth_against_itself_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert!(radiant(&["generate", "--scene", "two-box", "--views", "4", "--out", p(&ds), "--resolution", "12"])
        .status
        .success());
    let e = radiant(&["evaluate", "--data", p(&ds), "--ckpt", p(&ds)]);
    assert!(e.status.success(), "{}", stderr(&e));
    let row = csv_row(&e);
    assert_eq!(row[2], "inf");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    for v in &row[4..8] {
        assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row:?}");
    }
    assert_eq!(row[8].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(radiant(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(radiant(&["frobnicate"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let g = radiant(&["generate", "--scene", "teapot", "--out", p(tmp.path())]);
    assert_eq!(g.status.code(), Some(1));
    assert!(stderr(&g).contains("unknown scene"));
}

#[test]
fn malformed_dataset_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("views.json"), "not json").unwrap();
    let t = radiant(&["train", "--data", p(tmp.path()), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(t.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert!(radiant(&["generate", "--scene", "box", "--views", "3", "--out", p(&ds), "--resolution", "8"])
        .status
        .success());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"total_steps": 5, "unseen_warmup": 5, "grid_resolution": 4, "n_samples": 4, "pixel_batch": 16,
            "background": [1e308, 1e308, 1e308]}"#,
    )
    .unwrap();
    let t = radiant(&["train", "--data", p(&ds), "--config", p(&cfg), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(t.status.code(), Some(3), "{}", stderr(&t));
}
