use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aimreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aimreg")).args(args).output().expect("spawn aimreg")
}

fn ok(args: &[&str]) -> String {
    let out = aimreg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path, count: usize) {
    ok(&[
        "phantom", "--out", p(dir), "--size", "32", "--frames", "5", "--count", &count.to_string(), "--snr-db", "6",
    ]);
}

#[test]
fn phantom_defaults_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&["phantom", "--out", p(&a)]);
    assert!(stdout.starts_with("resolved config (phantom): {"));
    ok(&["phantom", "--out", p(&b)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let frames = manifest["frames"].as_u64().unwrap() as usize;
    assert_eq!(manifest["frame_files"].as_array().unwrap().len(), frames);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn phantom_without_motion_or_noise_repeats_one_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("still");
    ok(&["phantom", "--out", p(&d), "--size", "32", "--frames", "4", "--depth", "0", "--snr-db", "none"]);
    let first = fs::read(d.join("frame_000.raw")).unwrap();
    assert_eq!(first.len(), 32 * 32 * 4);
    for j in 1..4 {
        assert_eq!(fs::read(d.join(format!("frame_{j:03}.raw"))).unwrap(), first);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("p.json");
    fs::write(&cfg, r#"{"size": 40, "frames": 3}"#).unwrap();
    let stdout = ok(&["phantom", "--out", p(&tmp.path().join("x")), "--config", p(&cfg), "--frames", "6"]);
    assert!(stdout.contains("\"size\":40") && stdout.contains("\"frames\":6"), "{stdout}");

    fs::write(&cfg, r#"{"sise": 40}"#).unwrap();
    let out = aimreg(&["phantom", "--out", p(&tmp.path().join("y")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_log_and_zero_lr_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data, 3);
    let common = ["--variant", "aim-cc", "--k", "2", "--seed", "5"];
    let m1 = tmp.path().join("m1.aimd");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&m1), "--epochs", "3"];
    args.extend(common);
    ok(&args);
    let log = fs::read_to_string(tmp.path().join("m1.aimd.log.csv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
    assert_eq!(lines.len(), 4);

    // with a zero step size the weights never move, whatever the epoch count
    let (z1, z2) = (tmp.path().join("z1.aimd"), tmp.path().join("z2.aimd"));
    for (out, epochs) in [(&z1, "1"), (&z2, "2")] {
        let mut args = vec!["train", "--data", p(&data), "--out", p(out), "--epochs", epochs];
        args.extend(["--lr-max", "0", "--lr-min", "0"]);
        args.extend(common);
        ok(&args);
    }
    assert_eq!(fs::read(&z1).unwrap(), fs::read(&z2).unwrap());
    assert_ne!(fs::read(&z1).unwrap(), fs::read(&m1).unwrap());
}

#[test]
fn edge_variant_needs_detector() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data, 3);
    let out = aimreg(&[
        "train", "--data", p(&data), "--out", p(&tmp.path().join("m")), "--variant", "aim-ed", "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--detector"));
}

#[test]
fn register_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data, 3);
    let model = tmp.path().join("m.aimd");
    ok(&[
        "train", "--data", p(&data), "--out", p(&model), "--variant", "aim-cc", "--k", "2", "--epochs", "1",
    ]);
    let series = data.join("series_000");
    let reg = tmp.path().join("reg");
    let stdout = ok(&[
        "register", "--model", p(&model), "--series", p(&series), "--target", "1", "--out", p(&reg), "--save-fields",
    ]);
    assert!(stdout.lines().any(|l| l.starts_with("registration time: ") && l.ends_with(" ms")));
    assert_eq!(fs::read(reg.join("registered.raw")).unwrap().len(), 32 * 32 * 4);
    assert_eq!(fs::read(reg.join("field_000.raw")).unwrap().len(), 2 * 32 * 32 * 4);
    assert!(!reg.join("field_001.raw").exists());

    let report = tmp.path().join("report.csv");
    ok(&[
        "eval", "--series", p(&series), "--registered", p(&reg.join("registered.raw")), "--target", "1",
        "--report", p(&report),
    ]);
    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,snr_db,target_idx,rsnr_db,ssim,epe_px"));
    let rows: Vec<_> = lines.collect();
    // the plain-mean baseline for all five rotations plus one registered row
    assert_eq!(rows.iter().filter(|r| r.starts_with("mean,")).count(), 5);
    assert_eq!(rows.iter().filter(|r| r.starts_with("registered,")).count(), 1);
    assert!(tmp.path().join("report.json").exists());
}

#[test]
fn eval_without_reference_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("s");
    ok(&["phantom", "--out", p(&d), "--size", "32", "--frames", "3"]);
    let path = d.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["has_reference"] = false.into();
    m["has_gt_fields"] = false.into();
    fs::write(&path, m.to_string()).unwrap();
    let out = aimreg(&[
        "eval", "--series", p(&d), "--registered", p(&d.join("frame_000.raw")), "--report",
        p(&tmp.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference required for rSNR/SSIM"));
}

#[test]
fn corrupt_model_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_data(&data, 1);
    let model = tmp.path().join("bad.aimd");
    fs::write(&model, b"AIMD\x01\x00\x00\x00garbage").unwrap();
    let out = aimreg(&["register", "--model", p(&model), "--series", p(&data), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
}
