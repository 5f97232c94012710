use aimreg::edge::EdgeTrainConfig;
use aimreg::model::Variant;
use aimreg::phantom::{generate, PhantomSpec};
use aimreg::pipeline::{run_ablation, write_reports, AblationConfig, Series, TrainConfig, REPORT_HEADER};

fn tiny(seed: u64) -> Series {
    let spec = PhantomSpec {
        size: 32,
        frames: 4,
        anatomy_seed: seed,
        ..PhantomSpec::default()
    };
    Series::from_generated(&generate(&spec).unwrap(), None)
}

fn tiny_config() -> AblationConfig {
    AblationConfig {
        seeds: vec![0, 1],
        snr_levels: vec![6.0, 1.0],
        train: TrainConfig {
            epochs: 2,
            k: 2,
            lr_max: 0.05,
            ..TrainConfig::default()
        },
        edge: EdgeTrainConfig {
            steps: 3,
            ..EdgeTrainConfig::default()
        },
        ..AblationConfig::default()
    }
}

#[test]
fn table_covers_every_method_and_level() {
    let (train, val, test) = (vec![tiny(0), tiny(1)], vec![tiny(2)], vec![tiny(3), tiny(4)]);
    let mut lines = Vec::new();
    let r = run_ablation(&train, &val, &test, &tiny_config(), None, |l| lines.push(l.to_string())).unwrap();
    assert_eq!(lines[0], "trained edge detector");
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert_eq!(r.table.len(), 5 * 2);
    assert_eq!(r.per_seed.len(), 2 * 4 * 2);
    for m in ["mean", "vxm-cc", "vxm-ed", "aim-cc", "aim-ed"] {
        for snr in [6.0, 1.0] {
            let c = r.cell(m, snr).unwrap();
            // two test series, four rotations each, times the seeds for trained methods
            let per_seed = if m == "mean" { 1 } else { 2 };
            assert_eq!(c.rsnr_db.n, 2 * 4 * per_seed, "{m} {snr}");
        }
    }
    // the unregistered baseline gets worse with noise
    assert!(r.cell("mean", 6.0).unwrap().rsnr_db.mean > r.cell("mean", 1.0).unwrap().rsnr_db.mean);

    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &r).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_HEADER.join(","));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["table"].as_array().unwrap().len(), 10);
}

#[test]
fn per_snr_training_runs_one_model_per_level() {
    let (train, test) = (vec![tiny(0), tiny(1)], vec![tiny(3)]);
    let cfg = AblationConfig {
        variants: vec![Variant::AimCc],
        seeds: vec![0],
        train_per_snr: true,
        ..tiny_config()
    };
    let mut lines = Vec::new();
    let r = run_ablation(&train, &[], &test, &cfg, None, |l| lines.push(l.to_string())).unwrap();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("seed 0 aim-cc @ 6 dB: "), "{}", lines[0]);
    assert!(lines[1].starts_with("seed 0 aim-cc @ 1 dB: "), "{}", lines[1]);
    assert_eq!(r.cell("aim-cc", 1.0).unwrap().rsnr_db.n, 4);
}

#[test]
fn rejects_empty_inputs() {
    let s = vec![tiny(0)];
    assert!(run_ablation(&s, &[], &[], &tiny_config(), None, |_| {}).is_err());
    let cfg = AblationConfig {
        seeds: vec![],
        ..tiny_config()
    };
    assert!(run_ablation(&s, &[], &s, &cfg, None, |_| {}).is_err());
}
