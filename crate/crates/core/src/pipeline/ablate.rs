use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::Series;
use super::train::{stream, train, TrainConfig};
use crate::edge::{train_edge_detector, EdgeDetector, EdgeTrainConfig};
use crate::losses::SimilarityMode;
use crate::metrics::{evaluate_model, evaluate_plain_mean, format_rsnr, MeanStd, MetricReport};
use crate::model::Variant;
use crate::phantom::add_series_noise;
use crate::{Error, Result};

pub const REPORT_HEADER: [&str; 6] = ["method", "snr_db", "target_idx", "rsnr_db", "ssim", "epe_px"];
const STREAM_TEST_NOISE: u64 = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checkpoint {
    #[default]
    Final,
    BestVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub snr_levels: Vec<f64>,
    /// Template for every run; variant and seed are overwritten.
    pub train: TrainConfig,
    pub checkpoint: Checkpoint,
    /// Used only when no detector is supplied and an edge variant runs.
    pub edge: EdgeTrainConfig,
    /// Seed of the test-time noise draws, shared by every method.
    pub test_noise_seed: u64,
    /// Train a separate model per SNR level with the augmentation noise
    /// centered on that level, scoring each model at its own level only.
    pub train_per_snr: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            snr_levels: vec![11.0, 6.0, 1.0],
            train: TrainConfig::default(),
            checkpoint: Checkpoint::Final,
            edge: EdgeTrainConfig::default(),
            test_noise_seed: 1000,
            train_per_snr: false,
        }
    }
}

impl AblationConfig {
    pub fn run_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut c = self.train.clone();
        c.variant = variant;
        c.seed = seed;
        c
    }
}

/// Aggregate over seeds, test series and target rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: String,
    pub snr_db: f64,
    pub rsnr_db: MeanStd,
    pub ssim: MeanStd,
    pub epe_px: MeanStd,
}

/// Means of one seed's runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedCell {
    pub seed: u64,
    pub method: String,
    pub snr_db: f64,
    pub rsnr_db: f64,
    pub ssim: f64,
    pub epe_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub table: Vec<AblationCell>,
    pub per_seed: Vec<SeedCell>,
    #[serde(skip)]
    pub report: MetricReport,
}

impl AblationResult {
    pub fn seed_cell(&self, seed: u64, method: &str, snr_db: f64) -> Option<&SeedCell> {
        self.per_seed
            .iter()
            .find(|c| c.seed == seed && c.method == method && c.snr_db == snr_db)
    }

    pub fn cell(&self, method: &str, snr_db: f64) -> Option<&AblationCell> {
        self.table.iter().find(|c| c.method == method && c.snr_db == snr_db)
    }
}

/// Test series re-noised at every level with one shared seed, so all
/// methods see identical inputs.
fn noisy_test_sets(test: &[Series], levels: &[f64], seed: u64) -> Result<Vec<Vec<Series>>> {
    levels
        .iter()
        .enumerate()
        .map(|(li, &snr)| {
            test.iter()
                .enumerate()
                .map(|(si, s)| {
                    let clean = s
                        .clean_frames()?
                        .ok_or_else(|| Error::Data(format!("test series {si} has no clean reference")))?;
                    let mut rng = stream(seed ^ ((li as u64) << 32) ^ si as u64, STREAM_TEST_NOISE);
                    Ok(s.with_frames(add_series_noise(&clean, snr, &mut rng), Some(snr)))
                })
                .collect()
        })
        .collect()
}

/// Train every variant for every seed, then score each model and the
/// unregistered mean on the test series at every SNR level over all target
/// rotations. `progress` receives one line per finished stage.
pub fn run_ablation(
    train_set: &[Series],
    val_set: &[Series],
    test_set: &[Series],
    cfg: &AblationConfig,
    detector: Option<&EdgeDetector<f32>>,
    mut progress: impl FnMut(&str),
) -> Result<AblationResult> {
    if test_set.is_empty() {
        return Err(Error::Data("ablation needs at least one test series".into()));
    }
    if cfg.seeds.is_empty() || cfg.variants.is_empty() || cfg.snr_levels.is_empty() {
        return Err(Error::Config("ablation needs seeds, variants and SNR levels".into()));
    }
    let needs_edges = cfg.variants.iter().any(|v| v.mode() == SimilarityMode::Edge);
    let owned;
    let detector = match detector {
        Some(d) => Some(d),
        None if needs_edges => {
            let mut images = Vec::new();
            for s in train_set {
                images.extend(s.clean_frames()?.unwrap_or_default());
            }
            owned = train_edge_detector(&images, &cfg.edge)?;
            progress("trained edge detector");
            Some(&owned)
        }
        None => None,
    };
    let noisy = noisy_test_sets(test_set, &cfg.snr_levels, cfg.test_noise_seed)?;

    let mut report = MetricReport::default();
    for sets in &noisy {
        for s in sets {
            report.extend(evaluate_plain_mean(s)?);
        }
    }
    // (seed, method, report) per run, in run order.
    let mut runs: Vec<(u64, String, MetricReport)> = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            // (training noise center, indices of the levels this model is scored at)
            let plan: Vec<(Option<f64>, Vec<usize>)> = if cfg.train_per_snr {
                cfg.snr_levels.iter().enumerate().map(|(i, &s)| (Some(s), vec![i])).collect()
            } else {
                vec![(None, (0..cfg.snr_levels.len()).collect())]
            };
            let mut r = MetricReport::default();
            for (center, levels) in plan {
                let mut rc = cfg.run_config(variant, seed);
                if center.is_some() {
                    rc.augmentation.noise_center_db = center;
                }
                let out = train(train_set, val_set, &rc, detector, |_| {})?;
                let model = match cfg.checkpoint {
                    Checkpoint::Final => &out.final_model,
                    Checkpoint::BestVal => &out.best_model,
                };
                for &li in &levels {
                    for s in &noisy[li] {
                        r.extend(evaluate_model(model, s, variant.name())?);
                    }
                }
                let last = out.log.last().map(|l| l.train_loss).unwrap_or(f64::NAN);
                let at = center.map(|c| format!(" @ {c} dB")).unwrap_or_default();
                progress(&format!("seed {seed} {variant}{at}: final train loss {last:.5}"));
            }
            report.extend(r.clone());
            runs.push((seed, variant.name().to_string(), r));
        }
    }

    let mut methods = vec!["mean".to_string()];
    methods.extend(cfg.variants.iter().map(|v| v.name().to_string()));
    let mut table = Vec::new();
    for m in &methods {
        for &snr in &cfg.snr_levels {
            table.push(AblationCell {
                method: m.clone(),
                snr_db: snr,
                rsnr_db: report.rsnr(m, Some(snr)),
                ssim: report.ssim(m, Some(snr)),
                epe_px: report.epe(m, Some(snr)),
            });
        }
    }
    let mut per_seed = Vec::new();
    for (seed, m, r) in &runs {
        for &snr in &cfg.snr_levels {
            per_seed.push(SeedCell {
                seed: *seed,
                method: m.clone(),
                snr_db: snr,
                rsnr_db: r.rsnr(m, Some(snr)).mean,
                ssim: r.ssim(m, Some(snr)).mean,
                epe_px: r.epe(m, Some(snr)).mean,
            });
        }
    }
    Ok(AblationResult {
        config: cfg.clone(),
        table,
        per_seed,
        report,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Per-entry rows in the fixed report layout.
pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for e in &report.entries {
        w.write_record([
            e.method.clone(),
            e.snr_db.map(|s| s.to_string()).unwrap_or_default(),
            e.target_idx.to_string(),
            format_rsnr(e.rsnr_db),
            e.ssim.to_string(),
            e.epe_px.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `report.csv` (one row per method × SNR × target) and `summary.json`
/// (aggregate table, per-seed means and the resolved config).
pub fn write_reports(dir: &Path, result: &AblationResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report_csv(&dir.join("report.csv"), &result.report)?;
    let json = serde_json::to_string_pretty(result).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
