//! `aimreg`: phantom generation, edge-detector and registration training,
//! inference, evaluation and the four-variant ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aimreg::edge::{robustness_curve, train_edge_detector, EdgeTrainConfig};
use aimreg::metrics::{evaluate_model, evaluate_plain_mean, evaluate_series, format_rsnr, MetricReport, Registration};
use aimreg::model::Variant;
use aimreg::phantom::{Breathing, Lesion, PhantomSpec};
use aimreg::pipeline::{
    load_detector, load_registration, phantom_series, read_series, register, run_ablation, save_detector,
    save_registration, write_raw, write_report_csv, write_reports, write_series, AblationConfig, Series, SeriesStore,
    Split, TrainConfig,
};
use aimreg::tensor::Tensor;
use aimreg::Error;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "aimreg", version, about = "Groupwise deformable registration of low-SNR image series")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic breathing series with ground-truth fields.
    Phantom(PhantomArgs),
    /// Train the noise-robust edge detector.
    TrainEdges(TrainEdgesArgs),
    /// Train a registration model.
    Train(TrainArgs),
    /// Register one series onto one of its frames.
    Register(RegisterArgs),
    /// Score registered images against the clean reference.
    Eval(EvalArgs),
    /// Train and evaluate all four variants across seeds and SNR levels.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with phantom settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Nominal SNR in dB, or `none` for noise-free frames.
    #[arg(long)]
    snr_db: Option<String>,
    #[arg(long)]
    depth: Option<f64>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    hysteresis: Option<f64>,
    #[arg(long, value_parser = ["on", "off"])]
    lesion: Option<String>,
    /// Number of series; more than one writes `series_NNN` subdirectories.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PhantomConfig {
    size: usize,
    frames: usize,
    seed: u64,
    snr_db: Option<f64>,
    depth_px: f64,
    period_frames: f64,
    shape_exponent: u32,
    hysteresis_phase: f64,
    lesion: bool,
    count: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let d = PhantomSpec::default();
        Self {
            size: d.size,
            frames: d.frames,
            seed: 0,
            snr_db: d.noise_snr_db,
            depth_px: d.breathing.depth_px,
            period_frames: d.breathing.period_frames,
            shape_exponent: d.breathing.shape_exponent,
            hysteresis_phase: d.breathing.hysteresis_phase,
            lesion: true,
            count: 1,
        }
    }
}

impl PhantomConfig {
    fn spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.size,
            frames: self.frames,
            breathing: Breathing {
                depth_px: self.depth_px,
                period_frames: self.period_frames,
                shape_exponent: self.shape_exponent,
                hysteresis_phase: self.hysteresis_phase,
            },
            lesion: self.lesion.then(Lesion::default),
            anatomy_seed: self.seed,
            // separate noise stream per seed
            noise_seed: self.seed.wrapping_mul(2).wrapping_add(1),
            noise_snr_db: self.snr_db,
        }
    }
}

#[derive(clap::Args)]
struct TrainEdgesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    snr_lo: Option<f64>,
    #[arg(long)]
    snr_hi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the best-validation checkpoint here.
    #[arg(long)]
    best_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    series: PathBuf,
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write one `[2,H,W]` field per source frame.
    #[arg(long)]
    save_fields: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    series: PathBuf,
    /// Registered image to score against the clean frame `--target`.
    #[arg(long)]
    registered: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Score a model over every target rotation instead.
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV report path; a JSON aggregate is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    snr_levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Train one model per SNR level, with training noise centered on it.
    #[arg(long)]
    train_per_snr: bool,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Data(_) | Error::Format(_) | Error::Checksum { .. } => EXIT_DATA,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Tensor(_) | Error::Io { .. } | Error::Config(_) => EXIT_USAGE,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Defaults, overridden by a JSON file when given.
fn base_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, Failure> {
    let Some(p) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
}

fn print_resolved(cmd: &str, cfg: &impl Serialize) {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    println!("resolved config ({cmd}): {json}");
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn cmd_phantom(a: PhantomArgs) -> CmdResult {
    let mut c: PhantomConfig = base_config(a.config.as_deref())?;
    set(&mut c.size, a.size);
    set(&mut c.frames, a.frames);
    set(&mut c.seed, a.seed);
    set(&mut c.depth_px, a.depth);
    set(&mut c.period_frames, a.period);
    set(&mut c.hysteresis_phase, a.hysteresis);
    set(&mut c.count, a.count);
    if let Some(l) = a.lesion {
        c.lesion = l == "on";
    }
    if let Some(s) = a.snr_db {
        c.snr_db = if s.eq_ignore_ascii_case("none") {
            None
        } else {
            Some(s.parse().map_err(|_| usage(format!("--snr-db expects a number or `none`, got {s}")))?)
        };
    }
    if c.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    print_resolved("phantom", &c);
    let series = phantom_series(&c.spec(), c.count)?;
    if c.count == 1 {
        write_series(&a.out, &series[0])?;
    } else {
        SeriesStore::create(&a.out, &series)?;
    }
    println!("wrote {} series of {} frames ({}x{}) to {}", c.count, c.frames, c.size, c.size, a.out.display());
    Ok(())
}

/// Clean frames of every series (the stored frames when no reference exists).
fn clean_images(series: &[Series]) -> Result<Vec<Tensor<f64>>, Failure> {
    let mut out = Vec::new();
    for s in series {
        out.extend(s.clean_frames()?.unwrap_or_else(|| s.frames.clone()));
    }
    Ok(out)
}

fn cmd_train_edges(a: TrainEdgesArgs) -> CmdResult {
    let mut c: EdgeTrainConfig = base_config(a.config.as_deref())?;
    set(&mut c.snr_lo_db, a.snr_lo);
    set(&mut c.snr_hi_db, a.snr_hi);
    set(&mut c.seed, a.seed);
    set(&mut c.steps, a.steps);
    print_resolved("train-edges", &c);
    let store = SeriesStore::open(&a.data)?;
    let all = store.load_all(&(0..store.len()).collect::<Vec<_>>())?;
    // hold out the last series for the robustness summary when possible
    let (fit, held) = if all.len() > 1 { all.split_at(all.len() - 1) } else { (&all[..], &all[..]) };
    let images = clean_images(fit)?;
    if images.is_empty() {
        return Err(Failure::from(Error::Data("no training images".into())));
    }
    let det = train_edge_detector(&images, &c)?;
    save_detector(&a.out, &det)?;
    let held_images = clean_images(held)?;
    println!("snr_db,detector_mse,sobel_mse");
    for p in robustness_curve(&det, &held_images, &[11.0, 6.0, 1.0], 2, c.seed)? {
        println!("{},{:.6},{:.6}", p.snr_db, p.detector_mse, p.sobel_mse);
    }
    println!("wrote detector to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a, C: Serialize> {
    config: &'a C,
    data: &'a Path,
    out: &'a Path,
    detector: Option<&'a Path>,
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut c: TrainConfig = base_config(a.config.as_deref())?;
    set(&mut c.variant, a.variant);
    set(&mut c.k, a.k);
    set(&mut c.epochs, a.epochs);
    set(&mut c.seed, a.seed);
    if let Some(lr) = a.lr_max {
        // an explicit peak applies to every variant
        c.lr_max = lr;
        c.cc_lr_max = None;
    }
    set(&mut c.lr_min, a.lr_min);
    set(&mut c.batch_size, a.batch_size);
    if a.lambda.is_some() {
        c.lambda = a.lambda;
    }
    if c.lr_min > c.peak_lr() {
        c.lr_min = c.peak_lr();
    }
    print_resolved(
        "train",
        &Resolved {
            config: &c,
            data: &a.data,
            out: &a.out,
            detector: a.detector.as_deref(),
        },
    );
    c.validate()?;
    let detector = match (&a.detector, c.variant.mode()) {
        (Some(p), _) => Some(load_detector(p)?),
        (None, aimreg::losses::SimilarityMode::Edge) => {
            return Err(usage(format!("variant {} requires --detector", c.variant)));
        }
        (None, _) => None,
    };
    let store = SeriesStore::open(&a.data)?;
    let split = Split::by_fraction(store.len());
    let train_set = store.load_all(&split.train)?;
    let val_set = store.load_all(&split.val)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let mut log = String::from("epoch,train_loss,val_loss,lr\n");
    let out = aimreg::pipeline::train(&train_set, &val_set, &c, detector.as_ref(), |l| {
        let val = l.val_loss.map(|v| v.to_string()).unwrap_or_default();
        log.push_str(&format!("{},{},{},{}\n", l.epoch, l.train_loss, val, l.lr));
        if l.epoch % 50 == 0 || l.epoch + 1 == c.epochs {
            println!("epoch {} train {:.6} val {} lr {:.6}", l.epoch, l.train_loss, val, l.lr);
        }
    })?;
    save_registration(&a.out, &out.final_model, Some(c.variant), Some(c.loss_config()))?;
    if let Some(p) = &a.best_out {
        save_registration(p, &out.best_model, Some(c.variant), Some(c.loss_config()))?;
    }
    fs::write(&log_path, log).map_err(|e| Failure::from(Error::io(&log_path, e)))?;
    println!("wrote model to {} and log to {}", a.out.display(), log_path.display());
    Ok(())
}

fn cmd_register(a: RegisterArgs) -> CmdResult {
    print_resolved(
        "register",
        &serde_json::json!({
            "model": a.model, "series": a.series, "target": a.target, "out": a.out, "save_fields": a.save_fields
        }),
    );
    let (model, _) = load_registration(&a.model)?;
    let series = read_series(&a.series)?;
    let start = Instant::now();
    let (image, fields) = register(&model, &series, a.target)?;
    let elapsed = start.elapsed();
    fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::io(&a.out, e)))?;
    write_raw(&a.out.join("registered.raw"), image.data())?;
    if a.save_fields {
        let sources = (0..series.len()).filter(|&j| j != a.target);
        for (f, j) in fields.iter().zip(sources) {
            write_raw(&a.out.join(format!("field_{j:03}.raw")), f.tensor().data())?;
        }
    }
    println!("registration time: {:.3} ms", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    print_resolved(
        "eval",
        &serde_json::json!({
            "series": a.series, "registered": a.registered, "target": a.target, "model": a.model, "report": a.report
        }),
    );
    let series = read_series(&a.series)?;
    if series.reference.is_none() {
        return Err(usage("reference required for rSNR/SSIM"));
    }
    let mut report = evaluate_plain_mean(&series)?;
    match (&a.registered, &a.model) {
        (Some(path), None) => {
            let (h, w) = series.dims()?;
            if a.target >= series.len() {
                return Err(usage(format!("target index {} out of range", a.target)));
            }
            let image = Tensor::new(&[1, h, w], aimreg::pipeline::read_raw(path, h * w)?).map_err(Error::from)?;
            let reg = Registration { image, fields: None };
            let r = evaluate_series(&series, "registered", |_| Ok(reg.clone()))?;
            report.extend(MetricReport {
                entries: r.entries.into_iter().filter(|e| e.target_idx == a.target).collect(),
            });
        }
        (None, Some(path)) => {
            let (model, variant) = load_registration(path)?;
            let name = variant.map(|v| v.name()).unwrap_or("model");
            report.extend(evaluate_model(&model, &series, name)?);
        }
        _ => return Err(usage("give exactly one of --registered or --model")),
    }
    write_report_csv(&a.report, &report)?;
    let json_path = a.report.with_extension("json");
    let mut summary = Vec::new();
    for m in report.methods() {
        let r = report.rsnr(&m, series.snr_db);
        println!("{m}: rSNR {} dB, SSIM {:.4}", format_rsnr(r.mean), report.ssim(&m, series.snr_db).mean);
        summary.push(serde_json::json!({
            "method": m,
            "snr_db": series.snr_db,
            "rsnr_db": r,
            "ssim": report.ssim(&m, series.snr_db),
            "epe_px": report.epe(&m, series.snr_db),
        }));
    }
    let text = serde_json::to_string_pretty(&summary).expect("json") + "\n";
    fs::write(&json_path, text).map_err(|e| Failure::from(Error::io(&json_path, e)))?;
    println!("wrote {} and {}", a.report.display(), json_path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut c: AblationConfig = base_config(a.config.as_deref())?;
    set(&mut c.snr_levels, a.snr_levels);
    set(&mut c.seeds, a.seeds);
    set(&mut c.train.epochs, a.epochs);
    set(&mut c.train.k, a.k);
    c.train_per_snr |= a.train_per_snr;
    print_resolved(
        "ablate",
        &Resolved {
            config: &c,
            data: &a.data,
            out: &a.out,
            detector: a.detector.as_deref(),
        },
    );
    let detector = a.detector.as_deref().map(load_detector).transpose()?;
    let store = SeriesStore::open(&a.data)?;
    let split = Split::by_fraction(store.len());
    if split.test.is_empty() {
        return Err(Failure::from(Error::Data(format!(
            "ablation needs at least 3 series for train/val/test, found {}",
            store.len()
        ))));
    }
    let result = run_ablation(
        &store.load_all(&split.train)?,
        &store.load_all(&split.val)?,
        &store.load_all(&split.test)?,
        &c,
        detector.as_ref(),
        |line| println!("{line}"),
    )?;
    write_reports(&a.out, &result)?;
    println!("method,snr_db,rsnr_mean,rsnr_std,ssim_mean,ssim_std,epe_mean,epe_std,n");
    for cell in &result.table {
        println!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            cell.method,
            cell.snr_db,
            format_rsnr(cell.rsnr_db.mean),
            cell.rsnr_db.std,
            cell.ssim.mean,
            cell.ssim.std,
            cell.epe_px.mean,
            cell.epe_px.std,
            cell.rsnr_db.n
        );
    }
    println!("wrote reports to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::TrainEdges(a) => cmd_train_edges(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
