//! Image-quality and motion-accuracy metrics against the clean reference.

use serde::{Deserialize, Serialize};

use crate::model::RegistrationModel;
use crate::pipeline::{register, Series};
use crate::tensor::{Real, Tensor};
use crate::warp::{relative_field, DisplacementField};
use crate::{Error, Result};

/// Returned by [`rsnr`] when the estimate equals the reference exactly.
pub const RSNR_SENTINEL: f64 = f64::INFINITY;

fn check_same<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Recovery SNR in dB: `−10·log10(‖x − ref‖² / ‖ref‖²)`.
pub fn rsnr<T: Real>(reference: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    check_same("rsnr", reference, x)?;
    let num: f64 = reference
        .data()
        .iter()
        .zip(x.data())
        .map(|(&r, &v)| (v.as_f64() - r.as_f64()).powi(2))
        .sum();
    let den: f64 = reference.data().iter().map(|&r| r.as_f64().powi(2)).sum();
    if den == 0.0 {
        return Err(Error::Data("rsnr: reference is all zero".into()));
    }
    if num == 0.0 {
        return Ok(RSNR_SENTINEL);
    }
    Ok(-10.0 * (num / den).log10())
}

/// Format an rSNR value for reports (`>300` for the sentinel).
pub fn format_rsnr(v: f64) -> String {
    if v > 300.0 {
        ">300".to_string()
    } else {
        format!("{v}")
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            tmp[i * wo + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * tmp[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions. The dynamic range is the joint max − min of both
/// images, which makes the index symmetric in its arguments.
pub fn ssim<T: Real>(reference: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    check_same("ssim", reference, x)?;
    let (h, w) = crate::warp::image_dims(reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let a: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let (lo, hi) = a
        .iter()
        .chain(&b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Data("ssim: zero dynamic range".into()));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean Euclidean norm of `est − gt` over pixels where `mask` is nonzero.
pub fn endpoint_error<T: Real>(
    est: &DisplacementField<T>,
    gt: &DisplacementField<T>,
    mask: &Tensor<T>,
) -> Result<f64> {
    check_same("endpoint_error", est.tensor(), gt.tensor())?;
    let (h, w) = (est.height(), est.width());
    if mask.numel() != h * w {
        return Err(Error::Config(format!("endpoint_error: mask {:?} does not cover {h}x{w}", mask.shape())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..h {
        for j in 0..w {
            if mask.data()[i * w + j] == T::zero() {
                continue;
            }
            let (er, ec) = est.at(i, j);
            let (gr, gc) = gt.at(i, j);
            let dr = er.as_f64() - gr.as_f64();
            let dc = ec.as_f64() - gc.as_f64();
            sum += (dr * dr + dc * dc).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("endpoint_error: empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// One scored registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub method: String,
    pub snr_db: Option<f64>,
    pub target_idx: usize,
    pub rsnr_db: f64,
    pub ssim: f64,
    pub epe_px: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

/// Scores keyed by method, SNR level and target frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, e: MetricEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.entries.extend(other.entries);
    }

    fn select(&self, method: &str, snr_db: Option<f64>) -> impl Iterator<Item = &MetricEntry> {
        let method = method.to_string();
        self.entries
            .iter()
            .filter(move |e| e.method == method && e.snr_db == snr_db)
    }

    pub fn rsnr(&self, method: &str, snr_db: Option<f64>) -> MeanStd {
        MeanStd::of(&self.select(method, snr_db).map(|e| e.rsnr_db).collect::<Vec<_>>())
    }

    pub fn ssim(&self, method: &str, snr_db: Option<f64>) -> MeanStd {
        MeanStd::of(&self.select(method, snr_db).map(|e| e.ssim).collect::<Vec<_>>())
    }

    pub fn epe(&self, method: &str, snr_db: Option<f64>) -> MeanStd {
        MeanStd::of(&self.select(method, snr_db).filter_map(|e| e.epe_px).collect::<Vec<_>>())
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.method) {
                out.push(e.method.clone());
            }
        }
        out
    }
}

/// Output of one registration for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub image: Tensor<f64>,
    /// Estimated field per source, in frame order with the target skipped.
    pub fields: Option<Vec<DisplacementField<f64>>>,
}

/// Fixed-point iterations when inverting ground-truth fields.
const RELATIVE_FIELD_ITERS: usize = 20;

/// Score a method over every choice of target frame: `register(t)` returns
/// the result with frame `t` as target and all other frames as sources.
/// Images are compared with the clean version of the target frame; endpoint
/// error (when both ground truth and estimates exist) is averaged over
/// sources inside the heart mask.
pub fn evaluate_series(
    series: &Series,
    method: &str,
    mut register: impl FnMut(usize) -> Result<Registration>,
) -> Result<MetricReport> {
    let clean = series
        .clean_frames()?
        .ok_or_else(|| Error::Data("reference required for rSNR/SSIM".into()))?;
    let n = series.len();
    let (h, w) = series.dims()?;
    let mask = series.heart_mask.clone().unwrap_or_else(|| Tensor::ones(&[1, h, w]));
    let mut report = MetricReport::default();
    for t in 0..n {
        let reg = register(t)?;
        let epe_px = match (&series.gt_fields, &reg.fields) {
            (Some(gt), Some(est)) => {
                if est.len() != n - 1 {
                    return Err(Error::Data(format!("{} fields for {} sources", est.len(), n - 1)));
                }
                let mut total = 0.0;
                for (e, j) in est.iter().zip((0..n).filter(|&j| j != t)) {
                    let expected = relative_field(&gt[t], &gt[j], RELATIVE_FIELD_ITERS)?;
                    total += endpoint_error(e, &expected, &mask)?;
                }
                Some(total / (n - 1) as f64)
            }
            _ => None,
        };
        report.push(MetricEntry {
            method: method.to_string(),
            snr_db: series.snr_db,
            target_idx: t,
            rsnr_db: rsnr(&clean[t], &reg.image)?,
            ssim: ssim(&clean[t], &reg.image)?,
            epe_px,
        });
    }
    Ok(report)
}

/// Unregistered baseline: the plain mean of all frames, with zero fields.
pub fn plain_mean(series: &Series) -> Result<Registration> {
    let (h, w) = series.dims()?;
    let n = series.len() as f64;
    let mut acc = Tensor::<f64>::zeros(&[1, h, w]);
    for f in &series.frames {
        acc.add_assign(f);
    }
    Ok(Registration {
        image: acc.map(|v| v / n),
        fields: Some(vec![DisplacementField::zeros(h, w); series.len().saturating_sub(1)]),
    })
}

pub fn evaluate_plain_mean(series: &Series) -> Result<MetricReport> {
    let reg = plain_mean(series)?;
    evaluate_series(series, "mean", |_| Ok(reg.clone()))
}

pub fn evaluate_model(model: &RegistrationModel<f32>, series: &Series, method: &str) -> Result<MetricReport> {
    evaluate_series(series, method, |t| {
        let (image, fields) = register(model, series, t)?;
        Ok(Registration {
            image,
            fields: Some(fields),
        })
    })
}
