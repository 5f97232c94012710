//! Similarity and regularization terms of the registration objectives.
//!
//! All losses take `[N,C,H,W]` graph nodes and average over every batch
//! element, so a batch of K branches yields the mean of the K per-branch
//! losses.

use serde::{Deserialize, Serialize};

use crate::edge::EdgeDetector;
use crate::tensor::{Real, Var};
use crate::{Error, Result};

/// Which similarity `L_s` an objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Squared local normalized cross-correlation on intensities.
    Cc,
    /// Mean-squared difference of edge maps.
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Side of the square CC window; odd, at least 3.
    pub cc_window: usize,
    pub epsilon: f64,
    /// Weight of the smoothness term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_mode(SimilarityMode::Cc)
    }
}

impl LossConfig {
    pub const DEFAULT_LAMBDA_CC: f64 = 0.01;
    pub const DEFAULT_LAMBDA_EDGE: f64 = 0.1;

    pub fn for_mode(mode: SimilarityMode) -> Self {
        Self {
            cc_window: 9,
            epsilon: 1e-5,
            lambda: match mode {
                SimilarityMode::Cc => Self::DEFAULT_LAMBDA_CC,
                SimilarityMode::Edge => Self::DEFAULT_LAMBDA_EDGE,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cc_window < 3 || self.cc_window % 2 == 0 {
            return Err(Error::Config(format!("cc_window must be odd and >= 3, got {}", self.cc_window)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `1 − mean(CC²)` with CC computed over zero-padded `n × n` windows.
///
/// Per pixel: `CC² = cross² / (var_t · var_w + ε)` where
/// `cross = Σtw − Σt·Σw/n²` and `var_x = Σx² − (Σx)²/n²`.
/// Squared CC is blind to the sign of the correlation, so `w` and `−w` score
/// the same.
pub fn cc_loss<'g, T: Real>(t: &Var<'g, T>, w: &Var<'g, T>, cfg: &LossConfig) -> Result<Var<'g, T>> {
    let shape = t.shape();
    if shape != w.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "cc_loss",
            lhs: shape,
            rhs: w.shape(),
        }
        .into());
    }
    let n = cfg.cc_window;
    if shape.len() != 4 || shape[2] < n || shape[3] < n {
        return Err(Error::Config(format!("cc_loss: window {n} larger than image {shape:?}")));
    }
    let inv_area = T::from_f64(1.0 / (n * n) as f64);
    let t_sum = t.box_sum(n)?;
    let w_sum = w.box_sum(n)?;
    let tt_sum = t.square().box_sum(n)?;
    let ww_sum = w.square().box_sum(n)?;
    let tw_sum = t.mul(w)?.box_sum(n)?;

    let cross = tw_sum.sub(&t_sum.mul(&w_sum)?.scale(inv_area))?;
    let t_var = tt_sum.sub(&t_sum.square().scale(inv_area))?;
    let w_var = ww_sum.sub(&w_sum.square().scale(inv_area))?;
    let denom = t_var.mul(&w_var)?.offset(T::from_f64(cfg.epsilon));
    let cc = cross.square().div(&denom)?;
    Ok(cc.mean_all().scale(-T::one()).offset(T::one()))
}

/// Mean of squared differences.
pub fn mse_loss<'g, T: Real>(a: &Var<'g, T>, b: &Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.sub(b)?.square().mean_all())
}

/// Mean squared forward difference of a `[N,2,H,W]` displacement field:
/// `½·(mean(Δ_row u)² + mean(Δ_col u)²)`.
pub fn smoothness_loss<'g, T: Real>(u: &Var<'g, T>) -> Result<Var<'g, T>> {
    let d_row = u.diff(2)?.square().mean_all();
    let d_col = u.diff(3)?.square().mean_all();
    Ok(d_row.add(&d_col)?.scale(T::from_f64(0.5)))
}

fn similarity<'g, T: Real>(
    reference: &Var<'g, T>,
    moved: &Var<'g, T>,
    cfg: &LossConfig,
    mode: SimilarityMode,
    detector: Option<&EdgeDetector<T>>,
) -> Result<Var<'g, T>> {
    match mode {
        SimilarityMode::Cc => cc_loss(reference, moved, cfg),
        SimilarityMode::Edge => {
            let det = detector.ok_or_else(|| Error::Config("edge similarity requires an edge detector".into()))?;
            let e_ref = det.detect_var(reference)?;
            let e_moved = det.detect_var(moved)?;
            mse_loss(&e_ref, &e_moved)
        }
    }
}

/// Pairwise objective `L_s(t, s∘φ) + λ·L_r(u)`.
///
/// With a batch of K warped sources (and `t_ref` repeated K times) this is the
/// mean of the K pairwise objectives.
pub fn objective_pairwise<'g, T: Real>(
    t_ref: &Var<'g, T>,
    warped: &Var<'g, T>,
    u: &Var<'g, T>,
    cfg: &LossConfig,
    mode: SimilarityMode,
    detector: Option<&EdgeDetector<T>>,
) -> Result<Var<'g, T>> {
    let sim = similarity(t_ref, warped, cfg, mode, detector)?;
    let reg = smoothness_loss(u)?.scale(T::from_f64(cfg.lambda));
    Ok(sim.add(&reg)?)
}

/// Group objective: `L_s` once on the warped mean plus `(λ/K)·Σ_j L_r(u_j)`.
///
/// `fields` is the `[K,2,H,W]` stack of branch displacements; averaging the
/// smoothness over the batch gives the `1/K` weighting.
pub fn objective_group<'g, T: Real>(
    t_ref: &Var<'g, T>,
    warped_mean: &Var<'g, T>,
    fields: &Var<'g, T>,
    cfg: &LossConfig,
    mode: SimilarityMode,
    detector: Option<&EdgeDetector<T>>,
) -> Result<Var<'g, T>> {
    if fields.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("objective_group: empty field list".into()));
    }
    let sim = similarity(t_ref, warped_mean, cfg, mode, detector)?;
    let reg = smoothness_loss(fields)?.scale(T::from_f64(cfg.lambda));
    Ok(sim.add(&reg)?)
}
