//! Spatial transformer: identity grid, displacement fields, bilinear warping
//! and the parameter-free mean layer.
//!
//! A displacement field `u` stores `(row, col)` offsets in pixels. The
//! deformation `φ = p + u` is never materialized; warping samples the source
//! at `p + u` directly.

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Pixel coordinates `p` of an `h × w` image as a `[2,H,W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T> {
    pub coords: Tensor<T>,
}

pub fn identity_grid<T: Real>(h: usize, w: usize) -> CoordinateGrid<T> {
    let coords = Tensor::from_fn(&[2, h, w], |k| {
        let (comp, p) = (k / (h * w), k % (h * w));
        T::from_f64(if comp == 0 { p / w } else { p % w } as f64)
    });
    CoordinateGrid { coords }
}

/// Dense `[2,H,W]` displacement field in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    u: Tensor<T>,
}

impl<T: Real> DisplacementField<T> {
    /// Accepts a `[2,H,W]` or `[1,2,H,W]` tensor of finite values.
    pub fn new(u: Tensor<T>) -> Result<Self> {
        let shape = u.shape().to_vec();
        let u = match shape.as_slice() {
            [2, _, _] => u,
            [1, 2, h, w] => u.reshape(&[2, *h, *w])?,
            _ => {
                return Err(TensorError::Rank {
                    op: "DisplacementField",
                    expected: 3,
                    shape,
                }
                .into())
            }
        };
        if !u.is_finite() {
            return Err(Error::Numeric("displacement field contains NaN or Inf".into()));
        }
        Ok(Self { u })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            u: Tensor::zeros(&[2, h, w]),
        }
    }

    /// Field with the same displacement at every pixel.
    pub fn constant(h: usize, w: usize, d_row: T, d_col: T) -> Self {
        Self {
            u: Tensor::from_fn(&[2, h, w], |k| if k < h * w { d_row } else { d_col }),
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut u = Tensor::zeros(&[2, h, w]);
        for i in 0..h {
            for j in 0..w {
                let (r, c) = f(i, j);
                u.data_mut()[i * w + j] = r;
                u.data_mut()[h * w + i * w + j] = c;
            }
        }
        Self { u }
    }

    pub fn height(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.u
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.u
    }

    /// `(du_row, du_col)` at pixel `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        let (h, w) = (self.height(), self.width());
        (self.u.data()[i * w + j], self.u.data()[h * w + i * w + j])
    }

    /// `[1,2,H,W]` view for batched graph operations.
    pub fn batched(&self) -> Tensor<T> {
        self.u.clone().reshape(&[1, 2, self.height(), self.width()]).expect("same numel")
    }

    /// Deformation `φ = p + u` as a `[2,H,W]` tensor of sample positions.
    pub fn deformation(&self) -> Tensor<T> {
        let grid = identity_grid::<T>(self.height(), self.width());
        Tensor::from_fn(self.u.shape(), |k| grid.coords.data()[k] + self.u.data()[k])
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField { u: self.u.cast() }
    }
}

/// Differentiable bilinear warp of `src` (`[N,C,H,W]`) by `field` (`[N,2,H,W]`).
pub fn warp_bilinear<'g, T: Real>(src: &Var<'g, T>, field: &Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(src.warp(field)?)
}

/// Warp a `[1,H,W]` image outside any graph.
pub fn warp_image<T: Real>(src: &Tensor<T>, field: &DisplacementField<T>) -> Result<Tensor<T>> {
    let (h, w) = image_dims(src)?;
    let g = Graph::new();
    let s = g.constant(src.clone().reshape(&[1, 1, h, w])?);
    let f = g.constant(field.batched());
    let out = s.warp(&f)?;
    let t = (*out.value()).clone();
    Ok(t.reshape(&[1, h, w])?)
}

/// Parameter-free mean layer: pixelwise `(1/K) Σ_j warped_j`.
///
/// Inputs are `[1,C,H,W]` (or `[n,C,H,W]`) graph nodes; they are stacked
/// along the batch axis and averaged in list order.
pub fn compose_mean<'g, T: Real>(warped: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = warped.first().ok_or_else(|| Error::Config("compose_mean: empty input list".into()))?;
    let stacked = if warped.len() == 1 {
        *first
    } else {
        first.graph().stack_batch(warped)?
    };
    Ok(stacked.batch_mean()?)
}

/// Field registering frame `s` onto frame `t` when both are warps of one
/// reference by `g_s` and `g_t`: the solution of `u(x) = g_t(x) − g_s(x + u(x))`,
/// found by fixed-point iteration (converges while `g_s` is a contraction's
/// worth of smooth, which breathing fields are).
pub fn relative_field(
    g_t: &DisplacementField<f64>,
    g_s: &DisplacementField<f64>,
    iters: usize,
) -> Result<DisplacementField<f64>> {
    let (h, w) = (g_t.height(), g_t.width());
    if (g_s.height(), g_s.width()) != (h, w) {
        return Err(Error::Config("relative_field: field sizes differ".into()));
    }
    let comp = |f: &DisplacementField<f64>, c: usize| f.tensor().index_axis0(c).reshape(&[1, h, w]);
    let (sr, sc) = (comp(g_s, 0)?, comp(g_s, 1)?);
    let mut u = g_t.clone();
    for _ in 0..iters {
        let (ar, ac) = (warp_image(&sr, &u)?, warp_image(&sc, &u)?);
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend(g_t.tensor().data()[..h * w].iter().zip(ar.data()).map(|(t, s)| t - s));
        data.extend(g_t.tensor().data()[h * w..].iter().zip(ac.data()).map(|(t, s)| t - s));
        u = DisplacementField::new(Tensor::new(&[2, h, w], data)?)?;
    }
    Ok(u)
}

/// `(H, W)` of a `[1,H,W]` image tensor.
pub fn image_dims<T: Real>(img: &Tensor<T>) -> Result<(usize, usize)> {
    match *img.shape() {
        [1, h, w] => Ok((h, w)),
        _ => Err(TensorError::Rank {
            op: "image",
            expected: 3,
            shape: img.shape().to_vec(),
        }
        .into()),
    }
}
