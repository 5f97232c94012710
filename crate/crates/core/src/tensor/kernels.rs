//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! Every reduction runs in a fixed sequential order so results are
//! reproducible bit-for-bit.

use super::{Real, Tensor};

/// Output extent of a strided, zero-padded convolution along one axis
/// (floor semantics). `None` when the padded input is smaller than the kernel.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one `[C,H,W]` image into a `[C·kh·kw, Ho·Wo]` column matrix.
pub fn im2col<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    cols: &mut [T],
) {
    let ho = conv2d_output_size(h, kh, stride, padding).unwrap_or(0);
    let wo = conv2d_output_size(w, kw, stride, padding).unwrap_or(0);
    let g = ConvGeom { c, h, w, kh, kw, stride, padding, ho, wo };
    im2col_geom(input, &g, cols);
}

pub(crate) fn im2col_geom<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.ho * g.wo;
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &input[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_geom`]: scatter-add columns back onto the image.
pub(crate) fn col2im_geom<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let n_out = g.ho * g.wo;
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &mut out[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst_row[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, f, g.ho, g.wo]);
    let mut cols = vec![T::zero(); rows * ncols];
    let out_stride = f * ncols;
    for b in 0..n {
        im2col_geom(&input.data()[b * in_stride..(b + 1) * in_stride], g, &mut cols);
        let dst = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (fi, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(bias.data()[fi]);
            }
        }
        T::gemm(
            f,
            rows,
            ncols,
            T::one(),
            kernel.data(),
            rows as isize,
            1,
            &cols,
            ncols as isize,
            1,
            if bias.is_some() { T::one() } else { T::zero() },
            dst,
            ncols as isize,
            1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let out_stride = f * ncols;
    let mut d_input = want.0.then(|| Tensor::zeros(input.shape()));
    let mut d_kernel = want.1.then(|| Tensor::zeros(kernel.shape()));
    let mut d_bias = want.2.then(|| Tensor::zeros(&[f]));
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let go = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(db) = d_bias.as_mut() {
            for (fi, chunk) in go.chunks(ncols).enumerate() {
                db.data_mut()[fi] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            im2col_geom(&input.data()[b * in_stride..(b + 1) * in_stride], g, &mut cols);
            // dK[f, r] += Σ_p dY[f, p] · cols[r, p]
            T::gemm(
                f,
                ncols,
                rows,
                T::one(),
                go,
                ncols as isize,
                1,
                &cols,
                1,
                ncols as isize,
                T::one(),
                dk.data_mut(),
                rows as isize,
                1,
            );
        }
        if let Some(di) = d_input.as_mut() {
            // dcols[r, p] = Σ_f K[f, r] · dY[f, p]
            T::gemm(
                rows,
                f,
                ncols,
                T::one(),
                kernel.data(),
                1,
                rows as isize,
                go,
                ncols as isize,
                1,
                T::zero(),
                &mut cols,
                ncols as isize,
                1,
            );
            col2im_geom(&cols, g, &mut di.data_mut()[b * in_stride..(b + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

pub(crate) fn upsample2x_forward<T: Real>(x: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize)) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                d[i * 2 * w + j] = s[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize)) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = g.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * 2 * w + 2 * j;
                let r1 = r0 + 2 * w;
                d[i * w + j] = (s[r0] + s[r0 + 1]) + (s[r1] + s[r1 + 1]);
            }
        }
    }
    out
}

/// Zero-padded centered `window × window` sum over each `H×W` plane.
/// The operator is self-adjoint, so it also serves as its own backward.
pub(crate) fn box_sum<T: Real>(x: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize), window: usize) -> Tensor<T> {
    let r = (window / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..n * c {
        let s = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let row = &s[i * w..(i + 1) * w];
            for j in 0..w {
                let lo = (j as isize - r).max(0) as usize;
                let hi = ((j as isize + r) as usize).min(w - 1);
                let mut acc = T::zero();
                for &v in &row[lo..=hi] {
                    acc += v;
                }
                tmp[i * w + j] = acc;
            }
        }
        let d = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let lo = (i as isize - r).max(0) as usize;
            let hi = ((i as isize + r) as usize).min(h - 1);
            for j in 0..w {
                let mut acc = T::zero();
                for ii in lo..=hi {
                    acc += tmp[ii * w + j];
                }
                d[i * w + j] = acc;
            }
        }
    }
    out
}

/// Bilinear sample location and weights for one output pixel.
#[derive(Clone, Copy)]
struct Bilinear<T> {
    y0: isize,
    x0: isize,
    fy: T,
    fx: T,
}

impl<T: Real> Bilinear<T> {
    fn at(i: usize, j: usize, du_row: T, du_col: T) -> Self {
        let y = T::from_f64(i as f64) + du_row;
        let x = T::from_f64(j as f64) + du_col;
        let yf = y.floor();
        let xf = x.floor();
        Self {
            y0: yf.to_isize().unwrap_or(isize::MIN / 2),
            x0: xf.to_isize().unwrap_or(isize::MIN / 2),
            fy: y - yf,
            fx: x - xf,
        }
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// `out[n,c,i,j] = src[n,c](i + u[n,0,i,j], j + u[n,1,i,j])`, bilinear,
/// zero outside the image.
pub(crate) fn warp_forward<T: Real>(src: &Tensor<T>, field: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize)) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(src.shape());
    for b in 0..n {
        let f = &field.data()[b * 2 * hw..(b + 1) * 2 * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let s = Bilinear::at(i, j, f[p], f[hw + p]);
                let one = T::one();
                let w00 = (one - s.fy) * (one - s.fx);
                let w01 = (one - s.fy) * s.fx;
                let w10 = s.fy * (one - s.fx);
                let w11 = s.fy * s.fx;
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let plane = &src.data()[base..base + hw];
                    let v00 = fetch(plane, h, w, s.y0, s.x0);
                    let v01 = fetch(plane, h, w, s.y0, s.x0 + 1);
                    let v10 = fetch(plane, h, w, s.y0 + 1, s.x0);
                    let v11 = fetch(plane, h, w, s.y0 + 1, s.x0 + 1);
                    out.data_mut()[base + p] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
                }
            }
        }
    }
    out
}

pub(crate) fn warp_backward<T: Real>(
    src: &Tensor<T>,
    field: &Tensor<T>,
    grad_out: &Tensor<T>,
    (n, c, h, w): (usize, usize, usize, usize),
    want: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let hw = h * w;
    let mut d_src = want.0.then(|| Tensor::zeros(src.shape()));
    let mut d_field = want.1.then(|| Tensor::zeros(field.shape()));
    let one = T::one();
    for b in 0..n {
        let f = &field.data()[b * 2 * hw..(b + 1) * 2 * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let s = Bilinear::at(i, j, f[p], f[hw + p]);
                let w00 = (one - s.fy) * (one - s.fx);
                let w01 = (one - s.fy) * s.fx;
                let w10 = s.fy * (one - s.fx);
                let w11 = s.fy * s.fx;
                let mut d_row = T::zero();
                let mut d_col = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = grad_out.data()[base + p];
                    if let Some(ds) = d_src.as_mut() {
                        let plane = &mut ds.data_mut()[base..base + hw];
                        let mut scatter = |y: isize, x: isize, wt: T| {
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                plane[y as usize * w + x as usize] += wt * g;
                            }
                        };
                        scatter(s.y0, s.x0, w00);
                        scatter(s.y0, s.x0 + 1, w01);
                        scatter(s.y0 + 1, s.x0, w10);
                        scatter(s.y0 + 1, s.x0 + 1, w11);
                    }
                    if d_field.is_some() {
                        let plane = &src.data()[base..base + hw];
                        let v00 = fetch(plane, h, w, s.y0, s.x0);
                        let v01 = fetch(plane, h, w, s.y0, s.x0 + 1);
                        let v10 = fetch(plane, h, w, s.y0 + 1, s.x0);
                        let v11 = fetch(plane, h, w, s.y0 + 1, s.x0 + 1);
                        d_row += g * ((one - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                        d_col += g * ((one - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                    }
                }
                if let Some(df) = d_field.as_mut() {
                    let d = &mut df.data_mut()[b * 2 * hw..(b + 1) * 2 * hw];
                    d[p] = d_row;
                    d[hw + p] = d_col;
                }
            }
        }
    }
    (d_src, d_field)
}

/// Forward difference along `H` (`axis = 2`) or `W` (`axis = 3`).
pub(crate) fn diff_forward<T: Real>(x: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize), axis: usize) -> Tensor<T> {
    let src = x.data();
    let plane = h * w;
    if axis == 2 {
        let mut out = Tensor::zeros(&[n, c, h - 1, w]);
        let d = out.data_mut();
        for p in 0..n * c {
            for i in 0..h - 1 {
                for j in 0..w {
                    d[(p * (h - 1) + i) * w + j] = src[p * plane + (i + 1) * w + j] - src[p * plane + i * w + j];
                }
            }
        }
        out
    } else {
        let mut out = Tensor::zeros(&[n, c, h, w - 1]);
        let d = out.data_mut();
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w - 1 {
                    d[(p * h + i) * (w - 1) + j] = src[p * plane + i * w + j + 1] - src[p * plane + i * w + j];
                }
            }
        }
        out
    }
}

pub(crate) fn diff_backward<T: Real>(g: &Tensor<T>, (n, c, h, w): (usize, usize, usize, usize), axis: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let plane = h * w;
    let gd = g.data();
    let d = out.data_mut();
    if axis == 2 {
        for p in 0..n * c {
            for i in 0..h - 1 {
                for j in 0..w {
                    let v = gd[(p * (h - 1) + i) * w + j];
                    d[p * plane + (i + 1) * w + j] += v;
                    d[p * plane + i * w + j] -= v;
                }
            }
        }
    } else {
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w - 1 {
                    let v = gd[(p * h + i) * (w - 1) + j];
                    d[p * plane + i * w + j + 1] += v;
                    d[p * plane + i * w + j] -= v;
                }
            }
        }
    }
    out
}
