use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};
use crate::warp::image_dims;
use crate::Result;

/// Standard deviations below this are treated as a flat image.
const MIN_STD: f64 = 1e-8;

/// Mean and standard deviation of a frame (std falls back to 1 for flat
/// frames).
pub fn stats<T: Real>(img: &Tensor<T>) -> (T, T) {
    let n = img.numel() as f64;
    let mean = img.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = img.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let std = if std < MIN_STD { 1.0 } else { std };
    (T::from_f64(mean), T::from_f64(std))
}

/// Zero-mean, unit-std copy of `img` plus the `(mean, std)` used.
pub fn normalize<T: Real>(img: &Tensor<T>) -> (Tensor<T>, T, T) {
    let (m, s) = stats(img);
    (img.map(|v| (v - m) / s), m, s)
}

/// Center crop or symmetric zero pad of a `[1,H,W]` frame to `size × size`.
pub fn crop_or_pad<T: Real>(img: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (h, w) = image_dims(img)?;
    // Offsets of the output window in input coordinates (may be negative).
    let oy = (h as isize - size as isize) / 2;
    let ox = (w as isize - size as isize) / 2;
    Ok(Tensor::from_fn(&[1, size, size], |k| {
        let (i, j) = ((k / size) as isize + oy, (k % size) as isize + ox);
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            T::zero()
        } else {
            img.data()[i as usize * w + j as usize]
        }
    }))
}

/// Frame after crop/pad and normalization, with the constants needed to
/// undo the normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed<T> {
    pub image: Tensor<T>,
    pub norm: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn invert<T: Real>(&self, img: &Tensor<T>) -> Tensor<T> {
        let (m, s) = (T::from_f64(self.mean), T::from_f64(self.std));
        img.map(|v| v * s + m)
    }
}

pub fn preprocess<T: Real>(img: &Tensor<T>, size: usize) -> Result<Preprocessed<T>> {
    let cropped = crop_or_pad(img, size)?;
    let (image, m, s) = normalize(&cropped);
    Ok(Preprocessed {
        image,
        norm: Normalization {
            mean: m.as_f64(),
            std: s.as_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_crop_region() {
        let img = Tensor::<f64>::from_fn(&[1, 256, 256], |k| k as f64);
        let out = crop_or_pad(&img, 192).unwrap();
        assert_eq!(out.shape(), &[1, 192, 192]);
        assert_eq!(out.at(&[0, 0, 0]), img.at(&[0, 32, 32]));
        assert_eq!(out.at(&[0, 191, 191]), img.at(&[0, 223, 223]));
    }

    #[test]
    fn symmetric_pad() {
        let img = Tensor::<f64>::ones(&[1, 2, 2]);
        let out = crop_or_pad(&img, 4).unwrap();
        assert_eq!(out.data().iter().sum::<f64>(), 4.0);
        assert_eq!(out.at(&[0, 1, 1]), 1.0);
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn constant_frame_normalizes_to_zero() {
        let p = preprocess(&Tensor::<f64>::full(&[1, 8, 8], 3.5), 8).unwrap();
        assert!(p.image.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.norm, Normalization { mean: 3.5, std: 1.0 });
    }

    #[test]
    fn normalized_moments_and_inverse() {
        let img = Tensor::<f64>::from_fn(&[1, 20, 20], |k| ((k * 7919) % 101) as f64 * 0.37 - 4.0);
        let p = preprocess(&img, 20).unwrap();
        let n = 400.0;
        let mean = p.image.data().iter().sum::<f64>() / n;
        let std = (p.image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
        let back = p.norm.invert(&p.image);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
