//! Edge maps: a classical Sobel baseline and a small trainable CNN detector
//! that stays usable at low SNR.
//!
//! The detector is trained on clean phantom frames corrupted with white noise
//! over a range of SNRs, against binarized Sobel edges of the clean frame. In
//! the registration loss it is frozen: gradients flow through it to the
//! displacement network but never update it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::layers::{self, ConvSpec, ConvVars};
use crate::optim::{average_grads, Adam};
use crate::pipeline::normalize;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::warp::image_dims;
use crate::{Error, Result};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_EPS: f64 = 1e-5;

/// Sobel gradient magnitude of a `[1,H,W]` image, rescaled by its own max.
///
/// Borders replicate the nearest pixel. The magnitude is
/// `sqrt(Gx² + Gy² + ε) − sqrt(ε)`, so flat regions are exactly zero; an image
/// whose max response is `≤ ε` maps to all zeros.
pub fn sobel_edges<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = image_dims(img)?;
    if h < 3 || w < 3 {
        return Err(Error::Config(format!("sobel_edges needs at least 3x3, got {h}x{w}")));
    }
    let px = |i: isize, j: isize| {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img.data()[ii * w + jj].as_f64()
    };
    let mut mag = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (di, row) in SOBEL_X.iter().enumerate() {
                for (dj, &k) in row.iter().enumerate() {
                    let v = px(i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    gx += k * v;
                    // Gy is the transpose of Gx.
                    gy += SOBEL_X[dj][di] * v;
                }
            }
            mag[i * w + j] = (gx * gx + gy * gy + SOBEL_EPS).sqrt() - SOBEL_EPS.sqrt();
        }
    }
    let max = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    let scale = if max <= SOBEL_EPS { 0.0 } else { 1.0 / max };
    Ok(Tensor::from_fn(&[1, h, w], |k| T::from_f64(mag[k] * scale)))
}

/// Binary edge target: 1 where the Sobel map is at least `threshold`.
pub fn binarize<T: Real>(edges: &Tensor<T>, threshold: f64) -> Tensor<T> {
    edges.map(|v| if v.as_f64() >= threshold { T::one() } else { T::zero() })
}

/// Small fully convolutional edge detector: four 3×3 convolutions, 16 hidden
/// channels, leaky-ReLU, sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDetector<T> {
    pub arch: EdgeArch,
    /// Flat `[w0, b0, w1, b1, ...]` parameters.
    pub params: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeArch {
    pub layers: Vec<ConvSpec>,
    pub slope: f64,
    /// Applied as `(x − input_shift) · input_scale` before the first layer.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for EdgeArch {
    fn default() -> Self {
        Self {
            layers: vec![
                ConvSpec::new("edge0", 1, 16, 1),
                ConvSpec::new("edge1", 16, 16, 1),
                ConvSpec::new("edge2", 16, 16, 1),
                ConvSpec::new("edge3", 16, 1, 1),
            ],
            slope: 0.2,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

impl EdgeArch {
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.kernel - 1).sum::<usize>()
    }
}

impl<T: Real> EdgeDetector<T> {
    pub fn init(arch: EdgeArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .flat_map(|l| {
                let (w, b) = l.init::<T>(&mut rng);
                [w, b]
            })
            .collect();
        Self { arch, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> EdgeDetector<U> {
        EdgeDetector {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn forward_with<'g>(&self, vars: &[ConvVars<'g, T>], x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let a = &self.arch;
        let mut h = x
            .offset(T::from_f64(-a.input_shift))
            .scale(T::from_f64(a.input_scale));
        let last = a.layers.len() - 1;
        for (i, (spec, v)) in a.layers.iter().zip(vars).enumerate() {
            h = v.apply(spec, &h)?;
            h = if i == last { h.sigmoid() } else { h.leaky_relu(T::from_f64(a.slope)) };
        }
        Ok(h)
    }

    /// Edge map of a `[N,1,H,W]` graph node with the detector frozen.
    pub fn detect_var<'g>(&self, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let vars = layers::bind(x.graph(), &self.params, false);
        self.forward_with(&vars, x)
    }
}

/// Edge-probability map in `[0, 1]` of a normalized `[1,H,W]` image.
pub fn detect<T: Real>(detector: &EdgeDetector<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = image_dims(img)?;
    let g = Graph::new();
    let x = g.constant(img.clone().reshape(&[1, 1, h, w])?);
    let e = detector.detect_var(&x)?;
    let out = (*e.value()).clone();
    Ok(out.reshape(&[1, h, w])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeTrainConfig {
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Adam step size (cosine-annealed to 1% over training).
    pub lr: f64,
    /// Binarize targets at this level; `None` regresses the clean Sobel map.
    pub threshold: Option<f64>,
    /// Additive brightness augmentation, uniform in `±shift`.
    pub brightness_shift: f64,
    /// Multiplicative contrast augmentation range.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    pub seed: u64,
}

impl Default for EdgeTrainConfig {
    fn default() -> Self {
        Self {
            snr_lo_db: 1.0,
            snr_hi_db: 23.0,
            steps: 600,
            batch_size: 4,
            lr: 0.003,
            threshold: None,
            brightness_shift: 1.0,
            contrast_lo: 0.5,
            contrast_hi: 1.25,
            seed: 0,
        }
    }
}

/// White Gaussian noise standard deviation for a target SNR given signal
/// power (mean squared intensity).
pub fn noise_sigma(signal_power: f64, snr_db: f64) -> f64 {
    (signal_power * 10f64.powf(-snr_db / 10.0)).sqrt()
}

fn mean_square(img: &Tensor<f64>) -> f64 {
    img.data().iter().map(|v| v * v).sum::<f64>() / img.numel() as f64
}

/// Noisy detector input for a clean frame: white noise at `snr_db`
/// relative to the frame's power, then normalized with the noisy frame's
/// own statistics.
pub fn noisy_input(clean: &Tensor<f64>, snr_db: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let sigma = noise_sigma(mean_square(clean), snr_db);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let noisy = clean.map(|v| v + normal.sample(rng));
    normalize(&noisy).0
}

/// Supervised training of the detector; deterministic for a given seed.
pub fn train_edge_detector(clean_images: &[Tensor<f64>], cfg: &EdgeTrainConfig) -> Result<EdgeDetector<f32>> {
    if clean_images.is_empty() {
        return Err(Error::Data("edge detector training needs at least one image".into()));
    }
    if !(cfg.snr_lo_db < cfg.snr_hi_db) {
        return Err(Error::Config(format!(
            "snr range must satisfy lo < hi, got [{}, {}]",
            cfg.snr_lo_db, cfg.snr_hi_db
        )));
    }
    let targets: Vec<Tensor<f32>> = clean_images
        .iter()
        .map(|c| {
            sobel_edges(c).map(|e| match cfg.threshold {
                Some(t) => binarize(&e, t).cast(),
                None => e.cast(),
            })
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut det = EdgeDetector::<f32>::init(EdgeArch::default(), rng.random());

    let sample = |rng: &mut ChaCha8Rng| -> (Tensor<f32>, Tensor<f32>) {
        let idx = rng.random_range(0..clean_images.len());
        let snr = rng.random_range(cfg.snr_lo_db..cfg.snr_hi_db);
        let x = noisy_input(&clean_images[idx], snr, rng);
        let c = rng.random_range(cfg.contrast_lo..cfg.contrast_hi);
        let s = rng.random_range(-cfg.brightness_shift..=cfg.brightness_shift);
        let x = x.map(|v| v * c + s);
        let (x, y) = random_flip(&x, &targets[idx].cast(), rng);
        (x.cast(), y.cast())
    };

    // Normalization constants from a fixed probe batch.
    let mut probe = Vec::new();
    for _ in 0..8 {
        probe.extend(sample(&mut rng).0.data().iter().map(|&v| v as f64));
    }
    let mean = probe.iter().sum::<f64>() / probe.len() as f64;
    let var = probe.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / probe.len() as f64;
    det.arch.input_shift = mean;
    det.arch.input_scale = 1.0 / var.sqrt().max(1e-6);
    // Start the output at the mean edge density instead of 0.5.
    let (sum, n) = targets
        .iter()
        .fold((0.0, 0usize), |(s, n), t| (s + t.data().iter().map(|&v| v as f64).sum::<f64>(), n + t.numel()));
    let density = (sum / n as f64).clamp(1e-3, 0.5);
    let out_bias = det.params.last_mut().expect("detector has layers");
    let logit = (density / (1.0 - density)).ln() as f32;
    out_bias.data_mut().iter_mut().for_each(|b| *b = logit);

    let mut opt = Adam::new(&det.params);
    let mut order: Vec<usize> = (0..cfg.batch_size).collect();
    for step in 0..cfg.steps {
        let lr = crate::pipeline::cosine_lr(step, cfg.steps, cfg.lr, cfg.lr * 0.01);
        order.shuffle(&mut rng);
        let mut per_sample = Vec::with_capacity(cfg.batch_size);
        for _ in &order {
            let (x, y) = sample(&mut rng);
            let (h, w) = image_dims(&x)?;
            let g = Graph::new();
            let vars = layers::bind(&g, &det.params, true);
            let xin = g.constant(x.reshape(&[1, 1, h, w])?);
            let target = g.constant(y.reshape(&[1, 1, h, w])?);
            let out = det.forward_with(&vars, &xin)?;
            let loss = crate::losses::mse_loss(&out, &target)?;
            if !loss.value().item().is_finite() {
                return Err(Error::Numeric(format!("edge detector loss is not finite at step {step}")));
            }
            let grads = loss.backward()?;
            per_sample.push(layers::collect_grads(&grads, &vars));
        }
        let grads = average_grads(&per_sample);
        opt.step(&mut det.params, &grads, lr);
    }
    Ok(det)
}

fn random_flip(x: &Tensor<f64>, y: &Tensor<f64>, rng: &mut impl Rng) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let flip_r = rng.random_bool(0.5);
    let flip_c = rng.random_bool(0.5);
    let map = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |k| {
            let (i, j) = (k / w, k % w);
            let si = if flip_r { h - 1 - i } else { i };
            let sj = if flip_c { w - 1 - j } else { j };
            t.data()[si * w + sj]
        })
    };
    (map(x), map(y))
}

/// Edge-map error of both detectors against the clean Sobel reference at
/// one SNR level, averaged over `images` with `repeats` noise draws each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub snr_db: f64,
    pub detector_mse: f64,
    pub sobel_mse: f64,
}

pub fn robustness_curve<T: Real>(
    detector: &EdgeDetector<T>,
    images: &[Tensor<f64>],
    snr_levels: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(snr_levels.len());
    for &snr in snr_levels {
        let (mut det_err, mut sob_err, mut n) = (0.0, 0.0, 0usize);
        for img in images {
            let reference = sobel_edges(img)?;
            for _ in 0..repeats {
                let sigma = noise_sigma(mean_square(img), snr);
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let noisy = img.map(|v| v + normal.sample(&mut rng));
                let d = detect(detector, &normalize(&noisy).0.cast::<T>())?.cast::<f64>();
                let s = sobel_edges(&noisy)?;
                det_err += mse(&d, &reference);
                sob_err += mse(&s, &reference);
                n += 1;
            }
        }
        out.push(RobustnessPoint {
            snr_db: snr,
            detector_mse: det_err / n as f64,
            sobel_mse: sob_err / n as f64,
        });
    }
    Ok(out)
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_constant_is_zero() {
        let img = Tensor::<f64>::full(&[1, 6, 7], 0.8);
        assert!(sobel_edges(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_step_peaks_on_step() {
        let (h, w) = (8, 12);
        let img = Tensor::<f64>::from_fn(&[1, h, w], |k| if k % w >= w / 2 { 1.0 } else { 0.0 });
        let e = sobel_edges(&img).unwrap();
        for i in 0..h {
            assert!((e.at(&[0, i, w / 2 - 1]) - 1.0).abs() < 1e-12);
            assert!((e.at(&[0, i, w / 2]) - 1.0).abs() < 1e-12);
            assert_eq!(e.at(&[0, i, 0]), 0.0);
            assert_eq!(e.at(&[0, i, w - 1]), 0.0);
        }
    }

    #[test]
    fn sobel_rejects_tiny() {
        assert!(sobel_edges(&Tensor::<f64>::zeros(&[1, 2, 5])).is_err());
    }

    #[test]
    fn detector_shape_bounds_and_receptive_field() {
        let det = EdgeDetector::<f64>::init(EdgeArch::default(), 3);
        assert!(det.arch.receptive_field() >= 9);
        let img = Tensor::from_fn(&[1, 9, 11], |k| ((k * 37) % 11) as f64 * 40.0 - 200.0);
        let e = detect(&det, &img).unwrap();
        assert_eq!(e.shape(), img.shape());
        assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let cfg = EdgeTrainConfig::default();
        assert!(matches!(train_edge_detector(&[], &cfg), Err(Error::Data(_))));
        let bad = EdgeTrainConfig {
            snr_lo_db: 5.0,
            snr_hi_db: 5.0,
            ..cfg
        };
        let img = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(matches!(train_edge_detector(&[img], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn noise_sigma_formula() {
        assert_eq!(noise_sigma(1.0, 0.0), 1.0);
        assert!((noise_sigma(4.0, 10.0) - (0.4f64).sqrt()).abs() < 1e-15);
    }
}
