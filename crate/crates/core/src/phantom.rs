//! Synthetic free-breathing series with ground-truth motion.
//!
//! A geometric thorax (torso, lungs, myocardial ring, blood pool, papillary
//! muscle, optional scar) is warped per frame by a breathing translation plus
//! a smooth bump centered on the heart, then corrupted with white Gaussian
//! noise at a series-level SNR.
//!
//! Breathing amplitude follows `sin^{2n}(π·f/period)` on the superior-inferior
//! (row) axis and a phase-lagged copy at 40% depth on the anterior-posterior
//! (column) axis; the phase lag models hysteresis.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::warp::{warp_image, DisplacementField};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breathing {
    pub depth_px: f64,
    pub period_frames: f64,
    /// Exponent `n` of `sin^{2n}`; larger values give longer end-expiration.
    pub shape_exponent: u32,
    /// Phase lag of the AP axis, radians.
    pub hysteresis_phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Angle on the myocardial ring, radians (0 = +column direction).
    pub angle: f64,
    /// Semi-axes as fractions of image size.
    pub radii: (f64, f64),
    pub intensity_delta: f64,
}

impl Default for Lesion {
    fn default() -> Self {
        Self {
            angle: -0.6,
            radii: (0.035, 0.05),
            intensity_delta: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub frames: usize,
    pub breathing: Breathing,
    pub lesion: Option<Lesion>,
    pub anatomy_seed: u64,
    pub noise_seed: u64,
    pub noise_snr_db: Option<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 192,
            frames: 15,
            breathing: Breathing {
                depth_px: 6.0,
                period_frames: 6.0,
                shape_exponent: 1,
                hysteresis_phase: 0.3,
            },
            lesion: Some(Lesion::default()),
            anatomy_seed: 0,
            noise_seed: 1,
            noise_snr_db: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let b = &self.breathing;
        if self.frames < 2 {
            return Err(Error::Config(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("size must be >= 32, got {}", self.size)));
        }
        if !(b.depth_px >= 0.0) || !b.depth_px.is_finite() {
            return Err(Error::Config(format!("depth_px must be >= 0, got {}", b.depth_px)));
        }
        if !(b.period_frames > 0.0) {
            return Err(Error::Config(format!("period_frames must be > 0, got {}", b.period_frames)));
        }
        if b.shape_exponent < 1 {
            return Err(Error::Config("shape_exponent must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(si_amp, ap_amp)` in pixels at `frame_index`.
pub fn breathing_curve(b: &Breathing, frame_index: usize) -> (f64, f64) {
    let phase = PI * frame_index as f64 / b.period_frames;
    let n2 = 2 * b.shape_exponent as i32;
    let si = b.depth_px * phase.sin().powi(n2);
    let ap = 0.4 * b.depth_px * (phase + b.hysteresis_phase).sin().powi(n2);
    (si, ap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSeries {
    pub clean_reference: Tensor<f64>,
    pub clean_frames: Vec<Tensor<f64>>,
    pub noisy_frames: Vec<Tensor<f64>>,
    /// Reference→frame fields: `clean_frames[j] = warp(clean_reference, gt_fields[j])`.
    pub gt_fields: Vec<DisplacementField<f64>>,
    /// Measured per-frame SNR; `None` without noise.
    pub snr_actual_db: Vec<Option<f64>>,
    /// 1 inside a dilated disc around the heart, else 0.
    pub heart_mask: Tensor<f64>,
}

/// Geometry of one anatomy draw, in pixels.
#[derive(Clone, Debug)]
struct Anatomy {
    size: usize,
    torso: Ellipse,
    lungs: [Ellipse; 2],
    heart_center: (f64, f64),
    myo_outer: f64,
    pool: f64,
    papillary: Ellipse,
    lesion: Option<(Ellipse, f64)>,
    i_torso: f64,
    i_lung: f64,
    i_myo: f64,
    i_blood: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Fractional coverage of pixel `(i, j)` with a one-pixel linear ramp
    /// across the boundary.
    fn coverage(&self, i: f64, j: f64) -> f64 {
        let dy = (i - self.cy) / self.ry;
        let dx = (j - self.cx) / self.rx;
        let q = (dy * dy + dx * dx).sqrt();
        let signed = if q < 1e-12 {
            -self.ry.min(self.rx)
        } else {
            let gy = dy / self.ry;
            let gx = dx / self.rx;
            let grad = (gy * gy + gx * gx).sqrt() / q;
            (q - 1.0) / grad
        };
        (0.5 - signed).clamp(0.0, 1.0)
    }
}

fn circle(cy: f64, cx: f64, r: f64) -> Ellipse {
    Ellipse { cy, cx, ry: r, rx: r }
}

impl Anatomy {
    fn draw(seed: u64, size: usize, lesion: Option<&Lesion>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let mut jit = |scale: f64| rng.random_range(-scale..scale);
        let torso = Ellipse {
            cy: s * (0.52 + jit(0.015)),
            cx: s * (0.50 + jit(0.015)),
            ry: s * (0.36 + jit(0.02)),
            rx: s * (0.45 + jit(0.02)),
        };
        let lung_ry = s * (0.19 + jit(0.015));
        let lung_rx = s * (0.11 + jit(0.01));
        let lung_cy = s * (0.45 + jit(0.015));
        let lungs = [
            Ellipse {
                cy: lung_cy,
                cx: s * (0.29 + jit(0.01)),
                ry: lung_ry,
                rx: lung_rx,
            },
            Ellipse {
                cy: lung_cy,
                cx: s * (0.71 + jit(0.01)),
                ry: lung_ry,
                rx: lung_rx,
            },
        ];
        let heart_center = (s * (0.53 + jit(0.015)), s * (0.52 + jit(0.015)));
        let myo_outer = s * (0.12 + jit(0.008));
        let pool = myo_outer * (0.62 + jit(0.04));
        let pap_r = (s * 0.018).max(1.2);
        let papillary = circle(heart_center.0 + pool * 0.45, heart_center.1 - pool * 0.35, pap_r);
        let i_torso = 0.35 + jit(0.04);
        let i_lung = 0.05 + jit(0.02);
        let i_myo = 0.12 + jit(0.03);
        let i_blood = 0.80 + jit(0.05);
        let lesion = lesion.map(|l| {
            let mid = (myo_outer + pool) / 2.0;
            (
                Ellipse {
                    cy: heart_center.0 + mid * l.angle.sin(),
                    cx: heart_center.1 + mid * l.angle.cos(),
                    ry: s * l.radii.0,
                    rx: s * l.radii.1,
                },
                l.intensity_delta,
            )
        });
        Self {
            size,
            torso,
            lungs,
            heart_center,
            myo_outer,
            pool,
            papillary,
            lesion,
            i_torso,
            i_lung,
            i_myo,
            i_blood,
        }
    }

    fn render(&self) -> Tensor<f64> {
        let n = self.size;
        let (hy, hx) = self.heart_center;
        let outer = circle(hy, hx, self.myo_outer);
        let pool = circle(hy, hx, self.pool);
        Tensor::from_fn(&[1, n, n], |k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let mut v = lerp(0.0, self.i_torso, self.torso.coverage(i, j));
            for lung in &self.lungs {
                v = lerp(v, self.i_lung, lung.coverage(i, j));
            }
            let c_outer = outer.coverage(i, j);
            let c_pool = pool.coverage(i, j);
            v = lerp(v, self.i_myo, c_outer);
            v = lerp(v, self.i_blood, c_pool);
            v = lerp(v, self.i_myo, self.papillary.coverage(i, j));
            if let Some((lesion, delta)) = &self.lesion {
                let c = lesion.coverage(i, j);
                if c > 0.0 {
                    v += delta * c * c_outer * (1.0 - c_pool);
                }
            }
            v
        })
    }

    fn heart_mask(&self, margin: f64) -> Tensor<f64> {
        let n = self.size;
        let (hy, hx) = self.heart_center;
        let r = self.myo_outer + margin;
        Tensor::from_fn(&[1, n, n], |k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            if (i - hy).powi(2) + (j - hx).powi(2) <= r * r {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Clean anatomy image for `seed`; `lesion` adds the scar ellipse.
pub fn anatomy(seed: u64, size: usize, lesion: Option<&Lesion>) -> Result<Tensor<f64>> {
    if size < 32 {
        return Err(Error::Config(format!("anatomy size must be >= 32, got {size}")));
    }
    Ok(Anatomy::draw(seed, size, lesion).render())
}

/// Heart-centered disc mask (myocardium plus a 2-pixel margin).
pub fn heart_mask(seed: u64, size: usize) -> Tensor<f64> {
    Anatomy::draw(seed, size, None).heart_mask(2.0)
}

/// Ground-truth reference→frame field for one frame.
pub fn frame_field(spec: &PhantomSpec, heart_center: (f64, f64), frame_index: usize) -> DisplacementField<f64> {
    let (si, ap) = breathing_curve(&spec.breathing, frame_index);
    let n = spec.size;
    let sigma = n as f64 / 8.0;
    let (hy, hx) = heart_center;
    // amplitude 0.25·depth scaled by si/depth = 0.25·si
    let bump_amp = 0.25 * si;
    DisplacementField::from_fn(n, n, |i, j| {
        let r2 = (i as f64 - hy).powi(2) + (j as f64 - hx).powi(2);
        let bump = bump_amp * (-r2 / (2.0 * sigma * sigma)).exp();
        (si + bump, ap)
    })
}

/// Series power: mean squared intensity over every frame.
pub fn series_power(frames: &[Tensor<f64>]) -> f64 {
    let (sum, n) = frames.iter().fold((0.0, 0usize), |(s, n), f| {
        (s + f.data().iter().map(|v| v * v).sum::<f64>(), n + f.numel())
    });
    sum / n as f64
}

/// Add white Gaussian noise with variance `P·10^(−snr/10)`, `P` the series power.
pub fn add_series_noise(frames: &[Tensor<f64>], snr_db: f64, rng: &mut impl Rng) -> Vec<Tensor<f64>> {
    let sigma = crate::edge::noise_sigma(series_power(frames), snr_db);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    frames.iter().map(|f| f.map(|v| v + normal.sample(rng))).collect()
}

/// `10·log10(P_series / σ̂²)` with `σ̂²` the empirical variance of `noisy − clean`.
pub fn measured_snr_db(clean: &[Tensor<f64>], noisy: &[Tensor<f64>]) -> f64 {
    let p = series_power(clean);
    let resid: Vec<f64> = clean
        .iter()
        .zip(noisy)
        .flat_map(|(c, n)| c.data().iter().zip(n.data()).map(|(a, b)| b - a).collect::<Vec<_>>())
        .collect();
    let m = resid.iter().sum::<f64>() / resid.len() as f64;
    let var = resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / resid.len() as f64;
    10.0 * (p / var).log10()
}

pub fn generate(spec: &PhantomSpec) -> Result<GeneratedSeries> {
    spec.validate()?;
    let anat = Anatomy::draw(spec.anatomy_seed, spec.size, spec.lesion.as_ref());
    let clean_reference = anat.render();
    let gt_fields: Vec<_> = (0..spec.frames)
        .map(|j| frame_field(spec, anat.heart_center, j))
        .collect();
    let clean_frames = gt_fields
        .iter()
        .map(|f| warp_image(&clean_reference, f))
        .collect::<Result<Vec<_>>>()?;
    let (noisy_frames, snr_actual_db) = match spec.noise_snr_db {
        None => (clean_frames.clone(), vec![None; spec.frames]),
        Some(snr) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
            let noisy = add_series_noise(&clean_frames, snr, &mut rng);
            let per_frame = clean_frames
                .iter()
                .zip(&noisy)
                .map(|(c, n)| Some(measured_snr_db(std::slice::from_ref(c), std::slice::from_ref(n))))
                .collect();
            (noisy, per_frame)
        }
    };
    Ok(GeneratedSeries {
        clean_reference,
        clean_frames,
        noisy_frames,
        gt_fields,
        snr_actual_db,
        heart_mask: anat.heart_mask(2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: f64, snr: Option<f64>) -> PhantomSpec {
        PhantomSpec {
            size: 48,
            frames: 5,
            breathing: Breathing {
                depth_px: depth,
                period_frames: 4.0,
                shape_exponent: 1,
                hysteresis_phase: 0.0,
            },
            noise_snr_db: snr,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn curve_examples() {
        let zero = Breathing {
            depth_px: 0.0,
            period_frames: 5.0,
            shape_exponent: 2,
            hysteresis_phase: 0.7,
        };
        for f in 0..10 {
            assert_eq!(breathing_curve(&zero, f), (0.0, 0.0));
        }
        let b = Breathing {
            depth_px: 3.0,
            period_frames: 6.0,
            shape_exponent: 1,
            hysteresis_phase: 0.0,
        };
        let (si, ap) = breathing_curve(&b, 3);
        assert!((si - 3.0).abs() < 1e-12);
        assert!((ap - 1.2).abs() < 1e-12);
    }

    #[test]
    fn curve_higher_exponent() {
        let b = Breathing {
            depth_px: 5.0,
            period_frames: 7.0,
            shape_exponent: 3,
            hysteresis_phase: 0.4,
        };
        for f in [1usize, 2, 5, 11] {
            let x = PI * f as f64 / 7.0;
            let want_si = 5.0 * x.sin().powf(6.0);
            let want_ap = 2.0 * (x + 0.4).sin().powf(6.0);
            let (si, ap) = breathing_curve(&b, f);
            assert!((si - want_si).abs() < 1e-12);
            assert!((ap - want_ap).abs() < 1e-12);
        }
    }

    #[test]
    fn anatomy_is_deterministic_and_contrasted() {
        let a = anatomy(3, 64, None).unwrap();
        assert_eq!(a, anatomy(3, 64, None).unwrap());
        assert_ne!(a, anatomy(4, 64, None).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(anatomy(0, 16, None).is_err());
    }

    #[test]
    fn lesion_changes_only_its_ellipse() {
        let lesion = Lesion::default();
        let plain = anatomy(2, 96, None).unwrap();
        let scar = anatomy(2, 96, Some(&lesion)).unwrap();
        let anat = Anatomy::draw(2, 96, Some(&lesion));
        let (ell, _) = anat.lesion.unwrap();
        let mut changed = 0;
        for k in 0..plain.numel() {
            if plain.data()[k] != scar.data()[k] {
                changed += 1;
                let (i, j) = ((k / 96) as f64, (k % 96) as f64);
                assert!(ell.coverage(i, j) > 0.0);
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn zero_depth_noiseless_frames_equal_reference() {
        let s = generate(&small(0.0, None)).unwrap();
        for f in &s.clean_frames {
            assert_eq!(f, &s.clean_reference);
        }
        for f in &s.gt_fields {
            assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(s.noisy_frames, s.clean_frames);
    }

    #[test]
    fn clean_frames_round_trip_through_warp() {
        let s = generate(&small(3.0, Some(6.0))).unwrap();
        for (f, u) in s.clean_frames.iter().zip(&s.gt_fields) {
            assert_eq!(&warp_image(&s.clean_reference, u).unwrap(), f);
        }
        assert!(s.gt_fields[0].tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_at_zero_db_unit_power() {
        let frames = vec![Tensor::full(&[1, 200, 200], 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = add_series_noise(&frames, 0.0, &mut rng);
        let var = noisy[0].data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 40_000.0;
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(1.0, None);
        s.frames = 1;
        assert!(generate(&s).is_err());
        let mut s = small(-1.0, None);
        s.frames = 3;
        assert!(generate(&s).is_err());
        let mut s = small(1.0, None);
        s.breathing.period_frames = 0.0;
        assert!(generate(&s).is_err());
    }
}
