use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::Series;
use crate::edge::EdgeDetector;
use crate::losses::{LossConfig, SimilarityMode};
use crate::model::{GroupInput, RegArch, RegistrationModel, Variant};
use crate::optim::{average_grads, Sgd};
use crate::phantom::{add_series_noise, series_power};
use crate::tensor::Tensor;
use crate::warp::{image_dims, DisplacementField};
use crate::{Error, Result};

// Named random sub-streams of one seed.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_VAL: u64 = 4;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// `None` disables noise augmentation.
    pub noise_center_db: Option<f64>,
    pub noise_halfwidth_db: f64,
    pub max_shift_px: usize,
    pub intensity_jitter_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_center_db: Some(11.0),
            noise_halfwidth_db: 3.5,
            max_shift_px: 2,
            intensity_jitter_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            noise_center_db: None,
            noise_halfwidth_db: 0.0,
            max_shift_px: 0,
            intensity_jitter_frac: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr_max: f64,
    /// Peak step size for the CC variants, whose loss is far larger than the
    /// edge loss; `None` uses `lr_max` for every variant.
    pub cc_lr_max: Option<f64>,
    pub lr_min: f64,
    pub momentum: f64,
    /// Group samples per SGD step.
    pub batch_size: usize,
    /// Smoothness weight; `None` takes the mode default.
    pub lambda: Option<f64>,
    pub k: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub snr_eval_levels: Vec<f64>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Validation loss every this many epochs (and at the last epoch).
    pub val_every: usize,
    pub arch: RegArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AimEd,
            epochs: 2500,
            lr_max: 0.5,
            cc_lr_max: Some(0.05),
            lr_min: 1e-4,
            momentum: 0.9,
            batch_size: 4,
            lambda: None,
            k: 14,
            seed: 0,
            augmentation: AugmentConfig::default(),
            snr_eval_levels: vec![11.0, 6.0, 1.0],
            grad_clip: None,
            val_every: 1,
            arch: RegArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let peak = self.peak_lr();
        if !(self.lr_min >= 0.0 && peak >= self.lr_min && peak.is_finite()) {
            return bad(format!("need lr_max >= lr_min >= 0, got {peak} and {}", self.lr_min));
        }
        if self.batch_size == 0 || self.k == 0 || self.val_every == 0 {
            return bad("batch_size, k and val_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        let a = &self.augmentation;
        if !(a.noise_halfwidth_db >= 0.0) || !(0.0..1.0).contains(&a.intensity_jitter_frac) {
            return bad("augmentation halfwidth must be >= 0 and jitter in [0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss_config().validate()
    }

    /// Step size at epoch 0 for the configured variant.
    pub fn peak_lr(&self) -> f64 {
        match (self.variant.mode(), self.cc_lr_max) {
            (SimilarityMode::Cc, Some(lr)) => lr,
            _ => self.lr_max,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut c = LossConfig::for_mode(self.variant.mode());
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        c
    }
}

/// Cosine-annealed learning rate of `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    super::cosine_lr(epoch, cfg.epochs, cfg.peak_lr(), cfg.lr_min)
}

/// Integer translation with zero fill: `out(i, j) = img(i − dr, j − dc)`.
pub fn shift_image(img: &Tensor<f64>, dr: isize, dc: isize) -> Tensor<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Tensor::from_fn(img.shape(), |k| {
        let i = (k / w) as isize - dr;
        let j = (k % w) as isize - dc;
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            img.data()[i as usize * w + j as usize]
        }
    })
}

/// Random shifts of the sources, intensity jitter of target and sources,
/// then fresh white noise on both. The clean target is passed through.
pub fn augment(sample: &GroupInput<f64>, cfg: &AugmentConfig, rng: &mut impl Rng) -> GroupInput<f64> {
    let s = cfg.max_shift_px as i64;
    let mut sources: Vec<Tensor<f64>> = sample
        .sources
        .iter()
        .map(|f| {
            if s == 0 {
                return f.clone();
            }
            let dr = rng.random_range(-s..=s) as isize;
            let dc = rng.random_range(-s..=s) as isize;
            shift_image(f, dr, dc)
        })
        .collect();
    let mut target = sample.target_noisy.clone();
    let f = cfg.intensity_jitter_frac;
    if f > 0.0 {
        for img in std::iter::once(&mut target).chain(sources.iter_mut()) {
            let c = 1.0 + rng.random_range(-f..f);
            *img = img.map(|v| v * c);
        }
    }
    if let Some(center) = cfg.noise_center_db {
        let hw = cfg.noise_halfwidth_db;
        let snr = if hw > 0.0 { rng.random_range(center - hw..=center + hw) } else { center };
        let mut all = vec![target];
        all.append(&mut sources);
        let power = series_power(&all);
        if power > 0.0 {
            all = add_series_noise(&all, snr, rng);
        }
        target = all.remove(0);
        sources = all;
    }
    GroupInput {
        target_noisy: target,
        sources,
        clean_target: sample.clean_target.clone(),
    }
}

/// Clean group sample with frame `target` as target and `sources` as sources.
fn clean_sample(clean: &[Tensor<f64>], target: usize, sources: &[usize]) -> GroupInput<f64> {
    GroupInput {
        target_noisy: clean[target].clone(),
        sources: sources.iter().map(|&j| clean[j].clone()).collect(),
        clean_target: Some(clean[target].clone()),
    }
}

/// Random target and K distinct sources, kept in frame order.
fn draw_indices(frames: usize, k: usize, rng: &mut impl Rng) -> (usize, Vec<usize>) {
    let target = rng.random_range(0..frames);
    let mut others: Vec<usize> = (0..frames).filter(|&j| j != target).collect();
    others.shuffle(rng);
    let mut src = others[..k].to_vec();
    src.sort_unstable();
    (target, src)
}

fn to_f32(g: &GroupInput<f64>) -> GroupInput<f32> {
    GroupInput {
        target_noisy: g.target_noisy.cast(),
        sources: g.sources.iter().map(|s| s.cast()).collect(),
        clean_target: g.clean_target.as_ref().map(|c| c.cast()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub final_model: RegistrationModel<f32>,
    /// Lowest validation loss; equals the final model without a validation set.
    pub best_model: RegistrationModel<f32>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

fn clean_frames_of(set: &[Series], k: usize) -> Result<Vec<Vec<Tensor<f64>>>> {
    set.iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() < k + 1 {
                return Err(Error::Data(format!("series {i} has {} frames, K={k} needs {}", s.len(), k + 1)));
            }
            s.clean_frames()?
                .ok_or_else(|| Error::Data(format!("series {i} has no clean reference; training needs one")))
        })
        .collect()
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = (max_norm / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Minibatch SGD with momentum and cosine annealing. Each epoch draws one
/// augmented group sample per training series. Deterministic given the
/// seed; `on_epoch` sees every log row as it is produced.
pub fn train(
    train_set: &[Series],
    val_set: &[Series],
    cfg: &TrainConfig,
    detector: Option<&EdgeDetector<f32>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.variant.mode() == crate::losses::SimilarityMode::Edge && detector.is_none() {
        return Err(Error::Config(format!("variant {} requires an edge detector", cfg.variant)));
    }
    let train_clean = clean_frames_of(train_set, cfg.k)?;
    let val_clean = clean_frames_of(val_set, cfg.k)?;
    let loss_cfg = cfg.loss_config();

    let mut model = RegistrationModel::<f32>::init(cfg.arch.clone(), stream(cfg.seed, STREAM_INIT).random());
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);

    // Fixed validation samples: one rotation per series at the center SNR.
    let mut val_rng = stream(cfg.seed, STREAM_VAL);
    let val_aug = AugmentConfig {
        noise_halfwidth_db: 0.0,
        max_shift_px: 0,
        intensity_jitter_frac: 0.0,
        ..cfg.augmentation.clone()
    };
    let val_samples: Vec<GroupInput<f32>> = val_clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let target = i % c.len();
            let src: Vec<usize> = (0..c.len()).filter(|&j| j != target).take(cfg.k).collect();
            to_f32(&augment(&clean_sample(c, target, &src), &val_aug, &mut val_rng))
        })
        .collect();
    let val_loss = |m: &RegistrationModel<f32>| -> Result<Option<f64>> {
        if val_samples.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for s in &val_samples {
            total += m.loss_value(s, &loss_cfg, cfg.variant, detector)?;
        }
        Ok(Some(total / val_samples.len() as f64))
    };

    let mut opt = Sgd::new(&model.params, cfg.momentum);
    let mut best: Option<(f64, usize, RegistrationModel<f32>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut per_sample = Vec::with_capacity(batch.len());
            for &si in batch {
                let (target, src) = draw_indices(train_clean[si].len(), cfg.k, &mut data_rng);
                let sample = augment(&clean_sample(&train_clean[si], target, &src), &cfg.augmentation, &mut aug_rng);
                let (loss, grads) = model.training_loss(&to_f32(&sample), &loss_cfg, cfg.variant, detector)?;
                let finite = loss.is_finite() && grads.iter().all(|g| g.is_finite());
                if !finite {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {loss} at epoch {epoch}, batch {b}: series {si}, target {target}, sources {src:?}"
                    )));
                }
                loss_sum += loss;
                n += 1;
                per_sample.push(grads);
            }
            let mut grads = average_grads(&per_sample);
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            opt.step(&mut model.params, &grads, lr);
        }
        let is_last = epoch + 1 == cfg.epochs;
        let vl = if epoch % cfg.val_every == 0 || is_last { val_loss(&model)? } else { None };
        if let Some(v) = vl {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                best = Some((v, epoch, model.clone()));
            }
        }
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss: vl,
            lr,
        };
        on_epoch(&row);
        log.push(row);
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        log,
    })
}

/// Register every other frame of `series` onto frame `target`; returns the
/// registered mean and one field per source in frame order.
pub fn register(
    model: &RegistrationModel<f32>,
    series: &Series,
    target: usize,
) -> Result<(Tensor<f64>, Vec<DisplacementField<f64>>)> {
    let n = series.len();
    if target >= n || n < 2 {
        return Err(Error::Config(format!("target index {target} invalid for a series of {n} frames")));
    }
    image_dims(&series.frames[target])?;
    let gin = GroupInput {
        target_noisy: series.frames[target].cast::<f32>(),
        sources: (0..n).filter(|&j| j != target).map(|j| series.frames[j].cast()).collect(),
        clean_target: None,
    };
    let (img, fields) = model.forward_group(&gin)?;
    Ok((img.cast(), fields.iter().map(|f| f.cast()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 11,
            lr_max: 0.3,
            lr_min: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.3);
        assert!((lr_schedule(10, &cfg) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(5, &cfg) - 0.2).abs() < 1e-15);
        for e in 1..11 {
            assert!(lr_schedule(e, &cfg) <= lr_schedule(e - 1, &cfg));
        }
    }

    #[test]
    fn shift_moves_content_down() {
        let img = Tensor::from_fn(&[1, 4, 3], |k| k as f64 + 1.0);
        let s = shift_image(&img, 2, 0);
        for i in 0..4 {
            for j in 0..3 {
                let want = if i < 2 { 0.0 } else { img.at(&[0, i - 2, j]) };
                assert_eq!(s.at(&[0, i, j]), want);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr_min: 1.0, lr_max: 0.5, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
