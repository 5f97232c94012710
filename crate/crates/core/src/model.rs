//! Displacement network and the four registration variants.
//!
//! One encoder-decoder CNN maps a (target, source) pair to a dense
//! displacement field. For K sources the same parameters are evaluated on K
//! pairs stacked along the batch axis, so there is exactly one parameter set
//! regardless of K. The AiM variants average the K warped sources with a
//! parameter-free mean layer before computing similarity; the VxM variants
//! score every warped source on its own.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::EdgeDetector;
use crate::layers::{self, ConvSpec, ConvVars};
use crate::losses::{objective_group, objective_pairwise, LossConfig, SimilarityMode};
use crate::pipeline::{normalize, stats};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::warp::{image_dims, DisplacementField};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vxm-cc")]
    VxmCc,
    #[serde(rename = "vxm-ed")]
    VxmEd,
    #[serde(rename = "aim-cc")]
    AimCc,
    #[serde(rename = "aim-ed")]
    AimEd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::VxmCc, Variant::VxmEd, Variant::AimCc, Variant::AimEd];

    pub fn is_group(self) -> bool {
        matches!(self, Variant::AimCc | Variant::AimEd)
    }

    pub fn mode(self) -> SimilarityMode {
        match self {
            Variant::VxmCc | Variant::AimCc => SimilarityMode::Cc,
            Variant::VxmEd | Variant::AimEd => SimilarityMode::Edge,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::VxmCc => "vxm-cc",
            Variant::VxmEd => "vxm-ed",
            Variant::AimCc => "aim-cc",
            Variant::AimEd => "aim-ed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected vxm-cc|vxm-ed|aim-cc|aim-ed)")))
    }
}

/// Encoder-decoder layout.
///
/// Encoder layers downsample by 2 each. Decoder layer `i` runs at the
/// current resolution, is upsampled 2× and concatenated with the matching
/// encoder output (the last decoder layer concatenates the network input).
/// `extra` layers run at full resolution; `flow` emits the 2-channel field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegArch {
    pub encoder: Vec<ConvSpec>,
    pub decoder: Vec<ConvSpec>,
    pub extra: Vec<ConvSpec>,
    pub flow: ConvSpec,
    pub slope: f64,
}

impl Default for RegArch {
    fn default() -> Self {
        Self::with_channels(&[16, 32, 32, 32], &[32, 32, 32, 32], &[16, 16])
    }
}

impl RegArch {
    pub fn with_channels(enc: &[usize], dec: &[usize], extra: &[usize]) -> Self {
        assert_eq!(enc.len(), dec.len(), "decoder must mirror encoder depth");
        let mut encoder = Vec::new();
        let mut c = 2;
        for (i, &e) in enc.iter().enumerate() {
            encoder.push(ConvSpec::new(&format!("enc{i}"), c, e, 2));
            c = e;
        }
        let mut skip_ch: Vec<usize> = vec![2];
        skip_ch.extend_from_slice(&enc[..enc.len() - 1]);
        let mut decoder = Vec::new();
        for (i, &d) in dec.iter().enumerate() {
            decoder.push(ConvSpec::new(&format!("dec{i}"), c, d, 1));
            c = d + skip_ch[skip_ch.len() - 1 - i];
        }
        let mut extras = Vec::new();
        for (i, &x) in extra.iter().enumerate() {
            extras.push(ConvSpec::new(&format!("extra{i}"), c, x, 1));
            c = x;
        }
        Self {
            encoder,
            decoder,
            extra: extras,
            flow: ConvSpec::new("flow", c, 2, 1),
            slope: 0.2,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvSpec> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.extra)
            .chain(std::iter::once(&self.flow))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(ConvSpec::param_count).sum()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder.len()
    }
}

/// Parameters θ shared by every branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationModel<T> {
    pub arch: RegArch,
    /// Flat `[w, b]` pairs in [`RegArch::layers`] order.
    pub params: Vec<Tensor<T>>,
}

/// Target, K sources and, for training, the clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupInput<T> {
    pub target_noisy: Tensor<T>,
    pub sources: Vec<Tensor<T>>,
    pub clean_target: Option<Tensor<T>>,
}

impl<T: Real> GroupInput<T> {
    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (h, w) = image_dims(&self.target_noisy)?;
        if self.sources.is_empty() {
            return Err(Error::Config("group input needs at least one source".into()));
        }
        for s in self.sources.iter().chain(self.clean_target.as_ref()) {
            if image_dims(s)? != (h, w) {
                return Err(Error::Config(format!(
                    "frame size mismatch: target {h}x{w}, got {:?}",
                    s.shape()
                )));
            }
        }
        Ok((h, w))
    }
}

/// Graph outputs of one group forward pass.
pub struct GroupForward<'g, T: Real> {
    /// `[K,1,H,W]` warped sources.
    pub warped: Var<'g, T>,
    /// `[K,2,H,W]` displacement fields.
    pub fields: Var<'g, T>,
}

impl<T: Real> RegistrationModel<T> {
    /// Random init with the flow layer zeroed, so the initial field is zero.
    pub fn init(arch: RegArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow_name = arch.flow.name.clone();
        let params = arch
            .layers()
            .flat_map(|l| {
                let (w, b) = if l.name == flow_name { l.zeros::<T>() } else { l.init::<T>(&mut rng) };
                [w, b]
            })
            .collect();
        Self { arch, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> RegistrationModel<U> {
        RegistrationModel {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.arch.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "spatial size {h}x{w} is not divisible by {m}; crop or pad first"
            )));
        }
        Ok(())
    }

    /// `[K,2,H,W]` network input: normalized target and normalized source per branch.
    fn pair_batch(&self, gin: &GroupInput<T>) -> Result<Tensor<T>> {
        let (h, w) = gin.dims()?;
        self.check_size(h, w)?;
        let t = normalize(&gin.target_noisy).0;
        let mut data = Vec::with_capacity(gin.k() * 2 * h * w);
        for s in &gin.sources {
            data.extend_from_slice(t.data());
            data.extend_from_slice(normalize(s).0.data());
        }
        Ok(Tensor::new(&[gin.k(), 2, h, w], data)?)
    }

    fn network<'g>(&self, vars: &[ConvVars<'g, T>], input: &Var<'g, T>) -> Result<Var<'g, T>> {
        let a = &self.arch;
        let slope = T::from_f64(a.slope);
        let mut vi = vars.iter();
        let mut skips = vec![*input];
        let mut h = *input;
        for spec in &a.encoder {
            h = vi.next().expect("bound").apply(spec, &h)?.leaky_relu(slope);
            skips.push(h);
        }
        for (i, spec) in a.decoder.iter().enumerate() {
            h = vi.next().expect("bound").apply(spec, &h)?.leaky_relu(slope);
            h = h.upsample2x()?;
            let skip = skips[skips.len() - 2 - i];
            h = input.graph().concat_channels(&[h, skip])?;
        }
        for spec in &a.extra {
            h = vi.next().expect("bound").apply(spec, &h)?.leaky_relu(slope);
        }
        vi.next().expect("bound").apply(&a.flow, &h)
    }

    /// Bind θ on `graph`, trainable or frozen.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Vec<ConvVars<'g, T>> {
        layers::bind(graph, &self.params, trainable)
    }

    /// Run all K branches with shared parameters and warp each source.
    pub fn forward_graph<'g>(
        &self,
        graph: &'g Graph<T>,
        vars: &[ConvVars<'g, T>],
        gin: &GroupInput<T>,
    ) -> Result<GroupForward<'g, T>> {
        let (h, w) = gin.dims()?;
        let input = graph.constant(self.pair_batch(gin)?);
        let fields = self.network(vars, &input)?;
        let src = Tensor::stack0(&gin.sources)?.reshape(&[gin.k(), 1, h, w])?;
        let warped = graph.constant(src).warp(&fields)?;
        Ok(GroupForward { warped, fields })
    }

    /// Displacement field registering `source` onto `target`.
    pub fn predict_displacement(&self, target: &Tensor<T>, source: &Tensor<T>) -> Result<DisplacementField<T>> {
        let gin = GroupInput {
            target_noisy: target.clone(),
            sources: vec![source.clone()],
            clean_target: None,
        };
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let input = g.constant(self.pair_batch(&gin)?);
        let u = self.network(&vars, &input)?;
        let t = (*u.value()).clone();
        DisplacementField::new(t)
    }

    /// Inference: register every source to the noisy target and average.
    /// The clean target is never read.
    pub fn forward_group(&self, gin: &GroupInput<T>) -> Result<(Tensor<T>, Vec<DisplacementField<T>>)> {
        let (h, w) = gin.dims()?;
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let fwd = self.forward_graph(&g, &vars, gin)?;
        let mean = fwd.warped.batch_mean()?;
        let registered = (*mean.value()).clone().reshape(&[1, h, w])?;
        let fields_t = fwd.fields.value();
        let fields = (0..gin.k())
            .map(|j| DisplacementField::new(fields_t.index_axis0(j)))
            .collect::<Result<_>>()?;
        Ok((registered, fields))
    }

    /// Training objective of `variant` on one group sample, recorded on `graph`.
    pub fn loss_graph<'g>(
        &self,
        graph: &'g Graph<T>,
        vars: &[ConvVars<'g, T>],
        gin: &GroupInput<T>,
        cfg: &LossConfig,
        variant: Variant,
        detector: Option<&EdgeDetector<T>>,
    ) -> Result<Var<'g, T>> {
        let clean = gin
            .clean_target
            .as_ref()
            .ok_or_else(|| Error::Data("training needs the clean target".into()))?;
        let mode = variant.mode();
        if mode == SimilarityMode::Edge && detector.is_none() {
            return Err(Error::Config(format!("variant {variant} requires an edge detector")));
        }
        let (h, w) = gin.dims()?;
        let k = gin.k();
        let fwd = self.forward_graph(graph, vars, gin)?;
        // Edge maps are computed on images normalized by the clean target's
        // statistics; CC is affine invariant and sees raw intensities.
        let (shift, scale) = match mode {
            SimilarityMode::Cc => (T::zero(), T::one()),
            SimilarityMode::Edge => {
                let (m, s) = stats(clean);
                (-m, T::one() / s)
            }
        };
        let to_domain = |x: Var<'g, T>| {
            if mode == SimilarityMode::Cc {
                x
            } else {
                x.offset(shift).scale(scale)
            }
        };
        if variant.is_group() {
            let t = graph.constant(clean.clone().reshape(&[1, 1, h, w])?);
            let mean = fwd.warped.batch_mean()?;
            objective_group(&to_domain(t), &to_domain(mean), &fwd.fields, cfg, mode, detector)
        } else {
            let mut rep = Vec::with_capacity(k * h * w);
            for _ in 0..k {
                rep.extend_from_slice(clean.data());
            }
            let t = graph.constant(Tensor::new(&[k, 1, h, w], rep)?);
            objective_pairwise(&to_domain(t), &to_domain(fwd.warped), &fwd.fields, cfg, mode, detector)
        }
    }

    /// Loss value and gradient with respect to θ.
    pub fn training_loss(
        &self,
        gin: &GroupInput<T>,
        cfg: &LossConfig,
        variant: Variant,
        detector: Option<&EdgeDetector<T>>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let g = Graph::new();
        let vars = self.bind(&g, true);
        let loss = self.loss_graph(&g, &vars, gin, cfg, variant, detector)?;
        let value = loss.value().item().as_f64();
        let grads = loss.backward()?;
        Ok((value, layers::collect_grads(&grads, &vars)))
    }

    /// Loss value only, without recording gradients.
    pub fn loss_value(
        &self,
        gin: &GroupInput<T>,
        cfg: &LossConfig,
        variant: Variant,
        detector: Option<&EdgeDetector<T>>,
    ) -> Result<f64> {
        let g = Graph::new();
        let vars = self.bind(&g, false);
        let loss = self.loss_graph(&g, &vars, gin, cfg, variant, detector)?;
        let v = loss.value().item().as_f64();
        Ok(v)
    }
}
