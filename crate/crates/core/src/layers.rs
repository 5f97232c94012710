//! Convolution layer descriptors shared by the registration network and the
//! edge detector.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::Result;

/// One 2-D convolution with bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel: 3,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    /// He-uniform weights, zero bias.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound > 0");
        let w = Tensor::from_fn(&self.weight_shape(), |_| T::from_f64(dist.sample(rng)));
        (w, Tensor::zeros(&[self.out_ch]))
    }

    pub fn zeros<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        (Tensor::zeros(&self.weight_shape()), Tensor::zeros(&[self.out_ch]))
    }
}

/// Graph handles for one layer's weight and bias.
#[derive(Clone, Copy)]
pub struct ConvVars<'g, T: Real> {
    pub weight: Var<'g, T>,
    pub bias: Var<'g, T>,
}

impl<'g, T: Real> ConvVars<'g, T> {
    pub fn apply(&self, spec: &ConvSpec, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), spec.stride, spec.padding())?)
    }
}

/// Register flat `[w0, b0, w1, b1, ...]` parameters on a graph, either as
/// trainable leaves or as frozen constants.
pub fn bind<'g, T: Real>(graph: &'g Graph<T>, params: &[Tensor<T>], trainable: bool) -> Vec<ConvVars<'g, T>> {
    params
        .chunks(2)
        .map(|wb| {
            let mk = |t: &Tensor<T>| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            };
            ConvVars {
                weight: mk(&wb[0]),
                bias: mk(&wb[1]),
            }
        })
        .collect()
}

/// Gradients of bound layers, in the same flat order as the parameters.
pub fn collect_grads<T: Real>(grads: &crate::tensor::Gradients<T>, vars: &[ConvVars<'_, T>]) -> Vec<Tensor<T>> {
    vars.iter()
        .flat_map(|v| [grads.wrt(&v.weight), grads.wrt(&v.bias)])
        .collect()
}
