// Finite-difference checks of every differentiable op and of the full
// training objective, in 64-bit, over ten seeds each. The acceptance
// harness reuses the sweeps below.

use aimreg::edge::{EdgeArch, EdgeDetector};
use aimreg::losses::{cc_loss, mse_loss, smoothness_loss, LossConfig, SimilarityMode};
use aimreg::model::{GroupInput, RegArch, RegistrationModel, Variant};
use aimreg::tensor::{gradient_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
// The full network has thousands of leaky-ReLU and bilinear kinks; a smaller
// step keeps central differences from straddling one.
const E2E_H: f64 = 1e-7;

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted<'g>(y: Var<'g, f64>, seed: u64) -> aimreg::tensor::Result<Var<'g, f64>> {
    let w = y.graph().constant(rand_t(&y.shape(), seed ^ 0xabc, -1.0, 1.0));
    Ok(y.mul(&w)?.sum_all())
}

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> aimreg::tensor::Result<Var<'g, f64>>,
{
    let r = gradient_check(f, x, H, FLOOR, None).unwrap();
    assert!(
        r.max_rel_error < OP_TOL,
        "{name}: rel error {:.3e} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst_index,
        r.analytic,
        r.numeric
    );
}

pub fn elementwise_ops() {
    for s in 0..SEEDS {
        let x = rand_t(&[2, 3, 4], s, -2.0, 2.0);
        let other = rand_t(&[2, 3, 4], s + 100, 0.5, 2.0);
        check("add", &x, |g, v| weighted(v.add(&g.constant(other.clone()))?, s));
        check("sub", &x, |g, v| weighted(g.constant(other.clone()).sub(&v)?, s));
        check("mul", &x, |g, v| weighted(v.mul(&g.constant(other.clone()))?, s));
        check("div num", &x, |g, v| weighted(v.div(&g.constant(other.clone()))?, s));
        check("div den", &other, |g, v| weighted(g.constant(x.clone()).div(&v)?, s));
        check("scale", &x, |_, v| weighted(v.scale(-1.7), s));
        check("offset", &x, |_, v| weighted(v.offset(0.3).square(), s));
        check("square", &x, |_, v| weighted(v.square(), s));
        check("sqrt_eps", &x, |_, v| weighted(v.square().sqrt_eps(1e-3), s));
        check("sigmoid", &x, |_, v| weighted(v.sigmoid(), s));
        check("mean_all", &x, |_, v| Ok(v.square().mean_all()));
        // keep away from the kink
        let xr = x.map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
        check("leaky_relu", &xr, |_, v| weighted(v.leaky_relu(0.2), s));
    }
}

pub fn conv2d_all_inputs() {
    for s in 0..SEEDS {
        let stride = 1 + (s % 2) as usize;
        let x = rand_t(&[2, 3, 6, 7], s, -1.0, 1.0);
        let k = rand_t(&[4, 3, 3, 3], s + 1, -0.5, 0.5);
        let b = rand_t(&[4], s + 2, -0.5, 0.5);
        check("conv input", &x, |g, v| {
            weighted(v.conv2d(&g.constant(k.clone()), Some(&g.constant(b.clone())), stride, 1)?, s)
        });
        check("conv kernel", &k, |g, v| {
            weighted(g.constant(x.clone()).conv2d(&v, Some(&g.constant(b.clone())), stride, 1)?, s)
        });
        check("conv bias", &b, |g, v| {
            weighted(g.constant(x.clone()).conv2d(&g.constant(k.clone()), Some(&v), stride, 1)?, s)
        });
    }
}

pub fn structural_ops() {
    for s in 0..SEEDS {
        let x = rand_t(&[2, 2, 5, 6], s, -1.0, 1.0);
        check("upsample2x", &x, |_, v| weighted(v.upsample2x()?, s));
        check("box_sum", &x, |_, v| weighted(v.box_sum(3)?, s));
        check("diff rows", &x, |_, v| weighted(v.diff(2)?, s));
        check("diff cols", &x, |_, v| weighted(v.diff(3)?, s));
        check("batch_mean", &x, |_, v| weighted(v.batch_mean()?, s));
        let y = rand_t(&[2, 1, 5, 6], s + 7, -1.0, 1.0);
        check("concat", &x, |g, v| weighted(g.concat_channels(&[v, g.constant(y.clone())])?, s));
        let z = rand_t(&[2, 2, 5, 6], s + 8, -1.0, 1.0);
        check("stack", &x, |g, v| weighted(g.stack_batch(&[g.constant(z.clone()), v])?, s));
    }
}

pub fn warp_source_and_field() {
    for s in 0..SEEDS {
        let src = rand_t(&[2, 1, 7, 8], s, -1.0, 1.0);
        // fractional parts kept away from the bilinear kinks at integers
        let mut field = rand_t(&[2, 2, 7, 8], s + 50, -2.0, 2.0);
        for v in field.data_mut() {
            let f = *v - v.floor();
            if !(0.05..0.95).contains(&f) {
                *v += 0.3;
            }
        }
        check("warp source", &src, |g, v| weighted(v.warp(&g.constant(field.clone()))?, s));
        check("warp field", &field, |g, v| weighted(g.constant(src.clone()).warp(&v)?, s));
    }
}

pub fn losses() {
    let cfg = LossConfig::default();
    for s in 0..SEEDS {
        let t = rand_t(&[1, 1, 12, 12], s, 0.0, 1.0);
        let w = rand_t(&[1, 1, 12, 12], s + 1, 0.0, 1.0);
        check("cc", &w, |g, v| Ok(cc_loss(&g.constant(t.clone()), &v, &cfg).expect("cc")));
        check("mse", &w, |g, v| Ok(mse_loss(&v, &g.constant(t.clone())).expect("mse")));
        let u = rand_t(&[2, 2, 6, 5], s + 2, -1.0, 1.0);
        check("smoothness", &u, |_, v| Ok(smoothness_loss(&v).expect("smooth")));
    }
}

pub fn edge_detector_input() {
    for s in 0..SEEDS {
        let det = EdgeDetector::<f64>::init(EdgeArch::default(), s);
        let x = rand_t(&[1, 1, 8, 8], s + 3, -1.0, 1.0);
        let r = gradient_check(
            |_, v| Ok(det.detect_var(&v).expect("detect").square().sum_all()),
            &x,
            // small step: fewer leaky-ReLU kink crossings across many units
            1e-7,
            FLOOR,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "detector seed {s}: {:?}", r);
    }
}

/// Analytic parameter gradients of the training loss against central
/// differences on sampled coordinates of every layer.
fn end_to_end(variant: Variant, seed: u64) -> f64 {
    let arch = RegArch::with_channels(&[4, 4], &[4, 4], &[4]);
    let mut model = RegistrationModel::<f64>::init(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    // non-zero flow layer so the warp sees fractional displacements
    let n = model.params.len();
    for v in model.params[n - 2].data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[1, 12, 12], |_| rng.random_range(0.0..1.0));
    let gin = GroupInput {
        target_noisy: img(&mut rng),
        sources: vec![img(&mut rng), img(&mut rng)],
        clean_target: Some(img(&mut rng)),
    };
    let det = EdgeDetector::<f64>::init(EdgeArch::default(), seed);
    let det = (variant.mode() == SimilarityMode::Edge).then_some(&det);
    let cfg = LossConfig::for_mode(variant.mode());
    let (_, grads) = model.training_loss(&gin, &cfg, variant, det).unwrap();
    let mut worst: f64 = 0.0;
    for pi in 0..model.params.len() {
        for _ in 0..3 {
            let i = rng.random_range(0..model.params[pi].numel());
            let orig = model.params[pi].data()[i];
            model.params[pi].data_mut()[i] = orig + E2E_H;
            let fp = model.loss_value(&gin, &cfg, variant, det).unwrap();
            model.params[pi].data_mut()[i] = orig - E2E_H;
            let fm = model.loss_value(&gin, &cfg, variant, det).unwrap();
            model.params[pi].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * E2E_H);
            let a = grads[pi].data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

pub fn training_loss_end_to_end() {
    for s in 0..SEEDS {
        for v in Variant::ALL {
            let e = end_to_end(v, s);
            assert!(e < E2E_TOL, "{v} seed {s}: rel error {e:.3e}");
        }
    }
}

/// Every sweep, in order, by name.
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("conv2d_all_inputs", conv2d_all_inputs),
    ("structural_ops", structural_ops),
    ("warp_source_and_field", warp_source_and_field),
    ("losses", losses),
    ("edge_detector_input", edge_detector_input),
    ("training_loss_end_to_end", training_loss_end_to_end),
];

#[cfg(test)]
mod tests {
    #[test]
    fn elementwise_ops() {
        super::elementwise_ops();
    }

    #[test]
    fn conv2d_all_inputs() {
        super::conv2d_all_inputs();
    }

    #[test]
    fn structural_ops() {
        super::structural_ops();
    }

    #[test]
    fn warp_source_and_field() {
        super::warp_source_and_field();
    }

    #[test]
    fn losses() {
        super::losses();
    }

    #[test]
    fn edge_detector_input() {
        super::edge_detector_input();
    }

    #[test]
    fn training_loss_end_to_end() {
        super::training_loss_end_to_end();
    }
}
