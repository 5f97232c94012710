use super::{Graph, Result, Tensor, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the taped gradient of scalar `f` at `x` against central
/// differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; `floor` keeps
/// coordinates with vanishing gradient from dominating. When `coords` is
/// `Some`, only those flat indices are checked.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64, floor: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let y = f(&g, xv)?;
        y.backward()?.wrt(&xv)
    };
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(p.clone());
        Ok(f(&g, xv)?.value().item())
    };
    let all: Vec<usize>;
    let idx = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst.max_rel_error || (i == idx[0] && rel == 0.0) {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}
