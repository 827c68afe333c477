//! Central-difference gradient checking. This is the reference the autodiff
//! engine is tested against: the loss is re-evaluated through a fresh forward
//! pass with single scalars perturbed, never through the tape's backward.

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;

use super::tape::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn describe(&self) -> String {
        match &self.worst {
            Some((name, flat, a, n)) => format!(
                "max rel err {:.3e} over {} probes (worst: {name}[{flat}] analytic={a:.6e} numeric={n:.6e})",
                self.max_rel_err, self.checked
            ),
            None => format!("max rel err {:.3e} over {} probes", self.max_rel_err, self.checked),
        }
    }
}

fn with_poked(params: &ParamSet, name: &str, flat: usize, delta: f64) -> ParamSet {
    let mut out = params.clone();
    let mut v = params.get(name).to_owned();
    {
        let s = v.as_slice_mut().expect("parameters are standard layout");
        s[flat] += delta;
    }
    out.set(name, v.into_shared());
    out
}

/// Compares analytic gradients against central differences of `loss`.
/// Probes `samples_per_tensor` positions of each named tensor (all positions
/// when the tensor is small). Relative error uses max(|analytic|, |numeric|)
/// as denominator, falling back to absolute error when both are below 1e-6.
pub fn check_named_gradients(
    params: &ParamSet,
    analytic: &IndexMap<String, ArrayD<f64>>,
    loss: &mut dyn FnMut(&ParamSet) -> f64,
    h: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (name, grad) in analytic {
        let n = grad.len();
        if n == 0 {
            continue;
        }
        let flat_grad = grad.as_slice().expect("gradients are standard layout");
        let positions: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            let mut rng = crate::rng::stream(seed, name, 0);
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for flat in positions {
            let up = loss(&with_poked(params, name, flat, h));
            let dn = loss(&with_poked(params, name, flat, -h));
            let numeric = (up - dn) / (2.0 * h);
            let a = flat_grad[flat];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-6 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), flat, a, numeric));
            }
        }
    }
    report
}
