//! Central finite-difference checks for graph-built functions in `f64`.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the reverse sweep it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative discrepancy over all checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate with the largest discrepancy: (input index, element index,
    /// analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Settings for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor·max(1, |f|))` as
    /// denominator, so round-off in large-valued functions is not mistaken
    /// for a gradient error.
    pub floor: f64,
    /// Upper bound on coordinates checked per input (evenly strided).
    pub max_per_input: usize,
    /// When below `step`, a coordinate whose differences at `h` and `h/2`
    /// disagree is re-measured at `h/10`, down to this step. Guards against
    /// kinks (leaky ReLU) and sharp curvature near the evaluation point.
    pub min_step: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_per_input: 64,
            min_step: 1e-5,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh graph and the leaves for `inputs` (all created with
/// [`Graph::param`]) and must return a scalar.
pub fn check_gradients<F>(settings: GradCheck, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let floor = settings.floor * g.value(out).item()?.abs().max(1.0);
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let stride = n.div_ceil(settings.max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[e]);
            let original = work[i].data()[e];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[e] = original + h;
                let plus = eval(&work)?;
                work[i].data_mut()[e] = original - h;
                let minus = eval(&work)?;
                work[i].data_mut()[e] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut h = settings.step;
            let mut numeric = central(h)?;
            while h / 10.0 >= settings.min_step * (1.0 - 1e-9) {
                let half = central(h / 2.0)?;
                let spread = (numeric - half).abs() / numeric.abs().max(half.abs()).max(floor);
                if spread <= 1e-4 {
                    break;
                }
                h /= 10.0;
                numeric = central(h)?;
            }
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e, analytic, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
