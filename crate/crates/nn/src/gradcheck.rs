//! Central finite-difference gradient oracle.
//!
//! Only forward evaluations are used here, so the check is independent of
//! every backward rule it verifies.

use crate::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Upper bound on perturbed coordinates per input (evenly strided).
    pub max_coords: usize,
    /// Gradient norm below which errors are measured absolutely.
    pub floor: f64,
    /// Skip coordinates whose one-sided differences disagree by more than
    /// this fraction of their magnitude (a ReLU kink inside the step).
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: 64, floor: 1e-6, kink_tol: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Norm-wise relative error `|analytic - numeric| / max(|analytic|, |numeric|, floor)` per input.
    /// The floor keeps inputs with a vanishing true gradient (a bias feeding an
    /// instance norm, say) from turning rounding noise into a unit error.
    pub relative_errors: Vec<f64>,
    /// Coordinates left out as non-differentiable, per input.
    pub skipped: Vec<usize>,
    /// Coordinates compared, per input.
    pub checked: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
}

/// Compares the backward pass of `f` against central differences.
///
/// `f` receives the graph and one differentiable leaf per input and must
/// return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let base = if cfg.kink_tol.is_some() { eval(inputs)? } else { 0.0 };
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut skipped = Vec::with_capacity(inputs.len());
    let mut checked = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut skip, mut used) = (0, 0);
        for j in coords(input.len(), cfg.max_coords) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if let Some(tol) = cfg.kink_tol {
                let (fwd, bwd) = ((plus - base) / cfg.step, (base - minus) / cfg.step);
                if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(cfg.floor) {
                    skip += 1;
                    continue;
                }
            }
            used += 1;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(cfg.floor);
        relative_errors.push(diff2.sqrt() / denom);
        skipped.push(skip);
        checked.push(used);
    }
    Ok(GradCheckReport { relative_errors, skipped, checked })
}
