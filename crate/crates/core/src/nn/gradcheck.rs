//! Central finite-difference verification of analytic gradients.
//!
//! Two entry points: [`grad_check`] perturbs every coordinate of a single
//! input tensor (cheap ops), [`grad_check_param`] perturbs chosen coordinates
//! of one named parameter under a full model forward (whole-model checks,
//! where exhaustive probing would be quadratic).

use super::{NnError, ParamSet, Tensor, Var};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (analytic.abs() + numeric.abs()).max(1e-8);
        self.max_abs_diff = self.max_abs_diff.max(abs);
        self.max_rel_diff = self.max_rel_diff.max(rel);
        self.coords_checked += 1;
    }

    /// Fold another report in, keeping the worst disagreement.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_abs_diff = self.max_abs_diff.max(other.max_abs_diff);
        self.max_rel_diff = self.max_rel_diff.max(other.max_rel_diff);
        self.coords_checked += other.coords_checked;
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport { max_abs_diff: 0.0, max_rel_diff: 0.0, coords_checked: 0 }
    }
}

/// Check `d f(x) / dx` on every coordinate of `input`. `f` must build a graph
/// ending in a scalar.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&Var) -> Result<Var, NnError>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    grad_check_at(f, input, eps, &coords)
}

/// Check only the listed coordinates.
pub fn grad_check_at<F>(
    f: F,
    input: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&Var) -> Result<Var, NnError>,
{
    if !(eps > 0.0) {
        return Err(NnError::InvalidArg(format!("eps must be positive, got {eps}")));
    }
    let leaf = Var::leaf(input.clone(), true);
    let out = f(&leaf)?;
    out.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));

    let mut report = GradCheckReport::default();
    for &c in coords {
        if c >= input.numel() {
            return Err(NnError::InvalidArg(format!(
                "coordinate {c} out of range for {} elements",
                input.numel()
            )));
        }
        let numeric = central_difference(
            |t| {
                let v = Var::leaf(t.clone(), false);
                f(&v).and_then(|out| out.value().item())
            },
            input,
            c,
            eps,
        )?;
        report.absorb(analytic.data()[c], numeric);
    }
    Ok(report)
}

/// Check `d loss / d params[name]` at the listed coordinates, where `loss`
/// re-runs the whole model from a fresh binding of `params`.
pub fn grad_check_param<F>(
    loss: F,
    params: &ParamSet,
    name: &str,
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&super::BoundParams) -> Result<Var, NnError>,
{
    if !(eps > 0.0) {
        return Err(NnError::InvalidArg(format!("eps must be positive, got {eps}")));
    }
    let target = params
        .get(name)
        .ok_or_else(|| NnError::InvalidArg(format!("unknown parameter {name:?}")))?
        .clone();

    let bound = params.bind(true);
    let out = loss(&bound)?;
    out.backward()?;
    let analytic = bound
        .var(name)
        .grad()
        .unwrap_or_else(|| Tensor::zeros(target.shape().to_vec()));

    let mut report = GradCheckReport::default();
    for &c in coords {
        if c >= target.numel() {
            return Err(NnError::InvalidArg(format!(
                "coordinate {c} out of range for parameter {name:?}"
            )));
        }
        let eval = |delta: f64| -> Result<f64, NnError> {
            let mut shifted = params.clone();
            shifted.get_mut(name).unwrap().data_mut()[c] += delta;
            let bound = shifted.bind(false);
            loss(&bound).and_then(|out| out.value().item())
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        report.absorb(analytic.data()[c], numeric);
    }
    Ok(report)
}

fn central_difference<F>(f: F, input: &Tensor, coord: usize, eps: f64) -> Result<f64, NnError>
where
    F: Fn(&Tensor) -> Result<f64, NnError>,
{
    let mut plus = input.clone();
    plus.data_mut()[coord] += eps;
    let mut minus = input.clone();
    minus.data_mut()[coord] -= eps;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
}
