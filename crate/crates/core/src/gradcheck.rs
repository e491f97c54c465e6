//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Per-input worst relative error from [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract("gradient check function must return a scalar"));
    }
    Ok(g.value(out).item())
}

/// Compare the tape's gradient of a scalar function of several inputs with
/// central differences. At most `max_coords` coordinates per input are
/// probed, evenly strided; `None` probes all of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let numel = inputs[i].numel();
        let stride = match max_coords {
            Some(m) if m > 0 && numel > m => numel.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for j in (0..numel).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            coords_checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input, coords_checked })
}

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_error())
}
