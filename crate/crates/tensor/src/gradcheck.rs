//! Central finite-difference verification of analytic gradients.

use crate::error::TensorError;
use crate::param::{BoundParams, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale, so
    /// round-off in near-zero derivatives is not reported as relative error.
    pub magnitude_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            magnitude_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub per_param: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|p| !p.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamGradError> {
        self.per_param.iter().filter(|p| p.flagged)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of `model_fn` against central differences for
/// every scalar of every parameter.
pub fn grad_check<F, E>(
    model_fn: F,
    params: &ParameterSet,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&BoundParams) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    let bound = params.bind();
    model_fn(&bound)?.backward()?;
    let analytic = bound.grads();

    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut worst = ParamGradError {
            name: param.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            flagged: false,
        };
        for i in 0..param.values.len() {
            let base = param.values[i];
            let mut eval_at = |v: f64| -> Result<f64, E> {
                probe.iter_mut().nth(pi).expect("same layout").values[i] = v;
                Ok(model_fn(&probe.bind_frozen())?.item())
            };
            let plus = eval_at(base + opts.step)?;
            let minus = eval_at(base - opts.step)?;
            probe.iter_mut().nth(pi).expect("same layout").values[i] = base;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi][i];
            let err = relative_error(a, numeric, opts.magnitude_floor);
            if err > worst.max_rel_error || i == 0 {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        worst.flagged = !(worst.max_rel_error <= opts.tolerance);
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        per_param,
    })
}
