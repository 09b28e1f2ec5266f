//! Central finite-difference checks in 64-bit.
//!
//! The analytic side is one backward pass over a `Graph<f64>`; the numeric side
//! replays the same closure on perturbed copies of the input with no gradient
//! bookkeeping at all. The reported error per coordinate is
//! `|analytic - numeric| / max(1, |numeric|)`, maximized over all coordinates.

use super::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64, TensorError> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            reason: format!("function must be scalar-valued, got shape {:?}", t.shape()),
        });
    }
    Ok(t.item())
}

/// Checks `f` with respect to a free input tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_with_step(f, point, DEFAULT_STEP)
}

pub fn grad_check_with_step<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(a, numeric));
    }
    Ok(worst)
}

/// Checks `f` with respect to every non-frozen parameter in `params`.
///
/// `max_coords_per_param` bounds the work on large tensors: coordinates are
/// taken at an even stride through each parameter, always including the first.
pub fn grad_check_params<F>(f: F, params: &ParamSet<f64>, max_coords_per_param: Option<usize>) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    grad_check_params_with_step(f, params, max_coords_per_param, DEFAULT_STEP)
}

pub fn grad_check_params_with_step<F>(
    f: F,
    params: &ParamSet<f64>,
    max_coords_per_param: Option<usize>,
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    Ok(check_params(f, params, max_coords_per_param, step, false)?.worst)
}

/// Outcome of [`grad_check_params_smooth`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

/// Like [`grad_check_params`], but only over coordinates where the centre
/// and both perturbed points share one [`Graph::kink_signature`]. Across a
/// kink the central difference is not a derivative of anything, so those
/// coordinates carry no information about the analytic gradient.
pub fn grad_check_params_smooth<F>(
    f: F,
    params: &ParamSet<f64>,
    max_coords_per_param: Option<usize>,
) -> Result<SmoothCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    check_params(f, params, max_coords_per_param, DEFAULT_STEP, true)
}

fn check_params<F>(
    f: F,
    params: &ParamSet<f64>,
    max_coords_per_param: Option<usize>,
    step: f64,
    smooth_only: bool,
) -> Result<SmoothCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let y = f(&mut g, params)?;
    scalar_of(&g, y)?;
    let centre = g.kink_signature();
    g.backward(y)?;
    let mut with_grads = params.clone();
    with_grads.zero_grads();
    g.write_param_grads(&mut with_grads);

    let eval = |p: &ParamSet<f64>| -> Result<(f64, u64), TensorError> {
        let mut g = Graph::new();
        let y = f(&mut g, p)?;
        Ok((scalar_of(&g, y)?, g.kink_signature()))
    };
    let mut out = SmoothCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for idx in 0..params.len() {
        let id = ParamId(idx);
        let p = params.get(id);
        if p.frozen {
            continue;
        }
        let n = p.tensor.len();
        let stride = max_coords_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        let analytic = with_grads.get(id).tensor.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride) {
            let mut plus = params.clone();
            plus.get_mut(id).tensor.data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(id).tensor.data_mut()[i] -= step;
            let (fp, sp) = eval(&plus)?;
            let (fm, sm) = eval(&minus)?;
            if smooth_only && (sp != centre || sm != centre) {
                out.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            out.worst = out.worst.max(rel_err(analytic[i], numeric));
            out.checked += 1;
        }
    }
    Ok(out)
}
