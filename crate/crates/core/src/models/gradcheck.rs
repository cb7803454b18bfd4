//! Central finite-difference gradient checking.

use super::{loss, loss_and_grad, ModelSpec, ParamSet, Samples};
use crate::error::Result;

/// Central-difference gradient of the mean loss, one coordinate at a time.
pub fn numeric_grad(spec: &ModelSpec, params: &ParamSet, batch: &Samples, h: f64) -> Result<ParamSet> {
    let base = params.to_flat();
    let mut out = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = loss(spec, &params.with_flat(&probe)?, batch)?;
        probe[i] = base[i] - h;
        let minus = loss(spec, &params.with_flat(&probe)?, batch)?;
        probe[i] = base[i];
        out[i] = (plus - minus) / (2.0 * h);
    }
    params.with_flat(&out)
}

/// `||a - b|| / max(||a||, ||b||)`, with 0 when both vanish.
pub fn relative_error(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let diff = a.sub(b)?.norm_sq().sqrt();
    let scale = a.norm_sq().sqrt().max(b.norm_sq().sqrt());
    Ok(if scale < 1e-300 { 0.0 } else { diff / scale })
}

/// Relative error between the analytic gradient and central differences.
pub fn check_gradient(spec: &ModelSpec, params: &ParamSet, batch: &Samples, h: f64) -> Result<f64> {
    let analytic = loss_and_grad(spec, params, batch)?.grad;
    let numeric = numeric_grad(spec, params, batch, h)?;
    relative_error(&analytic, &numeric)
}
