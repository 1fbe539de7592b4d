//! Central finite-difference gradient verification.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Worst relative error for one parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compare the reverse-mode gradient of `f` (a deterministic scalar
/// function of the parameters) against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every parameter scalar.
///
/// Relative error uses denominator `max(|analytic|, |numeric|, 1e−8)`.
pub fn grad_check(
    params: &ParamStore,
    mut f: impl FnMut() -> Result<Tensor>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    params.zero_grads();
    let loss = f()?;
    let l0 = loss.item();
    if !l0.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {l0}")));
    }
    loss.backward();

    let mut per_param = Vec::new();
    let mut worst = 0.0f64;
    for (name, t) in params.iter() {
        let analytic = t
            .grad()
            .unwrap_or_else(|| ndarray::ArrayD::zeros(t.value().raw_dim()));
        let base = t.value().as_ref().clone();
        let mut group_worst = 0.0f64;
        for (flat, a) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[flat] += eps;
            t.set_value(plus);
            let lp = super::with_no_grad(|| f()).and_then(|l| {
                let v = l.item();
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Numeric("non-finite loss in FD probe".into()))
                }
            })?;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[flat] -= eps;
            t.set_value(minus);
            let lm = super::with_no_grad(|| f())?.item();
            t.set_value(base.clone());
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            group_worst = group_worst.max(rel);
        }
        worst = worst.max(group_worst);
        per_param.push((name.to_string(), group_worst));
    }
    Ok(GradCheckReport { worst, per_param })
}
