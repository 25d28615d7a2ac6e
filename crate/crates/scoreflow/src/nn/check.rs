//! Central finite-difference gradient verification.

use crate::error::{Error, Result};

use super::{entry_count, get_entry, grad_entry, set_entry, Gradient, ParamBundle};

/// Compares `analytic` against a central finite difference of `loss` at
/// `params`, entry by entry. Returns the maximum relative error, with the
/// denominator floored at max(|analytic|, 1e-8).
///
/// `loss` must be deterministic; this is checked by evaluating it twice at
/// the unperturbed point.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &ParamBundle,
    analytic: &Gradient,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&ParamBundle) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    if !analytic.shape_matches(params) {
        return Err(Error::Shape("analytic gradient not congruent with params".into()));
    }
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Domain(
            "loss function is not deterministic; repeated evaluation differs".into(),
        ));
    }
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for idx in 0..entry_count(params) {
        let original = get_entry(params, idx);
        set_entry(&mut work, idx, original + h);
        let plus = loss(&work)?;
        set_entry(&mut work, idx, original - h);
        let minus = loss(&work)?;
        set_entry(&mut work, idx, original);
        let numeric = (plus - minus) / (2.0 * h);
        let g = grad_entry(analytic, idx);
        let rel = (numeric - g).abs() / g.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
