//! Central finite-difference verification of backward rules (64-bit only).

use crate::{Error, Graph, Result, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest [`relative_error`] over paired coordinates, with its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + ?Sized,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?.value();
    if out.len() != 1 {
        return Err(Error::NotScalar(out.shape().to_vec()));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}

/// Checks the gradient of a scalar function of several tensors against
/// central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`, one report per input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<GradCheck>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars)?;
    if !loss.value().item().is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("input registered on this pass"))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (which, an) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(an.len());
        for i in 0..an.len() {
            let x0 = work[which].data()[i];
            work[which].data_mut()[i] = x0 + eps;
            let up = eval(&f, &work)?;
            work[which].data_mut()[i] = x0 - eps;
            let down = eval(&f, &work)?;
            work[which].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        let (max_rel_error, worst_index) = max_relative_error(an.data(), &numeric);
        reports.push(GradCheck {
            max_rel_error,
            worst_index,
            analytic: an.data().to_vec(),
            numeric,
        });
    }
    Ok(reports)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let mut r = finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)?;
    Ok(r.remove(0))
}
