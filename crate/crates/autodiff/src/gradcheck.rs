//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::store::{GradientMap, ParameterStore};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate (empty if nothing was checked).
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_store(store);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check", node: out.index() });
    }
    Ok(v)
}

/// Analytic gradient of `f` at `store`.
pub fn analytic_gradients<F>(store: &ParameterStore, f: &F) -> Result<GradientMap>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_store(store);
    let out = f(&mut g)?;
    g.backward(out)
}

/// Checks `f`'s analytic gradient against central differences for every
/// coordinate of every parameter accepted by `select`.
pub fn grad_check<F>(store: &ParameterStore, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_gradients(store, &analytic, eps, tol, |_| true, f)
}

/// Compares a supplied analytic gradient against central differences of `f`.
pub fn compare_gradients<F>(
    store: &ParameterStore,
    analytic: &GradientMap,
    eps: f64,
    tol: f64,
    select: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        tol,
    };
    for name in names.iter().filter(|n| select(n)) {
        let grad = analytic.get(name)?;
        for idx in 0..grad.numel() {
            let orig = probe.get(name)?.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = orig + eps;
            let plus = evaluate(&probe, &f)?;
            probe.get_mut(name)?.data_mut()[idx] = orig - eps;
            let minus = evaluate(&probe, &f)?;
            probe.get_mut(name)?.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
