use super::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Restrict the check to parameters whose name starts with one of these.
    pub only: Option<Vec<String>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            only: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares analytic gradients against central differences.
///
/// `loss(store, want_grad)` must return the scalar loss and, when
/// `want_grad` is set, accumulate `dloss/dparam` into the store's
/// gradients. Parameter values and gradient buffers are restored on exit
/// (gradients end up zeroed).
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grads();
    loss(store, true)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grads();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let name = store.param(id).name.clone();
        if let Some(only) = &cfg.only {
            if !only.iter().any(|o| name.starts_with(o.as_str())) {
                continue;
            }
        }
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + cfg.step;
            let plus = loss(store, false)?;
            store.value_mut(id).data_mut()[idx] = orig - cfg.step;
            let minus = loss(store, false)?;
            store.value_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi][idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    store.zero_grads();
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
