//! Central finite-difference verification of analytic gradients.
//!
//! The loss closure must be a deterministic function of the store: draw any
//! noise once, outside the closure, and feed it back in as constants.

use crate::graph::{Graph, Tensor};
use crate::param::{ParamId, ParamStore};
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
    /// (param name, element index, analytic, numeric) for the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor of 0.01 on the denominator, so near-zero
/// gradients are compared at an absolute tolerance of tol/100.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(0.01);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of `loss_fn` w.r.t. `params` against central
/// finite differences with step `h` (f64 only; training precision would mask
/// real errors).
pub fn check_gradients<E: std::fmt::Debug>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    h: f64,
    mut loss_fn: impl FnMut(&Graph<f64>, &ParamStore<f64>) -> std::result::Result<Tensor<f64>, E>,
) -> Result<GradCheckReport> {
    let mut run = |g: &Graph<f64>, store: &ParamStore<f64>| {
        loss_fn(g, store)
            .map_err(|e| crate::AdError::contract("gradcheck", format!("loss failed: {e:?}")))
    };
    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let loss = run(&g, store)?;
        let mut grads = g.backward(&loss)?;
        let by_param = g.param_grads(&mut grads);
        params
            .iter()
            .map(|pid| {
                by_param
                    .iter()
                    .find(|(id, _)| id == pid)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_else(|| vec![0.0; store.get(*pid).data.len()])
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        elements_checked: 0,
        worst: None,
    };

    for (pi, pid) in params.iter().enumerate() {
        let n = store.get(*pid).data.len();
        for i in 0..n {
            let orig = store.get(*pid).data[i];

            store.data_mut(*pid)[i] = orig + h;
            let plus = {
                let g = Graph::new();
                run(&g, store)?.item()
            };
            store.data_mut(*pid)[i] = orig - h;
            let minus = {
                let g = Graph::new();
                run(&g, store)?.item()
            };
            store.data_mut(*pid)[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[pi][i], numeric);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((
                    store.get(*pid).name.clone(),
                    i,
                    analytic[pi][i],
                    numeric,
                ));
            }
        }
    }
    Ok(report)
}
