use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<CoordinateCheck>,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` gradients against central differences of `loss`.
///
/// `loss` returns the loss as a list of additive terms. Differences are
/// taken per term and then summed, which is the same central difference
/// of the total but keeps a small term (such as an L2 penalty) from being
/// rounded away when added to a large one.
///
/// Up to `per_param` coordinates are sampled from every trainable
/// parameter.
pub fn grad_check<F, R>(
    store: &mut ParamStore,
    analytic: &BTreeMap<ParamId, Tensor>,
    mut loss: F,
    eps: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        for index in coords {
            let original = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = original + eps;
            let plus = loss(store)?;
            store.value_mut(id).data_mut()[index] = original - eps;
            let minus = loss(store)?;
            store.value_mut(id).data_mut()[index] = original;

            let numeric: f64 = plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .sum();
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[index]);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    param: store.get(id).name.clone(),
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
