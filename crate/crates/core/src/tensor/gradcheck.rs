//! Central finite-difference check of autodiff gradients.

use rand::seq::index;
use rand::Rng;

use super::{ParamStore, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub coords_checked: usize,
}

/// `|a - f| / max(1e-8, |a| + |f|)`.
pub fn relative_error(autodiff: f64, finite_diff: f64) -> f64 {
    (autodiff - finite_diff).abs() / (autodiff.abs() + finite_diff.abs()).max(1e-8)
}

/// Compare `loss_fn`'s autodiff gradient against the five-point central
/// difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` with
/// `h = epsilon`, on up to `coords_per_param` sampled coordinates of each
/// parameter.
///
/// `loss_fn(store, want_grad)` must be a pure function of the parameter
/// values; any sampling inside it has to be frozen (re-seeded per call).
pub fn grad_check<F, R, E>(
    store: &mut ParamStore,
    mut loss_fn: F,
    epsilon: f64,
    coords_per_param: usize,
    rng: &mut R,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore, bool) -> std::result::Result<(f64, Option<Vec<Tensor>>), E>,
    R: Rng + ?Sized,
    E: From<TensorError>,
{
    let (base, grads) = loss_fn(store, true)?;
    let grads = grads.ok_or_else(|| TensorError::Invalid {
        op: "grad_check",
        detail: "loss function returned no gradients".into(),
    })?;
    let (again, _) = loss_fn(store, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            index::sample(rng, numel, coords_per_param).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            let mut at = |offset: f64| -> std::result::Result<f64, E> {
                store.value_mut(id).data_mut()[i] = orig + offset;
                let (v, _) = loss_fn(store, false)?;
                Ok(v)
            };
            let (p2, p1, m1, m2) = (at(2.0 * epsilon)?, at(epsilon)?, at(-epsilon)?, at(-2.0 * epsilon)?);
            store.value_mut(id).data_mut()[i] = orig;

            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let ad = grads[id.index()].data()[i];
            let rel = relative_error(ad, fd);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    param: store.entry(id).name.clone(),
                    index: i,
                    autodiff: ad,
                    finite_diff: fd,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
