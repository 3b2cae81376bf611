//! Central finite-difference checks against analytic gradients.

use crate::error::Result;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Agreement between analytic and numeric gradients for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|a - n| / max(|a|, |n|)` over the probed coordinates.
    pub rel_error: f64,
}

/// Options for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per tensor, evenly strided.
    pub max_coords: usize,
    /// Tensors whose analytic and numeric norms both fall below this are reported with zero error.
    pub abs_floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, max_coords: 64, abs_floor: 1e-7 }
    }
}

/// Fourth-order central difference of `loss` with respect to coordinate `index` of `param`.
pub fn numeric_partial<T, F>(store: &ParamStore<T>, param: ParamId, index: usize, eps: f64, loss: &mut F) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let mut probe = store.clone();
    let orig = probe.get(param).data()[index];
    let mut at = |offset: f64, probe: &mut ParamStore<T>| -> Result<f64> {
        probe.get_mut(param).data_mut()[index] = orig + T::of(offset);
        loss(probe).map(|v| v.as_f64())
    };
    let (p1, m1) = (at(eps, &mut probe)?, at(-eps, &mut probe)?);
    let (p2, m2) = (at(2.0 * eps, &mut probe)?, at(-2.0 * eps, &mut probe)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
}

/// Compares `analytic` (computed in `T`) against finite differences of `loss`
/// evaluated on a copy of the parameters cast to `U`. Use `U = T` for a
/// same-precision check or `U = f64` for an accurate numeric reference.
pub fn finite_difference_check<T, U, F>(store: &ParamStore<T>, analytic: &Gradients<T>, mut loss: F, opts: &CheckOptions) -> Result<Vec<ParamCheck>>
where
    T: Scalar,
    U: Scalar,
    F: FnMut(&ParamStore<U>) -> Result<U>,
{
    let reference: ParamStore<U> = store.cast();
    let mut report = Vec::new();
    for (id, name, value) in store.iter() {
        let len = value.len();
        let stride = len.div_ceil(opts.max_coords.max(1)).max(1);
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut coords = 0;
        for index in (0..len).step_by(stride) {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[index].as_f64());
            let n = numeric_partial(&reference, id, index, opts.eps, &mut loss)?;
            diff_sq += (a - n) * (a - n);
            a_sq += a * a;
            n_sq += n * n;
            coords += 1;
        }
        let (an, nn) = (a_sq.sqrt(), n_sq.sqrt());
        let denom = an.max(nn);
        let rel_error = if denom < opts.abs_floor { 0.0 } else { diff_sq.sqrt() / denom };
        report.push(ParamCheck { name: name.to_string(), coords, analytic_norm: an, numeric_norm: nn, rel_error });
    }
    Ok(report)
}

pub fn max_rel_error(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
