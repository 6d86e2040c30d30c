//! Central finite differences, the independent check on the tape's
//! hand-written backward rules.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tape::Matrix;

/// Numerical gradient of `loss` with respect to every tensor in `store`.
pub fn finite_difference(
    store: &ParamStore,
    step: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> BTreeMap<String, Matrix> {
    let mut work = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let shape = store.get(&name).unwrap().dim();
        let mut grad = Matrix::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = work.get(&name).unwrap()[[r, c]];
                work.get_mut(&name).unwrap()[[r, c]] = orig + step;
                let up = loss(&work);
                work.get_mut(&name).unwrap()[[r, c]] = orig - step;
                let down = loss(&work);
                work.get_mut(&name).unwrap()[[r, c]] = orig;
                grad[[r, c]] = (up - down) / (2.0 * step);
            }
        }
        out.insert(name, grad);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let na = a.mapv(|x| x * x).sum().sqrt();
    let nb = b.mapv(|x| x * x).sum().sqrt();
    let denom = na.max(nb);
    if denom < 1e-10 {
        0.0
    } else {
        diff / denom
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares analytic gradients (absent entries count as zero) with numeric
/// ones tensor by tensor.
pub fn compare(
    analytic: &BTreeMap<String, Matrix>,
    numeric: &BTreeMap<String, Matrix>,
) -> GradCheckReport {
    let per_tensor = numeric
        .iter()
        .map(|(name, num)| {
            let err = match analytic.get(name) {
                Some(a) => relative_error(a, num),
                None => relative_error(&Matrix::zeros(num.dim()), num),
            };
            (name.clone(), err)
        })
        .collect();
    GradCheckReport { per_tensor }
}
