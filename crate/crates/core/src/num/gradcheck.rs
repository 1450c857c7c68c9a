//! Central finite-difference validation of analytic gradients.
//!
//! The checker is f64-only: with step `h = 1e-6` the truncation and rounding
//! errors only land below usable tolerances in double precision.

use super::{Matrix, Rng};

/// Per-tensor cap on checked coordinates, to bound runtime on large layers.
pub const MAX_COORDS_PER_TENSOR: usize = 200;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordError {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check over one loss function.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub errors: Vec<CoordError>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }

    pub fn worst(&self) -> Option<&CoordError> {
        self.errors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    fn push(&mut self, e: CoordError) {
        if e.rel_err > self.max_relative_error {
            self.max_relative_error = e.rel_err;
        }
        self.errors.push(e);
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Checks `f`'s analytic gradients against central differences.
///
/// `f` evaluates the loss and its gradients (one per tensor, same shapes) at
/// the given parameters; it must be deterministic. Tensors larger than
/// [`MAX_COORDS_PER_TENSOR`] are subsampled with `rng`.
pub fn grad_check<F>(f: &mut F, params: &[Matrix<f64>], h: f64, rng: &mut Rng) -> GradCheckReport
where
    F: FnMut(&[Matrix<f64>]) -> (f64, Vec<Matrix<f64>>),
{
    let (_, grads) = f(params);
    assert_eq!(
        grads.len(),
        params.len(),
        "loss fn returned {} gradients for {} tensors",
        grads.len(),
        params.len()
    );
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        errors: Vec::new(),
    };
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    for (ti, grad) in grads.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            params[ti].shape(),
            "gradient {ti} shape mismatch"
        );
        let n = grad.data().len();
        let coords: Vec<usize> = if n <= MAX_COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            rng.choose_k(n, MAX_COORDS_PER_TENSOR)
        };
        for ix in coords {
            let orig = work[ti].data()[ix];
            work[ti].data_mut()[ix] = orig + h;
            let (lp, _) = f(&work);
            work[ti].data_mut()[ix] = orig - h;
            let (lm, _) = f(&work);
            work[ti].data_mut()[ix] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad.data()[ix];
            report.push(CoordError {
                tensor: ti,
                index: ix,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
    }
    report
}

/// Flat-vector variant checking every coordinate; for small inputs such as
/// single feature vectors.
pub fn grad_check_flat<F>(f: &mut F, p: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, grad) = f(p);
    assert_eq!(grad.len(), p.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        errors: Vec::new(),
    };
    let mut work = p.to_vec();
    for ix in 0..p.len() {
        let orig = work[ix];
        work[ix] = orig + h;
        let (lp, _) = f(&work);
        work[ix] = orig - h;
        let (lm, _) = f(&work);
        work[ix] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        report.push(CoordError {
            tensor: 0,
            index: ix,
            analytic: grad[ix],
            numeric,
            rel_err: rel_err(grad[ix], numeric),
        });
    }
    report
}
