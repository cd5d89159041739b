//! Newton-Raphson maximization with analytic derivatives, step-halving, and
//! a ridged fallback direction when the Hessian is indefinite mid-path.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NewtonError {
    #[error("no ascent possible from the starting point (log-likelihood undefined)")]
    InvalidStart,
    #[error("failed to converge in {iters} iterations (last max |gradient| = {grad_norm:.3e})")]
    NoConvergence { iters: usize, grad_norm: f64 },
}

/// Objective evaluation at one parameter point. `loglik` of NEG_INFINITY or
/// NaN marks the point as inadmissible; step-halving retreats from it.
pub struct Eval {
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

pub struct Options {
    pub max_iter: usize,
    /// Relative log-likelihood change below which to stop.
    pub tol_loglik: f64,
    /// Max absolute gradient component below which to stop, in units of
    /// `grad_scale`.
    pub tol_grad: f64,
    /// Natural gradient magnitude of the problem (e.g. total event count
    /// for a Poisson likelihood); the gradient criterion is
    /// max |g| < tol_grad * grad_scale.
    pub grad_scale: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 200,
            tol_loglik: 1e-10,
            tol_grad: 1e-6,
            grad_scale: 1.0,
        }
    }
}

pub struct Fit {
    pub theta: DVector<f64>,
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub iters: usize,
    /// Set when a ridge had to be applied to the Hessian at some point.
    pub ridged: bool,
}

/// Maximize a concave-ish log-likelihood from `theta0`.
///
/// `objective` returns the log-likelihood with analytic gradient and Hessian.
pub fn maximize<F>(
    mut objective: F,
    theta0: DVector<f64>,
    opts: &Options,
) -> Result<Fit, NewtonError>
where
    F: FnMut(&DVector<f64>) -> Eval,
{
    let mut theta = theta0;
    let mut cur = objective(&theta);
    if !cur.loglik.is_finite() {
        return Err(NewtonError::InvalidStart);
    }
    let mut ridged = false;
    for iter in 1..=opts.max_iter {
        // Solve (-H) d = g; escalate a ridge until -H factors.
        let neg_h = -&cur.hess;
        let dir = {
            let mut ridge = 0.0;
            loop {
                let m = if ridge == 0.0 {
                    neg_h.clone()
                } else {
                    ridged = true;
                    &neg_h + DMatrix::identity(neg_h.nrows(), neg_h.ncols()) * ridge
                };
                if let Some(chol) = Cholesky::new(m) {
                    break chol.solve(&cur.grad);
                }
                let scale = neg_h.diagonal().amax().max(1.0);
                ridge = if ridge == 0.0 {
                    1e-8 * scale
                } else {
                    ridge * 10.0
                };
                if ridge > 1e12 * scale {
                    // Degenerate curvature everywhere; fall back to gradient.
                    break cur.grad.clone() / scale;
                }
            }
        };
        // Step-halving line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &dir * step;
            let ev = objective(&cand);
            if ev.loglik.is_finite() && ev.loglik >= cur.loglik - 1e-13 * (1.0 + cur.loglik.abs()) {
                accepted = Some((cand, ev));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ev)) = accepted else {
            // Cannot improve along the Newton direction; report based on the
            // gradient at the current point.
            let g = cur.grad.amax();
            if g < opts.tol_grad * opts.grad_scale {
                return Ok(Fit {
                    theta,
                    loglik: cur.loglik,
                    grad: cur.grad,
                    hess: cur.hess,
                    iters: iter,
                    ridged,
                });
            }
            return Err(NewtonError::NoConvergence {
                iters: iter,
                grad_norm: g,
            });
        };
        let rel_change = (ev.loglik - cur.loglik).abs() / (1.0 + cur.loglik.abs());
        theta = cand;
        cur = ev;
        if rel_change < opts.tol_loglik && cur.grad.amax() < opts.tol_grad * opts.grad_scale {
            return Ok(Fit {
                theta,
                loglik: cur.loglik,
                grad: cur.grad,
                hess: cur.hess,
                iters: iter,
                ridged,
            });
        }
    }
    Err(NewtonError::NoConvergence {
        iters: opts.max_iter,
        grad_norm: cur.grad.amax(),
    })
}

/// Invert the negative Hessian to get the variance-covariance matrix.
///
/// Returns `(vcov, warning)` where `warning` is set when the Hessian was not
/// negative definite and an eigenvalue-clamped pseudo-inverse was used.
pub fn vcov_from_hessian(hess: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let neg_h = -hess;
    if let Some(chol) = Cholesky::new(neg_h.clone()) {
        return (chol.inverse(), false);
    }
    // Not negative definite: clamp eigenvalues of -H to a small positive
    // floor and invert in the eigenbasis.
    let eig = nalgebra::SymmetricEigen::new(neg_h);
    let floor = 1e-10 * eig.eigenvalues.amax().max(1.0);
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(floor))
        .collect();
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_vals));
    (q * d * q.transpose(), true)
}
