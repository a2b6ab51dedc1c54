//! Damped Newton ascent for smooth concave objectives.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Objective value with its gradient and Hessian at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

pub trait ConcaveProblem {
    fn dim(&self) -> usize;

    fn init(&self) -> DVector<f64>;

    /// An `Err` (typically a domain error) is read as `-inf` by the line search.
    fn evaluate(&self, theta: &DVector<f64>) -> Result<Evaluation>;

    /// Largest `t ∈ [0, 1]` such that `theta + t·step` stays inside a trust box.
    fn max_step(&self, _theta: &DVector<f64>, _step: &DVector<f64>) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonStatus {
    Converged,
    /// Stopped on the boundary of the trust box without meeting `tol`.
    Saturated,
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub theta: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: NewtonStatus,
    /// Objective after each accepted iterate, starting with the initial point.
    /// Nondecreasing up to rounding of the objective itself.
    pub trace: Vec<f64>,
}

const MAX_HALVINGS: usize = 60;

/// Newton direction `(-H)⁻¹ g`, ridging `-H` until Cholesky succeeds.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let neg = -hess;
    if let Some(chol) = Cholesky::new(neg.clone()) {
        return Ok(chol.solve(grad));
    }
    let scale = neg.diagonal().amax().max(1.0);
    let mut ridge = 1e-10 * scale;
    for _ in 0..20 {
        let mut m = neg.clone();
        for j in 0..m.nrows() {
            m[(j, j)] += ridge;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(chol.solve(grad));
        }
        ridge *= 10.0;
    }
    Err(Error::Singular(
        "negated Hessian could not be factorized".into(),
    ))
}

/// Maximizes a concave problem from its own starting point.
pub fn newton_maximize(problem: &dyn ConcaveProblem, opts: NewtonOptions) -> Result<NewtonResult> {
    let mut theta = problem.init();
    debug_assert_eq!(theta.len(), problem.dim());
    let mut cur = problem.evaluate(&theta).map_err(|_| Error::NonFinite)?;
    if !cur.value.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut trace = vec![cur.value];

    for iter in 0..=opts.max_iter {
        let grad_norm = cur.grad.amax();
        if grad_norm <= opts.tol {
            return Ok(NewtonResult {
                theta,
                value: cur.value,
                grad_norm,
                iterations: iter,
                status: NewtonStatus::Converged,
                trace,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::MaxIter {
                iterations: iter,
                grad_norm,
            });
        }

        let step = newton_direction(&cur.hess, &cur.grad)?;
        let t_max = problem.max_step(&theta, &step).clamp(0.0, 1.0);
        let capped = t_max < 1.0;
        if capped && t_max * step.amax() <= 1e-12 * theta.amax().max(1.0) {
            return Ok(NewtonResult {
                theta,
                value: cur.value,
                grad_norm,
                iterations: iter,
                status: NewtonStatus::Saturated,
                trace,
            });
        }
        let predicted = cur.grad.dot(&step);
        // below this the objective difference is not resolvable in floating point
        let rounding = 1e-14 * cur.value.abs().max(1.0);

        let mut t = t_max;
        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &theta + &step * t;
            if let Ok(ev) = problem.evaluate(&trial) {
                if ev.value.is_finite() {
                    saw_finite = true;
                    let enough = ev.value >= cur.value + opts.armijo * t * predicted;
                    let flat = predicted <= rounding && ev.value >= cur.value - rounding;
                    if enough || flat {
                        accepted = Some((trial, ev));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((next, ev)) = accepted else {
            return Err(if saw_finite {
                Error::MaxIter {
                    iterations: iter,
                    grad_norm,
                }
            } else {
                Error::NonFinite
            });
        };
        theta = next;
        cur = ev;
        trace.push(cur.value);
    }
    unreachable!("loop returns on its last iteration")
}
