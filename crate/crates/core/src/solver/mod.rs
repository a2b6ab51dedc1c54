//! Dual fits for the calibration weights and the treatment link.

mod dual;
mod newton;
mod primal;

pub use dual::{
    signed_weights, solve_delta, solve_p, solve_q, CalibrationProblem, DeltaFit, DeltaProblem,
    WeightFit, LINK_CAP, WEAK_INSTRUMENT_WARN,
};
pub use newton::{
    newton_maximize, ConcaveProblem, Evaluation, NewtonOptions, NewtonResult, NewtonStatus,
};
pub use primal::oracle_primal_weights;

use nalgebra::DVector;

use crate::data::Dataset;
use crate::error::Result;
use crate::links::Rho;
use crate::sieve::SieveBasis;

/// All three dual fits on one sample.
#[derive(Debug, Clone)]
pub struct DualFit {
    pub lambda_hat: DVector<f64>,
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    /// `Np̂ᵢ = ρ'(λ̂ᵀu₁(Xᵢ))` for every unit; NaN off the `Z = 1` arm where `ρ'` is undefined.
    pub np_hat: DVector<f64>,
    /// `Nq̂ᵢ = ρ'(β̂ᵀu₁(Xᵢ))` for every unit; NaN off the `Z = 0` arm where `ρ'` is undefined.
    pub nq_hat: DVector<f64>,
    /// `δ̂ᴰᵢ = tanh(γ̂ᵀu₂(Xᵢ))`.
    pub delta_hat: DVector<f64>,
    /// Newton iterations for λ, β and γ.
    pub iterations: [usize; 3],
    pub saturated: bool,
    pub weak_instrument: bool,
}

impl DualFit {
    /// `wᵢ = ZᵢNp̂ᵢ - (1 - Zᵢ)Nq̂ᵢ`.
    pub fn signed_weights(&self, z: &[f64]) -> DVector<f64> {
        signed_weights(z, &self.np_hat, &self.nq_hat)
    }
}

pub fn fit_dual(
    data: &Dataset,
    basis1: &SieveBasis,
    basis2: &SieveBasis,
    rho: &dyn Rho,
) -> Result<DualFit> {
    let p = solve_p(data, basis1, rho)?;
    let q = solve_q(data, basis1, rho)?;
    let delta = solve_delta(data, &p.weights, &q.weights, basis2)?;
    Ok(DualFit {
        lambda_hat: p.coef,
        beta_hat: q.coef,
        gamma_hat: delta.coef,
        np_hat: p.weights,
        nq_hat: q.weights,
        delta_hat: delta.delta,
        iterations: [p.iterations, q.iterations, delta.iterations],
        saturated: delta.saturated,
        weak_instrument: delta.weak_instrument,
    })
}
