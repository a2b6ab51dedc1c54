//! Plug-in average treatment effect from calibrated weights and the fitted
//! instrument effect on treatment.

use nalgebra::DVector;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::links::Rho;
use crate::sieve::{BasisSpec, SieveBasis};
use crate::solver::{fit_dual, DualFit};

/// `τ̂` aborts below this `min |δ̂ᴰ|` instead of dividing.
pub const WEAK_INSTRUMENT_ABORT: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Diagnostics {
    pub min_abs_delta_d: f64,
    pub max_weight: f64,
    pub solver_iters: [usize; 3],
    pub saturated: bool,
    pub weak_instrument: bool,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub tau_hat: f64,
    pub fit: DualFit,
    pub basis1: SieveBasis,
    pub basis2: SieveBasis,
    pub k1: usize,
    pub k2: usize,
    pub rho: String,
    pub diagnostics: Diagnostics,
}

impl Estimate {
    /// `wᵢ / δ̂ᴰᵢ`, so that `τ̂ = (1/N) Σ ratioᵢ Yᵢ`.
    pub fn outcome_weights(&self, z: &[f64]) -> DVector<f64> {
        self.fit
            .signed_weights(z)
            .component_div(&self.fit.delta_hat)
    }
}

pub fn estimate_tau(
    data: &Dataset,
    spec1: BasisSpec,
    spec2: BasisSpec,
    rho: &dyn Rho,
) -> Result<Estimate> {
    let basis1 = SieveBasis::build(&data.x, spec1)?;
    let basis2 = SieveBasis::build(&data.x, spec2)?;
    estimate_with_bases(data, basis1, basis2, rho)
}

/// Same as [`estimate_tau`] on bases that are already built on `data`.
pub fn estimate_with_bases(
    data: &Dataset,
    basis1: SieveBasis,
    basis2: SieveBasis,
    rho: &dyn Rho,
) -> Result<Estimate> {
    let fit = fit_dual(data, &basis1, &basis2, rho)?;
    estimate_from_fit(data, fit, basis1, basis2, rho)
}

pub(crate) fn estimate_from_fit(
    data: &Dataset,
    fit: DualFit,
    basis1: SieveBasis,
    basis2: SieveBasis,
    rho: &dyn Rho,
) -> Result<Estimate> {
    let min_abs = fit
        .delta_hat
        .iter()
        .fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if min_abs < WEAK_INSTRUMENT_ABORT {
        return Err(Error::WeakInstrument {
            min_abs_delta: min_abs,
        });
    }
    let w = fit.signed_weights(&data.z);
    let n = data.n() as f64;
    let tau_hat = (0..data.n())
        .map(|i| w[i] * data.y[i] / fit.delta_hat[i])
        .sum::<f64>()
        / n;
    if !tau_hat.is_finite() {
        return Err(Error::NonFinite);
    }
    let max_weight = (0..data.n())
        .map(|i| {
            if data.z[i] == 1.0 {
                fit.np_hat[i]
            } else {
                fit.nq_hat[i]
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let diagnostics = Diagnostics {
        min_abs_delta_d: min_abs,
        max_weight,
        solver_iters: fit.iterations,
        saturated: fit.saturated,
        weak_instrument: fit.weak_instrument,
    };
    Ok(Estimate {
        tau_hat,
        k1: basis1.k(),
        k2: basis2.k(),
        basis1,
        basis2,
        fit,
        rho: rho.name(),
        diagnostics,
    })
}

/// Difference of outcome means between treated and untreated units.
pub fn naive_estimator(data: &Dataset) -> Result<f64> {
    naive_with_se(data).map(|(t, _)| t)
}

/// Difference in means and its unpooled standard error `√(s₁²/n₁ + s₀²/n₀)`.
pub fn naive_with_se(data: &Dataset) -> Result<(f64, f64)> {
    let mut sums = [(0usize, 0.0f64, 0.0f64); 2];
    for (y, d) in data.y.iter().zip(&data.d) {
        let s = &mut sums[*d as usize];
        s.0 += 1;
        s.1 += y;
    }
    if sums[0].0 == 0 || sums[1].0 == 0 {
        return Err(Error::Degenerate("a treatment arm is empty".into()));
    }
    let means = [sums[0].1 / sums[0].0 as f64, sums[1].1 / sums[1].0 as f64];
    for (y, d) in data.y.iter().zip(&data.d) {
        let k = *d as usize;
        sums[k].2 += (y - means[k]).powi(2);
    }
    let var_term = |k: usize| {
        let n = sums[k].0 as f64;
        if n > 1.0 {
            sums[k].2 / (n - 1.0) / n
        } else {
            0.0
        }
    };
    Ok((means[1] - means[0], (var_term(0) + var_term(1)).sqrt()))
}
