//! Data-driven choice of the sieve sizes `K₁` (weights) and `K₂` (treatment link).
//!
//! `K̂₁` minimizes
//! `MSE₁ = Σᵢ (ZᵢNp̂ᵢ - 1)² + Σᵢ ((1-Zᵢ)Nq̂ᵢ - 1)²` over `1..=K̄₁`, then `K̂₂`
//! minimizes `MSE₂ = Σᵢ (Dᵢwᵢ - δ̂ᴰᵢ)²` over `1..=K̄₂` with the `K̂₁` weights held
//! fixed. Both sums run over every unit, so a unit outside an arm contributes 1.
//!
//! When the basis contains an intercept, calibration forces `Σ_{Z=1} Np̂ᵢ = N`,
//! and Cauchy-Schwarz then gives `MSE₁(K₁) ≥ MSE₁(1)` for every `K₁`. The first
//! stage therefore selects `K̂₁ = 1` on any sample where the intercept-only fit
//! succeeds.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::links::Rho;
use crate::sieve::{BasisFamily, BasisSpec, SieveBasis};
use crate::solver::{signed_weights, solve_delta, solve_p, solve_q, WeightFit};

/// Criterion values closer than this are ties, resolved toward the smaller `K`.
pub const TIE_TOL: f64 = 1e-12;

pub const DEFAULT_KBAR: usize = 5;

/// Builds the basis of size `k` on a covariate matrix.
pub trait BasisFactory: Sync {
    fn build(&self, x: &DMatrix<f64>, k: usize) -> Result<SieveBasis>;
}

impl BasisFactory for BasisFamily {
    fn build(&self, x: &DMatrix<f64>, k: usize) -> Result<SieveBasis> {
        SieveBasis::build(x, self.spec(k))
    }
}

impl BasisFactory for BasisSpec {
    fn build(&self, x: &DMatrix<f64>, k: usize) -> Result<SieveBasis> {
        SieveBasis::build(x, self.with_k(k))
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GridFailure {
    pub stage: u8,
    pub k: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TuningResult {
    pub k1_hat: usize,
    pub k2_hat: usize,
    /// `K₁ → MSE₁`; failed fits are `+∞`.
    pub mse1_path: BTreeMap<usize, f64>,
    /// `K₂ → MSE₂` at `K̂₁`; failed fits are `+∞`.
    pub mse2_path: BTreeMap<usize, f64>,
    pub kbar1: usize,
    pub kbar2: usize,
    pub failures: Vec<GridFailure>,
}

/// `MSE₁` from fitted weights.
pub fn mse1_from_weights(z: &[f64], np_hat: &[f64], nq_hat: &[f64]) -> f64 {
    z.iter()
        .zip(np_hat.iter().zip(nq_hat))
        .map(|(&z, (p, q))| {
            // the unused weight of each unit contributes (0 - 1)² = 1
            let on = if z == 1.0 { p } else { q };
            (on - 1.0).powi(2) + 1.0
        })
        .sum()
}

/// `MSE₂` from weights and fitted `δ̂ᴰ`.
pub fn mse2_from_fit(d: &[f64], w: &[f64], delta: &[f64]) -> f64 {
    d.iter()
        .zip(w.iter().zip(delta))
        .map(|(d, (w, delta))| (d * w - delta).powi(2))
        .sum()
}

fn weight_fits(
    data: &Dataset,
    basis1: &SieveBasis,
    rho: &dyn Rho,
) -> Result<(WeightFit, WeightFit)> {
    Ok((solve_p(data, basis1, rho)?, solve_q(data, basis1, rho)?))
}

/// `MSE₁(K₁)` with fresh fits on `basis1`.
pub fn mse1(data: &Dataset, basis1: &SieveBasis, rho: &dyn Rho) -> Result<f64> {
    let (p, q) = weight_fits(data, basis1, rho)?;
    Ok(mse1_from_weights(
        &data.z,
        p.weights.as_slice(),
        q.weights.as_slice(),
    ))
}

/// `MSE₂(K₁, K₂)` for given `K₁` weights, refitting `δ̂ᴰ` on `basis2`.
pub fn mse2(data: &Dataset, p: &WeightFit, q: &WeightFit, basis2: &SieveBasis) -> Result<f64> {
    let fit = solve_delta(data, &p.weights, &q.weights, basis2)?;
    let w = signed_weights(&data.z, &p.weights, &q.weights);
    Ok(mse2_from_fit(&data.d, w.as_slice(), fit.delta.as_slice()))
}

/// Index of the smallest finite value, ties toward the front.
fn argmin(path: &BTreeMap<usize, f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &v) in path {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if v >= b - TIE_TOL => {}
            _ => best = Some((k, v)),
        }
    }
    best.map(|(k, _)| k)
}

/// Sequential selection on power-series bases.
pub fn select_k(data: &Dataset, kbar1: usize, kbar2: usize, rho: &dyn Rho) -> Result<TuningResult> {
    select_k_with(data, kbar1, kbar2, rho, &BasisSpec::power(1))
}

pub fn select_k_with(
    data: &Dataset,
    kbar1: usize,
    kbar2: usize,
    rho: &dyn Rho,
    factory: &dyn BasisFactory,
) -> Result<TuningResult> {
    if kbar1 == 0 || kbar2 == 0 {
        return Err(Error::Config("grid bounds must be at least 1".into()));
    }
    let mut failures = Vec::new();
    let mut mse1_path = BTreeMap::new();
    let mut fits = BTreeMap::new();
    for k in 1..=kbar1 {
        let attempt = factory
            .build(&data.x, k)
            .and_then(|b| weight_fits(data, &b, rho));
        match attempt {
            Ok((p, q)) => {
                mse1_path.insert(
                    k,
                    mse1_from_weights(&data.z, p.weights.as_slice(), q.weights.as_slice()),
                );
                fits.insert(k, (p, q));
            }
            Err(e) => {
                mse1_path.insert(k, f64::INFINITY);
                failures.push(GridFailure {
                    stage: 1,
                    k,
                    message: e.to_string(),
                });
            }
        }
    }
    let k1_hat = argmin(&mse1_path).ok_or(Error::AllFailed)?;
    let (p, q) = &fits[&k1_hat];

    let mut mse2_path = BTreeMap::new();
    for k in 1..=kbar2 {
        match factory.build(&data.x, k).and_then(|b| mse2(data, p, q, &b)) {
            Ok(v) => {
                mse2_path.insert(k, v);
            }
            Err(e) => {
                mse2_path.insert(k, f64::INFINITY);
                failures.push(GridFailure {
                    stage: 2,
                    k,
                    message: e.to_string(),
                });
            }
        }
    }
    let k2_hat = argmin(&mse2_path).ok_or(Error::AllFailed)?;
    Ok(TuningResult {
        k1_hat,
        k2_hat,
        mse1_path,
        mse2_path,
        kbar1,
        kbar2,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::links::RhoFamily;

    fn toy(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n)
            .map(|i| ((i * 37) % n) as f64 / n as f64 - 0.5)
            .collect();
        let z: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 5 < 2 + (x[i] > 0.0) as usize) as u8 as f64)
            .collect();
        let d: Vec<f64> = (0..n)
            .map(|i| {
                if z[i] == 1.0 {
                    ((i % 5) != 0) as u8 as f64
                } else {
                    (i % 3 == 0) as u8 as f64
                }
            })
            .collect();
        Dataset::from_columns(vec![0.0; n], d, z, x).unwrap()
    }

    #[test]
    fn intercept_only_mse1_is_n() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = Dataset::from_columns(vec![0.0; n], vec![0.0; n], z, x).unwrap();
        let b = SieveBasis::build(&data.x, BasisSpec::power(1)).unwrap();
        // each arm: N/2 units at (2 - 1)² and N/2 at (0 - 1)²
        let v = mse1(&data, &b, &RhoFamily::EmpiricalLikelihood).unwrap();
        assert!((v - 2.0 * n as f64).abs() < 1e-9);
    }

    #[test]
    fn singleton_grid() {
        let r = select_k(&toy(60), 1, 1, &RhoFamily::EmpiricalLikelihood).unwrap();
        assert_eq!((r.k1_hat, r.k2_hat), (1, 1));
        assert_eq!(r.mse1_path.len(), 1);
        assert_eq!(r.mse2_path.len(), 1);
    }

    #[test]
    fn first_stage_never_beats_intercept_only() {
        let data = toy(120);
        let r = select_k(&data, 4, 3, &RhoFamily::EmpiricalLikelihood).unwrap();
        let base = r.mse1_path[&1];
        assert!(r.mse1_path.values().all(|v| *v >= base - 1e-9));
        assert_eq!(r.k1_hat, 1);
    }

    #[test]
    fn paths_reproduce_recomputed_criteria() {
        let data = toy(100);
        let rho = RhoFamily::EmpiricalLikelihood;
        let r = select_k(&data, 3, 3, &rho).unwrap();
        for (&k, &v) in &r.mse1_path {
            let b = SieveBasis::build(&data.x, BasisSpec::power(k)).unwrap();
            assert!((mse1(&data, &b, &rho).unwrap() - v).abs() <= 1e-10 * v.max(1.0));
        }
        let b1 = SieveBasis::build(&data.x, BasisSpec::power(r.k1_hat)).unwrap();
        let (p, q) = (
            solve_p(&data, &b1, &rho).unwrap(),
            solve_q(&data, &b1, &rho).unwrap(),
        );
        for (&k, &v) in &r.mse2_path {
            let b2 = SieveBasis::build(&data.x, BasisSpec::power(k)).unwrap();
            assert!((mse2(&data, &p, &q, &b2).unwrap() - v).abs() <= 1e-10 * v.max(1.0));
        }
    }

    #[test]
    fn ties_go_to_smaller_k() {
        let path: BTreeMap<usize, f64> = [(1, 2.0), (2, 2.0 - 1e-13), (3, 5.0)].into();
        assert_eq!(argmin(&path), Some(1));
        let path: BTreeMap<usize, f64> = [(1, f64::INFINITY), (2, 3.0), (3, 1.0)].into();
        assert_eq!(argmin(&path), Some(3));
    }

    /// Power basis with the last column duplicated at one size.
    struct Duplicating {
        at: usize,
    }

    impl BasisFactory for Duplicating {
        fn build(&self, x: &DMatrix<f64>, k: usize) -> Result<SieveBasis> {
            let spec = BasisSpec::power(k);
            let raw = crate::sieve::build_raw_basis(x, spec)?;
            if k != self.at {
                return SieveBasis::from_raw(spec, raw);
            }
            let mut wide = raw.clone().insert_column(k, 0.0);
            wide.set_column(k, &raw.column(k - 1));
            SieveBasis::from_raw(spec, wide)
        }
    }

    #[test]
    fn rank_failure_is_skipped() {
        let data = toy(80);
        let r = select_k_with(
            &data,
            3,
            3,
            &RhoFamily::EmpiricalLikelihood,
            &Duplicating { at: 2 },
        )
        .unwrap();
        assert!(r.mse1_path[&2].is_infinite());
        assert!(r.mse2_path[&2].is_infinite());
        assert!(r.failures.iter().any(|f| f.stage == 1 && f.k == 2));
        assert_ne!(r.k2_hat, 2);
    }

    #[test]
    fn all_failed() {
        struct Never;
        impl BasisFactory for Never {
            fn build(&self, _: &DMatrix<f64>, _: usize) -> Result<SieveBasis> {
                Err(Error::Rank("always".into()))
            }
        }
        let err = select_k_with(&toy(50), 2, 2, &RhoFamily::Cue, &Never).unwrap_err();
        assert!(matches!(err, Error::AllFailed));
    }
}
