//! Primal calibration problem solved directly, as a reference for the dual fits.
//!
//! Minimizes `Σ_{i∈S} L(wᵢ)` subject to `(1/N) Σ_{i∈S} wᵢuᵢ = ū` by
//! infeasible-start Newton on the KKT system. Only intended for small
//! instances; it forms an `|S|`-dimensional diagonal Hessian and a `K × K`
//! Schur complement per step.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::links::Distance;
use crate::sieve::SieveBasis;

const MAX_ITER: usize = 200;
const RESIDUAL_TOL: f64 = 1e-13;

/// Primal weights for the `Z = 1` and `Z = 0` arms, zero outside the arm.
pub fn oracle_primal_weights(
    data: &Dataset,
    basis1: &SieveBasis,
    distance: &Distance,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = primal_arm(&basis1.eval, &data.z, distance)?;
    let mask: Vec<f64> = data.z.iter().map(|z| 1.0 - z).collect();
    let q = primal_arm(&basis1.eval, &mask, distance)?;
    Ok((p, q))
}

fn primal_arm(u: &DMatrix<f64>, mask: &[f64], distance: &Distance) -> Result<DVector<f64>> {
    let n = u.nrows();
    let k = u.ncols();
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i] == 1.0).collect();
    let m = idx.len();
    if m == 0 {
        return Err(Error::Infeasible("empty arm".into()));
    }
    // constraint A w = b with A = U_Sᵀ / N
    let a = DMatrix::from_fn(k, m, |r, c| u[(idx[c], r)] / n as f64);
    let b = u.row_mean().transpose();

    let mut w = DVector::from_element(m, n as f64 / m as f64);
    let mut nu = DVector::zeros(k);
    let residual = |w: &DVector<f64>, nu: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>)> {
        if w.iter()
            .any(|&v| v <= distance.domain.0 || v >= distance.domain.1)
        {
            return None;
        }
        let dual = w.map(|v| distance.d1(v)) + a.transpose() * nu;
        let primal = &a * w - &b;
        Some((dual, primal))
    };
    let norm = |r: &(DVector<f64>, DVector<f64>)| (r.0.norm_squared() + r.1.norm_squared()).sqrt();

    let mut r =
        residual(&w, &nu).ok_or_else(|| Error::Infeasible("start outside domain".into()))?;
    for _ in 0..MAX_ITER {
        if r.0.amax() <= RESIDUAL_TOL && r.1.amax() <= RESIDUAL_TOL {
            break;
        }
        let hinv = w.map(|v| 1.0 / distance.d2(v));
        if hinv.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::Infeasible("distance curvature vanished".into()));
        }
        // Schur complement: (A H⁻¹ Aᵀ) ν⁺ = r_p' with Δw = -H⁻¹(∇L + Aᵀν⁺)
        let grad_l = w.map(|v| distance.d1(v));
        let ah = DMatrix::from_fn(k, m, |rr, c| a[(rr, c)] * hinv[c]);
        let schur = &ah * a.transpose();
        let rhs = &r.1 - &ah * &grad_l;
        let nu_new = schur
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| schur.lu().solve(&rhs))
            .ok_or_else(|| Error::Infeasible("constraint matrix is rank deficient".into()))?;
        let dw = -hinv.component_mul(&(grad_l + a.transpose() * &nu_new));
        let dnu = nu_new - &nu;

        let r_norm = norm(&r);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..80 {
            let w_t = &w + &dw * t;
            let nu_t = &nu + &dnu * t;
            if let Some(r_t) = residual(&w_t, &nu_t) {
                if norm(&r_t) <= (1.0 - 0.01 * t) * r_norm {
                    next = Some((w_t, nu_t, r_t));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((w_t, nu_t, r_t)) = next else {
            // no further decrease is possible; accept if already at working precision
            if r.1.amax() <= 1e-10 && r.0.amax() <= 1e-10 {
                break;
            }
            return Err(Error::Infeasible("line search stalled".into()));
        };
        w = w_t;
        nu = nu_t;
        r = r_t;
    }
    if r.1.amax() > 1e-8 {
        return Err(Error::Infeasible(format!(
            "constraint residual {:e}",
            r.1.amax()
        )));
    }
    let mut out = DVector::zeros(n);
    for (c, &i) in idx.iter().enumerate() {
        out[i] = w[c];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sieve::BasisSpec;

    #[test]
    fn intercept_only_el_is_inverse_frequency() {
        let n = 30;
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let z: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::from_columns(vec![0.0; n], vec![0.0; n], z, x).unwrap();
        let basis = SieveBasis::build(&data.x, BasisSpec::power(1)).unwrap();
        let (p, q) =
            oracle_primal_weights(&data, &basis, &Distance::empirical_likelihood()).unwrap();
        for i in 0..n {
            if data.z[i] == 1.0 {
                assert!((p[i] - 3.0).abs() < 1e-12);
                assert_eq!(q[i], 0.0);
            } else {
                assert!((q[i] - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constraints_hold() {
        let n = 50;
        let x: Vec<f64> = (0..n)
            .map(|i| ((i * 37) % 50) as f64 / 50.0 - 0.5)
            .collect();
        let z: Vec<f64> = (0..n)
            .map(|i| {
                if x[i] + 0.3 * ((i % 4) as f64 - 1.5) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let data = Dataset::from_columns(vec![0.0; n], vec![0.0; n], z, x).unwrap();
        let basis = SieveBasis::build(&data.x, BasisSpec::power(3)).unwrap();
        let (p, _) =
            oracle_primal_weights(&data, &basis, &Distance::empirical_likelihood()).unwrap();
        let lhs = basis.eval.transpose() * &p / n as f64;
        let rhs = basis.eval.row_mean().transpose();
        assert!((lhs - rhs).amax() < 1e-8);
        assert!(data
            .z
            .iter()
            .zip(p.iter())
            .all(|(z, w)| *z == 0.0 || *w > 0.0));
    }

    #[test]
    fn infeasible_when_arm_cannot_span_the_mean() {
        // Z = 1 only where x < 0, and the constraints on (1, x) demand a positive weighted mean
        let x = vec![-0.9, -0.8, -0.7, 0.5, 0.6, 0.7, 0.8, 0.9];
        let z = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let data = Dataset::from_columns(vec![0.0; 8], vec![0.0; 8], z, x).unwrap();
        let basis = SieveBasis::build(&data.x, BasisSpec::power(2)).unwrap();
        let res = oracle_primal_weights(&data, &basis, &Distance::empirical_likelihood());
        assert!(matches!(res, Err(Error::Infeasible(_))));
    }
}
