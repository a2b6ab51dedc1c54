//! Sandwich variance for the stacked estimating equations of `(λ, β, γ, τ)`.
//!
//! Per-unit moments, with `w = Zρ'(λᵀu₁) - (1-Z)ρ'(βᵀu₁)`:
//!
//! ```text
//! g₁ = Zρ'(λᵀu₁)u₁ - u₁
//! g₂ = (1-Z)ρ'(βᵀu₁)u₁ - u₁
//! g₃ = D·w·u₂ - f'(γᵀu₂)u₂
//! g₄ = w·Y / f'(γᵀu₂) - τ
//! ```
//!
//! The Jacobian is block lower triangular in this ordering, so `s = L⁻ᵀe`
//! is obtained by back substitution through the diagonal blocks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::Estimate;
use crate::links::{tanh_link_eval, Rho};
use crate::sieve::SieveBasis;

/// Two-sided 95% normal critical value.
pub const Z_975: f64 = 1.959964;

/// Diagonal blocks with reciprocal condition below this are treated as singular.
const RCOND_MIN: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub k1: usize,
    pub k2: usize,
    /// `(λ, β, γ, τ)`.
    pub theta: DVector<f64>,
    /// Row `i` is `g(Zᵢ, Dᵢ, Xᵢ, Yᵢ; θ)`.
    pub g_eval: DMatrix<f64>,
    /// `(1/N) Σ ∂g/∂θ`.
    pub l_hat: DMatrix<f64>,
    /// `(1/N) Σ g gᵀ`.
    pub omega_hat: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct VarianceReport {
    pub tau_hat: f64,
    pub v_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
}

/// Stacks `(λ̂, β̂, γ̂, τ̂)` from a fitted estimate.
pub fn stacked_theta(est: &Estimate) -> DVector<f64> {
    let f = &est.fit;
    let mut v = Vec::with_capacity(2 * est.k1 + est.k2 + 1);
    v.extend(f.lambda_hat.iter());
    v.extend(f.beta_hat.iter());
    v.extend(f.gamma_hat.iter());
    v.push(est.tau_hat);
    DVector::from_vec(v)
}

struct Split<'a> {
    lambda: nalgebra::DVectorView<'a, f64>,
    beta: nalgebra::DVectorView<'a, f64>,
    gamma: nalgebra::DVectorView<'a, f64>,
    tau: f64,
}

fn split(theta: &DVector<f64>, k1: usize, k2: usize) -> Result<Split<'_>> {
    if theta.len() != 2 * k1 + k2 + 1 {
        return Err(Error::Input(format!(
            "theta has length {}, expected {}",
            theta.len(),
            2 * k1 + k2 + 1
        )));
    }
    Ok(Split {
        lambda: theta.rows(0, k1),
        beta: theta.rows(k1, k1),
        gamma: theta.rows(2 * k1, k2),
        tau: theta[2 * k1 + k2],
    })
}

/// Per-unit pieces shared by the moments and their derivatives.
struct UnitTerms {
    /// `Zρ'(λᵀu₁)` and `Zρ''(λᵀu₁)`, zero when `Z = 0`.
    p1: f64,
    p2: f64,
    /// `(1-Z)ρ'(βᵀu₁)` and `(1-Z)ρ''(βᵀu₁)`, zero when `Z = 1`.
    q1: f64,
    q2: f64,
    /// `f'(γᵀu₂)` and `f''(γᵀu₂)`.
    f1: f64,
    f2: f64,
}

fn unit_terms(
    z: f64,
    u1: &DVector<f64>,
    u2: &DVector<f64>,
    s: &Split,
    rho: &dyn Rho,
) -> Result<UnitTerms> {
    let (mut p1, mut p2, mut q1, mut q2) = (0.0, 0.0, 0.0, 0.0);
    if z == 1.0 {
        let r = rho.eval(s.lambda.dot(u1))?;
        p1 = r.d1;
        p2 = r.d2;
    } else {
        let r = rho.eval(s.beta.dot(u1))?;
        q1 = r.d1;
        q2 = r.d2;
    }
    let (_, f1, f2) = tanh_link_eval(s.gamma.dot(u2));
    Ok(UnitTerms {
        p1,
        p2,
        q1,
        q2,
        f1,
        f2,
    })
}

/// `g(Z, D, X, Y; θ)` for one unit, given its basis rows.
pub fn moment_vector(
    z: f64,
    d: f64,
    y: f64,
    u1: &DVector<f64>,
    u2: &DVector<f64>,
    theta: &DVector<f64>,
    rho: &dyn Rho,
) -> Result<DVector<f64>> {
    let (k1, k2) = (u1.len(), u2.len());
    let s = split(theta, k1, k2)?;
    let t = unit_terms(z, u1, u2, &s, rho)?;
    let w = t.p1 - t.q1;
    let mut g = DVector::zeros(2 * k1 + k2 + 1);
    g.rows_mut(0, k1).copy_from(&(u1 * (t.p1 - 1.0)));
    g.rows_mut(k1, k1).copy_from(&(u1 * (t.q1 - 1.0)));
    g.rows_mut(2 * k1, k2).copy_from(&(u2 * (d * w - t.f1)));
    g[2 * k1 + k2] = w * y / t.f1 - s.tau;
    Ok(g)
}

fn rows(basis: &SieveBasis, i: usize) -> DVector<f64> {
    basis.eval.row(i).transpose()
}

/// All per-unit moments, one row per unit.
pub fn moment_matrix(
    data: &Dataset,
    basis1: &SieveBasis,
    basis2: &SieveBasis,
    theta: &DVector<f64>,
    rho: &dyn Rho,
) -> Result<DMatrix<f64>> {
    let p = theta.len();
    let mut g = DMatrix::zeros(data.n(), p);
    for i in 0..data.n() {
        let gi = moment_vector(
            data.z[i],
            data.d[i],
            data.y[i],
            &rows(basis1, i),
            &rows(basis2, i),
            theta,
            rho,
        )?;
        g.row_mut(i).copy_from(&gi.transpose());
    }
    Ok(g)
}

/// Analytic `L̂ = (1/N) Σ ∂g/∂θ`.
pub fn jacobian_l(
    data: &Dataset,
    basis1: &SieveBasis,
    basis2: &SieveBasis,
    theta: &DVector<f64>,
    rho: &dyn Rho,
) -> Result<DMatrix<f64>> {
    let (k1, k2) = (basis1.k(), basis2.k());
    let s = split(theta, k1, k2)?;
    let p = 2 * k1 + k2 + 1;
    let (o_b, o_g, o_t) = (k1, 2 * k1, 2 * k1 + k2);
    let mut l = DMatrix::zeros(p, p);
    for i in 0..data.n() {
        let u1 = rows(basis1, i);
        let u2 = rows(basis2, i);
        let t = unit_terms(data.z[i], &u1, &u2, &s, rho)?;
        let (d, y) = (data.d[i], data.y[i]);
        let w = t.p1 - t.q1;
        let uu11 = &u1 * u1.transpose();

        // g₁, g₂
        let mut blk = l.view_mut((0, 0), (k1, k1));
        blk += &uu11 * t.p2;
        let mut blk = l.view_mut((o_b, o_b), (k1, k1));
        blk += &uu11 * t.q2;

        // g₃
        let u2u1 = &u2 * u1.transpose();
        let mut blk = l.view_mut((o_g, 0), (k2, k1));
        blk += &u2u1 * (d * t.p2);
        let mut blk = l.view_mut((o_g, o_b), (k2, k1));
        blk -= &u2u1 * (d * t.q2);
        let mut blk = l.view_mut((o_g, o_g), (k2, k2));
        blk -= &u2 * u2.transpose() * t.f2;

        // g₄
        let ratio = y / t.f1;
        let mut blk = l.view_mut((o_t, 0), (1, k1));
        blk += u1.transpose() * (t.p2 * ratio);
        let mut blk = l.view_mut((o_t, o_b), (1, k1));
        blk -= u1.transpose() * (t.q2 * ratio);
        let mut blk = l.view_mut((o_t, o_g), (1, k2));
        blk -= u2.transpose() * (w * y * t.f2 / (t.f1 * t.f1));
    }
    l /= data.n() as f64;
    l[(o_t, o_t)] = -1.0;
    Ok(l)
}

/// Moments, Jacobian and outer product at the fitted parameters.
pub fn moment_system(data: &Dataset, est: &Estimate, rho: &dyn Rho) -> Result<MomentSystem> {
    if rho.name() != est.rho {
        return Err(Error::Config(format!(
            "estimate was fitted with rho '{}', variance requested with '{}'",
            est.rho,
            rho.name()
        )));
    }
    let theta = stacked_theta(est);
    let g_eval = moment_matrix(data, &est.basis1, &est.basis2, &theta, rho)?;
    let l_hat = jacobian_l(data, &est.basis1, &est.basis2, &theta, rho)?;
    let omega_hat = g_eval.transpose() * &g_eval / data.n() as f64;
    Ok(MomentSystem {
        k1: est.k1,
        k2: est.k2,
        theta,
        g_eval,
        l_hat,
        omega_hat,
    })
}

/// Solves `Bᵀx = rhs` for a square diagonal block `B`.
fn solve_block_transposed(
    block: DMatrix<f64>,
    rhs: DVector<f64>,
    name: &str,
) -> Result<DVector<f64>> {
    let bt = block.transpose();
    let sv = bt.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smax.is_nan() || smax <= 0.0 || smin / smax < RCOND_MIN {
        return Err(Error::Singular(format!(
            "Jacobian block {name} has reciprocal condition {:e}",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    bt.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular(format!("Jacobian block {name}")))
}

/// Entries `start..start + len` of the last row of `l`, as a column.
fn last_row(l: &DMatrix<f64>, start: usize, len: usize) -> DVector<f64> {
    let r = l.nrows() - 1;
    DVector::from_fn(len, |j, _| l[(r, start + j)])
}

/// `s = L̂⁻ᵀe` by block back substitution, `e` the last unit vector.
pub fn sandwich_direction(ms: &MomentSystem) -> Result<DVector<f64>> {
    let (k1, k2) = (ms.k1, ms.k2);
    let l = &ms.l_hat;
    let (o_b, o_g, o_t) = (k1, 2 * k1, 2 * k1 + k2);
    let l44 = l[(o_t, o_t)];
    if l44 == 0.0 {
        return Err(Error::Singular("tau block is zero".into()));
    }
    let s4 = 1.0 / l44;
    let l43 = last_row(l, o_g, k2);
    let s3 = solve_block_transposed(
        l.view((o_g, o_g), (k2, k2)).into_owned(),
        -l43 * s4,
        "gamma",
    )?;
    let l32 = l.view((o_g, o_b), (k2, k1));
    let l42 = last_row(l, o_b, k1);
    let s2 = solve_block_transposed(
        l.view((o_b, o_b), (k1, k1)).into_owned(),
        -(l32.transpose() * &s3) - l42 * s4,
        "beta",
    )?;
    let l31 = l.view((o_g, 0), (k2, k1));
    let l41 = last_row(l, 0, k1);
    let s1 = solve_block_transposed(
        l.view((0, 0), (k1, k1)).into_owned(),
        -(l31.transpose() * &s3) - l41 * s4,
        "lambda",
    )?;
    let mut s = DVector::zeros(o_t + 1);
    s.rows_mut(0, k1).copy_from(&s1);
    s.rows_mut(o_b, k1).copy_from(&s2);
    s.rows_mut(o_g, k2).copy_from(&s3);
    s[o_t] = s4;
    Ok(s)
}

fn report(tau_hat: f64, v_hat: f64, n: usize) -> VarianceReport {
    let se = (v_hat / n as f64).sqrt();
    VarianceReport {
        tau_hat,
        v_hat,
        se,
        ci95: (tau_hat - Z_975 * se, tau_hat + Z_975 * se),
    }
}

/// `V̂ = eᵀ L̂⁻¹ Ω̂ L̂⁻ᵀ e`, evaluated as the mean of `(sᵀgᵢ)²`.
pub fn sandwich_variance(ms: &MomentSystem) -> Result<VarianceReport> {
    let s = sandwich_direction(ms)?;
    let proj = &ms.g_eval * &s;
    let v_hat = proj.norm_squared() / ms.g_eval.nrows() as f64;
    Ok(report(
        ms.theta[ms.theta.len() - 1],
        v_hat,
        ms.g_eval.nrows(),
    ))
}

/// Same quantity through a dense LU of the full Jacobian.
pub fn sandwich_variance_dense(ms: &MomentSystem) -> Result<VarianceReport> {
    let p = ms.l_hat.nrows();
    let mut e = DVector::zeros(p);
    e[p - 1] = 1.0;
    let s = ms
        .l_hat
        .transpose()
        .lu()
        .solve(&e)
        .ok_or_else(|| Error::Singular("Jacobian".into()))?;
    let v_hat = (s.transpose() * &ms.omega_hat * &s)[(0, 0)];
    Ok(report(ms.theta[p - 1], v_hat, ms.g_eval.nrows()))
}

/// Standard error and confidence interval for a fitted estimate.
pub fn variance_report(data: &Dataset, est: &Estimate, rho: &dyn Rho) -> Result<VarianceReport> {
    sandwich_variance(&moment_system(data, est, rho)?)
}
