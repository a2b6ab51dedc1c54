//! Population quantities of the simulation design: the treatment effect, the
//! efficient influence function and its variance.

use nalgebra::{DMatrix, SymmetricEigen};

use super::dgp::DgpConfig;
use crate::error::{Error, Result};

/// Closed form and quadrature must agree to this tolerance.
pub const ORACLE_TOL: f64 = 1e-8;

/// Gauss–Legendre nodes per covariate interval.
const GL_NODES: usize = 40;

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i.abs_diff(j) == 1 {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E[h(X)]` for `X` uniform on `(-1, -0.5) ∪ (0.5, 1)`; the density is 1 there.
pub fn integrate_covariate(h: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(GL_NODES);
    let mut total = 0.0;
    for (lo, hi) in [(-1.0, -0.5), (0.5, 1.0)] {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (t, w) in nodes.iter().zip(&weights) {
            total += half * w * h(mid + half * t);
        }
    }
    total
}

fn bern(p: f64, v: f64) -> f64 {
    if v == 1.0 {
        p
    } else {
        1.0 - p
    }
}

/// `E[D | Z = z, X = x]` by summing over the confounder.
fn mean_d(cfg: &DgpConfig, z: f64, x: f64) -> f64 {
    [0.0, 1.0].iter().map(|&u| 0.5 * cfg.p_d(z, x, u)).sum()
}

/// `E[Y | Z = z, X = x]` by summing over the confounder and treatment.
fn mean_y(cfg: &DgpConfig, z: f64, x: f64) -> f64 {
    let mut total = 0.0;
    for u in [0.0, 1.0] {
        for d in [0.0, 1.0] {
            total += 0.5 * bern(cfg.p_d(z, x, u), d) * cfg.p_y(d, x, u);
        }
    }
    total
}

/// `P(Z = 1)` integrated over the covariate law.
pub fn marginal_p_z(cfg: &DgpConfig) -> f64 {
    integrate_covariate(|x| cfg.p_z(x))
}

/// `τ = c₁`, confirmed by integrating `δʸ(x) / δᴰ(x)` with `δʸ, δᴰ` obtained by
/// enumeration over `(U, D)`.
pub fn oracle_true_tau(cfg: &DgpConfig) -> Result<f64> {
    cfg.validate()?;
    let closed_form = cfg.coef_y[1];
    let quadrature = integrate_covariate(|x| {
        let dy = mean_y(cfg, 1.0, x) - mean_y(cfg, 0.0, x);
        let dd = mean_d(cfg, 1.0, x) - mean_d(cfg, 0.0, x);
        dy / dd
    });
    if (closed_form - quadrature).abs() > ORACLE_TOL {
        return Err(Error::OracleMismatch {
            closed_form,
            quadrature,
        });
    }
    Ok(closed_form)
}

/// The five nuisance functions at `x`, in closed form.
#[derive(Debug, Clone, Copy)]
pub struct Functionals {
    pub p_z1: f64,
    /// `δᴰ(x) = b₁`.
    pub delta_d: f64,
    /// `δ(x) = c₁`.
    pub delta: f64,
    /// `E[D | Z = 0, x] = b₀ + b₂x + b₃/2`.
    pub p0_d: f64,
    /// `E[Y | Z = 0, x] = c₀ + c₁·p0_d + c₂x + c₃/2`.
    pub p0_y: f64,
}

pub fn functionals(cfg: &DgpConfig, x: f64) -> Functionals {
    let (b, c) = (&cfg.coef_d, &cfg.coef_y);
    let p0_d = b[0] + b[2] * x + b[3] / 2.0;
    Functionals {
        p_z1: cfg.p_z(x),
        delta_d: b[1],
        delta: c[1],
        p0_d,
        p0_y: c[0] + c[1] * p0_d + c[2] * x + c[3] / 2.0,
    }
}

/// Efficient influence function of `τ` at one observation.
pub fn efficient_influence(cfg: &DgpConfig, d: f64, z: f64, x: f64, y: f64) -> f64 {
    let f = functionals(cfg, x);
    let tau = cfg.coef_y[1];
    let fz = if z == 1.0 { f.p_z1 } else { 1.0 - f.p_z1 };
    (2.0 * z - 1.0) / fz / f.delta_d * (y - d * f.delta - f.p0_y + f.p0_d * f.delta) + f.delta - tau
}

/// `V_eff = E[φ_eff²]`, exact over `(U, Z, D, Y)` and by quadrature over `X`.
pub fn oracle_efficiency_bound(cfg: &DgpConfig) -> Result<f64> {
    cfg.validate()?;
    // the closed-form functionals must match their enumerated counterparts
    for x in [-0.9, -0.6, 0.55, 0.95] {
        let f = functionals(cfg, x);
        let checks = [
            (f.p0_d, mean_d(cfg, 0.0, x)),
            (f.p0_y, mean_y(cfg, 0.0, x)),
            (f.delta_d, mean_d(cfg, 1.0, x) - mean_d(cfg, 0.0, x)),
        ];
        for (closed_form, enumerated) in checks {
            if (closed_form - enumerated).abs() > ORACLE_TOL {
                return Err(Error::OracleMismatch {
                    closed_form,
                    quadrature: enumerated,
                });
            }
        }
    }
    let v = integrate_covariate(|x| {
        let mut total = 0.0;
        for u in [0.0, 1.0] {
            for z in [0.0, 1.0] {
                let pz = bern(cfg.p_z(x), z);
                for d in [0.0, 1.0] {
                    let pd = bern(cfg.p_d(z, x, u), d);
                    for y in [0.0, 1.0] {
                        let py = bern(cfg.p_y(d, x, u), y);
                        total += 0.5 * pz * pd * py * efficient_influence(cfg, d, z, x, y).powi(2);
                    }
                }
            }
        }
        total
    });
    Ok(v)
}
