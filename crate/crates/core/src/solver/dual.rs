//! Unconstrained dual objectives for the calibration weights and for the
//! instrument effect on treatment.

use nalgebra::{DMatrix, DVector};

use super::newton::{newton_maximize, ConcaveProblem, Evaluation, NewtonOptions, NewtonStatus};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::links::{tanh_link_eval, Rho};
use crate::sieve::SieveBasis;

/// Bound on `|γᵀu|` while fitting the tanh link; `tanh(30)` is 1 in double precision.
pub const LINK_CAP: f64 = 30.0;

/// Below this `min |δ̂ᴰ|` the fit is flagged as a weak instrument.
pub const WEAK_INSTRUMENT_WARN: f64 = 1e-3;

/// `(1/N) Σ maskᵢ ρ(λᵀuᵢ) - λᵀū`, concave in `λ`.
pub struct CalibrationProblem<'a> {
    u: &'a DMatrix<f64>,
    mask: &'a [f64],
    rho: &'a dyn Rho,
    ubar: DVector<f64>,
    init: DVector<f64>,
}

impl<'a> CalibrationProblem<'a> {
    pub fn new(basis: &'a SieveBasis, mask: &'a [f64], rho: &'a dyn Rho) -> Result<Self> {
        let n = basis.n();
        let n_on = mask.iter().filter(|&&m| m == 1.0).count();
        if n_on == 0 || n_on == n {
            return Err(Error::Degenerate(format!(
                "calibration arm has {n_on} of {n} units"
            )));
        }
        let u = &basis.eval;
        let ubar = u.row_mean().transpose();
        let target = n as f64 / n_on as f64;
        let v0 = rho.d1_inverse(target).ok_or(Error::Domain {
            family: "rho inverse",
            value: target,
        })?;
        let init = basis.constant_coefficients() * v0;
        Ok(Self {
            u,
            mask,
            rho,
            ubar,
            init,
        })
    }
}

impl ConcaveProblem for CalibrationProblem<'_> {
    fn dim(&self) -> usize {
        self.u.ncols()
    }

    fn init(&self) -> DVector<f64> {
        self.init.clone()
    }

    fn evaluate(&self, lambda: &DVector<f64>) -> Result<Evaluation> {
        let n = self.u.nrows() as f64;
        let k = self.dim();
        let lin = self.u * lambda;
        let mut value = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for (i, &m) in self.mask.iter().enumerate() {
            if m != 1.0 {
                continue;
            }
            let r = self.rho.eval(lin[i])?;
            let ui = self.u.row(i).transpose();
            value += r.rho;
            grad.axpy(r.d1, &ui, 1.0);
            hess.ger(r.d2, &ui, &ui, 1.0);
        }
        value = value / n - lambda.dot(&self.ubar);
        grad = grad / n - &self.ubar;
        hess /= n;
        Ok(Evaluation { value, grad, hess })
    }
}

/// Dual coefficients and fitted weights `ρ'(coefᵀuᵢ)` for every unit.
#[derive(Debug, Clone)]
pub struct WeightFit {
    pub coef: DVector<f64>,
    /// Outside the calibrated arm the index may leave the domain of `ρ`
    /// (the EL pole at -1); those entries are NaN and never enter `τ̂`.
    pub weights: DVector<f64>,
    pub iterations: usize,
}

fn solve_calibration(basis: &SieveBasis, mask: &[f64], rho: &dyn Rho) -> Result<WeightFit> {
    let problem = CalibrationProblem::new(basis, mask, rho)?;
    let res = newton_maximize(&problem, NewtonOptions::default())?;
    let lin = &basis.eval * &res.theta;
    let weights = lin
        .iter()
        .zip(mask)
        .map(|(&v, &m)| match rho.d1(v) {
            Ok(w) => Ok(w),
            Err(_) if m != 1.0 => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightFit {
        coef: res.theta,
        weights: DVector::from_vec(weights),
        iterations: res.iterations,
    })
}

/// Weights `Np̂ᵢ` estimating `1 / P(Z = 1 | Xᵢ)`.
pub fn solve_p(data: &Dataset, basis1: &SieveBasis, rho: &dyn Rho) -> Result<WeightFit> {
    check_rows(data, basis1)?;
    solve_calibration(basis1, &data.z, rho)
}

/// Weights `Nq̂ᵢ` estimating `1 / P(Z = 0 | Xᵢ)`.
pub fn solve_q(data: &Dataset, basis1: &SieveBasis, rho: &dyn Rho) -> Result<WeightFit> {
    check_rows(data, basis1)?;
    let mask: Vec<f64> = data.z.iter().map(|z| 1.0 - z).collect();
    solve_calibration(basis1, &mask, rho)
}

fn check_rows(data: &Dataset, basis: &SieveBasis) -> Result<()> {
    if basis.n() != data.n() {
        return Err(Error::Input(format!(
            "basis has {} rows, data has {}",
            basis.n(),
            data.n()
        )));
    }
    Ok(())
}

/// `wᵢ = ZᵢNp̂ᵢ - (1 - Zᵢ)Nq̂ᵢ`.
pub fn signed_weights(z: &[f64], np_hat: &DVector<f64>, nq_hat: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(
        z.len(),
        |i, _| if z[i] == 1.0 { np_hat[i] } else { -nq_hat[i] },
    )
}

/// `(1/N) Σ mᵢγᵀuᵢ - (1/N) Σ f(γᵀuᵢ)` with `f(v) = log(eᵛ + e⁻ᵛ)`.
pub struct DeltaProblem<'a> {
    u: &'a DMatrix<f64>,
    moment: DVector<f64>,
    init: DVector<f64>,
}

impl<'a> DeltaProblem<'a> {
    pub fn new(basis: &'a SieveBasis, moment: DVector<f64>) -> Self {
        let mean = moment.mean().clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        let init = basis.constant_coefficients() * mean.atanh();
        Self {
            u: &basis.eval,
            moment,
            init,
        }
    }
}

impl ConcaveProblem for DeltaProblem<'_> {
    fn dim(&self) -> usize {
        self.u.ncols()
    }

    fn init(&self) -> DVector<f64> {
        self.init.clone()
    }

    fn evaluate(&self, gamma: &DVector<f64>) -> Result<Evaluation> {
        let n = self.u.nrows() as f64;
        let k = self.dim();
        let lin = self.u * gamma;
        let mut value = 0.0;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..self.u.nrows() {
            let (f, f1, f2) = tanh_link_eval(lin[i]);
            let ui = self.u.row(i).transpose();
            value += self.moment[i] * lin[i] - f;
            grad.axpy(self.moment[i] - f1, &ui, 1.0);
            hess.ger(-f2, &ui, &ui, 1.0);
        }
        Ok(Evaluation {
            value: value / n,
            grad: grad / n,
            hess: hess / n,
        })
    }

    fn max_step(&self, gamma: &DVector<f64>, step: &DVector<f64>) -> f64 {
        let a = self.u * gamma;
        let b = self.u * step;
        let mut t: f64 = 1.0;
        for (ai, bi) in a.iter().zip(b.iter()) {
            if *bi > 0.0 {
                t = t.min((LINK_CAP - ai) / bi);
            } else if *bi < 0.0 {
                t = t.min((-LINK_CAP - ai) / bi);
            }
        }
        t.max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct DeltaFit {
    pub coef: DVector<f64>,
    /// `δ̂ᴰᵢ = tanh(γ̂ᵀuᵢ)`.
    pub delta: DVector<f64>,
    pub iterations: usize,
    /// The link hit `|γᵀu| = 30` before the gradient vanished.
    pub saturated: bool,
    pub weak_instrument: bool,
}

/// Fits `δᴰ(x) = tanh(γᵀu(x))`, the instrument effect on treatment.
pub fn solve_delta(
    data: &Dataset,
    np_hat: &DVector<f64>,
    nq_hat: &DVector<f64>,
    basis2: &SieveBasis,
) -> Result<DeltaFit> {
    check_rows(data, basis2)?;
    let w = signed_weights(&data.z, np_hat, nq_hat);
    let moment = DVector::from_fn(data.n(), |i, _| data.d[i] * w[i]);
    let problem = DeltaProblem::new(basis2, moment);
    let res = newton_maximize(&problem, NewtonOptions::default())?;
    let lin = &basis2.eval * &res.theta;
    let delta = lin.map(f64::tanh);
    let min_abs = delta.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    Ok(DeltaFit {
        coef: res.theta,
        delta,
        iterations: res.iterations,
        saturated: res.status == NewtonStatus::Saturated,
        weak_instrument: min_abs < WEAK_INSTRUMENT_WARN,
    })
}
