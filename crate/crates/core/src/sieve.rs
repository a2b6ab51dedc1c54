//! Sieve bases `u_K(X)`: power series or B-splines, orthonormalized on the sample.
//!
//! A raw design `ũ_K(X)` is built first (its first column is the constant 1),
//! then a `K×K` transform `A` is chosen so that `u_K = A ũ_K` satisfies the
//! sample identity `(1/N) Σ u_K(X_i) u_K(X_i)ᵀ = I`. The transform is the
//! symmetric inverse square root of the sample Gram matrix, so the result does
//! not depend on column order.
//!
//! For several covariates the functions are products of univariate terms,
//! enumerated in graded lexicographic order and truncated to `K` columns.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative ridge added to the Gram matrix before the inverse square root.
const GRAM_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Power,
    Spline,
}

/// Highest spline degree used when the degree is derived from `K`.
pub const MAX_SPLINE_DEGREE: usize = 3;

impl BasisFamily {
    /// The basis with `k` functions: splines are cubic when `k` allows it and
    /// of degree `k - 1` otherwise; `k = 1` is the constant for both families.
    pub fn spec(self, k: usize) -> BasisSpec {
        match self {
            BasisFamily::Spline if k >= 2 => BasisSpec::spline(k, (k - 1).min(MAX_SPLINE_DEGREE)),
            _ => BasisSpec::power(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    UniformQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    /// Number of basis functions.
    pub k: usize,
    /// Spline degree; ignored by the power family.
    pub degree: usize,
    pub knot_rule: KnotRule,
}

impl BasisSpec {
    pub fn power(k: usize) -> Self {
        Self {
            family: BasisFamily::Power,
            k,
            degree: 0,
            knot_rule: KnotRule::UniformQuantile,
        }
    }

    pub fn spline(k: usize, degree: usize) -> Self {
        Self {
            family: BasisFamily::Spline,
            k,
            degree,
            knot_rule: KnotRule::UniformQuantile,
        }
    }

    /// Same family and degree with a different number of functions.
    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Spec("K must be at least 1".into()));
        }
        if self.family == BasisFamily::Spline {
            if self.degree == 0 {
                return Err(Error::Spec("spline degree must be at least 1".into()));
            }
            if self.k < self.degree + 1 {
                return Err(Error::Spec(format!(
                    "spline basis of degree {} needs K >= {}, got {}",
                    self.degree,
                    self.degree + 1,
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Data-dependent recipe for the raw design: multi-indices plus, for splines,
/// the knot vector of every covariate. Lets the same functions be evaluated
/// at new points.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDesign {
    spec: BasisSpec,
    terms: Vec<Vec<usize>>,
    knots: Vec<Vec<f64>>,
    /// Univariate functions per covariate (spline family only).
    per_covariate: usize,
}

impl RawDesign {
    pub fn fit(x: &DMatrix<f64>, spec: BasisSpec) -> Result<Self> {
        spec.validate()?;
        let (n, r) = x.shape();
        if r == 0 {
            return Err(Error::Input("no covariate columns".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("covariates contain non-finite values".into()));
        }
        if spec.k > n {
            return Err(Error::Spec(format!(
                "K = {} exceeds the sample size N = {n}",
                spec.k
            )));
        }
        match spec.family {
            BasisFamily::Power => Ok(Self {
                spec,
                terms: graded_terms(r, spec.k, usize::MAX),
                knots: Vec::new(),
                per_covariate: 0,
            }),
            BasisFamily::Spline => {
                let m = per_covariate_size(spec.k, r, spec.degree);
                let terms = graded_terms(r, spec.k, m);
                if terms.len() < spec.k {
                    return Err(Error::Spec(format!(
                        "only {} tensor-product functions are constructible, K = {}",
                        terms.len(),
                        spec.k
                    )));
                }
                let knots = (0..r)
                    .map(|c| {
                        let col: Vec<f64> = x.column(c).iter().copied().collect();
                        quantile_knots(&col, m - spec.degree - 1, spec.degree)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    spec,
                    terms,
                    knots,
                    per_covariate: m,
                })
            }
        }
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn evaluate(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, r) = x.shape();
        let k = self.spec.k;
        let mut out = DMatrix::zeros(n, k);
        let mut uni = vec![Vec::new(); r];
        for i in 0..n {
            for (c, slot) in uni.iter_mut().enumerate() {
                *slot = self.univariate(c, x[(i, c)]);
            }
            for (j, term) in self.terms.iter().enumerate() {
                out[(i, j)] = term.iter().enumerate().map(|(c, &e)| uni[c][e]).product();
            }
        }
        out
    }

    /// Values of the univariate functions of covariate `c` at `v`, indexed by term exponent.
    fn univariate(&self, c: usize, v: f64) -> Vec<f64> {
        let max_index = self.terms.iter().map(|t| t[c]).max().unwrap_or(0);
        match self.spec.family {
            BasisFamily::Power => {
                let mut out = Vec::with_capacity(max_index + 1);
                let mut p = 1.0;
                for _ in 0..=max_index {
                    out.push(p);
                    p *= v;
                }
                out
            }
            BasisFamily::Spline => {
                // The first B-spline is replaced by the constant; partition of
                // unity keeps the span unchanged.
                let mut b = bspline_row(v, &self.knots[c], self.spec.degree, self.per_covariate);
                b[0] = 1.0;
                b
            }
        }
    }
}

/// Raw design matrix `ũ_K(X_i)`, one row per unit.
pub fn build_raw_basis(x: &DMatrix<f64>, spec: BasisSpec) -> Result<DMatrix<f64>> {
    Ok(RawDesign::fit(x, spec)?.evaluate(x))
}

/// Returns `(A, eval)` with `eval = raw · Aᵀ` and `(1/N) evalᵀ eval = I`.
pub fn orthonormalize(raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, k) = raw.shape();
    if n == 0 || k == 0 {
        return Err(Error::Rank("empty design".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("design contains non-finite values".into()));
    }
    let first = inverse_sqrt_gram(raw, true)?;
    let stage = raw * first.transpose();
    // A second pass removes the ridge and the rounding of the first one.
    let second = inverse_sqrt_gram(&stage, false)?;
    let a = second * first;
    let eval = raw * a.transpose();
    Ok((a, eval))
}

/// Symmetric `G^{-1/2}` of `G = (1/N) mᵀm`; the first pass is ridged and rank checked.
fn inverse_sqrt_gram(m: &DMatrix<f64>, first_pass: bool) -> Result<DMatrix<f64>> {
    let n = m.nrows() as f64;
    let k = m.ncols();
    let gram = (m.transpose() * m) / n;
    let trace = gram.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(Error::Rank("Gram matrix has zero trace".into()));
    }
    let ridge = GRAM_RIDGE * trace / k as f64;
    let eig = SymmetricEigen::new(gram);
    let min_eig = eig.eigenvalues.min();
    if first_pass && min_eig < ridge {
        return Err(Error::Rank(format!(
            "smallest Gram eigenvalue {min_eig:e} is below {ridge:e}"
        )));
    }
    let shift = if first_pass { ridge } else { 0.0 };
    let scale =
        DVector::from_iterator(k, eig.eigenvalues.iter().map(|&l| 1.0 / (l + shift).sqrt()));
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scale) * v.transpose())
}

#[derive(Debug, Clone)]
pub struct SieveBasis {
    pub spec: BasisSpec,
    /// `ũ_K(X_i)`, N×K.
    pub raw_eval: DMatrix<f64>,
    /// `A`, K×K.
    pub transform: DMatrix<f64>,
    /// `u_K(X_i) = A ũ_K(X_i)`, N×K.
    pub eval: DMatrix<f64>,
    /// Largest row norm of `eval`.
    pub zeta: f64,
    design: Option<RawDesign>,
}

impl SieveBasis {
    pub fn build(x: &DMatrix<f64>, spec: BasisSpec) -> Result<Self> {
        let design = RawDesign::fit(x, spec)?;
        let raw = design.evaluate(x);
        let mut basis = Self::from_raw(spec, raw)?;
        basis.design = Some(design);
        Ok(basis)
    }

    /// Orthonormalizes an arbitrary design; `spec` is kept as a label only.
    pub fn from_raw(spec: BasisSpec, raw: DMatrix<f64>) -> Result<Self> {
        let (transform, eval) = orthonormalize(&raw)?;
        let zeta = zeta_of(&eval);
        Ok(Self {
            spec,
            raw_eval: raw,
            transform,
            eval,
            zeta,
            design: None,
        })
    }

    pub fn n(&self) -> usize {
        self.eval.nrows()
    }

    pub fn k(&self) -> usize {
        self.eval.ncols()
    }

    /// Coefficients `c` of the least-squares representation of the constant
    /// function, `eval · c ≈ 1`. Exact whenever the raw design contains an
    /// intercept.
    pub fn constant_coefficients(&self) -> DVector<f64> {
        let n = self.n() as f64;
        self.eval.row_sum().transpose() / n
    }

    /// Evaluates `u_K` at new covariate rows (only for bases built from a spec).
    pub fn evaluate(&self, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        self.design
            .as_ref()
            .map(|d| d.evaluate(x) * self.transform.transpose())
    }

    /// `‖(1/N) evalᵀ eval − I‖_max`.
    pub fn gram_deviation(&self) -> f64 {
        let n = self.n() as f64;
        let gram = self.eval.transpose() * &self.eval / n;
        (gram - DMatrix::identity(self.k(), self.k())).amax()
    }
}

/// Sample proxy for `sup_x ‖u_K(x)‖`.
pub fn zeta(basis: &SieveBasis) -> f64 {
    basis.zeta
}

fn zeta_of(eval: &DMatrix<f64>) -> f64 {
    eval.row_iter().map(|row| row.norm()).fold(0.0, f64::max)
}

fn per_covariate_size(k: usize, r: usize, degree: usize) -> usize {
    let mut m = 1usize;
    while m.saturating_pow(r as u32) < k {
        m += 1;
    }
    m.max(degree + 1)
}

/// First `k` multi-indices over `r` variables in graded lexicographic order,
/// each entry below `cap`.
fn graded_terms(r: usize, k: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k);
    let max_grade = if cap == usize::MAX { k } else { r * (cap - 1) };
    for grade in 0..=max_grade {
        let mut current = vec![0; r];
        push_grade(&mut out, &mut current, 0, grade, cap, k);
        if out.len() >= k {
            break;
        }
    }
    out.truncate(k);
    out
}

fn push_grade(
    out: &mut Vec<Vec<usize>>,
    current: &mut Vec<usize>,
    pos: usize,
    remaining: usize,
    cap: usize,
    limit: usize,
) {
    if out.len() >= limit {
        return;
    }
    let r = current.len();
    if pos == r - 1 {
        if remaining < cap {
            current[pos] = remaining;
            out.push(current.clone());
        }
        return;
    }
    for e in (0..=remaining.min(cap.saturating_sub(1))).rev() {
        current[pos] = e;
        push_grade(out, current, pos + 1, remaining - e, cap, limit);
    }
    current[pos] = 0;
}

/// Clamped knot vector with `n_interior` knots at uniform quantiles of `values`.
pub fn quantile_knots(values: &[f64], n_interior: usize, degree: usize) -> Result<Vec<f64>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    if hi <= lo {
        return Err(Error::Spec(
            "covariate is constant; no spline can be built".into(),
        ));
    }
    let mut knots = vec![lo; degree + 1];
    let mut last = lo;
    for j in 1..=n_interior {
        let q = quantile(&sorted, j as f64 / (n_interior + 1) as f64);
        if q <= last || q >= hi {
            return Err(Error::Spec(format!(
                "{n_interior} interior knots need more distinct covariate values"
            )));
        }
        knots.push(q);
        last = q;
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    Ok(knots)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// All `m` B-spline functions of the given degree at `v` (clamped to the knot range).
pub fn bspline_row(v: f64, knots: &[f64], degree: usize, m: usize) -> Vec<f64> {
    let p = degree;
    let a = knots[p];
    let b = knots[m];
    let v = v.clamp(a, b);
    let mut span = p;
    while span < m - 1 && v >= knots[span + 1] {
        span += 1;
    }
    let mut basis = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    basis[0] = 1.0;
    for j in 1..=p {
        left[j] = v - knots[span + 1 - j];
        right[j] = knots[span + j] - v;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = basis[r] / (right[r + 1] + left[j - r]);
            basis[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        basis[j] = saved;
    }
    let mut out = vec![0.0; m];
    for (r, val) in basis.into_iter().enumerate() {
        out[span - p + r] = val;
    }
    out
}
