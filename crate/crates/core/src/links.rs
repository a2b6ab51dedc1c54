//! Concave generators `ρ` for the calibration weights and the tanh link used
//! for the instrument effect on treatment.
//!
//! A generator is evaluated together with its first two derivatives because
//! every caller (Newton, the moment Jacobian) needs all three at once.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible distance from the empirical-likelihood pole at `v = -1`.
const EL_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoValue {
    pub rho: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Strictly concave generator with derivatives.
pub trait Rho: Send + Sync {
    fn name(&self) -> String;

    fn eval(&self, v: f64) -> Result<RhoValue>;

    /// `(ρ')⁻¹(w)`, used to start Newton at the constant-weight solution.
    fn d1_inverse(&self, w: f64) -> Option<f64>;

    fn d1(&self, v: f64) -> Result<f64> {
        self.eval(v).map(|r| r.d1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RhoFamily {
    /// `ρ(v) = -exp(-v)`
    ExponentialTilting,
    /// `ρ(v) = log(1 + v)`
    #[default]
    EmpiricalLikelihood,
    /// `ρ(v) = -(1 - v)² / 2`
    Cue,
    /// `ρ(v) = v - exp(-v)`
    InverseLogistic,
}

impl RhoFamily {
    pub const ALL: [RhoFamily; 4] = [
        RhoFamily::EmpiricalLikelihood,
        RhoFamily::ExponentialTilting,
        RhoFamily::Cue,
        RhoFamily::InverseLogistic,
    ];

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            RhoFamily::ExponentialTilting => "et",
            RhoFamily::EmpiricalLikelihood => "el",
            RhoFamily::Cue => "cue",
            RhoFamily::InverseLogistic => "logistic",
        }
    }

    /// Open interval on which `ρ` is defined.
    pub fn domain(self) -> (f64, f64) {
        match self {
            RhoFamily::EmpiricalLikelihood => (-1.0, f64::INFINITY),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

impl fmt::Display for RhoFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for RhoFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RhoFamily::ALL
            .into_iter()
            .find(|f| f.short_name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown rho family '{s}'; valid families: el, et, cue, logistic"
                ))
            })
    }
}

impl Rho for RhoFamily {
    fn name(&self) -> String {
        self.short_name().to_string()
    }

    fn eval(&self, v: f64) -> Result<RhoValue> {
        rho_eval(*self, v)
    }

    fn d1_inverse(&self, w: f64) -> Option<f64> {
        let v = match self {
            RhoFamily::ExponentialTilting if w > 0.0 => -w.ln(),
            RhoFamily::EmpiricalLikelihood if w > 0.0 => 1.0 / w - 1.0,
            RhoFamily::Cue => 1.0 - w,
            RhoFamily::InverseLogistic if w > 1.0 => -(w - 1.0).ln(),
            _ => return None,
        };
        Some(v)
    }
}

/// `(ρ(v), ρ'(v), ρ''(v))` for one of the built-in families.
pub fn rho_eval(family: RhoFamily, v: f64) -> Result<RhoValue> {
    let domain_err = || Error::Domain {
        family: family.short_name(),
        value: v,
    };
    if !v.is_finite() {
        return Err(domain_err());
    }
    let out = match family {
        RhoFamily::ExponentialTilting => {
            let e = (-v).exp();
            RhoValue {
                rho: -e,
                d1: e,
                d2: -e,
            }
        }
        RhoFamily::EmpiricalLikelihood => {
            if v <= -1.0 + EL_GUARD {
                return Err(domain_err());
            }
            let w = 1.0 / (1.0 + v);
            RhoValue {
                rho: v.ln_1p(),
                d1: w,
                d2: -w * w,
            }
        }
        RhoFamily::Cue => RhoValue {
            rho: -(1.0 - v) * (1.0 - v) / 2.0,
            d1: 1.0 - v,
            d2: -1.0,
        },
        RhoFamily::InverseLogistic => {
            let e = (-v).exp();
            RhoValue {
                rho: v - e,
                d1: 1.0 + e,
                d2: -e,
            }
        }
    };
    if out.rho.is_finite() && out.d1.is_finite() && out.d2.is_finite() {
        Ok(out)
    } else {
        Err(domain_err())
    }
}

/// `f(v) = log(eᵛ + e⁻ᵛ)` with `f' = tanh` and `f''`, computed without overflow.
pub fn tanh_link_eval(v: f64) -> (f64, f64, f64) {
    let a = v.abs();
    let e = (-2.0 * a).exp();
    let f = a + e.ln_1p();
    let f1 = v.tanh();
    // sech²(v) = 1 - tanh²(v), in a form that keeps precision when tanh saturates
    let f2 = 4.0 * e / ((1.0 + e) * (1.0 + e));
    (f, f1, f2)
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Distance `L(w, 1)` between a weight and the design weight 1, with derivatives in `w`.
#[derive(Clone)]
pub struct Distance {
    pub name: String,
    value: ScalarFn,
    d1: ScalarFn,
    d2: ScalarFn,
    /// Open interval of admissible weights.
    pub domain: (f64, f64),
}

impl fmt::Debug for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Distance")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .finish()
    }
}

impl Distance {
    pub fn new(
        name: impl Into<String>,
        domain: (f64, f64),
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
            domain,
        }
    }

    /// `-log w + w - 1`; its conjugate generator is `log(1 + v)`.
    pub fn empirical_likelihood() -> Self {
        Self::new(
            "el",
            (0.0, f64::INFINITY),
            |w| -w.ln() + w - 1.0,
            |w| -1.0 / w + 1.0,
            |w| 1.0 / (w * w),
        )
    }

    /// `(w - 1)² / 2`; conjugate is the continuous-updating generator up to a constant.
    pub fn quadratic() -> Self {
        Self::new(
            "quadratic",
            (f64::NEG_INFINITY, f64::INFINITY),
            |w| (w - 1.0) * (w - 1.0) / 2.0,
            |w| w - 1.0,
            |_| 1.0,
        )
    }

    /// `w log w - w + 1`; conjugate is exponential tilting up to a constant.
    pub fn kullback_leibler() -> Self {
        Self::new(
            "kl",
            (0.0, f64::INFINITY),
            |w| w * w.ln() - w + 1.0,
            |w| w.ln(),
            |w| 1.0 / w,
        )
    }

    pub fn value(&self, w: f64) -> f64 {
        (self.value)(w)
    }

    pub fn d1(&self, w: f64) -> f64 {
        (self.d1)(w)
    }

    pub fn d2(&self, w: f64) -> f64 {
        (self.d2)(w)
    }

    /// `g(v) = L(1 - v, 1)` and its first two derivatives.
    pub fn g(&self, v: f64) -> (f64, f64, f64) {
        let w = 1.0 - v;
        (self.value(w), -self.d1(w), self.d2(w))
    }

    fn contains(&self, w: f64) -> bool {
        w > self.domain.0 && w < self.domain.1
    }

    /// 99 interior points of the domain, clipped to `[1 - 10, 1 + 10]`.
    pub fn probe_grid(&self) -> Vec<f64> {
        let lo = self.domain.0.max(-9.0);
        let hi = self.domain.1.min(11.0);
        (1..=99)
            .map(|j| lo + (hi - lo) * j as f64 / 100.0)
            .collect()
    }
}

/// Generator obtained from a distance by convex conjugation:
/// `ρ(u) = g(s) + u - u·s` with `g'(s) = u`, `g(v) = L(1 - v, 1)`.
///
/// Writing `w = 1 - s`, this is `ρ(u) = L(w) + u·w` where `L'(w) = -u`,
/// so `ρ'(u) = w` and `ρ''(u) = -1 / L''(w)`.
#[derive(Debug, Clone)]
pub struct ConjugateRho {
    distance: Distance,
}

impl ConjugateRho {
    pub fn distance(&self) -> &Distance {
        &self.distance
    }

    /// Weight `w` solving `L'(w) = target`, by safeguarded Newton on a bracket.
    fn solve_weight(&self, target: f64) -> Option<f64> {
        let d = &self.distance;
        let (lo_dom, hi_dom) = d.domain;
        let phi = |w: f64| d.d1(w) - target;

        // L'(1) = 0, so w = 1 is one end of the bracket
        let at_one = phi(1.0);
        if at_one == 0.0 {
            return Some(1.0);
        }
        let upward = at_one < 0.0;
        let (mut lo, mut hi) = (1.0, 1.0);
        let mut found = false;
        for k in 0..=52 {
            let cand = match (
                upward,
                upward && hi_dom.is_finite(),
                !upward && lo_dom.is_finite(),
            ) {
                (true, true, _) => hi_dom - (hi_dom - 1.0) * 0.5f64.powi(k + 1),
                (true, false, _) => 1.0 + 2f64.powi(k),
                (false, _, true) => lo_dom + (1.0 - lo_dom) * 0.5f64.powi(k + 1),
                (false, _, false) => 1.0 - 2f64.powi(k),
            };
            if !d.contains(cand) {
                break;
            }
            let f = phi(cand);
            if upward {
                if f > 0.0 {
                    hi = cand;
                    found = true;
                    break;
                }
                lo = cand;
            } else {
                if f < 0.0 {
                    lo = cand;
                    found = true;
                    break;
                }
                hi = cand;
            }
        }
        if !found {
            return None;
        }

        let mut w = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = phi(w);
            if f == 0.0 {
                return Some(w);
            }
            if f < 0.0 {
                lo = w;
            } else {
                hi = w;
            }
            let newton = w - f / d.d2(w);
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let done = (next - w).abs() <= 4.0 * f64::EPSILON * w.abs().max(1e-300)
                || hi - lo <= 4.0 * f64::EPSILON * hi.abs();
            w = next;
            if done {
                break;
            }
        }
        Some(w)
    }
}

/// Builds the generator whose dual problem corresponds to minimizing `Σ L(w_i, 1)`.
pub fn conjugate_rho_from_distance(distance: Distance) -> Result<ConjugateRho> {
    let at_one = distance.value(1.0);
    if at_one.abs() > 1e-12 {
        return Err(Error::Convexity(format!("L(1, 1) must be 0, got {at_one}")));
    }
    for w in distance.probe_grid() {
        let c = distance.d2(w);
        if c.is_nan() || c <= 0.0 {
            return Err(Error::Convexity(format!("L''({w}) = {c}")));
        }
    }
    Ok(ConjugateRho { distance })
}

impl Rho for ConjugateRho {
    fn name(&self) -> String {
        format!("conjugate({})", self.distance.name)
    }

    fn eval(&self, u: f64) -> Result<RhoValue> {
        let domain_err = || Error::Domain {
            family: "conjugate",
            value: u,
        };
        if !u.is_finite() {
            return Err(domain_err());
        }
        let w = self.solve_weight(-u).ok_or_else(domain_err)?;
        let curv = self.distance.d2(w);
        let out = RhoValue {
            rho: self.distance.value(w) + u * w,
            d1: w,
            d2: -1.0 / curv,
        };
        if out.rho.is_finite() && out.d2.is_finite() && curv > 0.0 {
            Ok(out)
        } else {
            Err(domain_err())
        }
    }

    fn d1_inverse(&self, w: f64) -> Option<f64> {
        self.distance.contains(w).then(|| -self.distance.d1(w))
    }
}
