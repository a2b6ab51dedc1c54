//! Linear-probability design with a binary instrument and a binary confounder.
//!
//! ```text
//! X ~ Uniform((-1, -0.5) ∪ (0.5, 1)),  U ~ Bernoulli(0.5) independent of X
//! P(Z = 1 | X)       = logistic(a₀ + a₁X)
//! P(D = 1 | Z, X, U) = b₀ + b₁Z + b₂X + b₃U
//! P(Y = 1 | D, X, U) = c₀ + c₁D + c₂X + c₃U
//! ```
//!
//! `U` confounds `D` and `Y` but not `Z`, the instrument effect on `D` is the
//! constant `b₁` for every `U`, and the average treatment effect is `c₁`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Every reachable probability must lie in this band.
pub const PROB_BAND: (f64, f64) = (0.02, 0.98);

/// Endpoints of the two covariate intervals; all probabilities are monotone in `x`
/// on each piece, so checking them covers the support.
pub const SUPPORT_ENDPOINTS: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub seed: u64,
    pub coef_z: [f64; 2],
    pub coef_d: [f64; 4],
    pub coef_y: [f64; 4],
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl DgpConfig {
    /// Strongly confounded design with `τ = 0.15`, used by the command line and the
    /// acceptance suite.
    pub fn reference(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            coef_z: [0.0, 0.6],
            coef_d: [0.10, 0.50, 0.05, 0.30],
            coef_y: [0.10, 0.15, 0.05, 0.60],
        }
    }

    /// Mildly confounded design, also with `τ = 0.15`.
    pub fn mild(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            coef_z: [0.0, 0.6],
            coef_d: [0.35, 0.30, 0.05, 0.15],
            coef_y: [0.20, 0.15, 0.10, 0.25],
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn p_z(&self, x: f64) -> f64 {
        logistic(self.coef_z[0] + self.coef_z[1] * x)
    }

    pub fn p_d(&self, z: f64, x: f64, u: f64) -> f64 {
        let b = &self.coef_d;
        b[0] + b[1] * z + b[2] * x + b[3] * u
    }

    pub fn p_y(&self, d: f64, x: f64, u: f64) -> f64 {
        let c = &self.coef_y;
        c[0] + c[1] * d + c[2] * x + c[3] * u
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = self
            .coef_z
            .iter()
            .chain(&self.coef_d)
            .chain(&self.coef_y)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        if self.coef_d[1] == 0.0 {
            return Err(Error::Config(
                "b1 = 0: the instrument has no effect on treatment".into(),
            ));
        }
        let check = |name: &str, p: f64, at: String| {
            if p < PROB_BAND.0 || p > PROB_BAND.1 {
                Err(Error::Config(format!(
                    "{name} = {p} at {at} is outside [{}, {}]",
                    PROB_BAND.0, PROB_BAND.1
                )))
            } else {
                Ok(())
            }
        };
        for x in SUPPORT_ENDPOINTS {
            check("P(Z=1|X)", self.p_z(x), format!("x={x}"))?;
            for u in [0.0, 1.0] {
                for s in [0.0, 1.0] {
                    check(
                        "P(D=1|Z,X,U)",
                        self.p_d(s, x, u),
                        format!("z={s}, x={x}, u={u}"),
                    )?;
                    check(
                        "P(Y=1|D,X,U)",
                        self.p_y(s, x, u),
                        format!("d={s}, x={x}, u={u}"),
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// One unit, drawn in a fixed order so that a longer sample extends a shorter one.
fn draw_unit(cfg: &DgpConfig, rng: &mut ChaCha20Rng) -> (f64, f64, f64, f64) {
    let negative = rng.random::<f64>() < 0.5;
    let magnitude = 0.5 + 0.5 * rng.random::<f64>();
    let x = if negative { -magnitude } else { magnitude };
    let u = (rng.random::<f64>() < 0.5) as u8 as f64;
    let z = (rng.random::<f64>() < cfg.p_z(x)) as u8 as f64;
    let d = (rng.random::<f64>() < cfg.p_d(z, x, u)) as u8 as f64;
    let y = (rng.random::<f64>() < cfg.p_y(d, x, u)) as u8 as f64;
    (y, d, z, x)
}

/// Draws `cfg.n` units from `ChaCha20(cfg.seed)`.
pub fn generate(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (mut y, mut d, mut z, mut x) = (
        Vec::with_capacity(cfg.n),
        Vec::with_capacity(cfg.n),
        Vec::with_capacity(cfg.n),
        Vec::with_capacity(cfg.n),
    );
    for _ in 0..cfg.n {
        let (yi, di, zi, xi) = draw_unit(cfg, &mut rng);
        y.push(yi);
        d.push(di);
        z.push(zi);
        x.push(xi);
    }
    Dataset::from_columns(y, d, z, x)
}
