//! Synthetic data with known truth and Monte Carlo studies of the estimator.

mod dgp;
mod monte_carlo;
mod oracle;

pub use dgp::{generate, logistic, DgpConfig, PROB_BAND, SUPPORT_ENDPOINTS};
pub use monte_carlo::{
    replication_seed, reports_to_csv, reports_to_text, run_monte_carlo, run_one, run_replications,
    summarize, threads_from_env, EstimatorKind, KChoice, McOptions, McReport, RepOutcome,
    Replication, THREADS_ENV,
};
pub use oracle::{
    efficient_influence, functionals, gauss_legendre, integrate_covariate, marginal_p_z,
    oracle_efficiency_bound, oracle_true_tau, Functionals, ORACLE_TOL,
};
