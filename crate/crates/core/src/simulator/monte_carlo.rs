//! Replicated estimation on simulated samples and the summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::dgp::{generate, DgpConfig};
use super::oracle::oracle_true_tau;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{estimate_tau, naive_with_se};
use crate::links::RhoFamily;
use crate::sieve::BasisFamily;
use crate::tuning::select_k_with;
use crate::variance::{variance_report, Z_975};

/// Environment variable capping replication threads; 0 or unset means all cores.
pub const THREADS_ENV: &str = "IVATE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EstimatorKind {
    Naive,
    Cbe,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "Naive",
            EstimatorKind::Cbe => "cbe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KChoice {
    Fixed { k1: usize, k2: usize },
    Auto { kbar1: usize, kbar2: usize },
}

#[derive(Debug, Clone)]
pub struct McOptions {
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub k: KChoice,
    pub rho: RhoFamily,
    pub basis: BasisFamily,
    /// Worker threads; 0 means the rayon default.
    pub threads: usize,
}

impl McOptions {
    pub fn new(reps: usize, k: KChoice) -> Self {
        Self {
            reps,
            estimators: vec![EstimatorKind::Naive, EstimatorKind::Cbe],
            k,
            rho: RhoFamily::EmpiricalLikelihood,
            basis: BasisFamily::Power,
            threads: 0,
        }
    }
}

/// One estimator on one simulated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepOutcome {
    pub tau_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub k: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    /// Same order as `McOptions::estimators`; `Err` holds the failure message.
    pub outcomes: Vec<std::result::Result<RepOutcome, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub estimator: String,
    pub bias: f64,
    pub stdev: f64,
    pub rmse: f64,
    pub mean_se: f64,
    pub coverage95: f64,
    pub reps: usize,
    pub n: usize,
    pub failures: usize,
    #[serde(serialize_with = "serialize_histogram")]
    pub selected_k_histogram: BTreeMap<(usize, usize), usize>,
}

fn serialize_histogram<S: serde::Serializer>(
    h: &BTreeMap<(usize, usize), usize>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(h.len()))?;
    for (&(k1, k2), &count) in h {
        seq.serialize_element(&serde_json::json!({"k1": k1, "k2": k2, "count": count}))?;
    }
    seq.end()
}

/// Seed of replication `i`: first output of ChaCha20 seeded with `master` on stream `i`.
pub fn replication_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn run_cbe(data: &Dataset, opts: &McOptions) -> Result<RepOutcome> {
    let (k1, k2) = match opts.k {
        KChoice::Fixed { k1, k2 } => (k1, k2),
        KChoice::Auto { kbar1, kbar2 } => {
            let t = select_k_with(data, kbar1, kbar2, &opts.rho, &opts.basis)?;
            (t.k1_hat, t.k2_hat)
        }
    };
    let est = estimate_tau(data, opts.basis.spec(k1), opts.basis.spec(k2), &opts.rho)?;
    let v = variance_report(data, &est, &opts.rho)?;
    Ok(RepOutcome {
        tau_hat: est.tau_hat,
        se: v.se,
        ci95: v.ci95,
        k: Some((k1, k2)),
    })
}

fn run_naive(data: &Dataset) -> Result<RepOutcome> {
    let (tau_hat, se) = naive_with_se(data)?;
    Ok(RepOutcome {
        tau_hat,
        se,
        ci95: (tau_hat - Z_975 * se, tau_hat + Z_975 * se),
        k: None,
    })
}

/// Runs every estimator on one replication's sample.
pub fn run_one(cfg: &DgpConfig, opts: &McOptions, index: usize) -> Replication {
    let seed = replication_seed(cfg.seed, index);
    let outcomes = match generate(&cfg.with_seed(seed)) {
        Ok(data) => opts
            .estimators
            .iter()
            .map(|kind| {
                match kind {
                    EstimatorKind::Naive => run_naive(&data),
                    EstimatorKind::Cbe => run_cbe(&data, opts),
                }
                .map_err(|e| e.to_string())
            })
            .collect(),
        Err(e) => vec![Err(e.to_string()); opts.estimators.len()],
    };
    Replication {
        index,
        seed,
        outcomes,
    }
}

/// All replications in index order, independent of the thread count.
pub fn run_replications(cfg: &DgpConfig, opts: &McOptions) -> Result<Vec<Replication>> {
    cfg.validate()?;
    if opts.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..opts.reps)
            .into_par_iter()
            .map(|i| run_one(cfg, opts, i))
            .collect()
    }))
}

/// Aggregates one estimator's column of outcomes against the true `τ`.
pub fn summarize(
    name: &str,
    outcomes: &[std::result::Result<RepOutcome, String>],
    tau: f64,
    n: usize,
) -> Result<McReport> {
    let reps = outcomes.len();
    let ok: Vec<&RepOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let failures = reps - ok.len();
    // at most 2% of replications may fail
    if failures * 50 >= reps && failures > 0 {
        return Err(Error::TooManyFailures {
            failed: failures,
            reps,
        });
    }
    let m = ok.len() as f64;
    let mean = ok.iter().map(|o| o.tau_hat).sum::<f64>() / m;
    let var = ok.iter().map(|o| (o.tau_hat - mean).powi(2)).sum::<f64>() / m;
    let bias = mean - tau;
    let mut histogram = BTreeMap::new();
    for o in &ok {
        if let Some(k) = o.k {
            *histogram.entry(k).or_insert(0) += 1;
        }
    }
    Ok(McReport {
        estimator: name.to_string(),
        bias,
        stdev: var.sqrt(),
        rmse: (bias * bias + var).sqrt(),
        mean_se: ok.iter().map(|o| o.se).sum::<f64>() / m,
        coverage95: ok
            .iter()
            .filter(|o| o.ci95.0 <= tau && tau <= o.ci95.1)
            .count() as f64
            / m,
        reps,
        n,
        failures,
        selected_k_histogram: histogram,
    })
}

/// One report per requested estimator, in the order requested.
pub fn run_monte_carlo(cfg: &DgpConfig, opts: &McOptions) -> Result<Vec<McReport>> {
    let tau = oracle_true_tau(cfg)?;
    let reps = run_replications(cfg, opts)?;
    opts.estimators
        .iter()
        .enumerate()
        .map(|(j, kind)| {
            let column: Vec<_> = reps.iter().map(|r| r.outcomes[j].clone()).collect();
            summarize(kind.label(), &column, tau, cfg.n)
        })
        .collect()
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// One CSV row per estimator.
pub fn reports_to_csv(reports: &[McReport]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "estimator",
        "bias",
        "stdev",
        "rmse",
        "mean_se",
        "coverage95",
        "reps",
        "n",
        "failures",
    ])?;
    for r in reports {
        wtr.write_record([
            r.estimator.clone(),
            fmt_f(r.bias),
            fmt_f(r.stdev),
            fmt_f(r.rmse),
            fmt_f(r.mean_se),
            fmt_f(r.coverage95),
            r.reps.to_string(),
            r.n.to_string(),
            r.failures.to_string(),
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

/// Plain-text table with columns `Estimators, Bias, Stdev, RMSE` followed by
/// the interval diagnostics, and a count table of selected sieve sizes.
pub fn reports_to_text(reports: &[McReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6} {:>6} {:>6}",
        "Estimators", "Bias", "Stdev", "RMSE", "MeanSE", "Cov95", "Reps", "N", "Fail"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3} {:>6} {:>6} {:>6}",
            r.estimator, r.bias, r.stdev, r.rmse, r.mean_se, r.coverage95, r.reps, r.n, r.failures
        );
    }
    for r in reports
        .iter()
        .filter(|r| !r.selected_k_histogram.is_empty())
    {
        let _ = writeln!(out, "\nSelected (K1, K2) for {}:", r.estimator);
        for ((k1, k2), count) in &r.selected_k_histogram {
            let _ = writeln!(out, "  ({k1}, {k2}) {count:>6}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(t: f64) -> std::result::Result<RepOutcome, String> {
        Ok(RepOutcome {
            tau_hat: t,
            se: 0.1,
            ci95: (t - 0.2, t + 0.2),
            k: Some((2, 2)),
        })
    }

    #[test]
    fn single_replication_has_zero_spread() {
        let r = summarize("cbe", &[outcome(0.3)], 0.15, 100).unwrap();
        assert_eq!(r.stdev, 0.0);
        assert!((r.rmse - r.bias.abs()).abs() < 1e-15);
        assert_eq!(r.coverage95, 1.0);
    }

    #[test]
    fn rmse_decomposes() {
        let outs: Vec<_> = [0.1, 0.25, 0.12, 0.3, 0.05]
            .iter()
            .map(|&t| outcome(t))
            .collect();
        let r = summarize("cbe", &outs, 0.15, 100).unwrap();
        assert!((r.rmse.powi(2) - r.bias.powi(2) - r.stdev.powi(2)).abs() < 1e-10);
        assert_eq!(r.selected_k_histogram[&(2, 2)], 5);
    }

    #[test]
    fn failure_budget() {
        let mut outs: Vec<_> = (0..100).map(|_| outcome(0.1)).collect();
        outs[3] = Err("boom".into());
        let r = summarize("cbe", &outs, 0.15, 10).unwrap();
        assert_eq!(r.failures, 1);
        outs[4] = Err("boom".into());
        assert!(matches!(
            summarize("cbe", &outs, 0.15, 10),
            Err(Error::TooManyFailures {
                failed: 2,
                reps: 100
            })
        ));
    }

    #[test]
    fn replication_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..50).map(|i| replication_seed(9, i)).collect();
        let b: Vec<u64> = (0..50).map(|i| replication_seed(9, i)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 50);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = DgpConfig::reference(200, 3);
        let mut opts = McOptions::new(6, KChoice::Fixed { k1: 2, k2: 2 });
        opts.threads = 1;
        let one = run_replications(&cfg, &opts).unwrap();
        opts.threads = 4;
        let four = run_replications(&cfg, &opts).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn text_table_layout() {
        let r = summarize("Naive", &[outcome(0.3)], 0.15, 100).unwrap();
        let text = reports_to_text(&[r]);
        let header = text.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(&cols[..4], &["Estimators", "Bias", "Stdev", "RMSE"]);
    }
}
