//! Command line front end: `estimate`, `tune` and `simulate`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::estimate_tau;
use crate::links::RhoFamily;
use crate::sieve::BasisFamily;
use crate::simulator::{
    generate, oracle_efficiency_bound, oracle_true_tau, replication_seed, reports_to_csv,
    reports_to_text, run_monte_carlo, threads_from_env, DgpConfig, KChoice, McOptions,
};
use crate::tuning::{select_k_with, TuningResult, DEFAULT_KBAR};
use crate::variance::variance_report;

#[derive(Debug, Parser)]
#[command(
    name = "ivate",
    version,
    about = "Average treatment effect with a binary instrument"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the average treatment effect from a CSV file.
    Estimate(EstimateArgs),
    /// Select the sieve sizes on a CSV file.
    Tune(TuneArgs),
    /// Monte Carlo study on the built-in simulation design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RhoArg {
    El,
    Et,
    Cue,
    Logistic,
}

impl From<RhoArg> for RhoFamily {
    fn from(r: RhoArg) -> Self {
        match r {
            RhoArg::El => RhoFamily::EmpiricalLikelihood,
            RhoArg::Et => RhoFamily::ExponentialTilting,
            RhoArg::Cue => RhoFamily::Cue,
            RhoArg::Logistic => RhoFamily::InverseLogistic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Power,
    Spline,
}

impl From<BasisArg> for BasisFamily {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Power => BasisFamily::Power,
            BasisArg::Spline => BasisFamily::Spline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "el")]
    pub rho: RhoArg,
    #[arg(long, value_enum, default_value = "power")]
    pub basis: BasisArg,
    #[arg(long, default_value_t = DEFAULT_KBAR)]
    pub kbar1: usize,
    #[arg(long, default_value_t = DEFAULT_KBAR)]
    pub kbar2: usize,
}

#[derive(Debug, Clone, Args)]
pub struct KArgs {
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    /// Select K1 and K2 from the data.
    #[arg(long)]
    pub auto_k: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub k: KArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub k: KArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Write the first replication's sample to this CSV file.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
}

impl KArgs {
    fn choice(&self, model: &ModelArgs) -> Result<KChoice> {
        match (self.k1, self.k2, self.auto_k) {
            (Some(k1), Some(k2), false) => Ok(KChoice::Fixed { k1, k2 }),
            (None, None, true) => Ok(KChoice::Auto {
                kbar1: model.kbar1,
                kbar2: model.kbar2,
            }),
            _ => Err(Error::Config(
                "give either both --k1 and --k2, or --auto-k".into(),
            )),
        }
    }
}

fn tune(data: &Dataset, model: &ModelArgs) -> Result<TuningResult> {
    let rho = RhoFamily::from(model.rho);
    select_k_with(
        data,
        model.kbar1,
        model.kbar2,
        &rho,
        &BasisFamily::from(model.basis),
    )
}

fn cmd_estimate(args: &EstimateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let choice = args.k.choice(&args.model)?;
    let data = Dataset::read_csv_path(&args.input)?;
    let rho = RhoFamily::from(args.model.rho);
    let (k1, k2) = match choice {
        KChoice::Fixed { k1, k2 } => (k1, k2),
        KChoice::Auto { .. } => {
            let t = tune(&data, &args.model)?;
            (t.k1_hat, t.k2_hat)
        }
    };
    let basis = BasisFamily::from(args.model.basis);
    let est = estimate_tau(&data, basis.spec(k1), basis.spec(k2), &rho)?;
    let var = variance_report(&data, &est, &rho)?;
    let diag = &est.diagnostics;
    if diag.weak_instrument {
        writeln!(
            err,
            "warning: weak instrument, min |delta_D| = {:e}",
            diag.min_abs_delta_d
        )?;
    }
    if diag.saturated {
        writeln!(err, "warning: treatment link saturated")?;
    }
    let report = json!({
        "tau_hat": est.tau_hat,
        "se": var.se,
        "ci95_lo": var.ci95.0,
        "ci95_hi": var.ci95.1,
        "k1": k1,
        "k2": k2,
        "rho": rho.short_name(),
        "n": data.n(),
        "diagnostics": diag,
    });
    match args.format {
        Format::Json => writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&report).expect("json")
        )?,
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record([
                "tau_hat",
                "se",
                "ci95_lo",
                "ci95_hi",
                "k1",
                "k2",
                "rho",
                "n",
                "min_abs_delta_d",
                "max_weight",
                "saturated",
                "weak_instrument",
            ])?;
            wtr.write_record([
                format!("{}", est.tau_hat),
                format!("{}", var.se),
                format!("{}", var.ci95.0),
                format!("{}", var.ci95.1),
                k1.to_string(),
                k2.to_string(),
                rho.short_name().to_string(),
                data.n().to_string(),
                format!("{}", diag.min_abs_delta_d),
                format!("{}", diag.max_weight),
                diag.saturated.to_string(),
                diag.weak_instrument.to_string(),
            ])?;
            out.write_all(&wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
        Format::Text => {
            writeln!(out, "tau_hat   {:.6}", est.tau_hat)?;
            writeln!(out, "se        {:.6}", var.se)?;
            writeln!(out, "ci95      [{:.6}, {:.6}]", var.ci95.0, var.ci95.1)?;
            writeln!(out, "K1, K2    {k1}, {k2}")?;
            writeln!(out, "rho       {}", rho.short_name())?;
            writeln!(out, "n         {}", data.n())?;
            writeln!(out, "min|dD|   {:.6}", diag.min_abs_delta_d)?;
            writeln!(out, "max w     {:.6}", diag.max_weight)?;
        }
    }
    Ok(())
}

/// `+∞` (failed grid point) becomes `null`.
fn path_json(path: &std::collections::BTreeMap<usize, f64>) -> Value {
    Value::Array(
        path.iter()
            .map(
                |(k, v)| json!({"k": k, "mse": if v.is_finite() { json!(v) } else { Value::Null }}),
            )
            .collect(),
    )
}

fn cmd_tune(args: &TuneArgs, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::read_csv_path(&args.input)?;
    let t = tune(&data, &args.model)?;
    match args.format {
        Format::Json => {
            let report = json!({
                "k1_hat": t.k1_hat,
                "k2_hat": t.k2_hat,
                "kbar1": t.kbar1,
                "kbar2": t.kbar2,
                "mse1_path": path_json(&t.mse1_path),
                "mse2_path": path_json(&t.mse2_path),
                "failures": t.failures,
            });
            writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&report).expect("json")
            )?;
        }
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["stage", "k", "mse", "selected"])?;
            for (stage, path, hat) in [(1, &t.mse1_path, t.k1_hat), (2, &t.mse2_path, t.k2_hat)] {
                for (k, v) in path {
                    wtr.write_record([
                        stage.to_string(),
                        k.to_string(),
                        if v.is_finite() {
                            format!("{v}")
                        } else {
                            String::new()
                        },
                        (*k == hat).to_string(),
                    ])?;
                }
            }
            out.write_all(&wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
        Format::Text => {
            writeln!(out, "K1_hat = {}, K2_hat = {}", t.k1_hat, t.k2_hat)?;
            for (name, path) in [("MSE1", &t.mse1_path), ("MSE2", &t.mse2_path)] {
                writeln!(out, "{name}:")?;
                for (k, v) in path {
                    writeln!(out, "  K = {k:<3} {v:.6}")?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let choice = args.k.choice(&args.model)?;
    let cfg = DgpConfig::reference(args.n, args.seed);
    cfg.validate()?;
    let opts = McOptions {
        rho: args.model.rho.into(),
        basis: args.model.basis.into(),
        threads: threads_from_env(),
        ..McOptions::new(args.reps, choice)
    };
    if let Some(path) = &args.emit_data {
        generate(&cfg.with_seed(replication_seed(cfg.seed, 0)))?.write_csv_path(path)?;
    }
    let reports = run_monte_carlo(&cfg, &opts)?;
    for r in reports.iter().filter(|r| r.failures > 0) {
        writeln!(
            err,
            "warning: {} of {} replications failed for {} and were excluded",
            r.failures, r.reps, r.estimator
        )?;
    }
    match args.format {
        Format::Json => {
            let report = json!({
                "config": cfg,
                "reps": args.reps,
                "tau": oracle_true_tau(&cfg)?,
                "v_eff": oracle_efficiency_bound(&cfg)?,
                "reports": reports,
            });
            writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&report).expect("json")
            )?;
        }
        Format::Csv => out.write_all(reports_to_csv(&reports)?.as_bytes())?,
        Format::Text => {
            writeln!(
                out,
                "n = {}, reps = {}, seed = {}, tau = {}",
                args.n,
                args.reps,
                args.seed,
                oracle_true_tau(&cfg)?
            )?;
            out.write_all(reports_to_text(&reports).as_bytes())?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, out, err),
        Command::Tune(a) => cmd_tune(a, out),
        Command::Simulate(a) => cmd_simulate(a, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn invalid_rho_lists_families() {
        let (code, _, err) = run_capture(&["ivate", "simulate", "--rho", "gmm", "--auto-k"]);
        assert_eq!(code, 2);
        for name in ["el", "et", "cue", "logistic"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn k_flags_are_exclusive() {
        let (code, _, err) =
            run_capture(&["ivate", "simulate", "--k1", "2", "--auto-k", "--reps", "1"]);
        assert_eq!(code, 2);
        assert!(err.contains("--auto-k"));
        let (code, _, _) = run_capture(&["ivate", "simulate", "--reps", "1"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_file_is_io_error() {
        let (code, _, _) = run_capture(&[
            "ivate",
            "estimate",
            "--input",
            "/nonexistent/x.csv",
            "--k1",
            "1",
            "--k2",
            "1",
        ]);
        assert_eq!(code, 1);
    }
}
