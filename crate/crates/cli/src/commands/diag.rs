//! `uqc diag`: channel and gradient diagnostics, written as CSV.

use crate::util::{fmt_f64, fmt_sci, resolve_seed, write_csv};
use crate::{usage, CliResult};
use clap::Args;
use std::path::PathBuf;
use uqc_core::diagnostics;

#[derive(Args)]
pub struct DiagArgs {
    /// One of: uq-identity, dither-independence, gaussian-channel,
    /// lattice-hex, expected-grad.
    #[arg(long)]
    pub test: String,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 13.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "diag.csv")]
    pub out: PathBuf,
}

pub fn run(args: DiagArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    let cfg = serde_json::json!({
        "test": args.test,
        "n": args.n,
        "alpha": args.alpha,
        "sigma": args.sigma,
        "seed": seed,
    })
    .to_string();
    match args.test.as_str() {
        "uq-identity" => {
            let ys: Vec<f64> = (0..20).map(|i| -5.0 + 10.0 * i as f64 / 19.0).collect();
            let rows = diagnostics::uq_identity_ks(&ys, args.n, seed);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![fmt_f64(r.y), fmt_sci(r.statistic), fmt_sci(r.p_value)])
                .collect();
            write_csv(&args.out, &cfg, &["y", "ks_statistic", "p_value"], &table)?;
        }
        "dither-independence" => {
            let rows = diagnostics::dither_independence(&[1, 2, 17], args.n, seed);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|&(lag, rho)| vec![lag.to_string(), fmt_sci(rho)])
                .collect();
            write_csv(&args.out, &cfg, &["lag", "correlation"], &table)?;
        }
        "gaussian-channel" => {
            let r = diagnostics::gaussian_channel_report(args.sigma, args.n, args.n.min(100_000), seed);
            let table = vec![
                vec!["mean".to_string(), fmt_sci(r.mean)],
                vec!["variance".to_string(), fmt_sci(r.variance)],
                vec!["excess_kurtosis".to_string(), fmt_sci(r.excess_kurtosis)],
                vec!["ks_statistic".to_string(), fmt_sci(r.ks_statistic)],
                vec!["ks_p_value".to_string(), fmt_sci(r.ks_p_value)],
            ];
            write_csv(&args.out, &cfg, &["statistic", "value"], &table)?;
        }
        "lattice-hex" => {
            let rows = diagnostics::hexagonal_equivalence(args.n, 1500, 199, seed);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.case.to_string(), fmt_sci(r.statistic), fmt_sci(r.p_value)])
                .collect();
            write_csv(&args.out, &cfg, &["case", "energy_statistic", "p_value"], &table)?;
        }
        "expected-grad" => {
            let (pw, ex) = diagnostics::rate_gradient_variance(args.alpha, args.n, seed);
            let table = vec![vec![
                fmt_f64(args.alpha),
                fmt_sci(pw),
                fmt_sci(ex),
                fmt_sci(pw / ex),
            ]];
            write_csv(
                &args.out,
                &cfg,
                &["alpha", "var_pathwise", "var_expected", "variance_ratio"],
                &table,
            )?;
        }
        other => return Err(usage(format!("unknown diagnostic test {other:?}"))),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
