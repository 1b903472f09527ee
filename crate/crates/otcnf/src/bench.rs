//! Trace-kernel study: wall time of the exact Hessian trace against
//! Hutchinson estimation across dimension, and estimator relative error
//! against probe count, with bootstrap confidence bands.
//!
//! Three methods are timed, each as the full per-batch pipeline a dynamics
//! evaluation pays (gradient recursion plus the trace quantity):
//!
//! - `exact`: the analytic trace kernel.
//! - `hutchinson`: analytic Hessian-vector quadratic forms, `K` fresh
//!   Rademacher probes per sample. This is faster than any
//!   general-AD implementation of the same estimator, so only its error
//!   behavior and relative trends are comparable across studies.
//! - `hutchinson-ad`: the estimator as CNF implementations actually run it —
//!   record the gradient computation on a general-purpose reverse-mode tape,
//!   then one tape backward per probe to get the Hessian-vector product.
//!   This is the like-for-like wall-time baseline for the exact kernel.
//!
//! Timing protocol: `warmup` untimed iterations, then `reps` timed
//! repetitions; medians with 99% bootstrap bands (4000 resamples of size 16).
//! The timed region runs single-threaded.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::autodiff::{record_spatial_gradient, Tape};
use crate::error::{Error, Result};
use crate::linalg::{linear_fit, median, Mat};
use crate::metrics::bootstrap_ci_paper_protocol;
use crate::potential::{
    exact_trace_batch, hutchinson_trace_batch, potential_gradient_batch, ModelParams, ProbeDist,
};

/// Study configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Spatial dimensions to sweep.
    pub dims: Vec<usize>,
    /// Hidden width, fixed across dimensions.
    pub m: usize,
    /// Hidden layer count.
    pub layers: usize,
    /// Samples per timed batch.
    pub batch: usize,
    /// Timed repetitions per cell (at least 5).
    pub reps: usize,
    /// Probe counts for the analytic estimator rows.
    pub probe_counts: Vec<usize>,
    /// Probe counts for the tape-AD estimator rows (each backward pass is a
    /// full tape sweep, so keep this short).
    pub ad_probe_counts: Vec<usize>,
    /// Untimed warmup repetitions.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: vec![43, 63, 784],
            m: 16,
            layers: 1,
            batch: 1024,
            reps: 20,
            probe_counts: vec![1, 4, 16, 64],
            ad_probe_counts: vec![1],
            warmup: 3,
            seed: 0,
        }
    }
}

/// One study cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub d: usize,
    /// `exact`, `hutchinson`, or `hutchinson-ad`.
    pub method: String,
    /// Probe count; 0 for the exact kernel.
    pub probes: usize,
    pub median_seconds: f64,
    pub ci_lo_seconds: f64,
    pub ci_hi_seconds: f64,
    /// Median per-sample relative error against the exact trace; NaN for the
    /// exact rows.
    pub rel_err_median: f64,
    pub rel_err_ci_lo: f64,
    pub rel_err_ci_hi: f64,
}

/// Full study output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub config: BenchConfig,
}

impl BenchTable {
    /// CSV with fixed columns:
    /// `d,method,probes,median_seconds,ci_lo_seconds,ci_hi_seconds,rel_err_median,rel_err_ci_lo,rel_err_ci_hi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "d,method,probes,median_seconds,ci_lo_seconds,ci_hi_seconds,rel_err_median,rel_err_ci_lo,rel_err_ci_hi\n",
        );
        for r in &self.rows {
            let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v:e}") };
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{},{},{}\n",
                r.d,
                r.method,
                r.probes,
                r.median_seconds,
                r.ci_lo_seconds,
                r.ci_hi_seconds,
                fmt(r.rel_err_median),
                fmt(r.rel_err_ci_lo),
                fmt(r.rel_err_ci_hi),
            ));
        }
        out
    }

    pub fn rows_for(&self, method: &str) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    /// Least-squares fit of exact-trace median time against dimension:
    /// `(intercept, slope, r_squared)`.
    pub fn exact_time_fit(&self) -> (f64, f64, f64) {
        let rows = self.rows_for("exact");
        let x: Vec<f64> = rows.iter().map(|r| r.d as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.median_seconds).collect();
        linear_fit(&x, &y)
    }

    /// Log-log slope of the analytic estimator's median relative error
    /// against probe count at dimension `d`.
    pub fn error_decay_slope(&self, d: usize) -> Option<f64> {
        let rows: Vec<&BenchRow> = self
            .rows
            .iter()
            .filter(|r| r.method == "hutchinson" && r.d == d)
            .collect();
        if rows.len() < 2 {
            return None;
        }
        let x: Vec<f64> = rows.iter().map(|r| (r.probes as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.rel_err_median.ln()).collect();
        Some(linear_fit(&x, &y).1)
    }

    /// Human summary lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let (_, slope, r2) = self.exact_time_fit();
        out.push_str(&format!(
            "exact trace time vs d: slope {slope:.3e} s/dim, R^2 {r2:.4}\n"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "d={:4} {:14} K={:3}  {:.6e}s [{:.6e}, {:.6e}]",
                row.d,
                row.method,
                row.probes,
                row.median_seconds,
                row.ci_lo_seconds,
                row.ci_hi_seconds
            ));
            if !row.rel_err_median.is_nan() {
                out.push_str(&format!("  rel err {:.4e}", row.rel_err_median));
            }
            out.push('\n');
        }
        out
    }
}

/// Median time of timing nothing: the harness's own cost per measurement.
pub fn harness_overhead_seconds(reps: usize) -> f64 {
    let times: Vec<f64> = (0..reps.max(5))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(());
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(&times)
}

fn time_run<T>(f: impl FnOnce() -> T) -> (f64, T) {
    let t = Instant::now();
    let out = f();
    (t.elapsed().as_secs_f64(), out)
}

/// Space-time batch: standard-normal positions, uniform times in `[0,1]`.
fn random_inputs(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut s = Mat::zeros(d + 1, n);
    for r in 0..d {
        for c in 0..n {
            s.set(r, c, rng.sample(StandardNormal));
        }
    }
    for c in 0..n {
        s.set(d, c, rng.random_range(0.0..1.0));
    }
    s
}

/// Tape-AD Hutchinson estimates for a whole batch: record the gradient graph
/// once, then per probe append the probe contraction and run a pruned
/// backward toward the position leaf.
fn hutchinson_ad_batch(
    params: &ModelParams,
    spatial: &Mat,
    t_row: &[f64],
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let d = params.d;
    let n = spatial.cols();
    let mut tape = Tape::new();
    let z = tape.leaf(spatial.clone());
    // The gradient graph wants a fixed scalar time; rebuild per distinct time
    // is what a per-stage estimator does anyway. Use the batch's first time
    // entry for all samples (timing study only).
    let gsp = record_spatial_gradient(&mut tape, params, z, t_row[0]);
    let mut estimates = vec![0.0; n];
    for _ in 0..probes {
        let mut e = Mat::zeros(d, n);
        for v in e.as_mut_slice() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let eps = tape.constant(e.clone());
        let had = tape.hadamard(eps, gsp);
        let root = tape.sum_all(had);
        tape.set_root(root);
        let adj = tape.backward_adjoints_toward(&[z])?;
        let hvp = adj[z.index()]
            .as_ref()
            .expect("position leaf receives an adjoint");
        for c in 0..n {
            let mut q = 0.0;
            for r in 0..d {
                q += e.at(r, c) * hvp.at(r, c);
            }
            estimates[c] += q;
        }
    }
    for v in &mut estimates {
        *v /= probes as f64;
    }
    Ok(estimates)
}

/// Run the full study.
pub fn bench_trace(config: &BenchConfig) -> Result<BenchTable> {
    if config.reps < 5 {
        return Err(Error::Argument("need at least 5 timed repetitions".into()));
    }
    if config.dims.is_empty() {
        return Err(Error::Argument("dimension list must be nonempty".into()));
    }
    let mut rows = Vec::new();

    for &d in &config.dims {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(d as u64));
        let params = ModelParams::random_unit(d, config.m, config.layers, None, &mut rng);
        let inputs = random_inputs(d, config.batch, &mut rng);
        let spatial = inputs.slice_rows(0, d);
        let time_row: Vec<f64> = inputs.row(d).to_vec();

        // Warmup (also provides the reference exact traces).
        let mut exact_ref = Vec::new();
        for _ in 0..config.warmup.max(1) {
            let (_, ws) = potential_gradient_batch(&params, &inputs)?;
            exact_ref = exact_trace_batch(&params, &ws);
        }

        // Exact kernel.
        let mut times = Vec::with_capacity(config.reps);
        for _ in 0..config.reps {
            let (secs, _) = time_run(|| {
                let (_, ws) = potential_gradient_batch(&params, &inputs).expect("bench gradient");
                std::hint::black_box(exact_trace_batch(&params, &ws))
            });
            times.push(secs);
        }
        rows.push(build_row(d, "exact", 0, &times, None, &mut rng)?);

        // Analytic Hutchinson.
        for &k in &config.probe_counts {
            let mut times = Vec::with_capacity(config.reps);
            let mut rep_errs = Vec::with_capacity(config.reps);
            for _ in 0..config.reps {
                let (secs, est) = time_run(|| {
                    let (_, ws) =
                        potential_gradient_batch(&params, &inputs).expect("bench gradient");
                    hutchinson_trace_batch(&params, &ws, k, ProbeDist::Rademacher, &mut rng)
                        .expect("bench estimator")
                });
                times.push(secs);
                rep_errs.push(median_rel_err(&est, &exact_ref));
            }
            rows.push(build_row(d, "hutchinson", k, &times, Some(&rep_errs), &mut rng)?);
        }

        // Tape-AD Hutchinson.
        for &k in &config.ad_probe_counts {
            let mut times = Vec::with_capacity(config.reps);
            let mut rep_errs = Vec::with_capacity(config.reps);
            for _ in 0..config.reps {
                let (secs, est) = time_run(|| {
                    hutchinson_ad_batch(&params, &spatial, &time_row, k, &mut rng)
                        .expect("bench AD estimator")
                });
                times.push(secs);
                rep_errs.push(median_rel_err(&est, &exact_ref));
            }
            rows.push(build_row(d, "hutchinson-ad", k, &times, Some(&rep_errs), &mut rng)?);
        }
    }

    Ok(BenchTable {
        rows,
        config: config.clone(),
    })
}

fn median_rel_err(est: &[f64], exact: &[f64]) -> f64 {
    let errs: Vec<f64> = est
        .iter()
        .zip(exact)
        .map(|(e, x)| (e - x).abs() / x.abs().max(1e-300))
        .collect();
    median(&errs)
}

fn build_row(
    d: usize,
    method: &str,
    probes: usize,
    times: &[f64],
    rep_errs: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<BenchRow> {
    let (t_lo, t_hi) = bootstrap_ci_paper_protocol(times, rng)?;
    let (e_med, e_lo, e_hi) = match rep_errs {
        Some(errs) => {
            let (lo, hi) = bootstrap_ci_paper_protocol(errs, rng)?;
            (median(errs), lo, hi)
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(BenchRow {
        d,
        method: method.to_string(),
        probes,
        median_seconds: median(times),
        ci_lo_seconds: t_lo,
        ci_hi_seconds: t_hi,
        rel_err_median: e_med,
        rel_err_ci_lo: e_lo,
        rel_err_ci_hi: e_hi,
    })
}
