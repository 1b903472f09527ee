//! External evaluation: maximum mean discrepancy, inverse error, bootstrap
//! confidence intervals, and the assembled evaluation report.
//!
//! MMD is the biased V-statistic with the unit-bandwidth Gaussian kernel
//! `k(x, q) = exp(-0.5 ||x - q||^2)`, diagonal terms included in both
//! self-sums. No bandwidth heuristic. On real data it is computed in
//! standardized coordinates (the space the flow is trained in), which the
//! report records so numbers are comparable across runs.
//!
//! Kernel sums tile over a worker pool; tiles are reduced in index order so
//! results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{integrate_forward, integrate_inverse};
use crate::linalg::{percentile, Mat};
use crate::objective::loss_c_batch;
use crate::potential::ModelParams;
use rand::Rng;

/// Gaussian-kernel sum `sum_ij k(a_i, b_j)` over all row pairs.
fn kernel_sum(a: &Mat, b: &Mat) -> f64 {
    const TILE: usize = 64;
    let rows: Vec<usize> = (0..a.rows()).collect();
    let partials: Vec<f64> = rows
        .par_chunks(TILE)
        .map(|chunk| {
            let mut acc = 0.0;
            for &i in chunk {
                let ai = a.row(i);
                for j in 0..b.rows() {
                    let bj = b.row(j);
                    let mut sq = 0.0;
                    for (x, y) in ai.iter().zip(bj) {
                        let dxy = x - y;
                        sq += dxy * dxy;
                    }
                    acc += (-0.5 * sq).exp();
                }
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Maximum mean discrepancy between two sample sets (rows are samples).
///
/// Symmetric bit-for-bit: the cross term is evaluated with its operands in a
/// canonical order, so `mmd(x, q) == mmd(q, x)` exactly. The biased statistic
/// can dip a hair below zero in floating point; values above `-1e-12` are
/// normal.
pub fn mmd(x: &Mat, q: &Mat) -> Result<f64> {
    if x.rows() == 0 || q.rows() == 0 {
        return Err(Error::Argument("MMD needs at least one sample on each side".into()));
    }
    if x.cols() != q.cols() {
        return Err(Error::Config(format!(
            "MMD dimension mismatch: {} vs {}",
            x.cols(),
            q.cols()
        )));
    }
    let n = x.rows() as f64;
    let m = q.rows() as f64;
    let sxx = kernel_sum(x, x);
    let sqq = kernel_sum(q, q);
    // Canonical operand order keeps the cross-sum's addend order invariant
    // under argument swap.
    let (first, second) = canonical_pair(x, q);
    let sxq = kernel_sum(first, second);
    Ok(sxx / (n * n) + sqq / (m * m) - 2.0 * sxq / (n * m))
}

fn canonical_pair<'a>(x: &'a Mat, q: &'a Mat) -> (&'a Mat, &'a Mat) {
    if x.rows() != q.rows() {
        return if x.rows() < q.rows() { (x, q) } else { (q, x) };
    }
    for (a, b) in x.as_slice().iter().zip(q.as_slice()) {
        if a < b {
            return (x, q);
        }
        if a > b {
            return (q, x);
        }
    }
    (x, q)
}

/// Mean composition residual `E || f^{-1}(f(x)) - x ||_2` over the rows of
/// `x`, both directions solved with `nt` steps.
pub fn inverse_error(params: &ModelParams, x: &Mat, nt: usize) -> Result<f64> {
    let (fwd, _) = integrate_forward(params, x, nt, 1.0)?;
    let (back, _) = integrate_inverse(params, &fwd.positions, nt, 1.0)?;
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let sq: f64 = back
            .row(i)
            .iter()
            .zip(x.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

/// Percentile bootstrap interval for the mean of `resample_size`-sized
/// resamples.
///
/// Draws `resamples` resamples with replacement, takes each resample's mean,
/// and returns the `(1-level)/2` and `1-(1-level)/2` percentiles. Constant
/// input gives a zero-width interval.
pub fn bootstrap_ci(
    observations: &[f64],
    resamples: usize,
    resample_size: usize,
    level: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if observations.len() < 2 {
        return Err(Error::Argument("bootstrap needs at least 2 observations".into()));
    }
    if resamples == 0 || resample_size == 0 {
        return Err(Error::Argument("bootstrap sizes must be positive".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Argument(format!("confidence level {level} outside (0, 1)")));
    }
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..resample_size {
            acc += observations[rng.random_range(0..observations.len())];
        }
        means.push(acc / resample_size as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("non-finite bootstrap mean"));
    let tail = 100.0 * (1.0 - level) / 2.0;
    Ok((percentile(&means, tail), percentile(&means, 100.0 - tail)))
}

/// Timing-study protocol: 4000 resamples of size 16, 99% interval
/// (0.5 and 99.5 percentiles).
pub fn bootstrap_ci_paper_protocol(
    observations: &[f64],
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    bootstrap_ci(observations, 4000, 16, 0.99, rng)
}

/// Evaluation summary for a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mmd: f64,
    pub inverse_error: f64,
    pub test_c: f64,
    pub nfe_forward: usize,
    pub nfe_inverse: usize,
    pub wall_forward_seconds: f64,
    pub wall_inverse_seconds: f64,
    pub wall_mmd_seconds: f64,
    /// Coordinate system of the MMD computation.
    pub mmd_coordinates: String,
    /// Number of generated samples compared against the data.
    pub generated_samples: usize,
    pub nt: usize,
    pub seed: u64,
}

impl EvalReport {
    /// One machine-readable line (JSON).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("EvalReport serializes")
    }

    /// Human summary, six significant digits.
    pub fn summary(&self) -> String {
        format!(
            "test C {:.6e} | inverse error {:.6e} | MMD {:.6e} ({} coords, {} generated) | \
             NFE fwd {} inv {} | wall fwd {:.3}s inv {:.3}s mmd {:.3}s",
            self.test_c,
            self.inverse_error,
            self.mmd,
            self.mmd_coordinates,
            self.generated_samples,
            self.nfe_forward,
            self.nfe_inverse,
            self.wall_forward_seconds,
            self.wall_inverse_seconds,
            self.wall_mmd_seconds,
        )
    }
}

/// Full evaluation pass: test loss, inverse error, and MMD between the test
/// set and freshly generated samples. Everything runs in the standardized
/// coordinates the model was trained in.
pub fn evaluate(
    params: &ModelParams,
    test: &Mat,
    nt: usize,
    generated: usize,
    seed: u64,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let (fwd, fwd_report) = integrate_forward(params, test, nt, 1.0)?;
    let wall_forward = t0.elapsed().as_secs_f64();
    let test_c = loss_c_batch(&fwd).iter().sum::<f64>() / fwd.len() as f64;

    let inv_err = inverse_error(params, test, nt)?;

    let latent = crate::data::sample_latent(generated, params.d, seed);
    let t1 = Instant::now();
    let (gen_samples, inv_report) = integrate_inverse(params, &latent, nt, 1.0)?;
    let wall_inverse = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mmd_value = mmd(test, &gen_samples)?;
    let wall_mmd = t2.elapsed().as_secs_f64();

    Ok(EvalReport {
        mmd: mmd_value,
        inverse_error: inv_err,
        test_c,
        nfe_forward: fwd_report.nfe,
        nfe_inverse: inv_report.nfe,
        wall_forward_seconds: wall_forward,
        wall_inverse_seconds: wall_inverse,
        wall_mmd_seconds: wall_mmd,
        mmd_coordinates: "standardized".into(),
        generated_samples: generated,
        nt,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_latent, sample_toy};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mmd_identical_multisets_is_exactly_zero() {
        let x = sample_toy("eight-gaussians", 200, 1).unwrap();
        assert_eq!(mmd(&x, &x.clone()).unwrap(), 0.0);
    }

    #[test]
    fn mmd_hand_value() {
        // ||x - q||^2 = 2 ln 2 gives 1 + 1 - 2 exp(-ln 2) = 1.
        let x = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let q = Mat::from_vec(1, 2, vec![(2.0 * std::f64::consts::LN_2).sqrt(), 0.0]);
        let v = mmd(&x, &q).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn mmd_null_behavior_on_split_gaussian() {
        let all = sample_latent(20_000, 2, 5);
        let a = all.slice_rows(0, 10_000);
        let b = all.slice_rows(10_000, 20_000);
        let v = mmd(&a, &b).unwrap();
        assert!(v < 1e-3, "null MMD {v} too large");
        assert!(v > -1e-12);
    }

    #[test]
    fn mmd_dimension_mismatch() {
        let x = Mat::zeros(3, 2);
        let q = Mat::zeros(3, 4);
        assert!(matches!(mmd(&x, &q), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn mmd_symmetric_and_nearly_nonnegative(
            seed in 0u64..1000,
            n in 2usize..40,
            m in 2usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Mat::zeros(n, 2);
            let mut q = Mat::zeros(m, 2);
            for v in x.as_mut_slice() { *v = rng.random_range(-2.0..2.0); }
            for v in q.as_mut_slice() { *v = rng.random_range(-2.0..2.0); }
            let a = mmd(&x, &q).unwrap();
            let b = mmd(&q, &x).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a >= -1e-12);
        }
    }

    #[test]
    fn inverse_error_identity_and_analytic() {
        let zero = ModelParams::zeros(2, 4, 1, 2);
        let x = sample_latent(32, 2, 3);
        assert_eq!(inverse_error(&zero, &x, 8).unwrap(), 0.0);

        let mut p = ModelParams::zeros(1, 4, 1, 1);
        p.a = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        let x1 = sample_latent(32, 1, 4);
        let err = inverse_error(&p, &x1, 32).unwrap();
        assert!(err <= 1e-6, "analytic model inverse error {err}");
    }

    #[test]
    fn inverse_error_decreases_with_steps_on_analytic_model() {
        let mut p = ModelParams::zeros(1, 4, 1, 1);
        p.a = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        let x = sample_latent(16, 1, 9);
        let mut last = f64::INFINITY;
        for nt in [4usize, 8, 16, 32] {
            let err = inverse_error(&p, &x, nt).unwrap();
            assert!(err <= last * 1.1, "inverse error rose: {err} after {last}");
            last = err;
        }
    }

    #[test]
    fn bootstrap_constant_observations() {
        let obs = vec![2.5; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lo, hi) = bootstrap_ci_paper_protocol(&obs, &mut rng).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
    }

    #[test]
    fn bootstrap_coverage_on_standard_normal() {
        // 99% interval for the mean should contain 0 in at least 95 of 100
        // meta-trials.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut covered = 0;
        for _ in 0..100 {
            let obs: Vec<f64> = (0..20)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let (lo, hi) = bootstrap_ci_paper_protocol(&obs, &mut rng).unwrap();
            if lo <= 0.0 && 0.0 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 95, "coverage {covered}/100");
    }

    #[test]
    fn bootstrap_argument_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(bootstrap_ci(&[1.0], 100, 16, 0.99, &mut rng).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 0, 16, 0.99, &mut rng).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 10, 16, 1.5, &mut rng).is_err());
    }

    #[test]
    fn eval_report_identity_model() {
        let params = ModelParams::zeros(2, 4, 1, 2);
        let test = sample_latent(2000, 2, 21);
        let report = evaluate(&params, &test, 8, 2000, 99).unwrap();
        assert_eq!(report.inverse_error, 0.0);
        assert!((report.test_c - (1.0 + crate::objective::LOG_2PI)).abs() < 0.1);
        assert_eq!(report.nfe_forward, 32);
        assert_eq!(report.mmd_coordinates, "standardized");
        // Identity flow on normal data: generations are normal too.
        assert!(report.mmd < 5e-3, "identity MMD {}", report.mmd);
        let line = report.to_json_line();
        let back: EvalReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back.nfe_forward, report.nfe_forward);
        assert!(report.summary().contains("MMD"));
    }
}
