//! Data sources: 2-D toy distributions, latent normal draws, CSV ingestion
//! with train-statistics standardization, and analytically known reference
//! densities for self-consistency checks.
//!
//! Every sampler is deterministic given its seed. Splits are disjoint and
//! reproducible from `(source, seed, fractions)`. Validation and test sets are
//! standardized with *training* statistics only.
//!
//! Toy parameterizations (fixed here; the flow trains on standardized
//! coordinates anyway):
//! - `eight-gaussians`: 8 isotropic components, std 0.5, means on a radius-4
//!   circle at angles `k*pi/4`.
//! - `checkerboard`: uniform over the 32 "black" unit cells of `[-4,4)^2`.
//! - `two-moons`: two interleaved half circles, noise 0.1, scaled by 2.
//! - `spiral`: two interleaved spiral arms reaching 3/2 turns.
//! - `pinwheel`: five Gaussian blades sheared by a radius-dependent rotation.
//! - `circles`: concentric circles with radius ratio 0.5, noise 0.08, scale 3.
//! - `swissroll`: 2-D swiss roll projection, unit noise, scaled by 1/5.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Names accepted by [`sample_toy`].
pub const TOY_NAMES: &[&str] = &[
    "eight-gaussians",
    "checkerboard",
    "two-moons",
    "spiral",
    "pinwheel",
    "circles",
    "swissroll",
];

/// Radius of the eight-gaussians ring.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 4.0;
/// Component standard deviation of the eight-gaussians mixture.
pub const EIGHT_GAUSSIANS_STD: f64 = 0.5;

/// Centers of the eight-gaussians mixture, one row per component.
pub fn eight_gaussians_centers() -> Mat {
    let mut c = Mat::zeros(8, 2);
    for k in 0..8 {
        let angle = k as f64 * PI / 4.0;
        c.set(k, 0, EIGHT_GAUSSIANS_RADIUS * angle.cos());
        c.set(k, 1, EIGHT_GAUSSIANS_RADIUS * angle.sin());
    }
    c
}

/// Draw `n` samples (rows) from a named 2-D benchmark density.
pub fn sample_toy(name: &str, n: usize, seed: u64) -> Result<Mat> {
    if n == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(n, 2);
    match name {
        "eight-gaussians" => {
            let centers = eight_gaussians_centers();
            for i in 0..n {
                let k = rng.random_range(0..8);
                let gx: f64 = rng.sample(StandardNormal);
                let gy: f64 = rng.sample(StandardNormal);
                out.set(i, 0, centers.at(k, 0) + EIGHT_GAUSSIANS_STD * gx);
                out.set(i, 1, centers.at(k, 1) + EIGHT_GAUSSIANS_STD * gy);
            }
        }
        "checkerboard" => {
            // Black cells: (i + j) even, i, j in -4..4.
            let cells: Vec<(i64, i64)> = (-4..4)
                .flat_map(|i| (-4..4).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            for r in 0..n {
                let (ci, cj) = cells[rng.random_range(0..cells.len())];
                out.set(r, 0, ci as f64 + rng.random_range(0.0..1.0));
                out.set(r, 1, cj as f64 + rng.random_range(0.0..1.0));
            }
        }
        "two-moons" => {
            for i in 0..n {
                let t = rng.random_range(0.0..PI);
                let (mut x, mut y) = if i % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                x += 0.1 * nx;
                y += 0.1 * ny;
                out.set(i, 0, 2.0 * x);
                out.set(i, 1, 2.0 * y);
            }
        }
        "spiral" => {
            for i in 0..n {
                let t = rng.random_range(0.0f64..1.0).sqrt() * 3.0 * PI;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = sign * (-t.cos() * t + rng.random_range(0.0..0.5)) / 3.0;
                let y = sign * (t.sin() * t + rng.random_range(0.0..0.5)) / 3.0;
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                out.set(i, 0, x + 0.1 * nx);
                out.set(i, 1, y + 0.1 * ny);
            }
        }
        "pinwheel" => {
            let (radial_std, tangential_std, rate) = (0.3, 0.1, 0.25);
            for i in 0..n {
                let blade = rng.random_range(0..5) as f64;
                let g1: f64 = rng.sample(StandardNormal);
                let g2: f64 = rng.sample(StandardNormal);
                let fx = radial_std * g1 + 1.0;
                let fy = tangential_std * g2;
                let angle = blade * 2.0 * PI / 5.0 + rate * fx.exp();
                out.set(i, 0, 2.0 * (fx * angle.cos() - fy * angle.sin()));
                out.set(i, 1, 2.0 * (fx * angle.sin() + fy * angle.cos()));
            }
        }
        "circles" => {
            for i in 0..n {
                let radius = if i % 2 == 0 { 1.0 } else { 0.5 };
                let t = rng.random_range(0.0..2.0 * PI);
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                out.set(i, 0, 3.0 * (radius * t.cos() + 0.08 * nx));
                out.set(i, 1, 3.0 * (radius * t.sin() + 0.08 * ny));
            }
        }
        "swissroll" => {
            for i in 0..n {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random_range(0.0f64..1.0));
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                out.set(i, 0, (t * t.cos() + nx) / 5.0);
                out.set(i, 1, (t * t.sin() + ny) / 5.0);
            }
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown toy distribution '{other}'; valid names: {}",
                TOY_NAMES.join(", ")
            )));
        }
    }
    Ok(out)
}

/// `n x d` matrix of i.i.d. standard normal draws.
pub fn sample_latent(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(n, d);
    for v in out.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// Standardized train/validation/test split with the statistics needed to
/// undo the standardization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Mat,
    pub val: Mat,
    pub test: Mat,
    /// Per-column mean of the raw training rows.
    pub mean: Vec<f64>,
    /// Per-column standard deviation (population) of the raw training rows.
    pub std: Vec<f64>,
    pub source: String,
    pub seed: u64,
}

impl DatasetSplit {
    /// Shuffle, split, and standardize a raw sample matrix.
    ///
    /// Fractions apply to train and validation; the remainder is the test
    /// set. Constant columns are rejected: silently jittering them would
    /// corrupt the density being modeled.
    pub fn from_matrix(
        data: Mat,
        source: &str,
        fractions: (f64, f64),
        seed: u64,
    ) -> Result<DatasetSplit> {
        let n = data.rows();
        let d = data.cols();
        let (f_train, f_val) = fractions;
        if !(f_train > 0.0 && f_val >= 0.0 && f_train + f_val < 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "split fractions ({f_train}, {f_val}) must be positive and sum below 1"
            )));
        }
        if n < 10 {
            return Err(Error::Config(format!("need at least 10 rows, got {n}")));
        }

        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let n_train = ((f_train * n as f64).round() as usize).max(1).min(n - 2);
        let n_val = ((f_val * n as f64).round() as usize).max(1).min(n - n_train - 1);
        let pick = |idx: &[usize]| -> Mat {
            let mut m = Mat::zeros(idx.len(), d);
            for (r, &src) in idx.iter().enumerate() {
                m.row_mut(r).copy_from_slice(data.row(src));
            }
            m
        };
        let train_raw = pick(&order[..n_train]);
        let val_raw = pick(&order[n_train..n_train + n_val]);
        let test_raw = pick(&order[n_train + n_val..]);

        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let col: Vec<f64> = (0..n_train).map(|r| train_raw.at(r, c)).collect();
            let mu = col.iter().sum::<f64>() / n_train as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n_train as f64;
            let sd = var.sqrt();
            if sd < 1e-12 {
                return Err(Error::Config(format!(
                    "column {c} of '{source}' is constant; refusing to standardize"
                )));
            }
            mean[c] = mu;
            std[c] = sd;
        }

        let split = DatasetSplit {
            train: Mat::zeros(0, 0),
            val: Mat::zeros(0, 0),
            test: Mat::zeros(0, 0),
            mean,
            std,
            source: source.to_string(),
            seed,
        };
        let train = split.standardize(&train_raw);
        let val = split.standardize(&val_raw);
        let test = split.standardize(&test_raw);
        Ok(DatasetSplit {
            train,
            val,
            test,
            ..split
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Map raw coordinates to the standardized space the flow trains in.
    pub fn standardize(&self, raw: &Mat) -> Mat {
        let mut out = raw.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for c in 0..row.len() {
                row[c] = (row[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn unstandardize(&self, standardized: &Mat) -> Mat {
        let mut out = standardized.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for c in 0..row.len() {
                row[c] = row[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Outcome of [`load_csv`]: the split plus ingestion accounting.
#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub split: DatasetSplit,
    /// Rows dropped because they contained non-finite values.
    pub dropped_rows: usize,
    /// Data rows read (excluding any header).
    pub total_rows: usize,
}

/// Parse a numeric rectangular file into a standardized split.
///
/// Delimiter: explicit, or auto (comma when present in the first data line,
/// otherwise any whitespace). A non-numeric first row is treated as a header.
/// Rows containing NaN or infinity are dropped and counted.
pub fn load_csv(
    path: &Path,
    delimiter: Option<char>,
    fractions: (f64, f64),
    seed: u64,
) -> Result<CsvLoad> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut dropped = 0usize;
    let mut header_skipped = false;

    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match delimiter {
            Some(delim) => trimmed.split(delim).map(str::trim).collect(),
            None => {
                if trimmed.contains(',') {
                    trimmed.split(',').map(str::trim).collect()
                } else {
                    trimmed.split_whitespace().collect()
                }
            }
        };
        let mut parsed = Vec::with_capacity(fields.len());
        let mut bad_col = None;
        for (col, field) in fields.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) => parsed.push(v),
                Err(_) => {
                    bad_col = Some(col);
                    break;
                }
            }
        }
        if let Some(col) = bad_col {
            // A non-numeric first row is a header; anywhere else it is an error.
            if rows.is_empty() && !header_skipped {
                header_skipped = true;
                continue;
            }
            return Err(Error::Parse {
                path: name,
                row: line_no + 1,
                col: col + 1,
                msg: format!("cannot parse '{}' as a number", fields[col]),
            });
        }
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(Error::Parse {
                    path: name,
                    row: line_no + 1,
                    col: parsed.len().min(w) + 1,
                    msg: format!("ragged row: {} fields, expected {w}", parsed.len()),
                });
            }
            _ => {}
        }
        if parsed.iter().all(|v| v.is_finite()) {
            rows.push(parsed);
        } else {
            dropped += 1;
        }
    }

    let total_rows = rows.len() + dropped;
    let width = width.ok_or_else(|| Error::Parse {
        path: name.clone(),
        row: 1,
        col: 1,
        msg: "file contains no data rows".into(),
    })?;
    if rows.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 finite rows, got {} (after dropping {dropped})",
            rows.len()
        )));
    }
    let mut flat = Vec::with_capacity(rows.len() * width);
    for row in &rows {
        flat.extend_from_slice(row);
    }
    let data = Mat::from_vec(rows.len(), width, flat);
    let split = DatasetSplit::from_matrix(data, &name, fractions, seed)?;
    Ok(CsvLoad {
        split,
        dropped_rows: dropped,
        total_rows,
    })
}

/// Analytically known source density, for checks that require evaluating
/// `log rho_0`.
#[derive(Clone, Debug)]
pub enum ReferenceDensity {
    /// Independent Gaussian coordinates.
    DiagonalNormal { mean: Vec<f64>, std: Vec<f64> },
    /// Equal-weight mixture of axis-aligned Gaussians; one center per row,
    /// shared per-axis standard deviations.
    GaussianMixture { centers: Mat, std: Vec<f64> },
    /// Density not analytically available (e.g. real tabular data).
    Unknown,
}

impl ReferenceDensity {
    pub fn standard_normal(d: usize) -> Self {
        ReferenceDensity::DiagonalNormal {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// The eight-gaussians toy density in raw coordinates.
    pub fn eight_gaussians() -> Self {
        ReferenceDensity::GaussianMixture {
            centers: eight_gaussians_centers(),
            std: vec![EIGHT_GAUSSIANS_STD; 2],
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, ReferenceDensity::Unknown)
    }

    /// Transform the density under `x -> (x - mean) / std`, the standardization
    /// map; exact for these Gaussian families.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Self {
        match self {
            ReferenceDensity::DiagonalNormal { mean: mu, std: sd } => ReferenceDensity::DiagonalNormal {
                mean: mu
                    .iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((m, shift), scale)| (m - shift) / scale)
                    .collect(),
                std: sd.iter().zip(std).map(|(s, scale)| s / scale).collect(),
            },
            ReferenceDensity::GaussianMixture { centers, std: sd } => {
                let mut c = centers.clone();
                for r in 0..c.rows() {
                    let row = c.row_mut(r);
                    for k in 0..row.len() {
                        row[k] = (row[k] - mean[k]) / std[k];
                    }
                }
                ReferenceDensity::GaussianMixture {
                    centers: c,
                    std: sd.iter().zip(std).map(|(s, scale)| s / scale).collect(),
                }
            }
            ReferenceDensity::Unknown => ReferenceDensity::Unknown,
        }
    }

    /// Log density at a point. Errors for [`ReferenceDensity::Unknown`].
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_74;
        match self {
            ReferenceDensity::DiagonalNormal { mean, std } => {
                let mut acc = 0.0;
                for ((v, m), s) in x.iter().zip(mean).zip(std) {
                    let z = (v - m) / s;
                    acc += -0.5 * z * z - s.ln() - HALF_LOG_2PI;
                }
                Ok(acc)
            }
            ReferenceDensity::GaussianMixture { centers, std } => {
                let k = centers.rows();
                let mut log_terms = Vec::with_capacity(k);
                for comp in 0..k {
                    let mut acc = 0.0;
                    for (j, v) in x.iter().enumerate() {
                        let z = (v - centers.at(comp, j)) / std[j];
                        acc += -0.5 * z * z - std[j].ln() - HALF_LOG_2PI;
                    }
                    log_terms.push(acc);
                }
                let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = log_terms.iter().map(|v| (v - max).exp()).sum();
                Ok(max + sum_exp.ln() - (k as f64).ln())
            }
            ReferenceDensity::Unknown => Err(Error::Argument(
                "reference density is unknown; KL check undefined".into(),
            )),
        }
    }
}
