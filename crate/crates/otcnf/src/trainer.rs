//! ADAM minimization of the recorded objective with minibatching, validation
//! on a finer time grid, early stopping, and checkpointing.
//!
//! Validation always integrates with `nt_val >= nt_train` steps, re-solving
//! the ODE on a finer grid than training saw; a finer-grid validation loss
//! that tracks the training loss is the working check that the discrete flow
//! still approximates the continuous one. The best-validation parameters are
//! kept. Divergence (a non-finite loss or gradient) aborts the loop and
//! reports the iteration; the best parameters seen so far are retained.
//!
//! Everything is deterministic under the run seed: initialization, epoch
//! shuffling, estimator probes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{record_objective, ObjectiveConfig, TraceEstimator};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::flow::integrate_forward;
use crate::linalg::Mat;
use crate::objective::loss_c_batch;
use crate::potential::{ModelParams, ParamGradient};

/// Every knob the training loop reads.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden width of the potential's ResNet.
    pub m: usize,
    /// Hidden layer count; two is the working depth, wider beats deeper.
    pub layers: usize,
    pub nt_train: usize,
    /// Validation time steps; must be at least `nt_train`, never clamped.
    pub nt_val: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied at each validation; 1
    /// disables scheduling.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Quadratic rank; `None` means `min(10, d)`.
    pub rank: Option<usize>,
    pub trace: TraceEstimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 32,
            layers: 2,
            nt_train: 8,
            nt_val: 16,
            alpha1: 1.0,
            alpha2: 1.0,
            lr: 1e-2,
            lr_decay: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 512,
            max_iters: 2000,
            val_every: 50,
            patience: 20,
            seed: 0,
            rank: None,
            trace: TraceEstimator::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.layers == 0 {
            return Err(Error::Config("network width and depth must be positive".into()));
        }
        if self.nt_train == 0 {
            return Err(Error::Config("nt_train must be at least 1".into()));
        }
        if self.nt_val < self.nt_train {
            return Err(Error::Config(format!(
                "nt_val ({}) must be at least nt_train ({}); validation runs on the finer grid",
                self.nt_val, self.nt_train
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.val_every == 0 || self.patience == 0
        {
            return Err(Error::Config(
                "batch size, iteration budget, validation cadence, and patience must be positive"
                    .into(),
            ));
        }
        if let TraceEstimator::Hutchinson { probes: 0, .. } = self.trace {
            return Err(Error::Config("Hutchinson training needs at least one probe".into()));
        }
        Ok(())
    }

    fn objective(&self, nt: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            nt,
            t_final: 1.0,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            trace: self.trace,
        }
    }
}

/// First/second moment accumulators for ADAM over the flattened parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update; returns the new parameters.
pub fn adam_step(
    params: &ModelParams,
    grad: &ParamGradient,
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
) -> ModelParams {
    let mut flat = params.flatten();
    let g = grad.flatten();
    assert_eq!(flat.len(), g.len(), "gradient shape mismatch");
    assert_eq!(flat.len(), state.m.len(), "optimizer state shape mismatch");
    state.t += 1;
    let b1 = config.adam_beta1;
    let b2 = config.adam_beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..flat.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        flat[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
    }
    params.unflatten_like(&flat)
}

/// One training-log row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub total: f64,
    pub c: f64,
    pub l: f64,
    pub r: f64,
    /// Mean validation `C` when this iteration ran a validation pass.
    pub val_c: Option<f64>,
    pub seconds: f64,
}

/// Per-iteration training history.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,total,C,L,R,val_C,seconds\n");
        for e in &self.entries {
            let val = e.val_c.map(|v| format!("{v:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{},{:.6}\n",
                e.iter, e.total, e.c, e.l, e.r, val, e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Validation trace as `(iter, val_C)` pairs.
    pub fn validation_curve(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.val_c.map(|v| (e.iter, v)))
            .collect()
    }
}

/// Versioned training snapshot. JSON on disk; `save -> load -> save` is
/// byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ModelParams,
    pub iteration: usize,
    pub best_val_c: f64,
    /// Standardization statistics of the training data.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Data source descriptor, e.g. `toy:eight-gaussians` or `csv:<path>`.
    pub source: String,
    pub config: TrainConfig,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("checkpoint serialization failed: {e}")))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let body = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("checkpoint parse failed: {e}")))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} unsupported (expected {})",
                ck.format_version, CHECKPOINT_VERSION
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

/// Training result: best-validation parameters plus the full log. `diverged`
/// carries the aborting iteration when the loss went non-finite; the
/// parameters are still the best ones seen.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    pub best_val_c: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub diverged: Option<usize>,
}

/// Mean validation loss `C` on the finer grid.
fn validation_c(params: &ModelParams, val: &Mat, nt_val: usize) -> Result<f64> {
    let (batch, _) = integrate_forward(params, val, nt_val, 1.0)?;
    Ok(loss_c_batch(&batch).iter().sum::<f64>() / batch.len() as f64)
}

/// Run the training loop on a standardized split.
pub fn train(data: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let d = data.dim();
    let n = data.train.rows();
    if n == 0 || data.val.rows() == 0 {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }

    // Separate deterministic streams per role so changing the validation
    // cadence cannot perturb the training draws.
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x51AA_77EE));
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9));

    let mut params = ModelParams::random(d, config.m, config.layers, config.rank, &mut init_rng);
    let mut adam = AdamState::new(params.num_params());
    let obj_cfg = config.objective(config.nt_train);
    let mut lr = config.lr;

    let mut best_val = validation_c(&params, &data.val, config.nt_val)?;
    let mut best_params = params.clone();
    let mut best_iteration = 0usize;
    let mut stale_validations = 0usize;
    let mut log = TrainLog::default();
    let started = Instant::now();

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force a shuffle on the first batch
    let mut diverged = None;
    let mut iterations_run = 0;

    for iter in 1..=config.max_iters {
        // Assemble the next minibatch, reshuffling at epoch boundaries; the
        // last partial batch of an epoch is used as-is.
        if cursor >= n {
            for i in (1..n).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        let take = config.batch_size.min(n - cursor);
        let mut batch = Mat::zeros(take, d);
        for (row, &src) in order[cursor..cursor + take].iter().enumerate() {
            batch.row_mut(row).copy_from_slice(data.train.row(src));
        }
        cursor += take;

        let record = match record_objective(&params, &batch, &obj_cfg, &mut probe_rng) {
            Ok(r) => r,
            Err(Error::NonFinite { step, .. }) => {
                diverged = Some(iter);
                log.entries.push(LogEntry {
                    iter,
                    total: f64::NAN,
                    c: f64::NAN,
                    l: f64::NAN,
                    r: f64::NAN,
                    val_c: None,
                    seconds: started.elapsed().as_secs_f64(),
                });
                let _ = step;
                break;
            }
            Err(e) => return Err(e),
        };
        let grad = record.tape.backward()?;
        if !grad.is_finite() {
            diverged = Some(iter);
            break;
        }
        params = adam_step(&params, &grad, &mut adam, config, lr);
        iterations_run = iter;

        let mut val_c = None;
        if iter % config.val_every == 0 || iter == config.max_iters {
            let vc = validation_c(&params, &data.val, config.nt_val)?;
            if !vc.is_finite() {
                diverged = Some(iter);
                break;
            }
            val_c = Some(vc);
            if vc < best_val {
                best_val = vc;
                best_params = params.clone();
                best_iteration = iter;
                stale_validations = 0;
            } else {
                stale_validations += 1;
            }
            lr *= config.lr_decay;
        }

        log.entries.push(LogEntry {
            iter,
            total: record.value,
            c: record.c_mean,
            l: record.l_mean,
            r: record.r_mean,
            val_c,
            seconds: started.elapsed().as_secs_f64(),
        });

        if val_c.is_some() && stale_validations > config.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        log,
        best_val_c: best_val,
        best_iteration,
        iterations_run,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_toy;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            m: 8,
            layers: 1,
            nt_train: 2,
            nt_val: 4,
            batch_size: 32,
            max_iters: 6,
            val_every: 3,
            patience: 5,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let params = ModelParams::zeros(2, 4, 1, 2);
        let grad = ParamGradient::zeros_like(&params);
        let mut state = AdamState::new(params.num_params());
        let config = TrainConfig::default();
        let next = adam_step(&params, &grad, &mut state, &config, config.lr);
        assert_eq!(params.flatten(), next.flatten());
    }

    #[test]
    fn adam_first_step_hand_check() {
        // t = 1: mhat = g, vhat = g^2, step = -lr g / (|g| + eps).
        let mut params = ModelParams::zeros(1, 1, 1, 1);
        params.c = 0.3;
        let mut grad = ParamGradient::zeros_like(&params);
        grad.w = Mat::col_vec(&[0.5]);
        let mut state = AdamState::new(params.num_params());
        let config = TrainConfig::default();
        let next = adam_step(&params, &grad, &mut state, &config, 0.01);
        let expect = -0.01 * 0.5 / (0.5 + config.adam_eps);
        assert!((next.w.at(0, 0) - expect).abs() < 1e-15);
        // Untouched coordinates stay put.
        assert_eq!(next.c, 0.3);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = sample_toy("two-moons", 200, 3).unwrap();
        let split = DatasetSplit::from_matrix(data, "toy", (0.8, 0.1), 3).unwrap();
        let config = tiny_config();
        let a = train(&split, &config).unwrap();
        let b = train(&split, &config).unwrap();
        let fa = a.params.flatten();
        let fb = b.params.flatten();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (ea, eb) in a.log.entries.iter().zip(&b.log.entries) {
            assert_eq!(ea.total.to_bits(), eb.total.to_bits());
        }
    }

    #[test]
    fn config_validation_rejects_coarser_validation_grid() {
        let config = TrainConfig {
            nt_train: 8,
            nt_val: 4,
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("otcnf_ck_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            params: ModelParams::random(2, 8, 2, None, &mut rng),
            iteration: 123,
            best_val_c: 2.345678901234,
            mean: vec![0.1, -0.2],
            std: vec![1.5, 2.5],
            source: "toy:eight-gaussians".into(),
            config: TrainConfig::default(),
        };
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded.params.flatten(), ck.params.flatten());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let dir = std::env::temp_dir().join(format!("otcnf_ckv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ck = Checkpoint {
            format_version: 99,
            params: ModelParams::random(1, 4, 1, None, &mut rng),
            iteration: 0,
            best_val_c: 0.0,
            mean: vec![0.0],
            std: vec![1.0],
            source: "toy:circles".into(),
            config: TrainConfig::default(),
        };
        ck.config.nt_val = ck.config.nt_train;
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn short_training_run_improves_loss() {
        let data = sample_toy("eight-gaussians", 600, 11).unwrap();
        let split = DatasetSplit::from_matrix(data, "toy", (0.8, 0.1), 11).unwrap();
        let config = TrainConfig {
            m: 16,
            layers: 2,
            nt_train: 4,
            nt_val: 8,
            batch_size: 128,
            max_iters: 60,
            val_every: 20,
            patience: 10,
            seed: 2,
            ..Default::default()
        };
        let outcome = train(&split, &config).unwrap();
        assert!(outcome.diverged.is_none());
        let first = outcome.log.entries.first().unwrap().total;
        let last = outcome.log.entries.last().unwrap().total;
        assert!(
            last < first,
            "training loss did not improve: {first} -> {last}"
        );
        assert!(outcome.best_val_c.is_finite());
    }
}
