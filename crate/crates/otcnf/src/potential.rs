//! Scalar potential whose negative spatial gradient drives the flow.
//!
//! The potential on space-time points `s = (x, t)` in `R^{d+1}` is
//!
//! ```text
//!     Phi(s) = w' N(s) + 0.5 s' (A'A) s + b' s + c
//! ```
//!
//! where `N` is a residual network with an opening layer mapping `R^{d+1}` to
//! `R^m` followed by `M >= 1` hidden layers of width `m`, all using the
//! activation `sigma(x) = log(exp(x) + exp(-x))` (the antiderivative of tanh).
//! The quadratic `A`, `b`, `c` part models linear dynamics; `N` models the
//! nonlinear part with a rank-`r` factor `A` keeping the parameter count down.
//!
//! The interesting part is derivative evaluation. The spatial gradient follows
//! a closed-form backpropagation recursion through the ResNet, and the trace
//! of the spatial Hessian is computed *exactly* in a single extra forward
//! sweep that maintains a running `m x d` Jacobian, never materializing the
//! Hessian: `O(m d)` work for the opening layer plus `O(m^2 d)` per hidden
//! layer. A Hutchinson estimator with analytic Hessian-vector products is
//! provided for comparison; it shares the same recorded forward/backward
//! state, so estimator and exact trace are evaluated on identical footing.
//!
//! Batched entry points treat columns as samples so the kernels amortize into
//! dense matrix products. Evaluation never mutates the parameters; concurrent
//! callers can share `&ModelParams` freely, with each call owning its
//! workspace.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Overflow-safe `sigma(x) = log(exp(x) + exp(-x))`.
///
/// Computed as `|x| + log1p(exp(-2|x|))`: exact to double precision and finite
/// for every finite input (the naive form overflows once `|x|` exceeds ~709).
#[inline]
pub fn sigma(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// First derivative of [`sigma`]: `tanh(x)`.
#[inline]
pub fn sigma_prime(x: f64) -> f64 {
    x.tanh()
}

/// Second derivative of [`sigma`]: `1 - tanh(x)^2`.
#[inline]
pub fn sigma_double_prime(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// One hidden ResNet layer: `u <- u + h * sigma(K u + b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResLayer {
    /// `m x m` weight.
    pub k: Mat,
    /// `m x 1` bias.
    pub b: Mat,
}

/// Weights of the residual network `N`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResNetParams {
    /// Opening layer weight, `m x (d+1)`.
    pub k0: Mat,
    /// Opening layer bias, `m x 1`.
    pub b0: Mat,
    /// Hidden layers, at least one.
    pub hidden: Vec<ResLayer>,
    /// Residual step size, positive. Default 1.
    pub h: f64,
}

impl ResNetParams {
    /// Hidden width `m`.
    pub fn width(&self) -> usize {
        self.k0.rows()
    }

    /// Number of hidden layers `M`.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }
}

/// All trainable weights of the potential.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    /// Readout vector, `m x 1`.
    pub w: Mat,
    pub resnet: ResNetParams,
    /// Low-rank quadratic factor, `r x (d+1)`.
    pub a: Mat,
    /// Linear term, `(d+1) x 1`.
    pub b: Mat,
    /// Constant offset. A gauge freedom: it never enters the dynamics.
    pub c: f64,
    /// Spatial dimension `d`.
    pub d: usize,
}

/// Default quadratic rank: `min(10, d)`.
pub fn default_rank(d: usize) -> usize {
    d.min(10)
}

impl ModelParams {
    /// Zero-valued parameters with the given shape. The resulting flow is the
    /// identity map.
    pub fn zeros(d: usize, m: usize, layers: usize, rank: usize) -> Self {
        let hidden = (0..layers)
            .map(|_| ResLayer {
                k: Mat::zeros(m, m),
                b: Mat::zeros(m, 1),
            })
            .collect();
        ModelParams {
            w: Mat::zeros(m, 1),
            resnet: ResNetParams {
                k0: Mat::zeros(m, d + 1),
                b0: Mat::zeros(m, 1),
                hidden,
                h: 1.0,
            },
            a: Mat::zeros(rank, d + 1),
            b: Mat::zeros(d + 1, 1),
            c: 0.0,
        d,
        }
    }

    /// Random initialization: `K` matrices uniform on the Glorot interval
    /// `+-sqrt(6/(fan_in+fan_out))`, `w`/`A`/`b` uniform on `+-1e-3` so the
    /// initial flow starts near the identity, ResNet biases and `c` at zero.
    pub fn random(d: usize, m: usize, layers: usize, rank: Option<usize>, rng: &mut impl Rng) -> Self {
        let r = rank.unwrap_or_else(|| default_rank(d)).min(d + 1).max(1);
        let mut p = Self::zeros(d, m, layers, r);
        let glorot = |fan_in: usize, fan_out: usize, m: &mut Mat, rng: &mut dyn rand::RngCore| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
        };
        glorot(d + 1, m, &mut p.resnet.k0, rng);
        for layer in &mut p.resnet.hidden {
            glorot(m, m, &mut layer.k, rng);
        }
        for v in p.w.as_mut_slice() {
            *v = rng.random_range(-1e-3..1e-3);
        }
        for v in p.a.as_mut_slice() {
            *v = rng.random_range(-1e-3..1e-3);
        }
        for v in p.b.as_mut_slice() {
            *v = rng.random_range(-1e-3..1e-3);
        }
        p
    }

    /// Random parameters with order-one readout, quadratic, and bias weights.
    /// Derivatives come out at useful magnitude, unlike the near-identity
    /// training start; this is the draw used by kernel studies and oracle
    /// tests.
    pub fn random_unit(
        d: usize,
        m: usize,
        layers: usize,
        rank: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::random(d, m, layers, rank, rng);
        for v in p.w.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.a.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.b.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.resnet.b0.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        for layer in &mut p.resnet.hidden {
            for v in layer.b.as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    pub fn width(&self) -> usize {
        self.resnet.width()
    }

    pub fn depth(&self) -> usize {
        self.resnet.depth()
    }

    /// Quadratic rank `r`.
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.flatten().len()
    }

    /// Check mutual dimension consistency.
    pub fn validate(&self) -> Result<()> {
        let m = self.width();
        let d = self.d;
        if d == 0 {
            return Err(Error::Config("spatial dimension must be at least 1".into()));
        }
        if self.resnet.hidden.is_empty() {
            return Err(Error::Config("ResNet needs at least one hidden layer".into()));
        }
        if !(self.resnet.h > 0.0) {
            return Err(Error::Config(format!(
                "ResNet step size must be positive, got {}",
                self.resnet.h
            )));
        }
        if self.resnet.k0.shape() != (m, d + 1) {
            return Err(Error::Config(format!(
                "opening layer must be {}x{}, got {}x{}",
                m,
                d + 1,
                self.resnet.k0.rows(),
                self.resnet.k0.cols()
            )));
        }
        if self.resnet.b0.shape() != (m, 1) {
            return Err(Error::Config("opening bias length mismatch".into()));
        }
        for (i, layer) in self.resnet.hidden.iter().enumerate() {
            if layer.k.shape() != (m, m) {
                return Err(Error::Config(format!("hidden layer {i} weight must be {m}x{m}")));
            }
            if layer.b.shape() != (m, 1) {
                return Err(Error::Config(format!("hidden layer {i} bias length mismatch")));
            }
        }
        if self.w.shape() != (m, 1) {
            return Err(Error::Config("readout vector length must equal width".into()));
        }
        if self.a.cols() != d + 1 {
            return Err(Error::Config(format!(
                "quadratic factor must have {} columns, got {}",
                d + 1,
                self.a.cols()
            )));
        }
        if self.a.rows() > d + 1 {
            return Err(Error::Config(format!(
                "quadratic rank {} exceeds {}",
                self.a.rows(),
                d + 1
            )));
        }
        if self.b.shape() != (d + 1, 1) {
            return Err(Error::Config("linear term length mismatch".into()));
        }
        Ok(())
    }

    /// Flatten into a single vector. Order: `w`, `K0`, `b0`, each hidden
    /// `(K_i, b_i)`, `A`, `b`, `c`. [`unflatten_like`](Self::unflatten_like)
    /// inverts this.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.resnet.k0.as_slice());
        out.extend_from_slice(self.resnet.b0.as_slice());
        for layer in &self.resnet.hidden {
            out.extend_from_slice(layer.k.as_slice());
            out.extend_from_slice(layer.b.as_slice());
        }
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.push(self.c);
        out
    }

    /// Rebuild parameters with this model's shapes from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> ModelParams {
        let mut p = self.clone();
        let mut pos = 0;
        let take = |dst: &mut Mat, pos: &mut usize| {
            let n = dst.len();
            dst.as_mut_slice().copy_from_slice(&flat[*pos..*pos + n]);
            *pos += n;
        };
        take(&mut p.w, &mut pos);
        take(&mut p.resnet.k0, &mut pos);
        take(&mut p.resnet.b0, &mut pos);
        for layer in &mut p.resnet.hidden {
            take(&mut layer.k, &mut pos);
            take(&mut layer.b, &mut pos);
        }
        take(&mut p.a, &mut pos);
        take(&mut p.b, &mut pos);
        p.c = flat[pos];
        pos += 1;
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
        p
    }
}

/// Gradient of a scalar objective with respect to every model parameter,
/// shape-congruent with [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamGradient {
    pub w: Mat,
    pub k0: Mat,
    pub b0: Mat,
    pub hidden: Vec<(Mat, Mat)>,
    pub a: Mat,
    pub b: Mat,
    pub c: f64,
}

impl ParamGradient {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ParamGradient {
            w: Mat::zeros(p.w.rows(), 1),
            k0: Mat::zeros(p.resnet.k0.rows(), p.resnet.k0.cols()),
            b0: Mat::zeros(p.resnet.b0.rows(), 1),
            hidden: p
                .resnet
                .hidden
                .iter()
                .map(|l| (Mat::zeros(l.k.rows(), l.k.cols()), Mat::zeros(l.b.rows(), 1)))
                .collect(),
            a: Mat::zeros(p.a.rows(), p.a.cols()),
            b: Mat::zeros(p.b.rows(), 1),
            c: 0.0,
        }
    }

    /// Same flattening order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.k0.as_slice());
        out.extend_from_slice(self.b0.as_slice());
        for (k, b) in &self.hidden {
            out.extend_from_slice(k.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.push(self.c);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Forward and backward quantities recorded by [`potential_gradient_batch`],
/// reused by the trace kernels so trace evaluation never repeats the network
/// passes. Fields are private: a workspace can only come from a gradient
/// evaluation, which keeps it consistent with the `(s, theta)` it was built
/// from.
#[derive(Clone, Debug)]
pub struct TraceWorkspace {
    /// Pre-activations `K_i u_{i-1} + b_i`, one `m x n` matrix per layer
    /// (index 0 is the opening layer).
    preacts: Vec<Mat>,
    /// Forward activations `u_0 .. u_M`.
    acts: Vec<Mat>,
    /// Backprop states `z_1 .. z_{M+1}`; `zbp[i]` holds `z_{i+1}`.
    zbp: Vec<Mat>,
    d: usize,
}

impl TraceWorkspace {
    pub fn batch_size(&self) -> usize {
        self.preacts[0].cols()
    }

    pub fn width(&self) -> usize {
        self.preacts[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.preacts.len() - 1
    }

    /// Forward activations `u_0 .. u_M` recorded during the gradient pass.
    pub fn activations(&self) -> &[Mat] {
        &self.acts
    }
}

/// Evaluate `Phi(s)` at a single space-time point `s` of length `d+1`.
pub fn potential_forward(params: &ModelParams, s: &[f64]) -> Result<f64> {
    if s.len() != params.d + 1 {
        return Err(Error::Config(format!(
            "input point has length {}, expected {}",
            s.len(),
            params.d + 1
        )));
    }
    params.validate()?;
    let net = &params.resnet;
    let m = net.width();
    // u0 = sigma(K0 s + b0)
    let mut u: Vec<f64> = (0..m)
        .map(|i| {
            let row = net.k0.row(i);
            let pre: f64 = row.iter().zip(s).map(|(&k, &x)| k * x).sum::<f64>() + net.b0.at(i, 0);
            sigma(pre)
        })
        .collect();
    let mut next = vec![0.0; m];
    for layer in &net.hidden {
        for i in 0..m {
            let pre: f64 =
                layer.k.row(i).iter().zip(&u).map(|(&k, &x)| k * x).sum::<f64>() + layer.b.at(i, 0);
            next[i] = u[i] + net.h * sigma(pre);
        }
        std::mem::swap(&mut u, &mut next);
    }
    let nonlinear: f64 = params.w.as_slice().iter().zip(&u).map(|(&w, &x)| w * x).sum();

    // 0.5 s'(A'A)s = 0.5 ||A s||^2
    let mut quad = 0.0;
    for rrow in 0..params.a.rows() {
        let dot: f64 = params.a.row(rrow).iter().zip(s).map(|(&a, &x)| a * x).sum();
        quad += dot * dot;
    }
    let linear: f64 = params.b.as_slice().iter().zip(s).map(|(&b, &x)| b * x).sum();
    Ok(nonlinear + 0.5 * quad + linear + params.c)
}

/// Batched full gradient of the potential.
///
/// `s` has one space-time point per column (`(d+1) x n`). Returns the
/// `(d+1) x n` gradient (rows `0..d` spatial, row `d` the time derivative)
/// together with the workspace consumed by [`exact_trace_batch`] and
/// [`hutchinson_trace_batch`].
pub fn potential_gradient_batch(params: &ModelParams, s: &Mat) -> Result<(Mat, TraceWorkspace)> {
    if s.rows() != params.d + 1 {
        return Err(Error::Config(format!(
            "input batch has {} rows, expected {}",
            s.rows(),
            params.d + 1
        )));
    }
    params.validate()?;
    let net = &params.resnet;
    let n = s.cols();
    let layers = net.depth();
    let h = net.h;

    // Forward sweep, keeping pre-activations for the derivative kernels.
    let mut preacts = Vec::with_capacity(layers + 1);
    let mut acts = Vec::with_capacity(layers + 1);
    let mut pre = net.k0.matmul(s);
    add_col(&mut pre, &net.b0);
    let mut u = pre.map(sigma);
    preacts.push(pre);
    acts.push(u.clone());
    for layer in &net.hidden {
        let mut p = layer.k.matmul(&u);
        add_col(&mut p, &layer.b);
        u = u.add_scaled(&p.map(sigma), h);
        preacts.push(p);
        acts.push(u.clone());
    }

    // Backward recursion z_{M+1} = w, z_i = z_{i+1} + h K_i' (sigma'(P_i) . z_{i+1}).
    let mut zbp = vec![Mat::zeros(0, 0); layers + 1];
    let mut z = params.w.broadcast_col(n);
    zbp[layers] = z.clone();
    for i in (1..=layers).rev() {
        let sp = preacts[i].map(sigma_prime);
        let prod = sp.hadamard(&z);
        let mut znext = z.clone();
        net.hidden[i - 1].k.matmul_tn_acc(&prod, h, &mut znext);
        z = znext;
        zbp[i - 1] = z.clone();
    }
    let sp0 = preacts[0].map(sigma_prime);
    let z0 = net.k0.matmul_tn(&sp0.hadamard(&z));

    // grad = z0 + (A'A) s + b
    let mut grad = z0;
    let a_s = params.a.matmul(s);
    params.a.matmul_tn_acc(&a_s, 1.0, &mut grad);
    add_col(&mut grad, &params.b);

    Ok((
        grad,
        TraceWorkspace {
            preacts,
            acts,
            zbp,
            d: params.d,
        },
    ))
}

/// Exact trace of the spatial Hessian of `Phi`, one value per batch column.
///
/// Implements the layer-by-layer running-Jacobian recursion: opening-layer
/// term from the squared first `d` columns of `K0`, then one `m x m` by
/// `m x d` product per hidden layer, with the Jacobian updated in place.
/// The Hessian itself is never formed.
pub fn exact_trace_batch(params: &ModelParams, ws: &TraceWorkspace) -> Vec<f64> {
    assert_eq!(ws.d, params.d, "workspace built for a different dimension");
    assert_eq!(ws.width(), params.width(), "workspace built for a different width");
    assert_eq!(ws.depth(), params.depth(), "workspace built for a different depth");
    let d = params.d;
    let m = params.width();
    let layers = params.depth();
    let n = ws.batch_size();
    let h = params.resnet.h;

    // Spatial column block of K0 and its squared row sums.
    let k0_sp = params.resnet.k0.slice_cols(0, d);
    let q0: Vec<f64> = (0..m)
        .map(|i| k0_sp.row(i).iter().map(|v| v * v).sum())
        .collect();
    // tr(E'(A'A)E) = squared Frobenius norm of the spatial columns of A.
    let a_term = params.a.slice_cols(0, d).norm_sq();

    // Transposed copies give contiguous per-sample rows inside the loop.
    let pre_t: Vec<Mat> = ws.preacts.iter().map(Mat::transpose).collect();
    let z_t: Vec<Mat> = ws.zbp.iter().map(Mat::transpose).collect();

    let mut traces = vec![0.0; n];
    let mut jac = Mat::zeros(m, d);
    let mut kj = Mat::zeros(m, d);
    for (j, trace) in traces.iter_mut().enumerate() {
        let p0 = pre_t[0].row(j);
        let z1 = z_t[0].row(j);
        let mut t: f64 = (0..m)
            .map(|i| sigma_double_prime(p0[i]) * z1[i] * q0[i])
            .sum();

        if layers > 0 {
            // J = diag(sigma'(P0)) K0E
            for i in 0..m {
                let sp = sigma_prime(p0[i]);
                for (jv, &kv) in jac.row_mut(i).iter_mut().zip(k0_sp.row(i)) {
                    *jv = sp * kv;
                }
            }
            let mut hidden_sum = 0.0;
            for layer_idx in 1..=layers {
                let k = &params.resnet.hidden[layer_idx - 1].k;
                kj.as_mut_slice().fill(0.0);
                k.matmul_acc(&jac, 1.0, &mut kj);
                let p = pre_t[layer_idx].row(j);
                let znext = z_t[layer_idx].row(j);
                let mut ti = 0.0;
                for i in 0..m {
                    let row_sq: f64 = kj.row(i).iter().map(|v| v * v).sum();
                    ti += sigma_double_prime(p[i]) * znext[i] * row_sq;
                }
                hidden_sum += ti;
                // The last layer's Jacobian is never read again.
                if layer_idx < layers {
                    for i in 0..m {
                        let scale = h * sigma_prime(p[i]);
                        for (jv, &kv) in jac.row_mut(i).iter_mut().zip(kj.row(i)) {
                            *jv += scale * kv;
                        }
                    }
                }
            }
            t += h * hidden_sum;
        }
        *trace = t + a_term;
    }
    traces
}

/// Probe distribution for the Hutchinson estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeDist {
    /// Entries are independent signs, `E[ee'] = I`. Zero variance from the
    /// diagonal, the usual choice in CNF training.
    Rademacher,
    /// Entries are standard normal.
    Gaussian,
}

/// Unbiased stochastic estimate of the spatial Hessian trace,
/// `(1/K) sum_k e_k' (H e_k)`, one estimate per batch column.
///
/// Each quadratic form is an analytic Hessian-vector product: a forward
/// tangent sweep along the probe followed by the tangent of the gradient
/// recursion, `O(m d + M m^2)` per probe. The Hessian is never formed and the
/// workspace's recorded passes are shared across probes.
pub fn hutchinson_trace_batch(
    params: &ModelParams,
    ws: &TraceWorkspace,
    probes: usize,
    dist: ProbeDist,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if probes == 0 {
        return Err(Error::Argument("Hutchinson estimator needs at least one probe".into()));
    }
    let d = params.d;
    let n = ws.batch_size();
    let pre_t: Vec<Mat> = ws.preacts.iter().map(Mat::transpose).collect();
    let z_t: Vec<Mat> = ws.zbp.iter().map(Mat::transpose).collect();
    let mut scratch = QfScratch::new(params);
    let mut estimates = vec![0.0; n];
    let mut probe = vec![0.0; d];
    for (j, est) in estimates.iter_mut().enumerate() {
        let mut acc = 0.0;
        for _ in 0..probes {
            for e in probe.iter_mut() {
                *e = match dist {
                    ProbeDist::Rademacher => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    ProbeDist::Gaussian => rng.sample(rand_distr::StandardNormal),
                };
            }
            acc += quadratic_form_rows(params, &pre_t, &z_t, j, &probe, &mut scratch);
        }
        *est = acc / probes as f64;
    }
    Ok(estimates)
}

/// Reused buffers for Hessian-vector products.
struct QfScratch {
    pdots: Vec<Vec<f64>>,
    udot: Vec<f64>,
    zdot: Vec<f64>,
    tmp: Vec<f64>,
}

impl QfScratch {
    fn new(params: &ModelParams) -> Self {
        let m = params.width();
        QfScratch {
            pdots: vec![vec![0.0; m]; params.depth() + 1],
            udot: vec![0.0; m],
            zdot: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }
}

/// `e' (H e)` for a spatial probe `e` (length `d`) at batch column `j`,
/// via the tangent of the forward and backward recursions.
pub fn quadratic_form(params: &ModelParams, ws: &TraceWorkspace, j: usize, probe: &[f64]) -> f64 {
    let pre_t: Vec<Mat> = ws.preacts.iter().map(Mat::transpose).collect();
    let z_t: Vec<Mat> = ws.zbp.iter().map(Mat::transpose).collect();
    let mut scratch = QfScratch::new(params);
    quadratic_form_rows(params, &pre_t, &z_t, j, probe, &mut scratch)
}

/// Core Hessian-vector quadratic form over sample-major transposed recordings.
fn quadratic_form_rows(
    params: &ModelParams,
    pre_t: &[Mat],
    z_t: &[Mat],
    j: usize,
    probe: &[f64],
    s: &mut QfScratch,
) -> f64 {
    let d = params.d;
    debug_assert_eq!(probe.len(), d, "probe must be spatial (length d)");
    let m = params.width();
    let layers = params.depth();
    let h = params.resnet.h;
    let net = &params.resnet;

    // Forward tangents: pdot_0 = K0 E e, udot updated layer by layer.
    let p0 = pre_t[0].row(j);
    for i in 0..m {
        let row = net.k0.row(i);
        let pd: f64 = row[..d].iter().zip(probe).map(|(&k, &e)| k * e).sum();
        s.pdots[0][i] = pd;
        s.udot[i] = sigma_prime(p0[i]) * pd;
    }
    for layer_idx in 1..=layers {
        let k = &net.hidden[layer_idx - 1].k;
        let p = pre_t[layer_idx].row(j);
        for i in 0..m {
            s.pdots[layer_idx][i] = k
                .row(i)
                .iter()
                .zip(&s.udot)
                .map(|(&kv, &u)| kv * u)
                .sum();
        }
        for i in 0..m {
            s.udot[i] += h * sigma_prime(p[i]) * s.pdots[layer_idx][i];
        }
    }

    // Tangent of the backward recursion; zdot_{M+1} = 0.
    s.zdot.fill(0.0);
    for layer_idx in (1..=layers).rev() {
        let k = &net.hidden[layer_idx - 1].k;
        let p = pre_t[layer_idx].row(j);
        let znext = z_t[layer_idx].row(j);
        let pdot = &s.pdots[layer_idx];
        for i in 0..m {
            s.tmp[i] = sigma_double_prime(p[i]) * pdot[i] * znext[i] + sigma_prime(p[i]) * s.zdot[i];
        }
        // zdot += h K' tmp
        for i in 0..m {
            let t = h * s.tmp[i];
            for (zd, &kk) in s.zdot.iter_mut().zip(k.row(i)) {
                *zd += t * kk;
            }
        }
    }
    let z1 = z_t[0].row(j);
    for i in 0..m {
        s.tmp[i] =
            sigma_double_prime(p0[i]) * s.pdots[0][i] * z1[i] + sigma_prime(p0[i]) * s.zdot[i];
    }
    // Spatial rows of K0' tmp, dotted with the probe.
    let mut quad = 0.0;
    for i in 0..m {
        let row = net.k0.row(i);
        let t = s.tmp[i];
        for (c, &e) in probe.iter().enumerate() {
            quad += t * row[c] * e;
        }
    }
    // Quadratic part: e' E'(A'A)E e = ||A E e||^2.
    let mut a_quad = 0.0;
    for rrow in 0..params.a.rows() {
        let dot: f64 = params.a.row(rrow)[..d]
            .iter()
            .zip(probe)
            .map(|(&a, &e)| a * e)
            .sum();
        a_quad += dot * dot;
    }
    quad + a_quad
}

/// Single-point gradient: returns the full `(d+1)`-gradient and the workspace.
pub fn potential_gradient(params: &ModelParams, s: &[f64]) -> Result<(Vec<f64>, TraceWorkspace)> {
    let col = Mat::from_vec(s.len(), 1, s.to_vec());
    let (grad, ws) = potential_gradient_batch(params, &col)?;
    Ok((grad.as_slice().to_vec(), ws))
}

/// Single-point exact spatial Hessian trace.
pub fn exact_trace(params: &ModelParams, ws: &TraceWorkspace) -> f64 {
    exact_trace_batch(params, ws)[0]
}

/// Single-point Hutchinson estimate.
pub fn hutchinson_trace(
    params: &ModelParams,
    ws: &TraceWorkspace,
    probes: usize,
    dist: ProbeDist,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(hutchinson_trace_batch(params, ws, probes, dist, rng)?[0])
}

/// `x += v` column-broadcast: adds the `m x 1` vector to every column.
pub(crate) fn add_col(x: &mut Mat, v: &Mat) {
    assert_eq!(v.cols(), 1);
    assert_eq!(x.rows(), v.rows());
    let n = x.cols();
    for r in 0..x.rows() {
        let val = v.at(r, 0);
        let row = x.row_mut(r);
        for c in 0..n {
            row[c] += val;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn activation_values_at_zero_and_asymptote() {
        assert!((sigma(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigma_prime(0.0), 0.0);
        assert_eq!(sigma_double_prime(0.0), 1.0);
        // |x| asymptote without overflow, including far beyond exp's range.
        assert_eq!(sigma(1000.0), 1000.0);
        assert_eq!(sigma(-1000.0), 1000.0);
        assert!(sigma(1e308).is_finite());
    }

    #[test]
    fn activation_derivative_matches_finite_difference() {
        let x = 0.7;
        let h = 1e-5;
        let fd = (sigma(x + h) - sigma(x - h)) / (2.0 * h);
        assert!((fd - sigma_prime(x)).abs() < 1e-8);
        let fd2 = (sigma_prime(x + h) - sigma_prime(x - h)) / (2.0 * h);
        assert!((fd2 - sigma_double_prime(x)).abs() < 1e-8);
    }

    #[test]
    fn constant_potential() {
        let mut p = ModelParams::zeros(2, 4, 1, 2);
        p.c = 5.0;
        let v = potential_forward(&p, &[0.3, -1.2, 0.5]).unwrap();
        assert_eq!(v, 5.0);
    }

    #[test]
    fn linear_potential_value_and_gradient() {
        let mut p = ModelParams::zeros(1, 4, 1, 1);
        p.b = Mat::col_vec(&[3.0, 0.5]);
        let v = potential_forward(&p, &[2.0, 1.0]).unwrap();
        assert!((v - 6.5).abs() < 1e-15);
        let (g, ws) = potential_gradient(&p, &[7.0, -2.0]).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
        // Linear potential has zero Hessian.
        assert_eq!(exact_trace(&p, &ws), 0.0);
    }

    #[test]
    fn quadratic_potential_gradient_and_trace() {
        // d=1, A=(1,0): Phi = x^2/2, grad = (x, 0), spatial trace 1.
        let mut p = ModelParams::zeros(1, 4, 1, 1);
        p.a = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        let (g, ws) = potential_gradient(&p, &[1.7, 0.4]).unwrap();
        assert!((g[0] - 1.7).abs() < 1e-14);
        assert!(g[1].abs() < 1e-14);
        assert!((exact_trace(&p, &ws) - 1.0).abs() < 1e-14);
    }

    /// Independent re-evaluation of the potential, written directly from the
    /// layer formulas with plain loops; used as an oracle for the main path.
    fn potential_reference(p: &ModelParams, s: &[f64]) -> f64 {
        let m = p.width();
        let mut u = vec![0.0; m];
        for i in 0..m {
            let mut acc = p.resnet.b0.at(i, 0);
            for (c, &x) in s.iter().enumerate() {
                acc += p.resnet.k0.at(i, c) * x;
            }
            u[i] = sigma(acc);
        }
        for layer in &p.resnet.hidden {
            let mut next = u.clone();
            for i in 0..m {
                let mut acc = layer.b.at(i, 0);
                for (c, uv) in u.iter().enumerate() {
                    acc += layer.k.at(i, c) * uv;
                }
                next[i] += p.resnet.h * sigma(acc);
            }
            u = next;
        }
        let mut val = p.c;
        for i in 0..m {
            val += p.w.at(i, 0) * u[i];
        }
        for (c, &x) in s.iter().enumerate() {
            val += p.b.at(c, 0) * x;
        }
        let mut quad = 0.0;
        for r in 0..p.a.rows() {
            let mut dot = 0.0;
            for (c, &x) in s.iter().enumerate() {
                dot += p.a.at(r, c) * x;
            }
            quad += dot * dot;
        }
        val + 0.5 * quad
    }

    #[test]
    fn forward_matches_independent_reference() {
        let mut r = rng(11);
        for _ in 0..10 {
            let p = random_scaled(2, 16, 2, &mut r);
            let s: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let a = potential_forward(&p, &s).unwrap();
            let b = potential_reference(&p, &s);
            let denom = a.abs().max(1.0);
            assert!(
                (a - b).abs() / denom < 1e-12,
                "forward {a} deviates from reference {b}"
            );
        }
    }

    fn random_scaled(d: usize, m: usize, layers: usize, rng: &mut ChaCha8Rng) -> ModelParams {
        ModelParams::random_unit(d, m, layers, None, rng)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(7);
        for &(d, m, layers) in &[(1usize, 8usize, 1usize), (2, 16, 2), (8, 16, 2)] {
            for _ in 0..4 {
                let p = random_scaled(d, m, layers, &mut r);
                let s: Vec<f64> = (0..d + 1).map(|_| r.random_range(-1.5..1.5)).collect();
                let (g, _) = potential_gradient(&p, &s).unwrap();
                let h = 1e-5;
                for k in 0..=d {
                    let mut sp = s.clone();
                    let mut sm = s.clone();
                    sp[k] += h;
                    sm[k] -= h;
                    let fd = (potential_forward(&p, &sp).unwrap()
                        - potential_forward(&p, &sm).unwrap())
                        / (2.0 * h);
                    let denom = fd.abs().max(1e-3);
                    assert!(
                        (g[k] - fd).abs() / denom < 1e-6,
                        "component {k}: analytic {} vs fd {fd}",
                        g[k]
                    );
                }
            }
        }
    }

    /// Brute-force spatial Hessian trace from finite-difference columns of the
    /// analytic gradient.
    pub(crate) fn fd_hessian_trace(p: &ModelParams, s: &[f64]) -> f64 {
        let d = p.d;
        let h = 1e-5;
        let mut tr = 0.0;
        for k in 0..d {
            let mut sp = s.to_vec();
            let mut sm = s.to_vec();
            sp[k] += h;
            sm[k] -= h;
            let (gp, _) = potential_gradient(p, &sp).unwrap();
            let (gm, _) = potential_gradient(p, &sm).unwrap();
            tr += (gp[k] - gm[k]) / (2.0 * h);
        }
        tr
    }

    #[test]
    fn exact_trace_matches_brute_force() {
        let mut r = rng(3);
        for &(d, m, layers) in &[(2usize, 16usize, 1usize), (2, 16, 3), (8, 16, 2)] {
            for _ in 0..3 {
                let p = random_scaled(d, m, layers, &mut r);
                let s: Vec<f64> = (0..d + 1).map(|_| r.random_range(-1.5..1.5)).collect();
                let (_, ws) = potential_gradient(&p, &s).unwrap();
                let exact = exact_trace(&p, &ws);
                let brute = fd_hessian_trace(&p, &s);
                let denom = brute.abs().max(1e-6);
                assert!(
                    (exact - brute).abs() / denom < 1e-6,
                    "d={d} m={m} M={layers}: exact {exact} vs brute {brute}"
                );
            }
        }
    }

    #[test]
    fn quadratic_form_matches_brute_force_hessian() {
        let mut r = rng(5);
        let d = 3;
        let p = random_scaled(d, 12, 2, &mut r);
        let s: Vec<f64> = (0..d + 1).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, ws) = potential_gradient(&p, &s).unwrap();
        let probe: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        // e'He by finite differences of the gradient along e.
        let h = 1e-5;
        let mut sp = s.clone();
        let mut sm = s.clone();
        for k in 0..d {
            sp[k] += h * probe[k];
            sm[k] -= h * probe[k];
        }
        let (gp, _) = potential_gradient(&p, &sp).unwrap();
        let (gm, _) = potential_gradient(&p, &sm).unwrap();
        let fd: f64 = (0..d).map(|k| probe[k] * (gp[k] - gm[k]) / (2.0 * h)).sum();
        let qf = quadratic_form(&p, &ws, 0, &probe);
        assert!(
            (qf - fd).abs() / fd.abs().max(1e-6) < 1e-5,
            "quadratic form {qf} vs fd {fd}"
        );
    }

    #[test]
    fn probe_sign_symmetry() {
        let mut r = rng(9);
        let d = 4;
        let p = random_scaled(d, 12, 2, &mut r);
        let s: Vec<f64> = (0..d + 1).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, ws) = potential_gradient(&p, &s).unwrap();
        let probe: Vec<f64> = (0..d).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let neg: Vec<f64> = probe.iter().map(|v| -v).collect();
        assert_eq!(
            quadratic_form(&p, &ws, 0, &probe),
            quadratic_form(&p, &ws, 0, &neg)
        );
    }

    #[test]
    fn hutchinson_zero_hessian_is_exactly_zero() {
        let mut p = ModelParams::zeros(3, 8, 1, 2);
        p.b = Mat::col_vec(&[1.0, -2.0, 0.3, 0.0]);
        let (_, ws) = potential_gradient(&p, &[0.1, 0.2, 0.3, 0.5]).unwrap();
        let mut r = rng(1);
        let est = hutchinson_trace(&p, &ws, 8, ProbeDist::Rademacher, &mut r).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn hutchinson_rejects_zero_probes() {
        let p = ModelParams::zeros(2, 4, 1, 2);
        let (_, ws) = potential_gradient(&p, &[0.0, 0.0, 0.0]).unwrap();
        let mut r = rng(2);
        assert!(matches!(
            hutchinson_trace(&p, &ws, 0, ProbeDist::Rademacher, &mut r),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn hutchinson_mean_approaches_exact_trace() {
        let mut r = rng(21);
        let d = 8;
        let p = random_scaled(d, 16, 2, &mut r);
        let s: Vec<f64> = (0..d + 1).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, ws) = potential_gradient(&p, &s).unwrap();
        let exact = exact_trace(&p, &ws);
        let est = hutchinson_trace(&p, &ws, 10_000, ProbeDist::Rademacher, &mut r).unwrap();
        assert!(
            (est - exact).abs() / exact.abs().max(1e-9) < 0.02,
            "estimate {est} too far from exact {exact}"
        );
    }

    #[test]
    fn flatten_round_trip() {
        let mut r = rng(13);
        let p = ModelParams::random(3, 8, 2, None, &mut r);
        let flat = p.flatten();
        let q = p.unflatten_like(&flat);
        assert_eq!(p.flatten(), q.flatten());
        assert_eq!(flat.len(), p.num_params());
    }

    #[test]
    fn validate_catches_dimension_mismatch() {
        let mut p = ModelParams::zeros(2, 4, 1, 2);
        p.w = Mat::zeros(3, 1);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let bad = potential_forward(&ModelParams::zeros(2, 4, 1, 2), &[0.0, 0.0]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }
}
