//! Reconstruction-ICA cost, its analytic gradient, the unit-norm row
//! constraint, and a projected gradient step with momentum.
//!
//! For a minibatch `X` of rows `x_i`, filters `W` (k x n), scaling `alpha`,
//! and reconstruction offset `b`, the cost is
//!
//! ```text
//! sum_i || W^T (alpha W x_i) + b - x_i ||^2
//!   + lambda * sum_i sum_j sqrt((alpha W_j . x_i)^2 + eps)
//! ```
//!
//! subject to every row of `W` having unit Euclidean norm. The `eps` term
//! smooths the absolute value so the cost is differentiable at zero
//! activation; `eps = 0` recovers the exact unsmoothed cost. The sparsity
//! penalty needs no second pass over the data: one sweep produces the cost
//! and all three gradients together.
//!
//! The constraint is enforced by projection (row renormalization) after
//! every parameter update, never inside the objective itself, so the
//! objective stays evaluable at arbitrary points for finite-difference
//! verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matvec, matvec_t, Tensor};

/// Parameter bundle for one RICA problem: one receptive field or one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RicaParams {
    /// Filter matrix, k filters over n-dimensional input; rows unit-norm
    /// after any public update.
    pub w: Tensor,
    /// Trainable activation scaling, one scalar per parameter bundle.
    pub alpha: f64,
    /// Reconstruction offset; enters the decoder path only.
    pub b: Tensor,
    /// Sparsity weight.
    pub lambda: f64,
    /// Smoothing constant inside the sparsity sqrt; zero reproduces the
    /// exact unsmoothed cost.
    pub eps_sparsity: f64,
}

impl RicaParams {
    /// Construct and project rows to unit norm.
    pub fn new(w: Tensor, alpha: f64, b: Tensor, lambda: f64, eps_sparsity: f64) -> Result<Self> {
        let mut p = Self::from_raw_parts(w, alpha, b, lambda, eps_sparsity)?;
        p.w = project_row_norms(&p.w)?;
        Ok(p)
    }

    /// Construct without projecting rows.
    ///
    /// Used where the objective must be evaluated at arbitrary points, such
    /// as finite-difference probes that step off the constraint manifold.
    pub fn from_raw_parts(
        w: Tensor,
        alpha: f64,
        b: Tensor,
        lambda: f64,
        eps_sparsity: f64,
    ) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape {
                context: "rica weights must be rank 2".into(),
                left: w.shape().to_vec(),
                right: vec![],
            });
        }
        if b.shape() != [w.cols()] {
            return Err(Error::Shape {
                context: "rica offset length must match input dimension".into(),
                left: b.shape().to_vec(),
                right: vec![w.cols()],
            });
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        if !(eps_sparsity >= 0.0 && eps_sparsity.is_finite()) {
            return Err(Error::Config(format!(
                "eps_sparsity must be non-negative, got {eps_sparsity}"
            )));
        }
        Ok(Self {
            w,
            alpha,
            b,
            lambda,
            eps_sparsity,
        })
    }

    /// Random initialization: rows drawn standard normal then renormalized,
    /// `alpha = 1`, `b = 0`.
    pub fn init(
        k: usize,
        n: usize,
        lambda: f64,
        eps_sparsity: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut data = vec![0.0; k * n];
        for v in &mut data {
            *v = standard_normal(rng);
        }
        let w = Tensor::new(vec![k, n], data)?;
        Self::new(w, 1.0, Tensor::zeros(vec![n]), lambda, eps_sparsity)
    }

    /// Number of filters.
    pub fn k(&self) -> usize {
        self.w.rows()
    }

    /// Input dimension.
    pub fn n(&self) -> usize {
        self.w.cols()
    }

    /// Flatten (W, alpha, b) into one vector, W row-major first, then alpha,
    /// then b. The layout contract for finite-difference probes and
    /// checkpoint serialization.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.w.len() + 1 + self.b.len());
        data.extend_from_slice(self.w.data());
        data.push(self.alpha);
        data.extend_from_slice(self.b.data());
        Tensor::new(vec![data.len()], data).expect("finite params flatten cleanly")
    }

    /// Rebuild a bundle from [`flatten`](Self::flatten) layout without
    /// projection; lambda and eps are carried alongside, not in the vector.
    pub fn from_flat(
        flat: &[f64],
        k: usize,
        n: usize,
        lambda: f64,
        eps_sparsity: f64,
    ) -> Result<Self> {
        if flat.len() != k * n + 1 + n {
            return Err(Error::Shape {
                context: "flat parameter vector length".into(),
                left: vec![flat.len()],
                right: vec![k * n + 1 + n],
            });
        }
        let w = Tensor::new(vec![k, n], flat[..k * n].to_vec())?;
        let alpha = flat[k * n];
        let b = Tensor::new(vec![n], flat[k * n + 1..].to_vec())?;
        Self::from_raw_parts(w, alpha, b, lambda, eps_sparsity)
    }
}

/// Gradient of the RICA cost with respect to (W, alpha, b).
#[derive(Debug, Clone)]
pub struct RicaGradient {
    pub w: Tensor,
    pub alpha: f64,
    pub b: Tensor,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws; avoids pulling in rand_distr for one
    // distribution.
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn check_batch(p: &RicaParams, batch: &Tensor) -> Result<()> {
    if batch.shape().len() != 2 || batch.cols() != p.n() {
        return Err(Error::Shape {
            context: "minibatch columns must match rica input dimension".into(),
            left: batch.shape().to_vec(),
            right: vec![p.k(), p.n()],
        });
    }
    if batch.rows() == 0 {
        return Err(Error::Data("empty minibatch".into()));
    }
    Ok(())
}

/// RICA cost over a minibatch, rows of `batch` as data points.
pub fn rica_objective(p: &RicaParams, batch: &Tensor) -> Result<f64> {
    check_batch(p, batch)?;
    let mut total = 0.0;
    for i in 0..batch.rows() {
        let x = batch.row(i);
        let z = matvec(&p.w, x)?;
        let mut row_cost = 0.0;
        // Reconstruction residual: W^T (alpha z) + b - x.
        let h: Vec<f64> = z.iter().map(|&v| p.alpha * v).collect();
        let recon = matvec_t(&p.w, &h)?;
        for l in 0..p.n() {
            let r = recon[l] + p.b.data()[l] - x[l];
            row_cost += r * r;
        }
        // Smoothed L1 on the activations.
        let mut sparsity = 0.0;
        for &hj in &h {
            sparsity += (hj * hj + p.eps_sparsity).sqrt();
        }
        row_cost += p.lambda * sparsity;
        if !row_cost.is_finite() {
            return Err(Error::Numeric {
                context: "non-finite rica objective".into(),
                index: i,
            });
        }
        total += row_cost;
    }
    Ok(total)
}

/// Cost and all three gradients in a single sweep over the minibatch.
///
/// Per data point, with `z = W x`, `h = alpha z`, residual
/// `r = W^T h + b - x`, and `s_j = h_j / sqrt(h_j^2 + eps)`:
///
/// ```text
/// dW     += 2 alpha (z r^T + (W r) x^T) + lambda alpha s x^T
/// dalpha += 2 (W r) . z + lambda (z . s)
/// db     += 2 r
/// ```
pub fn rica_objective_and_gradient(p: &RicaParams, batch: &Tensor) -> Result<(f64, RicaGradient)> {
    check_batch(p, batch)?;
    let (k, n) = (p.k(), p.n());
    let mut dw = vec![0.0; k * n];
    let mut dalpha = 0.0;
    let mut db = vec![0.0; n];
    let mut total = 0.0;

    for i in 0..batch.rows() {
        let x = batch.row(i);
        let z = matvec(&p.w, x)?;
        let h: Vec<f64> = z.iter().map(|&v| p.alpha * v).collect();
        let recon = matvec_t(&p.w, &h)?;
        let mut r = vec![0.0; n];
        let mut row_cost = 0.0;
        for l in 0..n {
            r[l] = recon[l] + p.b.data()[l] - x[l];
            row_cost += r[l] * r[l];
        }
        let wr = matvec(&p.w, &r)?;
        let mut s = vec![0.0; k];
        let mut sparsity = 0.0;
        for j in 0..k {
            let root = (h[j] * h[j] + p.eps_sparsity).sqrt();
            sparsity += root;
            s[j] = if root > 0.0 { h[j] / root } else { 0.0 };
        }
        row_cost += p.lambda * sparsity;
        if !row_cost.is_finite() {
            return Err(Error::Numeric {
                context: "non-finite rica objective".into(),
                index: i,
            });
        }
        total += row_cost;

        for j in 0..k {
            let coeff_z = 2.0 * p.alpha * z[j];
            let coeff_wr = 2.0 * p.alpha * wr[j];
            let coeff_s = p.lambda * p.alpha * s[j];
            let row = &mut dw[j * n..(j + 1) * n];
            for l in 0..n {
                row[l] += coeff_z * r[l] + (coeff_wr + coeff_s) * x[l];
            }
            dalpha += 2.0 * wr[j] * z[j] + p.lambda * z[j] * s[j];
        }
        for l in 0..n {
            db[l] += 2.0 * r[l];
        }
    }

    let grad = RicaGradient {
        w: Tensor::new(vec![k, n], dw)?,
        alpha: dalpha,
        b: Tensor::new(vec![n], db)?,
    };
    Ok((total, grad))
}

/// Gradient of [`rica_objective`] with respect to (W, alpha, b).
pub fn rica_gradient(p: &RicaParams, batch: &Tensor) -> Result<RicaGradient> {
    rica_objective_and_gradient(p, batch).map(|(_, g)| g)
}

/// Norm floor below which a row is considered degenerate rather than
/// projectable.
pub const DEGENERATE_ROW_NORM: f64 = 1e-30;

/// Divide every row of a k x n matrix by its Euclidean norm.
///
/// Rows already at unit norm pass through unchanged up to 1 ulp. A row with
/// norm below [`DEGENERATE_ROW_NORM`] is an error carrying the row index;
/// this function never invents replacement data.
pub fn project_row_norms(w: &Tensor) -> Result<Tensor> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = w.data().to_vec();
    for j in 0..k {
        let row = &mut out[j * n..(j + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm < DEGENERATE_ROW_NORM {
            return Err(Error::DegenerateRow { row: j, norm });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(vec![k, n], out)
}

/// A row re-randomization performed when an update collapsed a filter row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RerandomizedRow {
    pub step: u64,
    pub row: usize,
}

/// Momentum buffers and bookkeeping for projected gradient descent on one
/// [`RicaParams`] bundle.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub vel_w: Tensor,
    pub vel_alpha: f64,
    pub vel_b: Tensor,
    pub step_count: u64,
    rng: ChaCha8Rng,
    /// Step log of degenerate rows that had to be re-drawn.
    pub rerandomized: Vec<RerandomizedRow>,
}

impl OptimizerState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        k: usize,
        n: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if learning_rate.is_nan() || learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            vel_w: Tensor::zeros(vec![k, n]),
            vel_alpha: 0.0,
            vel_b: Tensor::zeros(vec![n]),
            step_count: 0,
            rng,
            rerandomized: Vec::new(),
        })
    }

    pub fn seeded(
        learning_rate: f64,
        momentum: f64,
        k: usize,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            learning_rate,
            momentum,
            k,
            n,
            ChaCha8Rng::seed_from_u64(seed),
        )
    }
}

/// Lower clamp on alpha after an update.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// One projected gradient step with momentum on `params`.
///
/// Velocity update `v <- momentum v - lr g`, parameter update `p <- p + v`,
/// then row renormalization of W and the alpha floor clamp. Returns the
/// objective evaluated at the pre-step parameters (the same sweep that
/// produced the gradient). A row that degenerates after the update is
/// re-drawn from the optimizer's own RNG stream and renormalized, and the
/// event is appended to `state.rerandomized`.
pub fn sgd_step(
    params: &mut RicaParams,
    state: &mut OptimizerState,
    batch: &Tensor,
) -> Result<f64> {
    if state.vel_w.shape() != params.w.shape() || state.vel_b.shape() != params.b.shape() {
        return Err(Error::Shape {
            context: "optimizer velocity shape must match parameters".into(),
            left: state.vel_w.shape().to_vec(),
            right: params.w.shape().to_vec(),
        });
    }
    let (objective, grad) = rica_objective_and_gradient(params, batch)?;
    apply_update(params, state, &grad)?;
    Ok(objective)
}

/// Velocity/parameter/projection part of [`sgd_step`], separated so the
/// update arithmetic is testable with a hand-built gradient.
pub(crate) fn apply_update(
    params: &mut RicaParams,
    state: &mut OptimizerState,
    grad: &RicaGradient,
) -> Result<()> {
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (v, g) in state.vel_w.data_mut().iter_mut().zip(grad.w.data()) {
        *v = mu * *v - lr * g;
    }
    state.vel_alpha = mu * state.vel_alpha - lr * grad.alpha;
    for (v, g) in state.vel_b.data_mut().iter_mut().zip(grad.b.data()) {
        *v = mu * *v - lr * g;
    }

    for (p, v) in params.w.data_mut().iter_mut().zip(state.vel_w.data()) {
        *p += v;
    }
    params.alpha = (params.alpha + state.vel_alpha).max(ALPHA_FLOOR);
    for (p, v) in params.b.data_mut().iter_mut().zip(state.vel_b.data()) {
        *p += v;
    }

    let (k, n) = (params.k(), params.n());
    let step = state.step_count + 1;
    for j in 0..k {
        let norm = params.w.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm < DEGENERATE_ROW_NORM {
            loop {
                let row = &mut params.w.data_mut()[j * n..(j + 1) * n];
                for v in row.iter_mut() {
                    *v = standard_normal(&mut state.rng);
                }
                let redrawn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if redrawn >= DEGENERATE_ROW_NORM {
                    break;
                }
            }
            state.rerandomized.push(RerandomizedRow { step, row: j });
        }
    }
    params.w = project_row_norms(&params.w)?;
    state.step_count = step;
    Ok(())
}
