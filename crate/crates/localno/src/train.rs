//! Losses, the Adam optimizer, gradient verification, and the training loop.
//!
//! Training minimizes the quadrature-weighted squared L2 loss; reporting uses
//! the relative L2 error. Everything is deterministic for a fixed seed: one
//! ChaCha stream drives the shuffle and all reductions run in fixed order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{
    model_backward, model_forward_cached, params_to_vec, vec_to_params, GridBinding,
    LocalNOModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SquaredL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative step decay applied every `decay_interval` epochs.
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::InvalidArgument(
                "learning rate, batch size and decay interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in epoch `e`: `rate * factor^(e / interval)`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_interval: 10,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            loss: LossKind::SquaredL2,
        }
    }
}

/// Quadrature-weighted relative L2 error, averaged over the batch.
pub fn relative_l2(pred: &Field, target: &Field) -> Result<f64> {
    if !pred.same_layout(target) {
        return Err(Error::ShapeMismatch("prediction/target layout mismatch".into()));
    }
    let q = &target.grid.quad_weights;
    let mut total = 0.0;
    for b in 0..pred.batch {
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for c in 0..pred.channels {
            let p = pred.channel(b, c);
            let t = target.channel(b, c);
            for j in 0..q.len() {
                let d = p[j] - t[j];
                err2 += q[j] * d * d;
                norm2 += q[j] * t[j] * t[j];
            }
        }
        if norm2 == 0.0 {
            return Err(Error::DegenerateTarget);
        }
        total += (err2 / norm2).sqrt();
    }
    Ok(total / pred.batch as f64)
}

/// Quadrature-weighted squared L2 loss averaged over the batch, and its
/// gradient with respect to the prediction.
pub fn squared_l2_loss(pred: &Field, target: &Field) -> Result<(f64, Field)> {
    if !pred.same_layout(target) {
        return Err(Error::ShapeMismatch("prediction/target layout mismatch".into()));
    }
    let q = &target.grid.quad_weights;
    let inv_batch = 1.0 / pred.batch as f64;
    let mut loss = 0.0;
    let mut grad = Field::zeros(pred.grid.clone(), pred.batch, pred.channels);
    for b in 0..pred.batch {
        for c in 0..pred.channels {
            let p = pred.channel(b, c);
            let t = target.channel(b, c);
            let g = grad.channel_mut(b, c);
            for j in 0..q.len() {
                let d = p[j] - t[j];
                loss += q[j] * d * d * inv_batch;
                g[j] = 2.0 * q[j] * d * inv_batch;
            }
        }
    }
    Ok((loss, grad))
}

/// First and second moment buffers of Adam, bias-corrected.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("optimizer buffers disagree".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Central finite differences (step 1e-5) against an analytic gradient.
pub fn grad_check(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> GradCheckReport {
    let step = 1e-5;
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        xs[i] = x[i] + step;
        let fp = f(&xs);
        xs[i] = x[i] - step;
        let fm = f(&xs);
        xs[i] = x[i];
        let fd = (fp - fm) / (2.0 * step);
        let rel = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err <= tolerance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rel_l2: f64,
}

fn gather_batch(x: &Field, idx: &[usize]) -> Field {
    let m = x.grid.len();
    let mut out = Field::zeros(x.grid.clone(), idx.len(), x.channels);
    for (bi, &src) in idx.iter().enumerate() {
        let from = src * x.channels * m;
        let to = bi * x.channels * m;
        out.data[to..to + x.channels * m].copy_from_slice(&x.data[from..from + x.channels * m]);
    }
    out
}

/// Validation relative L2 computed in batches of `chunk`.
pub fn evaluate(
    model: &LocalNOModel,
    binding: &GridBinding,
    inputs: &Field,
    targets: &Field,
    chunk: usize,
) -> Result<f64> {
    let n = inputs.batch;
    let mut total = 0.0;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let bx = gather_batch(inputs, &idx);
        let by = gather_batch(targets, &idx);
        let cache = model_forward_cached(model, binding, &bx)?;
        total += relative_l2(&cache.output, &by)? * idx.len() as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Deterministic minibatch training: fixed shuffle from the config seed,
/// fixed-order accumulation, Adam updates, per-epoch metric records. On a
/// non-finite loss or gradient the model is restored to its last finite
/// state and a diverged error is returned.
pub fn train_loop(
    model: &mut LocalNOModel,
    binding: &GridBinding,
    train_x: &Field,
    train_y: &Field,
    val_x: &Field,
    val_y: &Field,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let n = train_x.batch;
    if n == 0 || train_y.batch != n {
        return Err(Error::InvalidArgument("empty or mismatched training set".into()));
    }
    let mut params = params_to_vec(model);
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        // Fisher-Yates from the seeded stream
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let bx = gather_batch(train_x, batch_idx);
            let by = gather_batch(train_y, batch_idx);
            let cache = model_forward_cached(model, binding, &bx)?;
            let (loss, grad_out) = squared_l2_loss(&cache.output, &by)?;
            if !loss.is_finite() {
                vec_to_params(model, &params)?;
                return Err(Error::Diverged(format!("loss {loss} in epoch {epoch}")));
            }
            epoch_loss += loss * batch_idx.len() as f64;
            let grads = model_backward(model, binding, &cache, &grad_out)?;
            let flat = params_to_vec(&grads);
            let backup = params.clone();
            if let Err(e) = adam_step(&mut params, &flat, &mut state, lr) {
                vec_to_params(model, &backup)?;
                return Err(e);
            }
            vec_to_params(model, &params)?;
        }
        epoch_loss /= n as f64;
        let val_rel_l2 = if val_x.batch > 0 {
            evaluate(model, binding, val_x, val_y, config.batch_size)?
        } else {
            f64::NAN
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss,
            val_rel_l2,
        });
    }
    Ok(history)
}
