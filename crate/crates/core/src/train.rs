//! Loss, optimizer, learning-rate schedule and the training loop.

use crate::data::{NormStats, Trajectory};
use crate::model::{Frozen, Model};
use crate::rollout::{predict_steps, RolloutError};
use crate::tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prediction and truth differ: {0}")]
    Shape(String),
    #[error("truth has zero norm")]
    ZeroTruth,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("loss diverged at epoch {epoch}, trajectory {trajectory}")]
    Divergence { epoch: usize, trajectory: usize },
    #[error("trajectory {index} has {len} steps; window {k} plus horizon {n} needs {}", k + n)]
    TooShort { index: usize, len: usize, k: usize, n: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `100 · ‖pred − truth‖² / ‖truth‖²` over a whole sequence.
pub fn relative_mse(pred: &[Tensor<f64>], truth: &[Tensor<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(TrainError::Shape(format!("{} vs {} fields", pred.len(), truth.len())));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(TrainError::Shape(format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        num += p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        den += t.sum_squares();
    }
    if den == 0.0 {
        return Err(TrainError::ZeroTruth);
    }
    Ok(100.0 * num / den)
}

/// Differentiable `‖pred − truth‖² / ‖truth‖²` (a fraction, not percent).
pub fn relative_mse_loss<'t, T: Real>(tape: &'t Tape<T>, pred: &[Var<'t, T>], truth: &[Tensor<T>]) -> Result<Var<'t, T>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TrainError::Shape(format!("{} vs {} fields", pred.len(), truth.len())));
    }
    let den: f64 = truth.iter().map(|t| t.sum_squares().f64()).sum();
    if den == 0.0 {
        return Err(TrainError::ZeroTruth);
    }
    let mut total: Option<Var<'t, T>> = None;
    for (p, t) in pred.iter().zip(truth) {
        let e = p.sub(tape.constant(t.clone()))?.sum_squares()?;
        total = Some(match total {
            Some(acc) => acc.add(e)?,
            None => e,
        });
    }
    Ok(total.expect("non-empty").scale(T::of(1.0 / den))?)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`; parameters
    /// without a gradient see a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGrad(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / c1);
        let sqrt_c2 = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let value = std::sync::Arc::make_mut(&mut p.value);
            let grad = p.grad.as_ref();
            for i in 0..value.len() {
                let g = grad.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + one_b1 * g;
                let vi = b2 * v.data()[i] + one_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                value.data_mut()[i] -= step_size * mi / (vi.sqrt() / sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Trajectories per optimizer step.
    pub batch: usize,
    /// Roll-out horizon `n`.
    pub horizon: usize,
    /// Window length `k`.
    pub window: usize,
    pub seed: u64,
    /// Refill the window with ground truth instead of predictions.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.6,
            decay_every: 5,
            epochs: 100,
            batch: 1,
            horizon: 20,
            window: 10,
            seed: 0,
            teacher_forcing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch == 0 || self.horizon == 0 || self.window < 2 || self.decay_every == 0 {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `lr₀ · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rel_mse_pct: f64,
    pub val_rel_mse_pct: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| TrainError::Io(std::io::Error::other(e.to_string()));
        wtr.write_record(["epoch", "train_rel_mse_pct", "val_rel_mse_pct", "lr"]).map_err(err)?;
        for r in &self.epochs {
            wtr.write_record([
                r.epoch.to_string(),
                r.train_rel_mse_pct.to_string(),
                r.val_rel_mse_pct.to_string(),
                r.lr.to_string(),
            ])
            .map_err(err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_lengths(trajs: &[&Trajectory], k: usize, n: usize) -> Result<()> {
    for (index, t) in trajs.iter().enumerate() {
        if t.len() < k + n {
            return Err(TrainError::TooShort { index, len: t.len(), k, n });
        }
    }
    Ok(())
}

fn cast_all<T: Real>(fields: &[Tensor<f64>]) -> Vec<Tensor<T>> {
    fields.iter().map(Tensor::cast).collect()
}

/// Roll-out loss of one trajectory with gradients accumulated into `store`.
pub fn trajectory_step<T: Real>(model: &Model<T>, store: &mut ParamStore<T>, traj: &Trajectory, cfg: &TrainConfig) -> Result<f64> {
    let (k, n) = (cfg.window, cfg.horizon);
    let init = cast_all::<T>(&traj.fields[..k]);
    let truth = cast_all::<T>(&traj.fields[k..k + n]);
    let tape = Tape::new();
    let preds = model.rollout(&tape, store, &init, n, cfg.teacher_forcing.then_some(&truth[..]))?;
    let loss = relative_mse_loss(&tape, &preds, &truth)?;
    let value = loss.item().f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    grads.accumulate_into(store);
    Ok(value)
}

/// Sliding-window predictions `û_k … û_{k+n−1}` for one trajectory.
pub fn predict_trajectory<T: Real>(frozen: &Frozen<'_, T>, traj: &Trajectory, k: usize, n: usize) -> Result<Vec<Tensor<f64>>> {
    Ok(predict_steps(frozen, &traj.fields[..k], n)?)
}

/// Mean over trajectories of the per-trajectory relative MSE in percent.
/// With `stats`, both sides are mapped back to physical units first.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    store: &ParamStore<T>,
    trajs: &[&Trajectory],
    k: usize,
    n: usize,
    stats: Option<&NormStats>,
) -> Result<f64> {
    if trajs.is_empty() {
        return Ok(f64::NAN);
    }
    check_lengths(trajs, k, n)?;
    let frozen = Frozen::new(model, store)?;
    let errs = trajs
        .par_iter()
        .map(|t| {
            let pred = predict_trajectory(&frozen, t, k, n)?;
            let truth = &t.fields[k..k + n];
            match stats {
                Some(s) => {
                    let p: Vec<_> = pred.iter().map(|f| s.denormalize_field(f)).collect();
                    let q: Vec<_> = truth.iter().map(|f| s.denormalize_field(f)).collect();
                    relative_mse(&p, &q)
                }
                None => relative_mse(&pred, truth),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Algorithm-1 training loop on normalized trajectories. Each optimizer
/// step rolls `batch` trajectories out over the full horizon and
/// backpropagates through every prediction. `on_epoch` sees each record as
/// it is produced.
pub fn fit<T: Real>(
    model: &Model<T>,
    store: &mut ParamStore<T>,
    train: &[&Trajectory],
    val: &[&Trajectory],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if cfg.window != model.window() {
        return Err(TrainError::Config(format!(
            "training window {} differs from the model window {}",
            cfg.window,
            model.window()
        )));
    }
    if train.is_empty() {
        return Err(TrainError::Config("no training trajectories".into()));
    }
    check_lengths(train, cfg.window, cfg.horizon)?;
    check_lengths(val, cfg.window, cfg.horizon)?;
    let mut adam = Adam::new(store);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            store.zero_grad();
            for &i in chunk {
                let loss = trajectory_step(model, store, train[i], cfg)?;
                if !loss.is_finite() {
                    return Err(TrainError::Divergence { epoch, trajectory: i });
                }
                total += loss;
            }
            if chunk.len() > 1 {
                let scale = T::of(1.0 / chunk.len() as f64);
                for p in store.params_mut() {
                    if let Some(g) = &mut p.grad {
                        *g = g.scale(scale);
                    }
                }
            }
            adam.update(store, lr)?;
        }
        let record = EpochRecord {
            epoch,
            train_rel_mse_pct: 100.0 * total / train.len() as f64,
            val_rel_mse_pct: if val.is_empty() {
                f64::NAN
            } else {
                evaluate(model, store, val, cfg.window, cfg.horizon, None)?
            },
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    store.zero_grad();
    Ok(history)
}

#[cfg(test)]
mod tests;
