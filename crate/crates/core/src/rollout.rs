//! Autoregressive prediction with a sliding window.

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("non-finite prediction at step {step}")]
    NonFinite { step: usize },
    #[error("window holds {got} fields, model expects {want}")]
    WindowLength { got: usize, want: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("model failed at step {step}: {source}")]
    Model { step: usize, source: TensorError },
}

/// A one-step predictor over a window of `window()` fields.
///
/// Each field is embedded once when it enters the window; `advance` sees
/// the embeddings of the whole window, oldest first.
pub trait StepModel {
    type State: Clone;

    fn window(&self) -> usize;

    fn embed(&self, field: &Tensor<f64>) -> Result<Self::State, TensorError>;

    fn advance(&self, window: &[Self::State]) -> Result<Tensor<f64>, TensorError>;
}

fn run<M: StepModel>(model: &M, mut states: Vec<M::State>, m: usize) -> Result<Vec<Tensor<f64>>, RolloutError> {
    let k = model.window();
    let mut out = Vec::with_capacity(m);
    for step in 1..=m {
        let next = model
            .advance(&states[states.len() - k..])
            .map_err(|source| RolloutError::Model { step, source })?;
        if !next.is_finite() {
            return Err(RolloutError::NonFinite { step });
        }
        if step < m {
            states.push(model.embed(&next).map_err(|source| RolloutError::Model { step, source })?);
        }
        out.push(next);
    }
    Ok(out)
}

/// `û_{k+1} … û_{k+m}` from `u_0 … u_{k-1}`: after each prediction the
/// oldest field leaves the window and the prediction enters it.
pub fn predict_steps<M: StepModel>(model: &M, window: &[Tensor<f64>], m: usize) -> Result<Vec<Tensor<f64>>, RolloutError> {
    if window.len() != model.window() {
        return Err(RolloutError::WindowLength {
            got: window.len(),
            want: model.window(),
        });
    }
    if m == 0 {
        return Err(RolloutError::EmptyHorizon);
    }
    let states = window
        .iter()
        .map(|f| model.embed(f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| RolloutError::Model { step: 0, source })?;
    run(model, states, m)
}

/// `û_1 … û_n` from `u_0` alone: the first window is `k` copies of `u_0`
/// and each prediction shifts in from the right.
pub fn progressive_predict<M: StepModel>(model: &M, u0: &Tensor<f64>, n: usize) -> Result<Vec<Tensor<f64>>, RolloutError> {
    if n == 0 {
        return Err(RolloutError::EmptyHorizon);
    }
    let first = model.embed(u0).map_err(|source| RolloutError::Model { step: 0, source })?;
    run(model, vec![first; model.window()], n)
}
