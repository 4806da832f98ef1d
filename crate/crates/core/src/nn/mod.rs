//! Small reverse-mode neural network engine: tensors, a differentiation tape,
//! the layer kinds the three fixed architectures need, Adam, and model files.

mod model;
mod network;
mod optim;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use model::{input_gradient, Architecture, EpochRecord, Predictions, TrainedModel, MODEL_FORMAT_VERSION};
pub use network::{ForwardPass, LayerSpec, Mode, Network, Padding, Shape, BN_EPS, BN_MOMENTUM};
pub(crate) use optim::gather_rows;
pub use optim::{fit, train_step, Adam, AdamConfig, TrainConfig};
pub use tape::{ConvGeometry, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Floating point element type of the engine (f32 for training, f64 for checks).
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Scaled softmax `exp(z_i/T) / Σ_j exp(z_j/T)`, max-subtracted.
pub fn softmax_slice(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−Σ p·ln q` with `q` clamped at 1e-12.
pub fn cross_entropy(p_target: &[f64], q_pred: &[f64]) -> Result<f64> {
    if p_target.len() != q_pred.len() {
        return Err(Error::shape("cross entropy", &[p_target.len()], &[q_pred.len()]));
    }
    Ok(-p_target
        .iter()
        .zip(q_pred)
        .map(|(&p, &q)| p * q.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Mean squared element difference.
pub fn l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l2", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}
