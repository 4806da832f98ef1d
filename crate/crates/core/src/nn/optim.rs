use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::EpochRecord;
use super::network::{Mode, Network};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{lit, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<Vec<T>>>,
    v: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Vec<Tensor<T>>]) -> Result<Self> {
        if config.lr.is_nan() || config.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be >= 0", config.lr)));
        }
        let zeros = || {
            params
                .iter()
                .map(|l| l.iter().map(|t| vec![T::zero(); t.len()]).collect())
                .collect()
        };
        Ok(Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut [Vec<Tensor<T>>], grads: &[Vec<Option<Tensor<T>>>]) {
        self.step += 1;
        let c = self.config;
        let b1 = lit::<T>(c.beta1);
        let b2 = lit::<T>(c.beta2);
        let one = T::one();
        let lr_t = lit::<T>(c.lr * (1.0 - c.beta2.powi(self.step)).sqrt() / (1.0 - c.beta1.powi(self.step)));
        let eps = lit::<T>(c.eps);
        for (li, layer) in params.iter_mut().enumerate() {
            for (pi, p) in layer.iter_mut().enumerate() {
                let Some(g) = &grads[li][pi] else { continue };
                let (m, v) = (&mut self.m[li][pi], &mut self.v[li][pi]);
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    *w -= lr_t * *mi / (vi.sqrt() + eps);
                }
            }
        }
    }
}

/// One optimization step: forward in train mode, loss, backward, running
/// batchnorm statistics, Adam update. Returns the loss.
pub fn train_step<T, F>(
    net: &mut Network<T>,
    opt: &mut Adam<T>,
    x: Tensor<T>,
    aux: Option<Tensor<T>>,
    loss_fn: F,
) -> Result<f64>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let av = aux.map(|a| tape.constant(a));
    let fp = net.forward(&mut tape, xv, av, Mode::Train, true)?;
    let loss = loss_fn(&mut tape, fp.output)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Diverged {
            context: format!("optimizer step {}", opt.steps() + 1),
            loss: value,
        });
    }
    let mut grads = tape.backward(loss)?;
    let per_param: Vec<Vec<Option<Tensor<T>>>> = fp
        .params
        .iter()
        .map(|l| l.iter().map(|&v| grads.take(v)).collect())
        .collect();
    net.update_running_stats(&fp.batch_stats);
    opt.update(net.params_mut(), &per_param);
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub(crate) fn gather_rows<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let per = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("gathered rows")
}

/// Mini-batch training over `inputs` (`[N, ...]`, with optional per-row
/// auxiliary inputs). Each epoch shuffles with an RNG seeded from
/// `config.seed`, so batch order is reproducible. The loss closure receives
/// the tape, the network output, and the batch's row indices. `on_epoch` sees
/// the network after every epoch and may return a metric.
pub fn fit<T, L, E>(
    net: &mut Network<T>,
    inputs: &Tensor<T>,
    aux: Option<&Tensor<T>>,
    config: &TrainConfig,
    mut loss_fn: L,
    mut on_epoch: E,
) -> Result<Vec<EpochRecord>>
where
    T: Real,
    L: FnMut(&mut Tape<T>, Var, &[usize]) -> Result<Var>,
    E: FnMut(usize, &Network<T>) -> Result<Option<f64>>,
{
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(Error::Empty("training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let batch = config.batch_size.min(n);
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        net.params(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = gather_rows(inputs, chunk);
            let ab = aux.map(|a| gather_rows(a, chunk));
            let loss =
                train_step(net, &mut opt, xb, ab, |tape, out| loss_fn(tape, out, chunk)).map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged {
                        context: format!("epoch {}", epoch + 1),
                        loss,
                    },
                    other => other,
                })?;
            total += loss * chunk.len() as f64;
        }
        let metric = on_epoch(epoch, net)?;
        log.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / n as f64,
            metric,
        });
    }
    Ok(log)
}
