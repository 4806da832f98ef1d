use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Mode, Network, Shape};
use super::tape::Tape;
use super::tensor::Tensor;
use super::{softmax_slice, Real};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 8] = *b"TSADVMDL";
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Fcn,
    Lenet5,
    Gatn,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Fcn => "fcn",
            Architecture::Lenet5 => "lenet5",
            Architecture::Gatn => "gatn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Optional per-epoch metric (accuracy, fidelity, ...).
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn labels(&self) -> Vec<usize> {
        self.probs.iter().map(|p| crate::dtw::argmax_first(p)).collect()
    }
}

/// Network parameters (f32) plus the metadata needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub architecture: Architecture,
    pub network: Network<f32>,
    pub rng_seed: u64,
    pub training_log: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: [u8; 8],
    version: u32,
    architecture: Architecture,
}

impl TrainedModel {
    pub fn new(architecture: Architecture, network: Network<f32>, rng_seed: u64) -> Self {
        TrainedModel {
            architecture,
            network,
            rng_seed,
            training_log: Vec::new(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self.network.input_shape() {
            Shape::Seq { len, .. } => len,
            Shape::Flat(n) => n,
        }
    }

    pub fn output_len(&self) -> usize {
        self.network.output_shape().numel()
    }

    /// Eval-mode logits and scaled-softmax probabilities (computed in f64).
    pub fn predict(&self, xs: &[&[f64]], temperature: f64) -> Result<Predictions> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be > 0")));
        }
        let mut logits = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(INFER_CHUNK) {
            let out = self.network.infer(Tensor::<f32>::from_series(chunk)?, None)?;
            logits.extend(out.rows_f64());
        }
        let probs = logits.iter().map(|z| softmax_slice(z, temperature)).collect();
        Ok(Predictions { logits, probs })
    }

    pub fn predict_labels(&self, xs: &[&[f64]]) -> Result<Vec<usize>> {
        Ok(self.predict(xs, 1.0)?.labels())
    }

    /// ∂softmax(z)_target/∂x per sample.
    pub fn input_gradients(&self, xs: &[&[f64]], target: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(INFER_CHUNK) {
            let g = input_gradient(&self.network, Tensor::<f32>::from_series(chunk)?, target)?;
            out.extend(g.rows_f64());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        bincode::serialize_into(
            &mut w,
            &Header {
                magic: MAGIC,
                version: MODEL_FORMAT_VERSION,
                architecture: self.architecture,
            },
        )?;
        bincode::serialize_into(&mut w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header: Header = bincode::deserialize_from(&mut r)?;
        if header.magic != MAGIC {
            return Err(Error::Serde(format!("{} is not a model file", path.display())));
        }
        if header.version != MODEL_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "{}: model format version {} (expected {MODEL_FORMAT_VERSION})",
                path.display(),
                header.version
            )));
        }
        let model: TrainedModel = bincode::deserialize_from(&mut r)?;
        if model.architecture != header.architecture {
            return Err(Error::Serde("model header and body disagree on architecture".into()));
        }
        Ok(model)
    }
}

/// Gradient of the target-class softmax probability with respect to the
/// input, per sample (eval mode, so samples do not interact).
pub fn input_gradient<T: Real>(net: &Network<T>, x: Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let classes = net.output_shape().numel();
    if target >= classes {
        return Err(Error::OutOfRange(format!(
            "target class {target} but the model has {classes} outputs"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let fp = net.forward(&mut tape, xv, None, Mode::Eval, false)?;
    let probs = tape.softmax(fp.output, T::one())?;
    let mut pick = Tensor::zeros(tape.shape(probs));
    for row in pick.data_mut().chunks_mut(classes) {
        row[target] = T::one();
    }
    let ft = tape.weighted_sum(probs, pick)?;
    let mut grads = tape.backward(ft)?;
    Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(tape.shape(xv))))
}
