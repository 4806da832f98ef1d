//! The three fixed architectures (FCN teacher, 1-D LeNet-5 student, dense
//! GATN generator) and supervised classifier training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
pub use crate::nn::Architecture;
use crate::nn::{fit, one_hot, LayerSpec, Network, Padding, Shape, Tensor, TrainConfig, TrainedModel};

pub const FCN_FILTERS: [usize; 3] = [128, 256, 128];
pub const FCN_KERNELS: [usize; 3] = [8, 5, 3];
pub const DEFAULT_GATN_HIDDEN: [usize; 2] = [128, 128];
/// Shortest input the 1-D LeNet-5 accepts: 16 → conv 12 → pool 6 → conv 2 → pool 1.
pub const LENET5_MIN_LENGTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_length: usize,
    pub num_classes: usize,
    pub architecture: Architecture,
    /// Hidden widths of the GATN generator (ignored by the classifiers).
    pub gatn_hidden_units: Vec<usize>,
}

impl ArchitectureConfig {
    pub fn classifier(architecture: Architecture, input_length: usize, num_classes: usize) -> Self {
        ArchitectureConfig {
            input_length,
            num_classes,
            architecture,
            gatn_hidden_units: DEFAULT_GATN_HIDDEN.to_vec(),
        }
    }

    pub fn gatn(input_length: usize, hidden: Vec<usize>) -> Self {
        ArchitectureConfig {
            input_length,
            num_classes: 0,
            architecture: Architecture::Gatn,
            gatn_hidden_units: hidden,
        }
    }
}

fn series_input(len: usize) -> Shape {
    Shape::Seq { channels: 1, len }
}

fn check_classes(config: &ArchitectureConfig) -> Result<()> {
    if config.num_classes < 2 {
        return Err(Error::Config(format!(
            "a classifier needs at least 2 classes, got {}",
            config.num_classes
        )));
    }
    if config.input_length == 0 {
        return Err(Error::Config("input length must be at least 1".into()));
    }
    Ok(())
}

/// Three [conv (same) → batchnorm → relu] blocks, global average pooling, dense head.
pub fn build_fcn(config: &ArchitectureConfig, seed: u64) -> Result<TrainedModel> {
    check_classes(config)?;
    let mut layers = Vec::new();
    for (filters, kernel) in FCN_FILTERS.into_iter().zip(FCN_KERNELS) {
        layers.push(LayerSpec::Conv1d {
            filters,
            kernel,
            stride: 1,
            padding: Padding::Same,
        });
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool1d);
    layers.push(LayerSpec::Dense {
        units: config.num_classes,
    });
    let net = Network::new(series_input(config.input_length), None, layers, seed)?;
    Ok(TrainedModel::new(Architecture::Fcn, net, seed))
}

/// conv(6, 5, valid) → maxpool 2 → conv(16, 5, valid) → maxpool 2 → flatten →
/// dense 120 relu → dense 84 relu → dense classes.
pub fn build_lenet5_1d(config: &ArchitectureConfig, seed: u64) -> Result<TrainedModel> {
    check_classes(config)?;
    let layers = vec![
        LayerSpec::Conv1d {
            filters: 6,
            kernel: 5,
            stride: 1,
            padding: Padding::Valid,
        },
        LayerSpec::MaxPool1d { size: 2 },
        LayerSpec::Conv1d {
            filters: 16,
            kernel: 5,
            stride: 1,
            padding: Padding::Valid,
        },
        LayerSpec::MaxPool1d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 120 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 84 },
        LayerSpec::Relu,
        LayerSpec::Dense {
            units: config.num_classes,
        },
    ];
    let net = Network::new(series_input(config.input_length), None, layers, seed).map_err(|e| match e {
        Error::Shape { context, .. } => Error::Config(format!(
            "input length {} too short for LeNet-5 (minimum {LENET5_MIN_LENGTH}): {context}",
            config.input_length
        )),
        other => other,
    })?;
    Ok(TrainedModel::new(Architecture::Lenet5, net, seed))
}

/// Dense generator over the concatenation of `x` and its input gradient:
/// hidden relu layers, then a linear layer of width `T`.
pub fn build_gatn(config: &ArchitectureConfig, seed: u64) -> Result<TrainedModel> {
    if config.gatn_hidden_units.is_empty() {
        return Err(Error::Config("GATN needs at least one hidden layer".into()));
    }
    if config.input_length == 0 {
        return Err(Error::Config("input length must be at least 1".into()));
    }
    let mut layers = vec![LayerSpec::Concat];
    for &units in &config.gatn_hidden_units {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense {
        units: config.input_length,
    });
    let input = series_input(config.input_length);
    let net = Network::new(input, Some(input), layers, seed)?;
    Ok(TrainedModel::new(Architecture::Gatn, net, seed))
}

pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<TrainedModel> {
    match config.architecture {
        Architecture::Fcn => build_fcn(config, seed),
        Architecture::Lenet5 => build_lenet5_1d(config, seed),
        Architecture::Gatn => build_gatn(config, seed),
    }
}

pub(crate) fn dataset_tensor(dataset: &Dataset) -> Result<Tensor<f32>> {
    Tensor::from_series(&dataset.inputs())
}

pub(crate) fn targets_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Result<Tensor<f32>> {
    let classes = rows.first().map_or(0, |r| r.len());
    let data = idx.iter().flat_map(|&i| rows[i].iter().map(|&v| v as f32)).collect();
    Tensor::new(&[idx.len(), classes], data)
}

/// Minimizes cross-entropy against one-hot ground-truth labels.
pub fn train_classifier(mut model: TrainedModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    dataset.validate()?;
    let labels = dataset.labels()?;
    let classes = model.output_len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::OutOfRange(format!(
            "label {bad} but the model has {classes} outputs"
        )));
    }
    let targets: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, classes)).collect();
    let inputs = dataset_tensor(dataset)?;
    let log = fit(
        &mut model.network,
        &inputs,
        None,
        config,
        |tape, logits, idx| {
            let logp = tape.log_softmax(logits, 1.0)?;
            tape.cross_entropy_log(targets_tensor(&targets, idx)?, logp)
        },
        |_, _| Ok(None),
    )?;
    model.rng_seed = config.seed;
    model.training_log.extend(log);
    Ok(model)
}

pub fn accuracy(predicted: &[usize], expected: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(expected).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}
