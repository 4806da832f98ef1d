use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ConvGeometry, Tape, Var};
use super::tensor::Tensor;
use super::{lit, Real};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batchnorm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output length `ceil(L / stride)`; odd padding puts the extra element on the right.
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    Relu,
    MaxPool1d {
        size: usize,
    },
    GlobalAvgPool1d,
    Dense {
        units: usize,
    },
    Flatten,
    /// Flattens the main and auxiliary inputs and joins them feature-wise.
    Concat,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::GlobalAvgPool1d => "globalavgpool1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Concat => "concat",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
                ..
            } => filters >= 1 && kernel >= 1 && stride >= 1,
            LayerSpec::MaxPool1d { size } => size >= 1,
            LayerSpec::Dense { units } => units >= 1,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters for {self:?}")))
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Seq { channels: usize, len: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Seq { channels, len } => channels * len,
            Shape::Flat(n) => n,
        }
    }

    fn batched(&self, batch: usize) -> Vec<usize> {
        match *self {
            Shape::Seq { channels, len } => vec![batch, channels, len],
            Shape::Flat(n) => vec![batch, n],
        }
    }
}

fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(len);
    let left = total / 2;
    (left, total - left)
}

fn layer_error(index: usize, layer: &LayerSpec, e: Error) -> Error {
    match e {
        Error::Shape {
            context,
            expected,
            actual,
        } => Error::Shape {
            context: format!("layer {index} ({}): {context}", layer.name()),
            expected,
            actual,
        },
        other => other,
    }
}

fn output_shape(layer: &LayerSpec, input: Shape, aux: Option<Shape>) -> Result<Shape> {
    let seq = |what: &str| match input {
        Shape::Seq { channels, len } => Ok((channels, len)),
        Shape::Flat(n) => Err(Error::shape(what, &[0, 0], &[n])),
    };
    Ok(match *layer {
        LayerSpec::Conv1d {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let (_, len) = seq("conv1d expects [channels, length]")?;
            let (pl, pr) = match padding {
                Padding::Same => same_padding(len, kernel, stride),
                Padding::Valid => (0, 0),
            };
            let padded = len + pl + pr;
            if padded < kernel {
                return Err(Error::shape("conv1d output length", &[kernel], &[padded]));
            }
            Shape::Seq {
                channels: filters,
                len: (padded - kernel) / stride + 1,
            }
        }
        LayerSpec::BatchNorm | LayerSpec::Relu => input,
        LayerSpec::MaxPool1d { size } => {
            let (channels, len) = seq("maxpool1d expects [channels, length]")?;
            if len / size == 0 {
                return Err(Error::shape("maxpool1d output length", &[size], &[len]));
            }
            Shape::Seq {
                channels,
                len: len / size,
            }
        }
        LayerSpec::GlobalAvgPool1d => {
            let (channels, _) = seq("global average pool expects [channels, length]")?;
            Shape::Flat(channels)
        }
        LayerSpec::Dense { units } => match input {
            Shape::Flat(_) => Shape::Flat(units),
            Shape::Seq { .. } => return Err(Error::shape("dense expects flat input", &[0], &input.batched(1))),
        },
        LayerSpec::Flatten => Shape::Flat(input.numel()),
        LayerSpec::Concat => {
            let aux = aux.ok_or_else(|| Error::Config("concat layer needs an auxiliary input".into()))?;
            Shape::Flat(input.numel() + aux.numel())
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics and reports them for running updates.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

pub struct ForwardPass<T> {
    pub output: Var,
    /// Tape handles of every layer's parameters, parallel to `Network::params`.
    pub params: Vec<Vec<Var>>,
    /// Batch (mean, variance) per batchnorm layer, train mode only.
    pub batch_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

/// Sequential layer stack with its parameters and batchnorm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: serde::de::DeserializeOwned"))]
pub struct Network<T> {
    input: Shape,
    aux_input: Option<Shape>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    params: Vec<Vec<Tensor<T>>>,
    buffers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Network<T> {
    /// Validates the stack and initializes it: He-uniform weights
    /// (limit `sqrt(6 / fan_in)`), zero biases, unit batchnorm scale.
    pub fn new(input: Shape, aux_input: Option<Shape>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = Vec::with_capacity(layers.len());
        let mut params = Vec::with_capacity(layers.len());
        let mut buffers = Vec::with_capacity(layers.len());
        let mut current = input;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let next = output_shape(layer, current, aux_input).map_err(|e| layer_error(i, layer, e))?;
            let he = |fan_in: usize, shape: &[usize], rng: &mut ChaCha8Rng| {
                let limit = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| lit::<T>(dist.sample(rng))).collect();
                Tensor::new(shape, data).expect("init shape")
            };
            let (p, b) = match *layer {
                LayerSpec::Conv1d { filters, kernel, .. } => {
                    let cin = match current {
                        Shape::Seq { channels, .. } => channels,
                        Shape::Flat(_) => unreachable!("checked by output_shape"),
                    };
                    (
                        vec![
                            he(cin * kernel, &[filters, cin, kernel], &mut rng),
                            Tensor::zeros(&[filters]),
                        ],
                        vec![],
                    )
                }
                LayerSpec::Dense { units } => {
                    let fin = current.numel();
                    (vec![he(fin, &[fin, units], &mut rng), Tensor::zeros(&[units])], vec![])
                }
                LayerSpec::BatchNorm => {
                    let ch = match current {
                        Shape::Seq { channels, .. } => channels,
                        Shape::Flat(n) => n,
                    };
                    (
                        vec![Tensor::full(&[ch], T::one()), Tensor::zeros(&[ch])],
                        vec![Tensor::zeros(&[ch]), Tensor::full(&[ch], T::one())],
                    )
                }
                _ => (vec![], vec![]),
            };
            params.push(p);
            buffers.push(b);
            shapes.push(next);
            current = next;
        }
        Ok(Network {
            input,
            aux_input,
            layers,
            shapes,
            params,
            buffers,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn aux_input_shape(&self) -> Option<Shape> {
        self.aux_input
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap_or(&self.input)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Vec<Tensor<T>>] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &Vec<Vec<Tensor<T>>>| v.iter().map(|l| l.iter().map(|t| t.cast()).collect()).collect();
        Network {
            input: self.input,
            aux_input: self.aux_input,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Records the forward computation on `tape`. With `trainable` the
    /// parameters become differentiation targets; otherwise they are constants
    /// and only gradients with respect to the inputs flow.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        aux: Option<Var>,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardPass<T>> {
        let batch = *tape.shape(x).first().unwrap_or(&0);
        let expected = self.input.batched(batch);
        if tape.shape(x) != expected.as_slice() || batch == 0 {
            return Err(Error::shape("network input", &expected, tape.shape(x)));
        }
        if let (Some(a), Some(shape)) = (aux, self.aux_input) {
            let exp = shape.batched(batch);
            if tape.shape(a) != exp.as_slice() {
                return Err(Error::shape("network auxiliary input", &exp, tape.shape(a)));
            }
        }
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        let mut current = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let pv: Vec<Var> = self.params[i].iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
            let mut stats = None;
            h = match *layer {
                LayerSpec::Conv1d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let len = match current {
                        Shape::Seq { len, .. } => len,
                        Shape::Flat(_) => 0,
                    };
                    let (pad_left, pad_right) = match padding {
                        Padding::Same => same_padding(len, kernel, stride),
                        Padding::Valid => (0, 0),
                    };
                    let geom = ConvGeometry {
                        stride,
                        pad_left,
                        pad_right,
                    };
                    tape.conv1d(h, pv[0], pv[1], geom)
                }
                LayerSpec::BatchNorm => match mode {
                    Mode::Train => tape.batchnorm_train(h, pv[0], pv[1], lit(BN_EPS)).map(|(v, m, var)| {
                        stats = Some((m, var));
                        v
                    }),
                    Mode::Eval => tape.batchnorm_eval(
                        h,
                        pv[0],
                        pv[1],
                        self.buffers[i][0].data(),
                        self.buffers[i][1].data(),
                        lit(BN_EPS),
                    ),
                },
                LayerSpec::Relu => Ok(tape.relu(h)),
                LayerSpec::MaxPool1d { size } => tape.maxpool1d(h, size),
                LayerSpec::GlobalAvgPool1d => tape.global_avg_pool(h),
                LayerSpec::Dense { .. } => tape.dense(h, pv[0], pv[1]),
                LayerSpec::Flatten => tape.reshape(h, &[batch, current.numel()]),
                LayerSpec::Concat => {
                    let a = aux.ok_or_else(|| Error::Config("concat layer needs an auxiliary input".into()))?;
                    let n = tape.value(a).len() / batch;
                    tape.reshape(h, &[batch, current.numel()])
                        .and_then(|main| Ok((main, tape.reshape(a, &[batch, n])?)))
                        .and_then(|(main, a)| tape.concat(main, a))
                }
            }
            .map_err(|e| layer_error(i, layer, e))?;
            current = self.shapes[i];
            params.push(pv);
            batch_stats.push(stats);
        }
        Ok(ForwardPass {
            output: h,
            params,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch_stats: &[Option<(Vec<T>, Vec<T>)>]) {
        let keep = lit::<T>(BN_MOMENTUM);
        let take = T::one() - keep;
        for (buf, stats) in self.buffers.iter_mut().zip(batch_stats) {
            if let Some((mean, var)) = stats {
                for (r, &m) in buf[0].data_mut().iter_mut().zip(mean) {
                    *r = keep * *r + take * m;
                }
                for (r, &v) in buf[1].data_mut().iter_mut().zip(var) {
                    *r = keep * *r + take * v;
                }
            }
        }
    }

    /// Inference over `[B, ...]` inputs in eval mode; returns the output tensor.
    pub fn infer(&self, x: Tensor<T>, aux: Option<Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let av = aux.map(|a| tape.constant(a));
        let fp = self.forward(&mut tape, xv, av, Mode::Eval, false)?;
        Ok(tape.value(fp.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_extra_on_the_right() {
        assert_eq!(same_padding(10, 8, 1), (3, 4));
        assert_eq!(same_padding(10, 5, 1), (2, 2));
        assert_eq!(same_padding(10, 3, 1), (1, 1));
        assert_eq!(same_padding(10, 4, 2), (1, 1));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = Network::<f64>::new(
            Shape::Seq { channels: 1, len: 4 },
            None,
            vec![LayerSpec::Conv1d {
                filters: 2,
                kernel: 5,
                stride: 1,
                padding: Padding::Valid,
            }],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 0 (conv1d)"), "{err}");
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(Network::<f64>::new(Shape::Flat(3), None, vec![LayerSpec::Dense { units: 0 }], 0).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut net =
            Network::<f64>::new(Shape::Seq { channels: 2, len: 3 }, None, vec![LayerSpec::BatchNorm], 0).unwrap();
        net.update_running_stats(&[Some((vec![1.0, 2.0], vec![3.0, 5.0]))]);
        let b = net.buffers();
        assert!((b[0][0].data()[0] - 0.1).abs() < 1e-12);
        assert!((b[0][0].data()[1] - 0.2).abs() < 1e-12);
        assert!((b[0][1].data()[0] - 1.2).abs() < 1e-12);
        assert!((b[0][1].data()[1] - 1.4).abs() < 1e-12);
    }
}
