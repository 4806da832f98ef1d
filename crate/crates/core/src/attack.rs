//! Targeted attack generation with a gradient adversarial transformation
//! network (GATN).
//!
//! The GATN sees a series `x` together with `x̃ = ∂f_t/∂x`, the gradient of
//! the surrogate's target-class probability, and emits `x̂`. It is trained so
//! that `x̂` stays close to `x` while the surrogate's prediction on `x̂`
//! approaches a reranked version of its prediction on `x` in which the
//! target class wins.

use serde::{Deserialize, Serialize};

use crate::distill::{BoxMode, Teacher, TeacherKind};
use crate::error::{Error, Result};
use crate::models::{build_gatn, ArchitectureConfig, DEFAULT_GATN_HIDDEN};
use crate::nn::{fit, input_gradient, l2, lit, softmax_slice, Mode, Tensor, TrainConfig, TrainedModel};

/// Reconstruction weights searched by [`beta_grid_search`].
pub const BETA_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_TARGET_CLASS: usize = 1;
pub const DEFAULT_GATN_EPOCHS: usize = 100;
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Remapped class index the attack pushes towards.
    pub target_class: usize,
    pub box_mode: BoxMode,
    pub teacher_kind: TeacherKind,
    pub hidden_units: Vec<usize>,
    /// Emit `x + g(x, x̃)` instead of `g(x, x̃)`.
    pub residual: bool,
    pub train: TrainConfig,
    /// Seed for the GATN's initial weights.
    pub init_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: DEFAULT_ALPHA,
            beta: BETA_GRID[0],
            target_class: DEFAULT_TARGET_CLASS,
            box_mode: BoxMode::White,
            teacher_kind: TeacherKind::Fcn,
            hidden_units: DEFAULT_GATN_HIDDEN.to_vec(),
            residual: false,
            train: TrainConfig {
                epochs: DEFAULT_GATN_EPOCHS,
                ..TrainConfig::default()
            },
            init_seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be > 1", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be > 0", self.beta)));
        }
        if self.hidden_units.is_empty() || self.hidden_units.contains(&0) {
            return Err(Error::Config("GATN hidden widths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// Which model the GATN differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateSource {
    Teacher,
    Student,
}

/// The teacher itself is attacked only when its gradients are available:
/// a white-box FCN. Everything else goes through the distilled student.
pub fn surrogate_source(box_mode: BoxMode, teacher_kind: TeacherKind) -> SurrogateSource {
    match (box_mode, teacher_kind) {
        (BoxMode::White, TeacherKind::Fcn) => SurrogateSource::Teacher,
        _ => SurrogateSource::Student,
    }
}

/// Picks the surrogate per [`surrogate_source`]. `student` is required
/// unless the teacher is used directly.
pub fn select_surrogate(
    config: &AttackConfig,
    teacher: &Teacher,
    student: Option<TrainedModel>,
) -> Result<(TrainedModel, SurrogateSource)> {
    if teacher.kind() != config.teacher_kind {
        return Err(Error::Config(format!(
            "attack configured for a {} teacher but given a {} teacher",
            config.teacher_kind,
            teacher.kind()
        )));
    }
    match surrogate_source(config.box_mode, config.teacher_kind) {
        SurrogateSource::Teacher => {
            let net = teacher
                .network()
                .ok_or_else(|| Error::Config("teacher has no network".into()))?;
            Ok((net.clone(), SurrogateSource::Teacher))
        }
        SurrogateSource::Student => student.map(|s| (s, SurrogateSource::Student)).ok_or_else(|| {
            Error::Config(format!(
                "a {} {} attack needs a distilled student",
                config.box_mode, config.teacher_kind
            ))
        }),
    }
}

/// Sets component `t` to `α·max(y)` and renormalizes by the sum.
pub fn rerank(y: &[f64], t: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must be > 1")));
    }
    if t >= y.len() {
        return Err(Error::OutOfRange(format!("target class {t} with {} classes", y.len())));
    }
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut r = y.to_vec();
    r[t] = alpha * max;
    let sum: f64 = r.iter().sum();
    r.iter_mut().for_each(|v| *v /= sum);
    Ok(r)
}

/// `β·mse(x̂, x) + mse(ŷ', r_α(y', t))` for one sample.
pub fn gatn_loss(x: &[f64], x_hat: &[f64], y_clean: &[f64], y_adv: &[f64], config: &AttackConfig) -> Result<f64> {
    let target = rerank(y_clean, config.target_class, config.alpha)?;
    Ok(config.beta * l2(x_hat, x)? + l2(y_adv, &target)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    /// Seed of the split the GATN was trained on.
    pub split_seed: u64,
    pub num_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub config: AttackConfig,
    pub surrogate: TrainedModel,
    pub surrogate_source: SurrogateSource,
    pub gatn: TrainedModel,
    pub provenance: Provenance,
}

/// Adversarial candidates with the surrogate's view of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub x_hat: Vec<Vec<f64>>,
    pub y_clean: Vec<Vec<f64>>,
    pub y_adv: Vec<Vec<f64>>,
}

fn series_len(xs: &[&[f64]]) -> Result<usize> {
    let len = xs
        .first()
        .map(|x| x.len())
        .ok_or_else(|| Error::Empty("attack inputs".into()))?;
    if let Some(bad) = xs.iter().find(|x| x.len() != len) {
        return Err(Error::shape("attack input", &[len], &[bad.len()]));
    }
    Ok(len)
}

/// `∂f_t/∂x` for every row, in f32 as used for training.
pub fn surrogate_gradients(surrogate: &TrainedModel, xs: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let n = xs.shape()[0];
    let mut data = Vec::with_capacity(xs.len());
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(CHUNK) {
        let x = crate::nn::gather_rows(xs, chunk);
        data.extend(input_gradient(&surrogate.network, x, target)?.into_data());
    }
    Tensor::new(xs.shape(), data)
}

/// Trains a fresh GATN against a frozen surrogate on `xs` (the attacker's
/// `D_eval` inputs; labels are not needed).
pub fn train_gatn(
    config: &AttackConfig,
    surrogate: TrainedModel,
    surrogate_source: SurrogateSource,
    xs: &[&[f64]],
    provenance: Provenance,
) -> Result<AttackRun> {
    config.validate()?;
    let len = series_len(xs)?;
    if surrogate.input_len() != len {
        return Err(Error::shape("surrogate input", &[surrogate.input_len()], &[len]));
    }
    let classes = surrogate.output_len();
    if config.target_class >= classes {
        return Err(Error::OutOfRange(format!(
            "target class {} with {classes} classes",
            config.target_class
        )));
    }
    let mut gatn = build_gatn(
        &ArchitectureConfig::gatn(len, config.hidden_units.clone()),
        config.init_seed,
    )?;
    let inputs = Tensor::<f32>::from_series(xs)?;
    // The surrogate is frozen, so its input gradients and clean predictions
    // are fixed for the whole run and computed once.
    let grads = surrogate_gradients(&surrogate, &inputs, config.target_class)?;
    let clean = surrogate.predict(xs, 1.0)?;
    let targets: Vec<Vec<f64>> = clean
        .probs
        .iter()
        .map(|y| rerank(y, config.target_class, config.alpha))
        .collect::<Result<_>>()?;
    let beta = lit::<f32>(config.beta);
    let log = fit(
        &mut gatn.network,
        &inputs,
        Some(&grads),
        &config.train,
        |tape, out, idx| {
            let b = idx.len();
            let x = tape.constant(crate::nn::gather_rows(&inputs, idx).reshape(&[b, len])?);
            let x_hat = if config.residual { tape.add(out, x)? } else { out };
            let x_hat3 = tape.reshape(x_hat, &[b, 1, len])?;
            let fp = surrogate.network.forward(tape, x_hat3, None, Mode::Eval, false)?;
            let y_adv = tape.softmax(fp.output, 1.0)?;
            let r = tape.constant(crate::models::targets_tensor(&targets, idx)?);
            let lx = tape.mse(x_hat, x)?;
            let ly = tape.mse(y_adv, r)?;
            tape.linear(&[(lx, beta), (ly, 1.0)])
        },
        |_, _| Ok(None),
    )?;
    gatn.rng_seed = config.train.seed;
    gatn.training_log = log;
    Ok(AttackRun {
        config: config.clone(),
        surrogate,
        surrogate_source,
        gatn,
        provenance,
    })
}

impl AttackRun {
    /// Two surrogate passes around one GATN pass; no state changes.
    pub fn generate(&self, xs: &[&[f64]]) -> Result<Generated> {
        let len = series_len(xs)?;
        if len != self.gatn.input_len() {
            return Err(Error::shape("GATN input", &[self.gatn.input_len()], &[len]));
        }
        let mut out = Generated {
            x_hat: Vec::with_capacity(xs.len()),
            y_clean: Vec::with_capacity(xs.len()),
            y_adv: Vec::with_capacity(xs.len()),
        };
        for chunk in xs.chunks(CHUNK) {
            let x = Tensor::<f32>::from_series(chunk)?;
            let grads = input_gradient(&self.surrogate.network, x.clone(), self.config.target_class)?;
            let clean = self.surrogate.network.infer(x.clone(), None)?;
            let raw = self.gatn.network.infer(x, Some(grads))?;
            let x_hat: Vec<Vec<f64>> = raw
                .rows_f64()
                .into_iter()
                .zip(chunk)
                .map(|(g, x)| {
                    if self.config.residual {
                        g.iter().zip(x.iter()).map(|(a, b)| a + b).collect()
                    } else {
                        g
                    }
                })
                .collect();
            let refs: Vec<&[f64]> = x_hat.iter().map(Vec::as_slice).collect();
            let adv = self.surrogate.predict(&refs, 1.0)?;
            out.y_clean
                .extend(clean.rows_f64().iter().map(|z| softmax_slice(z, 1.0)));
            out.y_adv.extend(adv.probs);
            out.x_hat.extend(x_hat);
        }
        Ok(out)
    }

    /// Mean over samples of [`gatn_loss`], computed in f64.
    pub fn mean_loss(&self, xs: &[&[f64]]) -> Result<f64> {
        let g = self.generate(xs)?;
        let mut total = 0.0;
        for (i, x) in xs.iter().enumerate() {
            total += gatn_loss(x, &g.x_hat[i], &g.y_clean[i], &g.y_adv[i], &self.config)?;
        }
        Ok(total / xs.len() as f64)
    }
}

/// One trained GATN per β in [`BETA_GRID`], each scored by `score`
/// (typically the adversary count and MSE on `D_eval`). Returns all runs with
/// their scores and the index of the best: most adversaries, ties to the
/// lower MSE, then to the larger β.
pub fn beta_grid_search<S, R>(
    base: &AttackConfig,
    surrogate: &TrainedModel,
    surrogate_source: SurrogateSource,
    xs: &[&[f64]],
    provenance: &Provenance,
    mut score: S,
) -> Result<(Vec<(AttackRun, R)>, usize)>
where
    S: FnMut(&AttackRun) -> Result<(R, usize, f64)>,
{
    let mut runs = Vec::with_capacity(BETA_GRID.len());
    let mut keys = Vec::with_capacity(BETA_GRID.len());
    for beta in BETA_GRID {
        let config = AttackConfig { beta, ..base.clone() };
        let run = train_gatn(&config, surrogate.clone(), surrogate_source, xs, provenance.clone())?;
        let (report, count, mse) = score(&run)?;
        keys.push((count, mse));
        runs.push((run, report));
    }
    Ok((runs, best_by_count(&keys)))
}

/// Index of the highest count; ties go to the lower MSE, then the earlier entry.
pub fn best_by_count(keys: &[(usize, f64)]) -> usize {
    let mut best = 0;
    for (i, &(count, mse)) in keys.iter().enumerate().skip(1) {
        let (bc, bm) = keys[best];
        if count > bc || (count == bc && mse < bm) {
            best = i;
        }
    }
    best
}
