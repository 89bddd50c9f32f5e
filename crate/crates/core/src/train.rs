//! Two-stage transfer learning: RMSProp on categorical cross-entropy, first
//! with the backbone frozen, then end to end.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{seeded_rng, DatasetManifest, RNG_NAME};
use crate::error::{Error, Result};
use crate::infer::PreprocessConfig;
use crate::label::ClassLabel;
use crate::model::{ModelHandle, Stage};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CategoricalCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// RMSProp discounting factor for the running mean of squared gradients.
    pub rho: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            rho: 0.9,
            epsilon: 1e-7,
            batch_size: 64,
            epochs_stage1: 50,
            epochs_stage2: 50,
            loss: Loss::CategoricalCrossEntropy,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho {} not in (0, 1)", self.rho));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be non-negative", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::HeadOnly => self.epochs_stage1,
            Stage::Full => self.epochs_stage2,
        }
    }
}

/// Mean over the batch of `-ln p[true class]`, with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. Returns a scalar tensor.
pub fn categorical_cross_entropy(probs: &Tensor, targets: &[ClassLabel]) -> Result<Tensor> {
    let indices: Vec<u32> = targets.iter().map(|l| l.index() as u32).collect();
    let idx = Tensor::from_vec(indices, targets.len(), probs.device())?;
    cross_entropy_indices(probs, &idx)
}

fn cross_entropy_indices(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (n, classes) = probs
        .dims2()
        .map_err(|_| Error::ShapeMismatch(format!("probabilities must be (n, classes), got {:?}", probs.dims())))?;
    if targets.dims() != [n] || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} target(s) for {n} probability row(s)",
            targets.elem_count()
        )));
    }
    let max_target = targets.max(0)?.to_scalar::<u32>()? as usize;
    if max_target >= classes {
        return Err(Error::ShapeMismatch(format!("target class {max_target} >= {classes} outputs")));
    }
    let log_p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?.log()?;
    let picked = log_p.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// One RMSProp update:
/// `state' = rho * state + (1 - rho) * grad^2`,
/// `param' = param - lr * grad / sqrt(state' + epsilon)`.
pub fn rmsprop_step(param: &Tensor, grad: &Tensor, state: &Tensor, config: &TrainingConfig) -> Result<(Tensor, Tensor)> {
    if param.dims() != grad.dims() || param.dims() != state.dims() {
        return Err(Error::ShapeMismatch(format!(
            "param {:?}, grad {:?}, state {:?}",
            param.dims(),
            grad.dims(),
            state.dims()
        )));
    }
    let grad_sum = grad.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !grad_sum.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            context: format!("tensor of shape {:?} (sum {grad_sum})", grad.dims()),
        });
    }
    // Detached so the running state never holds on to a backward graph.
    let (param, grad, state) = (param.detach(), grad.detach(), state.detach());
    let new_state = ((state * config.rho)? + (grad.sqr()? * (1.0 - config.rho))?)?;
    let step = (grad / (&new_state + config.epsilon)?.sqrt()?)?;
    let new_param = (param - (step * config.learning_rate)?)?;
    Ok((new_param, new_state))
}

/// Images and labels fed to training or validation. File-backed sets decode
/// and preprocess each batch on demand; in-memory sets hold a preprocessed
/// `(n, h, w, c)` tensor.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    source: Source,
    labels: Vec<ClassLabel>,
}

#[derive(Debug, Clone)]
enum Source {
    Files { paths: Vec<PathBuf>, preprocess: PreprocessConfig },
    Tensor(Tensor),
}

impl ExampleSet {
    pub fn from_manifest(manifest: &DatasetManifest, preprocess: PreprocessConfig) -> Self {
        ExampleSet {
            source: Source::Files {
                paths: manifest.records().iter().map(|r| r.path.clone()).collect(),
                preprocess,
            },
            labels: manifest.records().iter().map(|r| r.label).collect(),
        }
    }

    pub fn from_tensor(images: Tensor, labels: Vec<ClassLabel>) -> Result<Self> {
        if images.rank() != 4 || images.dim(0)? != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "images {:?} for {} labels",
                images.dims(),
                labels.len()
            )));
        }
        Ok(ExampleSet {
            source: Source::Tensor(images),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    /// Preprocessed `(indices.len(), h, w, c)` batch.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        match &self.source {
            Source::Tensor(t) => {
                let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
                let idx = Tensor::from_vec(idx, indices.len(), t.device())?;
                Ok(t.index_select(&idx, 0)?)
            }
            Source::Files { paths, preprocess } => {
                let pixels = indices
                    .par_iter()
                    .map(|&i| {
                        let bytes = std::fs::read(&paths[i]).map_err(|e| Error::io(&paths[i], e))?;
                        preprocess.pixels_from_bytes(&bytes).map_err(|e| match e {
                            Error::Decode(msg) => Error::Decode(format!("{}: {msg}", paths[i].display())),
                            e => e,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let shape = (indices.len(), preprocess.target_height, preprocess.target_width, preprocess.channels);
                Ok(Tensor::from_vec(pixels.concat(), shape, &Device::Cpu)?)
            }
        }
    }

    fn targets(&self, indices: &[usize]) -> Result<Tensor> {
        let t: Vec<u32> = indices.iter().map(|&i| self.labels[i].index() as u32).collect();
        Ok(Tensor::from_vec(t, indices.len(), &Device::Cpu)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch training telemetry plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainingConfig,
    pub seed: u64,
    pub rng: String,
    /// Validation metrics of the untrained model, when validation data exists.
    pub initial_validation: Option<Validation>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Run {
        config: TrainingConfig,
        seed: u64,
        rng: String,
        initial_validation: Option<Validation>,
    },
    Epoch(EpochRecord),
}

impl TrainReport {
    fn new(config: &TrainingConfig) -> Self {
        TrainReport {
            config: config.clone(),
            seed: config.seed,
            rng: RNG_NAME.to_string(),
            initial_validation: None,
            epochs: Vec::new(),
        }
    }

    pub fn final_validation(&self) -> Option<Validation> {
        let last = self.epochs.last()?;
        Some(Validation {
            loss: last.validation_loss?,
            accuracy: last.validation_accuracy?,
        })
    }

    /// Line-delimited JSON: one `run` header line, then one `epoch` line per
    /// epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ReportLine::Run {
            config: self.config.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
            initial_validation: self.initial_validation,
        })?;
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&ReportLine::Epoch(*e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report: Option<TrainReport> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ReportLine>(line)? {
                ReportLine::Run {
                    config,
                    seed,
                    rng,
                    initial_validation,
                } => {
                    report = Some(TrainReport {
                        config,
                        seed,
                        rng,
                        initial_validation,
                        epochs: Vec::new(),
                    })
                }
                ReportLine::Epoch(e) => report
                    .as_mut()
                    .ok_or_else(|| Error::InvalidConfig("epoch line before run header".into()))?
                    .epochs
                    .push(e),
            }
        }
        report.ok_or_else(|| Error::InvalidConfig("empty training report".into()))
    }
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    match stage {
        Stage::HeadOnly => seed.wrapping_mul(2).wrapping_add(1),
        Stage::Full => seed.wrapping_mul(2).wrapping_add(2),
    }
}

/// Mean loss and accuracy with dropout off.
pub fn validate(model: &ModelHandle, data: &ExampleSet, batch_size: usize) -> Result<Validation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in all.chunks(batch_size.max(1)) {
        let probs = model.forward(&data.images(chunk)?, false)?.detach();
        let targets = data.targets(chunk)?;
        loss_sum += scalar(&cross_entropy_indices(&probs, &targets)?)? * chunk.len() as f64;
        correct += count_correct(&probs, &targets)?;
    }
    Ok(Validation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn count_correct(probs: &Tensor, targets: &Tensor) -> Result<usize> {
    let pred: Vec<u32> = probs.argmax(D::Minus1)?.to_vec1()?;
    let truth: Vec<u32> = targets.to_vec1()?;
    Ok(pred.iter().zip(&truth).filter(|(p, t)| p == t).count())
}

/// Runs one stage: sets trainability, then `epochs(stage)` passes of seeded
/// shuffled mini-batch RMSProp with a fresh optimizer state. A frozen
/// backbone is never written.
pub fn train_stage(
    model: &mut ModelHandle,
    stage: Stage,
    train: &ExampleSet,
    validation: &ExampleSet,
    config: &TrainingConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.set_stage_trainability(stage);
    let mut report = TrainReport::new(config);
    let epochs = config.epochs(stage);
    if epochs == 0 {
        return Ok(report);
    }

    let seed = stage_seed(config.seed, stage);
    let mut rng = seeded_rng(seed);
    model.reseed_dropout(seed);
    let vars = model.trainable_parameters();
    let mut states = vars
        .iter()
        .map(|(_, v)| v.zeros_like())
        .collect::<candle_core::Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let images = train.images(chunk)?;
            let targets = train.targets(chunk)?;
            let probs = model.forward(&images, true)?;
            let loss = cross_entropy_indices(&probs, &targets)?;
            let loss_value = scalar(&loss)?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    context: format!("{stage} epoch {epoch} batch {b}"),
                });
            }
            let grads = loss.backward()?;
            for ((name, var), state) in vars.iter().zip(states.iter_mut()) {
                let Some(grad) = grads.get(var) else { continue };
                let (new_param, new_state) = rmsprop_step(var.as_tensor(), grad, state, config).map_err(|e| match e {
                    Error::NonFinite { what, context } => Error::NonFinite {
                        what,
                        context: format!("{name}, {stage} epoch {epoch} batch {b}: {context}"),
                    },
                    e => e,
                })?;
                var.set(&new_param)?;
                *state = new_state;
            }
            loss_sum += loss_value * chunk.len() as f64;
            correct += count_correct(&probs.detach(), &targets)?;
        }
        let val = if validation.is_empty() {
            None
        } else {
            Some(validate(model, validation, config.batch_size)?)
        };
        let record = EpochRecord {
            stage,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_loss: val.map(|v| v.loss),
            validation_accuracy: val.map(|v| v.accuracy),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{stage} epoch {}/{epochs}: loss {:.4} acc {:.3} val_acc {}",
            epoch + 1,
            record.train_loss,
            record.train_accuracy,
            val.map_or("-".to_string(), |v| format!("{:.3}", v.accuracy))
        );
        report.epochs.push(record);
    }
    Ok(report)
}

/// Head-only stage followed by the full stage, with one consolidated report.
pub fn run_two_stage(
    model: &mut ModelHandle,
    train: &ExampleSet,
    validation: &ExampleSet,
    config: &TrainingConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let mut report = TrainReport::new(config);
    if !validation.is_empty() {
        report.initial_validation = Some(validate(model, validation, config.batch_size)?);
    }
    for stage in [Stage::HeadOnly, Stage::Full] {
        report.epochs.extend(train_stage(model, stage, train, validation, config)?.epochs);
    }
    Ok(report)
}
