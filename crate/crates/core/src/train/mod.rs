//! Optimization loop, evaluation and training logs.

pub mod data;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{load_dataset, Dataset, DatasetKind, Split};

use crate::binarize::quantize_lab_weights;
use crate::error::{Error, Result};
use crate::nets::{Mode, Model, ParamRole};
use crate::tensor::{Real, RealTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" | "sgd-momentum" | "sgd_momentum" => Ok(Optimizer::Sgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule `{other}`"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: Real,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub schedule: Schedule,
    /// SGD momentum.
    pub momentum: Real,
    /// Running-statistics momentum of batchnorm.
    pub bn_momentum: Real,
    /// Random flips and shifts of each training batch.
    pub augment: bool,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Evaluate on the test set after every epoch (otherwise only at the end).
    pub eval_every_epoch: bool,
}

impl TrainConfig {
    pub const BASE_LR: Real = 2.5e-3;
    pub const BASE_BATCH: usize = 256;

    /// Adam with a cosine schedule and the base learning rate scaled by
    /// `batch / 256`.
    pub fn new(batch: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch,
            lr: Self::scaled_lr(batch),
            epochs,
            optimizer: Optimizer::Adam,
            seed,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            bn_momentum: 0.9,
            augment: false,
            max_steps: None,
            eval_every_epoch: true,
        }
    }

    pub fn scaled_lr(batch: usize) -> Real {
        Self::BASE_LR * batch as Real / Self::BASE_BATCH as Real
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::BatchTooSmall(self.batch));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("momentum values must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> Real {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = step as Real / total.max(1) as Real;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(64, 30, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub top1: Real,
    pub top5: Real,
    pub count: usize,
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global optimizer step count at the end of the epoch.
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: Real,
    pub top1: Option<Real>,
    pub top5: Option<Real>,
    pub betas: Vec<Real>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub beta_sites: Vec<String>,
    pub epochs: Vec<EpochLog>,
    /// Training loss of every step.
    pub step_losses: Vec<Real>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> Option<Accuracy> {
        let last = self.epochs.last()?;
        Some(Accuracy {
            top1: last.top1?,
            top5: last.top5?,
            count: 0,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "epoch,step,loss,top1,top5")?;
        for s in &self.beta_sites {
            write!(w, ",beta:{s}")?;
        }
        writeln!(w)?;
        let opt = |v: Option<Real>| v.map(|v| (v as f32).to_string()).unwrap_or_default();
        for e in &self.epochs {
            write!(w, "{},{},{},{},{}", e.epoch, e.step, e.loss as f32, opt(e.top1), opt(e.top5))?;
            for b in &e.betas {
                write!(w, ",{}", *b as f32)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// True if class `label` is among the `k` largest logits of row `row`
/// (ties broken towards the lower class index).
fn in_top_k(logits: &[Real], label: usize, k: usize) -> bool {
    let y = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count();
    rank < k
}

/// Top-1 / top-5 hits of a `(N, classes, 1, 1)` logit tensor.
pub fn top_k_hits(logits: &RealTensor, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape().c;
    let mut hits = (0, 0);
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if in_top_k(row, y, 1) {
            hits.0 += 1;
        }
        if in_top_k(row, y, 5) {
            hits.1 += 1;
        }
    }
    hits
}

/// Inference-mode accuracy over the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<Accuracy> {
    let batch = batch.max(1);
    let mut hits = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.forward(&x, Mode::Infer)?;
        let (a, b) = top_k_hits(&logits, &labels);
        hits.0 += a;
        hits.1 += b;
    }
    let n = data.len().max(1) as Real;
    Ok(Accuracy {
        top1: hits.0 as Real / n,
        top5: hits.1 as Real / n,
        count: data.len(),
    })
}

struct State {
    m: Vec<Real>,
    v: Vec<Real>,
}

/// First-order optimizer over the trainable parameters of a model.
pub struct Stepper {
    cfg: TrainConfig,
    states: Vec<Option<State>>,
    t: u64,
}

impl Stepper {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let states = model
            .params()
            .iter()
            .map(|p| {
                p.role.is_trainable().then(|| State {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
            })
            .collect();
        Stepper {
            cfg: cfg.clone(),
            states,
            t: 0,
        }
    }

    /// Applies one update from per-parameter gradients, then clips latent
    /// binary weights to [−1, 1].
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<Real>>], lr: Real) {
        const B1: Real = 0.9;
        const B2: Real = 0.999;
        const EPS: Real = 1e-7;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for ((p, st), g) in model.params_mut().iter_mut().zip(&mut self.states).zip(grads) {
            let (Some(st), Some(g)) = (st.as_mut(), g.as_ref()) else { continue };
            let clip = p.role == ParamRole::LatentBinary;
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                match self.cfg.optimizer {
                    Optimizer::Adam => {
                        st.m[i] = B1 * st.m[i] + (1.0 - B1) * g[i];
                        st.v[i] = B2 * st.v[i] + (1.0 - B2) * g[i] * g[i];
                        *w -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + EPS);
                    }
                    Optimizer::Sgd => {
                        st.m[i] = self.cfg.momentum * st.m[i] + g[i];
                        *w -= lr * st.m[i];
                    }
                }
                if clip {
                    *w = w.clamp(-1.0, 1.0);
                }
                *w = *w as f32 as Real;
            }
        }
    }
}

/// One forward/backward pass on a batch; returns the loss and the gradient
/// of every parameter (None for non-trainable ones).
pub fn loss_and_grads(
    model: &Model,
    x: &RealTensor,
    labels: &[usize],
    mode: Mode,
) -> Result<(Real, Vec<Option<Vec<Real>>>, crate::nets::Pass)> {
    let mut pass = model.pass(x, mode, None, None)?;
    let loss = pass.graph.softmax_cross_entropy(pass.logits, labels)?;
    let value = pass.graph.value(loss).data()[0];
    pass.graph.backward(loss)?;
    let grads = model
        .params()
        .iter()
        .zip(&pass.param_vars)
        .map(|(p, &v)| {
            if p.role.is_trainable() {
                pass.graph.grad(v).map(|g| g.to_vec())
            } else {
                None
            }
        })
        .collect();
    Ok((value, grads, pass))
}

/// Trains `model` in place on `train`, evaluating on `test` when given.
pub fn train(model: &mut Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::BatchTooSmall(train.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let total = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut stepper = Stepper::new(model, cfg);
    let mut log = TrainLog {
        beta_sites: model.betas().into_iter().map(|(s, _)| s).collect(),
        ..TrainLog::default()
    };
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            if step >= total {
                break;
            }
            let aug = cfg.augment.then(|| Dataset::random_augmentation(chunk.len(), &mut rng));
            let (x, labels) = train.batch_augmented(chunk, aug.as_deref())?;
            let (loss, grads, pass) = loss_and_grads(model, &x, &labels, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss,
                });
            }
            model.update_running_stats(&pass, cfg.bn_momentum);
            drop(pass);
            stepper.step(model, &grads, cfg.lr_at(step, total));
            step += 1;
            sum += loss;
            n += 1;
            log.step_losses.push(loss);
        }
        let last = epoch == cfg.epochs || step >= total;
        let acc = match test {
            Some(t) if cfg.eval_every_epoch || last => Some(evaluate(model, t, 100)?),
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            step,
            loss: if n > 0 { sum / n as Real } else { Real::NAN },
            top1: acc.map(|a| a.top1),
            top5: acc.map(|a| a.top5),
            betas: model.betas().into_iter().map(|(_, b)| b).collect(),
        });
        if step >= total {
            break 'epochs;
        }
    }
    Ok(log)
}

/// Copy of `model` with every LAB depthwise kernel fake-quantized to
/// `bits`-bit symmetric integers.
pub fn quantize_lab(model: &Model, bits: u32) -> Result<Model> {
    let mut q = model.clone();
    for layer in model.lab_layers() {
        let p = model.lab_params(layer).expect("LAB layer");
        q.set_lab_params(layer, &quantize_lab_weights(&p, bits)?)?;
    }
    Ok(q)
}
