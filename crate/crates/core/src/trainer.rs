//! Adam, single training steps, and the early-stopping training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, EmbeddingCorpus};
use crate::error::{Error, Result};
use crate::eval::retrieval_accuracy;
use crate::losses::{compose_objective, LossBreakdown, LossConfig};
use crate::model::{disentangle_forward, ModelParams};
use crate::numerics::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// An evaluation counts as an improvement only if it beats the best value by more than this.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;
/// Reports keep at most this many loss-curve points.
pub const MAX_CURVE_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// Objective value on the validation pairs; lower is better.
    #[default]
    TotalLoss,
    /// Forward retrieval accuracy of semantic embeddings; higher is better.
    SemanticRetrievalAcc,
}

impl ValidationMetric {
    pub fn maximize(self) -> bool {
        matches!(self, ValidationMetric::SemanticRetrievalAcc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub seed: u64,
    pub validation_metric: ValidationMetric,
    /// Steps between validations; `None` means one pass over every training corpus.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 512,
            max_iterations: 10_000,
            patience: 10,
            seed: 0,
            validation_metric: ValidationMetric::TotalLoss,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Gradients are checked for
/// NaN/Inf before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if params.num_params() != grads.num_params() || params.num_params() != state.m.num_params() {
        return Err(Error::dim(
            "adam",
            format!("{} parameters", params.num_params()),
            format!("{} gradients", grads.num_params()),
        ));
    }
    if let Some(path) = grads.find_non_finite() {
        return Err(Error::NonFinite {
            path: format!("gradient {path}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let grad_tensors = grads.tensors();
    for (((p, m), v), (_, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(grad_tensors)
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    if let Some(path) = params.find_non_finite() {
        return Err(Error::NonFinite { path });
    }
    Ok(())
}

/// Forward pass, objective, and one Adam update. Returns the breakdown
/// measured before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    e_s: &Matrix,
    e_t: &Matrix,
    labels: &[usize],
    lr: f64,
    loss_config: &LossConfig,
) -> Result<LossBreakdown> {
    let batch = disentangle_forward(params, e_s, e_t)?;
    let (breakdown, grads) = compose_objective(loss_config, params, &batch, labels)?;
    adam_step(params, &grads, state, lr)?;
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub validation_metric: ValidationMetric,
    pub best_validation_value: f64,
    pub best_iteration: usize,
    pub stop_reason: StopReason,
    /// Pre-update breakdown per step, thinned to at most [`MAX_CURVE_POINTS`].
    pub loss_curve: Vec<CurvePoint>,
    /// `(iteration, value)` for every validation, starting at iteration 0.
    pub validation_curve: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Keep every `k`-th point so at most `max` remain, always including the last.
fn thin<T: Clone>(points: &[T], max: usize) -> Vec<T> {
    if points.len() <= max {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max - 1);
    let mut out: Vec<T> = points.iter().step_by(stride).cloned().collect();
    if !(points.len() - 1).is_multiple_of(stride) {
        out.push(points[points.len() - 1].clone());
    }
    out
}

/// The configured validation metric on a held-out corpus.
pub fn validation_value(
    metric: ValidationMetric,
    params: &ModelParams,
    val: &EmbeddingCorpus,
    loss_config: &LossConfig,
) -> Result<f64> {
    let batch = disentangle_forward(params, &val.source, &val.target)?;
    match metric {
        ValidationMetric::TotalLoss => {
            let labels = val.labels(val.len());
            let (breakdown, _) = compose_objective(loss_config, params, &batch, &labels)?;
            Ok(breakdown.total)
        }
        ValidationMetric::SemanticRetrievalAcc => Ok(retrieval_accuracy(&batch.s_m, &batch.t_m)?.0),
    }
}

/// Round-robin batch source over several corpora, reshuffling each corpus
/// when it runs out.
struct BatchSchedule<'a> {
    corpora: &'a [EmbeddingCorpus],
    batch_size: usize,
    seed: u64,
    epochs: Vec<u64>,
    queues: Vec<std::vec::IntoIter<Vec<usize>>>,
    next: usize,
}

impl<'a> BatchSchedule<'a> {
    fn new(corpora: &'a [EmbeddingCorpus], batch_size: usize, seed: u64) -> Result<Self> {
        let mut queues = Vec::with_capacity(corpora.len());
        for (k, c) in corpora.iter().enumerate() {
            let batches = batch_iter(c.len(), batch_size, Self::corpus_seed(seed, k), 0)?;
            if batches.is_empty() {
                return Err(Error::EmptyCorpus(format!(
                    "training corpus {k} has {} pairs; need at least 2",
                    c.len()
                )));
            }
            queues.push(batches.into_iter());
        }
        Ok(Self {
            corpora,
            batch_size,
            seed,
            epochs: vec![0; corpora.len()],
            queues,
            next: 0,
        })
    }

    fn corpus_seed(seed: u64, k: usize) -> u64 {
        seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn steps_per_epoch(&self) -> usize {
        self.corpora
            .iter()
            .map(|c| c.len() / self.batch_size + usize::from(c.len() % self.batch_size >= 2))
            .sum()
    }

    fn next_batch(&mut self) -> Result<(usize, Vec<usize>)> {
        let k = self.next;
        self.next = (self.next + 1) % self.corpora.len();
        if let Some(b) = self.queues[k].next() {
            return Ok((k, b));
        }
        self.epochs[k] += 1;
        let mut fresh = batch_iter(
            self.corpora[k].len(),
            self.batch_size,
            Self::corpus_seed(self.seed, k),
            self.epochs[k],
        )?
        .into_iter();
        let b = fresh.next().expect("non-empty corpus yields a batch");
        self.queues[k] = fresh;
        Ok((k, b))
    }
}

/// Train from `init` and return the parameters with the best validation
/// value together with the run report.
pub fn fit(
    train: &[EmbeddingCorpus],
    val: &EmbeddingCorpus,
    config: &TrainConfig,
    loss_config: &LossConfig,
    init: ModelParams,
) -> Result<(ModelParams, TrainReport)> {
    if val.is_empty() {
        return Err(Error::EmptyCorpus("validation corpus".into()));
    }
    let metric = config.validation_metric;
    fit_with_validator(train, config, loss_config, init, |p| {
        validation_value(metric, p, val, loss_config)
    })
}

/// [`fit`] with a caller-supplied validation function. Whether larger or
/// smaller values are better follows `config.validation_metric`.
pub fn fit_with_validator(
    train: &[EmbeddingCorpus],
    config: &TrainConfig,
    loss_config: &LossConfig,
    init: ModelParams,
    mut validate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    loss_config.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus("no training corpora".into()));
    }
    for (k, c) in train.iter().enumerate() {
        if c.dim() != init.dim() {
            return Err(Error::dim(
                "training corpus",
                format!("corpus {k} d={}", c.dim()),
                format!("model d={}", init.dim()),
            ));
        }
    }
    let mut schedule = BatchSchedule::new(train, config.batch_size, config.seed)?;
    let eval_every = config.eval_every.unwrap_or_else(|| schedule.steps_per_epoch().max(1));
    let maximize = config.validation_metric.maximize();
    let better = |new: f64, best: f64| {
        if maximize {
            new > best + IMPROVEMENT_THRESHOLD
        } else {
            new < best - IMPROVEMENT_THRESHOLD
        }
    };

    let mut params = init;
    let mut state = AdamState::new(&params);
    let first = checked(validate(&params)?, 0)?;
    let mut best_value = first;
    let mut best_params = params.clone();
    let mut best_iteration = 0;
    let mut validation_curve = vec![(0, first)];
    let mut stale = 0;
    let mut curve = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations_run = 0;

    for iteration in 1..=config.max_iterations {
        let (k, idx) = schedule.next_batch()?;
        let corpus = &train[k];
        let e_s = corpus.source.select_rows(&idx);
        let e_t = corpus.target.select_rows(&idx);
        let labels = corpus.labels(idx.len());
        let breakdown = train_step(
            &mut params,
            &mut state,
            &e_s,
            &e_t,
            &labels,
            config.learning_rate,
            loss_config,
        )?;
        curve.push(CurvePoint {
            iteration: iteration - 1,
            breakdown,
        });
        iterations_run = iteration;

        if iteration % eval_every == 0 {
            let value = checked(validate(&params)?, iteration)?;
            validation_curve.push((iteration, value));
            if better(value, best_value) {
                best_value = value;
                best_params = params.clone();
                best_iteration = iteration;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stop_reason = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    Ok((
        best_params,
        TrainReport {
            iterations_run,
            validation_metric: config.validation_metric,
            best_validation_value: best_value,
            best_iteration,
            stop_reason,
            loss_curve: thin(&curve, MAX_CURVE_POINTS),
            validation_curve,
        },
    ))
}

fn checked(value: f64, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            path: format!("validation metric at iteration {iteration}"),
        })
    }
}
