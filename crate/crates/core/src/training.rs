//! Multi-stage training with reliable-label reuse.
//!
//! Stage 1 trains on cross-entropy with a label embedding built from the
//! training labels alone. Every later stage takes the previous stage's
//! prediction, keeps validation/test nodes whose top-class probability
//! exceeds the threshold, seeds label propagation with their soft labels and
//! adds a confidence-weighted KL term pulling the new prediction towards them.

use std::collections::HashMap;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::loss::{ce_loss_from_logits, check_temperature, kl_loss_from_logits, total_loss};
use crate::model::optim::{Optimizer, OptimizerConfig};
use crate::model::{backward, derive_seed, forward, predict, Mode, ModelConfig, ModelParams, Prediction};
use crate::propagation::{LabelState, PropagatedStack};
use crate::real::Real;

/// Rows evaluated per eval-mode forward.
pub const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage_epochs: Vec<usize>,
    /// Reliability threshold ε on the top-class probability.
    pub threshold: f64,
    pub temperature: f64,
    /// Weight γ of the distillation term.
    pub gamma: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop a stage after this many epochs without a validation improvement;
    /// zero disables.
    pub patience: usize,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage_epochs.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        check_temperature(self.temperature)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be non-negative", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_epochs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Validation ∪ test, sorted: the nodes eligible for reliable labels.
    pub fn unlabeled_candidates(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.valid.iter().chain(&self.test).copied().collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Nodes whose previous-stage prediction is confident enough to reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSet<T> {
    pub nodes: Vec<usize>,
    /// Top-class probability of each node.
    pub alpha: Vec<f64>,
    /// Previous-stage probabilities, one row per node in `nodes`.
    pub soft_labels: Matrix<T>,
}

impl<T: Real> ReliableSet<T> {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            nodes: Vec::new(),
            alpha: Vec::new(),
            soft_labels: Matrix::zeros(0, num_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Index and value of the row maximum; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> (usize, T) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Candidates whose top-class probability strictly exceeds `threshold`.
pub fn select_reliable<T: Real>(p_prev: &Matrix<T>, threshold: f64, candidates: &[usize]) -> ReliableSet<T> {
    let mut nodes = Vec::new();
    let mut alpha = Vec::new();
    for &i in candidates {
        let (_, top) = argmax(p_prev.row(i));
        if top.as_f64() > threshold {
            nodes.push(i);
            alpha.push(top.as_f64());
        }
    }
    let soft_labels = p_prev.gather_rows(&nodes);
    ReliableSet {
        nodes,
        alpha,
        soft_labels,
    }
}

/// Fraction of `nodes` whose argmax prediction equals their label.
pub fn evaluate<T: Real>(prediction: &Prediction<T>, labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Logic("accuracy over an empty split".into()));
    }
    let mut correct = 0usize;
    for &i in nodes {
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Input(format!("node {i} has no label")))?;
        if argmax(prediction.probabilities.row(i)).0 == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / nodes.len() as f64)
}

fn evaluate_or_nan<T: Real>(prediction: &Prediction<T>, labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        Ok(f64::NAN)
    } else {
        evaluate(prediction, labels, nodes)
    }
}

/// Everything a stage reads; none of it is modified by training.
#[derive(Debug, Clone, Copy)]
pub struct StageInputs<'a, T> {
    pub stack: &'a PropagatedStack<T>,
    /// Required for smoothing attention only.
    pub x_inf: Option<&'a Matrix<T>>,
    pub adjacency: &'a NormalizedAdjacency<T>,
    pub labels: &'a [Option<usize>],
    pub splits: &'a Splits,
    pub num_classes: usize,
    pub k_label: usize,
}

impl<T: Real> StageInputs<'_, T> {
    pub fn train_labels(&self) -> Result<Vec<(usize, usize)>> {
        self.splits
            .train
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .flatten()
                    .map(|c| (i, c))
                    .ok_or_else(|| Error::Input(format!("training node {i} has no label")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub stage: usize,
    /// Parameters of the best-validation epoch.
    pub params: ModelParams<T>,
    /// Eval-mode prediction of `params` at the plan's temperature.
    pub prediction: Prediction<T>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub label_state: LabelState<T>,
    pub reliable: ReliableSet<T>,
}

impl<T> StageOutcome<T> {
    pub fn best_metrics(&self) -> &EpochMetrics {
        self.metrics
            .iter()
            .find(|m| m.epoch == self.best_epoch)
            .expect("best epoch is one of the recorded epochs")
    }
}

/// A single stage's training problem, fully resolved.
#[derive(Debug, Clone)]
pub struct StageProblem<T> {
    pub stage: usize,
    pub seed: u64,
    pub epochs: usize,
    pub gamma: f64,
    pub label_state: LabelState<T>,
    pub reliable: ReliableSet<T>,
}

/// Seed of stage `stage` (1-based) under root seed `root`.
pub fn stage_seed(root: u64, stage: usize) -> u64 {
    derive_seed(root, stage as u64)
}

/// Builds the label state and reliable set for `stage` and trains it.
pub fn run_stage<T: Real>(
    stage: usize,
    plan: &StagePlan,
    model: &ModelConfig,
    inputs: &StageInputs<'_, T>,
    prev: Option<&Prediction<T>>,
) -> Result<StageOutcome<T>> {
    plan.validate()?;
    if stage == 0 || stage > plan.num_stages() {
        return Err(Error::Logic(format!(
            "stage {stage} outside 1..={}",
            plan.num_stages()
        )));
    }
    let reliable = match (stage, prev) {
        (1, None) => ReliableSet::empty(inputs.num_classes),
        (1, Some(_)) => return Err(Error::Logic("stage 1 takes no previous prediction".into())),
        (_, None) => {
            return Err(Error::Logic(format!(
                "stage {stage} needs the previous stage's prediction"
            )))
        }
        (_, Some(p)) => select_reliable(
            &p.probabilities,
            plan.threshold,
            &inputs.splits.unlabeled_candidates(),
        ),
    };
    let train_labels = inputs.train_labels()?;
    let label_state = LabelState::build(
        inputs.adjacency,
        &train_labels,
        (stage > 1).then_some(&reliable),
        inputs.num_classes,
        inputs.k_label,
    )?;
    info!(
        "stage {stage}: {} training nodes, {} reliable nodes",
        train_labels.len(),
        reliable.len()
    );
    let problem = StageProblem {
        stage,
        seed: stage_seed(plan.seed, stage),
        epochs: plan.stage_epochs[stage - 1],
        gamma: if stage > 1 { plan.gamma } else { 0.0 },
        label_state,
        reliable,
    };
    fit_stage(problem, plan, model, inputs)
}

/// Trains one stage from a fresh initialization.
pub fn fit_stage<T: Real>(
    problem: StageProblem<T>,
    plan: &StagePlan,
    model: &ModelConfig,
    inputs: &StageInputs<'_, T>,
) -> Result<StageOutcome<T>> {
    plan.validate()?;
    let stack = inputs.stack;
    if model.hops != stack.k_max() || model.feature_width != stack.feature_width() {
        return Err(Error::Config(format!(
            "model expects K={} and d={}, stack has K={} and d={}",
            model.hops,
            model.feature_width,
            stack.k_max(),
            stack.feature_width()
        )));
    }
    let n = stack.num_nodes();
    let StageProblem {
        stage,
        seed,
        epochs,
        gamma,
        label_state,
        reliable,
    } = problem;

    let mut params = ModelParams::<T>::init(model.clone(), derive_seed(seed, 0))?;
    let mut optimizer = Optimizer::new(plan.optimizer)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));

    let labels = inputs.labels;
    let train_labels: HashMap<usize, usize> = inputs.train_labels()?.into_iter().collect();
    let reliable_index: HashMap<usize, usize> =
        reliable.nodes.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut pool: Vec<usize> = inputs.splits.train.clone();
    pool.extend(&reliable.nodes);
    pool.sort_unstable();
    pool.dedup();
    if pool.is_empty() {
        return Err(Error::Input("no training nodes".into()));
    }

    let y_prop = &label_state.y_propagated;
    let mut metrics = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 1..=epochs {
        pool.shuffle(&mut batch_rng);
        let (mut loss_sum, mut ce_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in pool.chunks(plan.batch_size) {
            let steps = stack.gather(batch);
            let x_inf = inputs.x_inf.map(|m| m.gather_rows(batch));
            let y = y_prop.gather_rows(batch);
            let mode = Mode::Train {
                seed: dropout_rng.gen(),
            };
            let (pred, tape) = forward(&params, &steps, x_inf.as_ref(), &y, mode, plan.temperature)
                .map_err(|e| divergence(stage, epoch, e))?;

            let targets: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .filter_map(|(r, i)| train_labels.get(i).map(|&c| (r, c)))
                .collect();
            let mut grad = Matrix::zeros(batch.len(), inputs.num_classes);
            let mut ce = 0.0;
            if !targets.is_empty() {
                let out = ce_loss_from_logits(&pred.logits, &targets)?;
                ce = out.value;
                grad.add_assign(&out.grad_logits);
            }

            let mut kl = 0.0;
            let entries: Vec<(usize, f64)> = batch
                .iter()
                .enumerate()
                .filter_map(|(r, i)| reliable_index.get(i).map(|&k| (r, reliable.alpha[k])))
                .collect();
            if !entries.is_empty() {
                let mut p_prev = Matrix::zeros(batch.len(), inputs.num_classes);
                for (r, i) in batch.iter().enumerate() {
                    if let Some(&k) = reliable_index.get(i) {
                        p_prev.row_mut(r).copy_from_slice(reliable.soft_labels.row(k));
                    }
                }
                let out = kl_loss_from_logits(&p_prev, &pred.logits, &entries, plan.temperature)?;
                kl = out.value;
                if gamma > 0.0 {
                    let mut g = out.grad_logits;
                    g.scale(T::lit(gamma));
                    grad.add_assign(&g);
                }
            }

            let loss = total_loss(ce, kl, gamma);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage,
                    epoch,
                    detail: format!("loss is {loss}"),
                });
            }
            let grads = backward(&params, &tape, &grad)?;
            optimizer
                .step(&mut params, &grads)
                .map_err(|e| divergence(stage, epoch, e))?;
            loss_sum += loss;
            ce_sum += ce;
            kl_sum += kl;
            batches += 1;
        }

        let pred = predict(&params, stack.steps(), inputs.x_inf, y_prop, 1.0, EVAL_CHUNK)
            .map_err(|e| divergence(stage, epoch, e))?;
        let splits = inputs.splits;
        let m = EpochMetrics {
            stage,
            epoch,
            train_loss: loss_sum / batches as f64,
            ce: ce_sum / batches as f64,
            kl: kl_sum / batches as f64,
            train_acc: evaluate_or_nan(&pred, labels, &splits.train)?,
            valid_acc: evaluate_or_nan(&pred, labels, &splits.valid)?,
            test_acc: evaluate_or_nan(&pred, labels, &splits.test)?,
        };
        metrics.push(m);

        // Without a validation split the last epoch wins.
        let score = if m.valid_acc.is_nan() { epoch as f64 } else { m.valid_acc };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if plan.patience > 0 && epoch - best_epoch >= plan.patience {
            info!("stage {stage}: stopping at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    if metrics.is_empty() {
        return Err(Error::Config(format!("stage {stage} has zero epochs")));
    }
    let prediction = predict(
        &best_params,
        stack.steps(),
        inputs.x_inf,
        y_prop,
        plan.temperature,
        EVAL_CHUNK,
    )?;
    debug_assert_eq!(prediction.logits.rows(), n);
    Ok(StageOutcome {
        stage,
        params: best_params,
        prediction,
        metrics,
        best_epoch,
        label_state,
        reliable,
    })
}

fn divergence(stage: usize, epoch: usize, err: Error) -> Error {
    match err {
        Error::Numeric(detail) => Error::Divergence {
            stage,
            epoch,
            detail: format!("non-finite value in {detail}"),
        },
        other => other,
    }
}

/// Runs every stage of the plan in order, calling `on_stage` after each.
pub fn run_stages<T: Real>(
    plan: &StagePlan,
    model: &ModelConfig,
    inputs: &StageInputs<'_, T>,
    mut on_stage: impl FnMut(&StageOutcome<T>) -> Result<()>,
) -> Result<Vec<StageOutcome<T>>> {
    plan.validate()?;
    let mut outcomes: Vec<StageOutcome<T>> = Vec::with_capacity(plan.num_stages());
    for stage in 1..=plan.num_stages() {
        let prev = outcomes.last().map(|o| &o.prediction);
        let outcome = run_stage(stage, plan, model, inputs, prev)?;
        on_stage(&outcome)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
