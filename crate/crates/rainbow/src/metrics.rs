//! Accuracy bookkeeping across task boundaries and the summary metrics
//! derived from it — final accuracy, forgetting, and intransigence — plus
//! the jointly trained reference model intransigence compares against.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{cosine_lr, one_hot, ClassifierState, TrainConfig};
use crate::rng;
use crate::stream::EvalSets;

/// Lower-triangular record of evaluation accuracy (percent): `row t` holds
/// the accuracy on each task's evaluation set after training task t, for
/// tasks 0..=t, plus the accuracy on the global evaluation set at the same
/// boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    expected_tasks: usize,
    rows: Vec<Vec<f64>>,
    global: Vec<f64>,
}

fn check_percent(value: f64, what: &str) -> Result<()> {
    if !(0.0..=100.0).contains(&value) {
        return Err(Error::Metric(format!("{what} {value} is outside [0, 100]")));
    }
    Ok(())
}

impl AccuracyMatrix {
    pub fn new(expected_tasks: usize) -> AccuracyMatrix {
        AccuracyMatrix { expected_tasks, rows: Vec::new(), global: Vec::new() }
    }

    /// Appends the boundary row after training task `rows.len()`. The row
    /// must hold one percentage per task trained so far.
    pub fn push_row(&mut self, row: Vec<f64>, global: f64) -> Result<()> {
        if self.rows.len() == self.expected_tasks {
            return Err(Error::Metric(format!(
                "matrix already holds all {} task rows",
                self.expected_tasks
            )));
        }
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Metric(format!(
                "row {} must hold {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        for &v in &row {
            check_percent(v, "accuracy")?;
        }
        check_percent(global, "global accuracy")?;
        self.rows.push(row);
        self.global.push(global);
        Ok(())
    }

    /// Tasks recorded so far.
    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.expected_tasks && self.expected_tasks > 0
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::Metric(format!(
                "matrix holds {} of {} task rows",
                self.rows.len(),
                self.expected_tasks
            )));
        }
        Ok(())
    }

    /// Accuracy on task `evaluated`'s set after training task `trained`.
    pub fn get(&self, trained: usize, evaluated: usize) -> f64 {
        self.rows[trained][evaluated]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Global-set accuracy after each task boundary.
    pub fn global(&self) -> &[f64] {
        &self.global
    }
}

/// Global accuracy after the final task.
pub fn last_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.require_complete()?;
    Ok(*matrix.global.last().expect("complete matrix has rows"))
}

/// Per-task forgetting: the drop from each task's best historical accuracy
/// (before the final boundary) to its final accuracy. Negative when the
/// final model improved on a task.
pub fn forgetting_per_task(matrix: &AccuracyMatrix) -> Result<Vec<f64>> {
    matrix.require_complete()?;
    let t = matrix.task_count();
    if t < 2 {
        return Err(Error::Metric("forgetting needs at least two tasks".into()));
    }
    let last = &matrix.rows[t - 1];
    Ok((0..t - 1)
        .map(|j| {
            let best = (j..t - 1)
                .map(|l| matrix.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect())
}

/// Mean forgetting over all but the final task.
pub fn forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    let per = forgetting_per_task(matrix)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-task intransigence: the jointly trained reference accuracy minus the
/// accuracy right after the task was learned. Negative when continual
/// training beat the reference on that task.
pub fn intransigence_per_task(matrix: &AccuracyMatrix, upper: &[f64]) -> Result<Vec<f64>> {
    matrix.require_complete()?;
    let t = matrix.task_count();
    if upper.len() != t {
        return Err(Error::Metric(format!(
            "reference accuracies cover {} tasks, matrix has {}",
            upper.len(),
            t
        )));
    }
    Ok((0..t).map(|k| upper[k] - matrix.rows[k][k]).collect())
}

/// Mean intransigence over all tasks.
pub fn intransigence(matrix: &AccuracyMatrix, upper: &[f64]) -> Result<f64> {
    let per = intransigence_per_task(matrix, upper)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// The three summary metrics with their per-task breakdowns.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub final_accuracy: f64,
    pub forgetting: f64,
    pub intransigence: f64,
    pub forgetting_per_task: Vec<f64>,
    pub intransigence_per_task: Vec<f64>,
}

impl MetricsReport {
    /// Computes all metrics from a complete matrix and the per-task
    /// reference accuracies. A single-task run has nothing to forget;
    /// its forgetting is reported as zero.
    pub fn compute(matrix: &AccuracyMatrix, upper: &[f64]) -> Result<MetricsReport> {
        let final_accuracy = last_accuracy(matrix)?;
        let (f_per, f) = if matrix.task_count() >= 2 {
            (forgetting_per_task(matrix)?, forgetting(matrix)?)
        } else {
            (Vec::new(), 0.0)
        };
        let i_per = intransigence_per_task(matrix, upper)?;
        let i = intransigence(matrix, upper)?;
        Ok(MetricsReport {
            final_accuracy,
            forgetting: f,
            intransigence: i,
            forgetting_per_task: f_per,
            intransigence_per_task: i_per,
        })
    }
}

/// Inputs for the jointly trained reference model.
pub struct UpperBoundSpec<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub eval: &'a EvalSets,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Checkpoint reused across runs when present; `None` disables caching.
    pub cache_path: Option<&'a Path>,
}

fn eval_percent(state: &ClassifierState, test: &Dataset, ids: &[u32]) -> Result<f64> {
    let frac = state
        .evaluate(ids.iter().map(|&id| {
            let s = test.get(id);
            (s.features.as_slice(), s.label)
        }))?;
    Ok(100.0 * frac)
}

/// Trains one model on the whole train split at once (no stream, no
/// memory) and reports its accuracy on every per-task evaluation set, in
/// percent. The trained model is cached as a checkpoint and reloaded on
/// later calls with the same path.
pub fn upper_bound(spec: &UpperBoundSpec) -> Result<Vec<f64>> {
    let input_dim = spec.train.shape.len();
    let classes = spec.train.class_count;
    let state = match spec.cache_path {
        Some(path) if path.exists() => {
            let loaded = ClassifierState::load(path)?;
            if loaded.input_dim() == input_dim
                && loaded.hidden_dim() == spec.hidden_dim
                && loaded.class_count() == classes
            {
                loaded
            } else {
                train_joint(spec, input_dim, classes)?
            }
        }
        _ => train_joint(spec, input_dim, classes)?,
    };
    spec.eval
        .per_task
        .iter()
        .map(|ids| eval_percent(&state, spec.test, ids))
        .collect()
}

fn train_joint(spec: &UpperBoundSpec, input_dim: usize, classes: usize) -> Result<ClassifierState> {
    let init_seed = rng::subseed(spec.seed, rng::domain::UPPER_INIT, 0);
    let mut state = ClassifierState::init(input_dim, spec.hidden_dim, classes, init_seed)?;
    let n = spec.train.len();
    if n == 0 {
        return Err(Error::Data("train split is empty".into()));
    }
    let cfg = TrainConfig::with_total_steps(spec.epochs * n.div_ceil(16));
    cfg.validate()?;
    let mut ids: Vec<u32> = spec.train.samples.iter().map(|s| s.id).collect();
    let mut step = 0usize;
    for epoch in 0..spec.epochs {
        let mut r = rng::keyed(spec.seed, rng::domain::UPPER_EPOCH, epoch as u64);
        ids.shuffle(&mut r);
        for chunk in ids.chunks(cfg.batch_size) {
            let rows: Vec<&[f32]> =
                chunk.iter().map(|&id| spec.train.get(id).features.as_slice()).collect();
            let labels: Vec<Vec<f32>> =
                chunk.iter().map(|&id| one_hot(spec.train.get(id).label, classes)).collect();
            let (_, grads) = state.loss_and_grad(&rows, &labels)?;
            state.sgd_step(&grads, cosine_lr(step, &cfg), cfg.momentum)?;
            step += 1;
        }
    }
    if let Some(path) = spec.cache_path {
        state.save(path)?;
    }
    Ok(state)
}
