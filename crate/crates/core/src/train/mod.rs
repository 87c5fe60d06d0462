//! Training: Adam, multi-step learning-rate decay, stratified k-fold
//! cross-validation and per-task hyper-parameter defaults.

mod adam;
mod harness;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::Variant;

pub use adam::{AdamState, WeightDecay, BETA1, BETA2, EPS};
pub use harness::{
    batches, evaluate, evaluate_predictions, fold_seed, predict, train_fold, train_task,
    EpochRecord, Evaluation, FoldOutcome, FoldResult, MeshBank, TaskReport,
};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BATCH: usize = 64;
pub const DEFAULT_FOLDS: usize = 10;

/// Per-task (epochs, weight decay, γ) for one variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDefaults {
    pub epochs: usize,
    pub weight_decay: f64,
    pub gamma: f64,
}

/// Reference hyper-parameters. Custom variants use the fit column.
pub fn task_defaults(task: Task, variant: Variant) -> TaskDefaults {
    let col = match variant {
        Variant::Slim => 0,
        Variant::Fit | Variant::Custom => 1,
        Variant::Wide => 2,
    };
    let (epochs, wd, gamma): ([usize; 3], [f64; 3], [f64; 3]) = match task {
        Task::SixCategory => ([35, 35, 40], [0.135, 0.180, 0.170], [0.5, 0.5, 0.6]),
        Task::Exemplar72 => ([80, 35, 35], [0.016, 0.030, 0.035], [0.7, 0.7, 0.7]),
        Task::FaceVsObject => ([70, 70, 10], [0.600, 0.750, 0.750], [0.6, 0.6, 0.6]),
        Task::FaceExemplars => ([70, 70, 10], [0.100, 0.400, 0.400], [0.6, 0.6, 0.6]),
        Task::ObjectExemplars => ([70, 70, 10], [0.150, 0.350, 0.375], [0.6, 0.6, 0.6]),
    };
    TaskDefaults {
        epochs: epochs[col],
        weight_decay: wd[col],
        gamma: gamma[col],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    pub gamma: f64,
    /// First epoch (1-based) trained at the decayed rate.
    pub milestone_start: usize,
    pub milestone_step: usize,
    pub folds: usize,
    pub seed: u64,
    /// Folds trained concurrently.
    pub jobs: usize,
    /// Train only the first n folds of each subject (smoke runs).
    pub max_folds: Option<usize>,
}

impl TrainConfig {
    pub fn new(task: Task, variant: Variant, seed: u64) -> Self {
        let d = task_defaults(task, variant);
        Self {
            task,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            epochs: d.epochs,
            weight_decay: d.weight_decay,
            weight_decay_mode: WeightDecay::Coupled,
            gamma: d.gamma,
            milestone_start: 15,
            milestone_step: 5,
            folds: DEFAULT_FOLDS,
            seed,
            jobs: 1,
            max_folds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2 for BatchNorm, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.milestone_start == 0 || self.milestone_step == 0 {
            return bad("milestone start and step must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.max_folds == Some(0) {
            return bad("max folds must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: `lr·γ^k`, k the number of milestones
/// `start, start+step, …` not after `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = if epoch < cfg.milestone_start {
        0
    } else {
        (epoch - cfg.milestone_start) / cfg.milestone_step + 1
    };
    cfg.lr * cfg.gamma.powi(k as i32)
}

/// Splits indices `0..labels.len()` into `k` folds. Each class is shuffled
/// and dealt round-robin; the starting fold carries over between classes so
/// total fold sizes stay balanced too. Folds come back sorted.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "stratified k-fold needs k >= 2, got {k}"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < k {
            log::warn!("class {c} has {} samples for {k} folds", members.len());
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
