//! Fold training, evaluation and the per-task cross-validation driver.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at_epoch, stratified_kfold, AdamState, TrainConfig};
use crate::data::{TaskData, TrialSet};
use crate::error::{Error, Result};
use crate::model::{Model, Session, VariantConfig};
use crate::montage::MeshProjector;
use crate::tensor::{DropoutKey, Mode, Scalar, Tape, Tensor};

/// Seed of one fold's model, shuffling and dropout streams.
pub fn fold_seed(seed: u64, subject: usize, fold: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 32) | fold as u64);
    rng.next_u64()
}

/// Cropped mesh sequences for a list of trials, stored contiguously as
/// `M × M × T` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshBank<S> {
    mesh: usize,
    frames: usize,
    data: Vec<S>,
}

impl<S: Scalar> MeshBank<S> {
    /// Projects `set` trials at `indices` (all trials if `None`).
    pub fn build(
        projector: &MeshProjector,
        set: &TrialSet,
        indices: Option<&[usize]>,
    ) -> Result<Self> {
        if set.channels() != projector.channels() {
            return Err(Error::InvalidArgument(format!(
                "trials have {} channels, montage has {}",
                set.channels(),
                projector.channels()
            )));
        }
        let all: Vec<usize>;
        let indices = match indices {
            Some(i) => i,
            None => {
                all = (0..set.len()).collect();
                &all
            }
        };
        let (mesh, frames) = (projector.mesh_size(), set.frames());
        let mut data = Vec::with_capacity(indices.len() * mesh * mesh * frames);
        for &i in indices {
            let trial: Vec<S> = set.trial(i).iter().map(|&v| S::of(v as f64)).collect();
            data.extend(projector.project_trial(&trial, frames)?);
        }
        Ok(Self { mesh, frames, data })
    }

    /// Wraps an existing `N×1×M×M×T` tensor.
    pub fn from_tensor(meshes: Tensor<S>) -> Result<Self> {
        let s = meshes.shape();
        if s.len() != 5 || s[1] != 1 || s[2] != s[3] || s[0] == 0 {
            return Err(crate::error::shape_err!(
                "mesh bank needs N×1×M×M×T, got {:?}",
                s
            ));
        }
        let (mesh, frames) = (s[2], s[4]);
        Ok(Self {
            mesh,
            frames,
            data: meshes.into_data(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.block()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mesh(&self) -> usize {
        self.mesh
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn block(&self) -> usize {
        self.mesh * self.mesh * self.frames
    }

    pub fn item(&self, i: usize) -> &[S] {
        let b = self.block();
        &self.data[i * b..(i + 1) * b]
    }

    /// `B×1×M×M×T` input for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(rows.len() * self.block());
        for &r in rows {
            data.extend_from_slice(self.item(r));
        }
        Tensor::new(&[rows.len(), 1, self.mesh, self.mesh, self.frames], data)
            .expect("block sizes agree")
    }
}

/// Consecutive chunks of `order`; a trailing chunk of one joins the previous.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// counts[true][predicted]
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized counts; rows of absent classes stay zero.
    pub confusion: Vec<Vec<f64>>,
}

pub fn evaluate_predictions(
    predicted: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::InvalidArgument(format!(
                "class id outside 0..{classes}"
            )));
        }
        counts[l][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| counts[c][c]).sum();
    let confusion = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 })
                .collect()
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        counts,
        confusion,
    })
}

/// Eval-mode logits, `rows.len() × K`.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    bank: &MeshBank<S>,
    rows: &[usize],
    batch_size: usize,
) -> Result<Tensor<S>> {
    let k = model.config().num_classes;
    let mut data = Vec::with_capacity(rows.len() * k);
    for chunk in rows.chunks(batch_size.max(1)) {
        data.extend_from_slice(model.logits(&bank.batch(chunk))?.data());
    }
    Tensor::new(&[rows.len(), k], data)
}

/// Accuracy and confusion of `model` on bank rows; ties go to the lowest class.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    bank: &MeshBank<S>,
    rows: &[usize],
    labels: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let k = model.config().num_classes;
    let logits = predict(model, bank, rows, batch_size)?;
    let predicted: Vec<usize> = logits.data().chunks_exact(k).map(argmax).collect();
    let truth: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    evaluate_predictions(&predicted, &truth, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub subject: usize,
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome<S> {
    pub subject: usize,
    pub fold: usize,
    pub seed: u64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    /// Every row that entered a training batch, sorted and deduplicated.
    pub touched: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub evaluation: Evaluation,
    pub model: Model<S>,
}

/// One optimizer step on `rows`; returns (mean loss, correct count).
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    adam: &mut AdamState<S>,
    bank: &MeshBank<S>,
    labels: &[usize],
    rows: &[usize],
    lr: f64,
    cfg: &TrainConfig,
    key: DropoutKey,
) -> Result<(f64, usize)> {
    let targets: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let mut tape = Tape::new();
    let x = tape.constant(bank.batch(rows));
    let mut s = Session::new(model, &mut tape, Mode::Train, true, key);
    let trace = s.forward(x)?;
    let loss = s.tape_mut().cross_entropy(trace.logits, &targets)?;
    let vars = s.vars().clone();
    let stats = s.into_running_stats();
    tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss_value}")));
    }
    let k = model.config().num_classes;
    let correct = tape
        .value(trace.logits)
        .data()
        .chunks_exact(k)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let grads: IndexMap<String, Vec<S>> = vars
        .iter()
        .map(|(name, &v)| {
            let g = tape
                .grad(v)
                .map(<[S]>::to_vec)
                .unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()]);
            (name.clone(), g)
        })
        .collect();
    model.set_running_stats(stats)?;
    adam.step(
        model.params_mut(),
        &grads,
        lr,
        cfg.weight_decay,
        cfg.weight_decay_mode,
    )?;
    Ok((loss_value, correct))
}

/// Trains a fresh model on `train_rows` of `bank` and evaluates it on
/// `val_rows` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_fold<S: Scalar>(
    bank: &MeshBank<S>,
    labels: &[usize],
    train_rows: &[usize],
    val_rows: &[usize],
    variant: &VariantConfig,
    cfg: &TrainConfig,
    subject: usize,
    fold: usize,
) -> Result<FoldOutcome<S>> {
    cfg.validate()?;
    if train_rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} has {} training trials, need at least 2",
            train_rows.len()
        )));
    }
    let seed = fold_seed(cfg.seed, subject, fold);
    let mut model = Model::<S>::build(variant, seed)?;
    let mut adam = AdamState::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(u64::MAX);
    let mut order = train_rows.to_vec();
    let mut touched = vec![false; bank.len()];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for rows in batches(&order, cfg.batch_size) {
            for &r in &rows {
                touched[r] = true;
            }
            let key = DropoutKey {
                seed,
                layer: 0,
                step,
            };
            let (loss, c) = train_step(&mut model, &mut adam, bank, labels, &rows, lr, cfg, key)?;
            loss_sum += loss * rows.len() as f64;
            correct += c;
            step += 1;
        }
        let val_acc = if val_rows.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, bank, val_rows, labels, cfg.batch_size)?.accuracy
        };
        let record = EpochRecord {
            subject,
            fold,
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
        };
        log::info!(
            "subject {subject} fold {fold} epoch {epoch}: lr {lr:.3e} loss {:.4} train {:.3} val {:.3}",
            record.train_loss,
            record.train_acc,
            record.val_acc
        );
        epochs.push(record);
    }
    let evaluation = if val_rows.is_empty() {
        evaluate_predictions(&[0], &[0], 1)?
    } else {
        evaluate(&model, bank, val_rows, labels, cfg.batch_size)?
    };
    Ok(FoldOutcome {
        subject,
        fold,
        seed,
        train_rows: train_rows.to_vec(),
        val_rows: val_rows.to_vec(),
        touched: (0..bank.len()).filter(|&r| touched[r]).collect(),
        epochs,
        evaluation,
        model,
    })
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub task: String,
    pub variant: String,
    pub subject: usize,
    pub fold: usize,
    pub accuracy: f64,
}

/// Cross-validation outcome of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub variant: String,
    pub results: Vec<FoldResult>,
    /// Mean fold accuracy per subject, in subject order.
    pub subject_means: Vec<(usize, f64)>,
    /// Mean and sample SD of the subject means.
    pub mean: f64,
    pub sd: f64,
    /// Mean and sample SD over all folds.
    pub fold_mean: f64,
    pub fold_sd: f64,
    /// Row-normalized confusion summed over all held-out folds.
    pub confusion: Vec<Vec<f64>>,
    /// Held-out task-set positions per subject and fold.
    pub folds: Vec<(usize, Vec<Vec<usize>>)>,
    /// Every epoch record, ordered by subject, fold, epoch.
    pub epochs: Vec<EpochRecord>,
}

/// Mean and sample (n−1) standard deviation; SD is 0 for a single value.
pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_compatible(
    data: &TaskData,
    projector: &MeshProjector,
    variant: &VariantConfig,
) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if variant.num_classes != data.num_classes() {
        return bad(format!(
            "model has {} classes, task {} has {}",
            variant.num_classes,
            data.task,
            data.num_classes()
        ));
    }
    if variant.frames != data.set.frames() {
        return bad(format!(
            "model expects T={}, trials have {}",
            variant.frames,
            data.set.frames()
        ));
    }
    if variant.mesh != projector.mesh_size() {
        return bad(format!(
            "model expects {}x{} meshes, projector makes {}x{}",
            variant.mesh,
            variant.mesh,
            projector.mesh_size(),
            projector.mesh_size()
        ));
    }
    for c in 0..data.num_classes() {
        if !data.labels.contains(&c) {
            return Err(Error::Empty(format!(
                "class {c} of task {} has no trials",
                data.task
            )));
        }
    }
    Ok(())
}

/// Stratified k-fold cross-validation per subject, one fresh model per fold.
/// With `out_dir`, writes `run_log.jsonl`, `results.csv`, `summary.json` and
/// `checkpoints/subject{S}_fold{F}.ctck`.
pub fn train_task<S: Scalar>(
    data: &TaskData,
    projector: &MeshProjector,
    variant: &VariantConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TaskReport> {
    cfg.validate()?;
    if cfg.task != data.task {
        return Err(Error::InvalidArgument(format!(
            "config is for task {}, data for {}",
            cfg.task, data.task
        )));
    }
    check_compatible(data, projector, variant)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let (task, vname) = (data.task.to_string(), variant.variant.to_string());
    let mut results = Vec::new();
    let mut subject_means = Vec::new();
    let mut epochs = Vec::new();
    let mut all_folds = Vec::new();
    let k = data.num_classes();
    let mut counts = vec![vec![0usize; k]; k];
    for subject in data.set.subjects() {
        let positions = data.subject_indices(subject);
        let labels: Vec<usize> = positions.iter().map(|&p| data.labels[p]).collect();
        let bank = MeshBank::<S>::build(projector, &data.set, Some(&positions))?;
        // fold index `folds` is never a real fold, so its stream is free
        let folds = stratified_kfold(&labels, cfg.folds, fold_seed(cfg.seed, subject, cfg.folds))?;
        let run = folds.len().min(cfg.max_folds.unwrap_or(usize::MAX));
        let job = |f: usize| -> Result<FoldOutcome<S>> {
            let train: Vec<usize> = (0..folds.len())
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].clone())
                .collect();
            let outcome = train_fold(&bank, &labels, &train, &folds[f], variant, cfg, subject, f)?;
            if let Some(dir) = out_dir {
                let path = dir
                    .join("checkpoints")
                    .join(format!("subject{subject}_fold{f}.ctck"));
                outcome.model.save_checkpoint(&path)?;
            }
            Ok(outcome)
        };
        let outcomes: Vec<Result<FoldOutcome<S>>> = if cfg.jobs > 1 {
            use rayon::prelude::*;
            pool.install(|| (0..run).into_par_iter().map(job).collect())
        } else {
            (0..run).map(job).collect()
        };
        let mut accs = Vec::new();
        for outcome in outcomes {
            let o = outcome?;
            for (row, c) in o.evaluation.counts.iter().zip(&mut counts) {
                for (a, b) in row.iter().zip(c.iter_mut()) {
                    *b += a;
                }
            }
            accs.push(o.evaluation.accuracy);
            results.push(FoldResult {
                task: task.clone(),
                variant: vname.clone(),
                subject,
                fold: o.fold,
                accuracy: o.evaluation.accuracy,
            });
            epochs.extend(o.epochs);
        }
        subject_means.push((subject, mean_sd(&accs).0));
        let held_out: Vec<Vec<usize>> = folds[..run]
            .iter()
            .map(|f| f.iter().map(|&r| positions[r]).collect())
            .collect();
        all_folds.push((subject, held_out));
    }
    let (mean, sd) = mean_sd(&subject_means.iter().map(|s| s.1).collect::<Vec<_>>());
    let (fold_mean, fold_sd) = mean_sd(&results.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let confusion = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 })
                .collect()
        })
        .collect();
    let report = TaskReport {
        task,
        variant: vname,
        results,
        subject_means,
        mean,
        sd,
        fold_mean,
        fold_sd,
        confusion,
        folds: all_folds,
        epochs,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

impl TaskReport {
    /// Writes `run_log.jsonl`, `results.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let log_path = dir.join("run_log.jsonl");
        let mut log = std::io::BufWriter::new(
            fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
        );
        for r in &self.epochs {
            serde_json::to_writer(&mut log, r)?;
            writeln!(log).map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let csv_path = dir.join("results.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for r in &self.results {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&summary, e))
    }
}
