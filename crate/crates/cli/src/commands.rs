//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eegct::data::{apply_task, save_tensor, synth_generate, SynthConfig, Task, TaskData, TrialSet};
use eegct::diversity::{
    pairwise_head_cka, read_samples_csv, summarize, write_samples_csv, CkaSampleSet, HeadPair,
};
use eegct::model::{Model, Variant, VariantConfig, CT_MODULES};
use eegct::montage::{ElectrodeMontage, MeshProjector};
use eegct::tensor::{Scalar, Tensor};
use eegct::train::{
    evaluate_predictions, fold_seed, stratified_kfold, train_task, MeshBank, TaskReport,
    TrainConfig, WeightDecay,
};
use serde::{Deserialize, Serialize};

use crate::{
    ArchArgs, CkaArgs, Cli, Command, Common, DataArgs, EvalArgs, ModelArgs, Precision, ProjectArgs,
    ReportArgs, SynthArgs, TrainArgs,
};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

/// Everything needed to reload a training run.
#[derive(Serialize, Deserialize)]
struct RunConfig {
    train: TrainConfig,
    variant: VariantConfig,
    precision: Precision,
    data: PathBuf,
    montage: Option<PathBuf>,
}

pub fn dispatch(cli: &Cli) -> Res<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => synth(c, a),
        Command::Project(a) => project(c, a),
        Command::Train(a) => match c.precision {
            Precision::F32 => train::<f32>(c, a),
            Precision::F64 => train::<f64>(c, a),
        },
        Command::Eval(a) => eval(c, a),
        Command::Cka(a) => cka(c, a),
        Command::Report(a) => report(c, a),
        Command::DatasetSummary(a) => {
            let set = TrialSet::load(&a.data)?;
            println!("{}", serde_json::to_string_pretty(&set.summary())?);
            Ok(())
        }
        Command::Arch(a) => arch(a),
    }
}

fn out_path(c: &Common, p: &Path) -> Res<PathBuf> {
    fs::create_dir_all(&c.out_dir)?;
    Ok(c.out_dir.join(p))
}

fn montage_sidecar(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_os_string();
    s.push(".montage.csv");
    PathBuf::from(s)
}

fn load_montage(data: &Path, montage: Option<&Path>, channels: usize) -> Res<ElectrodeMontage> {
    let sidecar = montage_sidecar(data);
    let m = match montage {
        Some(p) => ElectrodeMontage::from_csv(p)?,
        None if sidecar.exists() => ElectrodeMontage::from_csv(&sidecar)?,
        None => ElectrodeMontage::synthetic_cap(channels)?,
    };
    if m.len() != channels {
        return Err(format!(
            "montage has {} electrodes, trials have {channels} channels",
            m.len()
        )
        .into());
    }
    Ok(m)
}

fn load_data(a: &DataArgs) -> Res<(TrialSet, ElectrodeMontage)> {
    let set = TrialSet::load(&a.data)?;
    let montage = load_montage(&a.data, a.montage.as_deref(), set.channels())?;
    Ok((set, montage))
}

/// Named variant, optionally with a different head count.
fn resolve_variant(m: &ModelArgs, classes: usize, frames: usize) -> Res<(Variant, VariantConfig)> {
    let base: Variant = m.variant.parse()?;
    let cfg = VariantConfig::named(base, classes, frames)?;
    let cfg = match m.heads {
        Some(h) => cfg.with_heads(h)?,
        None => cfg,
    };
    Ok((base, cfg))
}

fn synth(c: &Common, a: &SynthArgs) -> Res<()> {
    let montage = ElectrodeMontage::synthetic_cap(a.channels)?;
    let cfg = SynthConfig {
        n_per_exemplar: a.per_exemplar,
        snr: a.snr,
        seed: c.seed,
        subjects: a.subjects,
        frames: a.frames,
        ..SynthConfig::default()
    };
    let set = synth_generate(&montage, &cfg)?;
    let path = out_path(c, &a.out)?;
    set.save(&path)?;
    montage.write_csv(&montage_sidecar(&path))?;
    println!("wrote {} trials to {}", set.len(), path.display());
    Ok(())
}

fn project(c: &Common, a: &ProjectArgs) -> Res<()> {
    let (set, montage) = load_data(&a.data)?;
    let projector = MeshProjector::new(&montage, a.grid)?;
    let bank = MeshBank::<f32>::build(&projector, &set, None)?;
    let m = projector.mesh_size();
    let mut data = Vec::with_capacity(bank.len() * m * m * set.frames());
    for i in 0..bank.len() {
        data.extend_from_slice(bank.item(i));
    }
    let path = out_path(c, &a.out)?;
    save_tensor(
        &path,
        &Tensor::new(&[bank.len(), m * m, set.frames()], data)?,
    )?;
    println!(
        "wrote {} meshes of {m}x{m}x{} to {}",
        bank.len(),
        set.frames(),
        path.display()
    );
    Ok(())
}

fn train<S: Scalar>(c: &Common, a: &TrainArgs) -> Res<()> {
    let task: Task = a.task.parse()?;
    let frames = if a.dry_run {
        32
    } else {
        TrialSet::load(&a.data.data)?.frames()
    };
    let (base, variant) = resolve_variant(&a.model, task.num_classes(), frames)?;
    let mut cfg = TrainConfig::new(task, base, c.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.lr = a.lr;
    cfg.batch_size = a.batch;
    cfg.folds = a.folds;
    cfg.max_folds = a.max_folds;
    cfg.jobs = a.jobs;
    if a.decoupled_weight_decay {
        cfg.weight_decay_mode = WeightDecay::Decoupled;
    }
    cfg.validate()?;
    let run = RunConfig {
        train: cfg,
        variant,
        precision: c.precision,
        data: fs::canonicalize(&a.data.data).unwrap_or_else(|_| a.data.data.clone()),
        montage: a.data.montage.clone(),
    };
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&run)?);
        return Ok(());
    }
    let (set, montage) = load_data(&a.data)?;
    let data = apply_task(&set, task)?;
    let projector = MeshProjector::new(&montage, run.variant.mesh + 2)?;
    fs::create_dir_all(&c.out_dir)?;
    fs::write(
        c.out_dir.join("config.json"),
        serde_json::to_vec_pretty(&run)?,
    )?;
    let report = train_task::<S>(
        &data,
        &projector,
        &run.variant,
        &run.train,
        Some(&c.out_dir),
    )?;
    println!(
        "{} {}: accuracy {:.4} ± {:.4} over {} subject(s), {} fold(s)",
        report.task,
        report.variant,
        report.mean,
        report.sd,
        report.subject_means.len(),
        report.results.len()
    );
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn checkpoint_path(run_dir: &Path, subject: usize, fold: usize) -> PathBuf {
    run_dir
        .join("checkpoints")
        .join(format!("subject{subject}_fold{fold}.ctck"))
}

struct Loaded {
    run: RunConfig,
    data: TaskData,
    projector: MeshProjector,
}

fn load_run(run_dir: &Path, data_override: Option<&Path>) -> Res<Loaded> {
    let run: RunConfig = read_json(&run_dir.join("config.json"))?;
    let path = data_override.unwrap_or(&run.data);
    let set = TrialSet::load(path)?;
    let montage = load_montage(path, run.montage.as_deref(), set.channels())?;
    let data = apply_task(&set, run.train.task)?;
    let projector = MeshProjector::new(&montage, run.variant.mesh + 2)?;
    Ok(Loaded {
        run,
        data,
        projector,
    })
}

#[derive(Serialize)]
struct FoldEval {
    subject: usize,
    fold: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct EvalReport {
    task: String,
    variant: String,
    folds: Vec<FoldEval>,
    accuracy: f64,
    confusion: Vec<Vec<f64>>,
}

fn eval(c: &Common, a: &EvalArgs) -> Res<()> {
    let l = load_run(&a.run_dir, a.data.as_deref())?;
    let summary: TaskReport = read_json(&a.run_dir.join("summary.json"))?;
    let (mut preds, mut truth, mut folds) = (Vec::new(), Vec::new(), Vec::new());
    for (subject, held_out) in &summary.folds {
        for (fold, positions) in held_out.iter().enumerate() {
            let model = Model::<f64>::load_checkpoint(
                &l.run.variant,
                &checkpoint_path(&a.run_dir, *subject, fold),
            )?;
            let bank = MeshBank::<f64>::build(&l.projector, &l.data.set, Some(positions))?;
            let labels: Vec<usize> = positions.iter().map(|&p| l.data.labels[p]).collect();
            let rows: Vec<usize> = (0..positions.len()).collect();
            let logits = eegct::train::predict(&model, &bank, &rows, l.run.train.batch_size)?;
            let k = l.run.variant.num_classes;
            let p: Vec<usize> = logits
                .data()
                .chunks_exact(k)
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > r[best] { i } else { best })
                })
                .collect();
            let e = evaluate_predictions(&p, &labels, k)?;
            folds.push(FoldEval {
                subject: *subject,
                fold,
                accuracy: e.accuracy,
            });
            preds.extend(p);
            truth.extend(labels);
        }
    }
    let pooled = evaluate_predictions(&preds, &truth, l.run.variant.num_classes)?;
    let report = EvalReport {
        task: summary.task,
        variant: summary.variant,
        folds,
        accuracy: pooled.accuracy,
        confusion: pooled.confusion,
    };
    let path = out_path(c, Path::new("evaluation.json"))?;
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "held-out accuracy {:.4} over {} fold(s)",
        report.accuracy,
        report.folds.len()
    );
    Ok(())
}

fn cka(c: &Common, a: &CkaArgs) -> Res<()> {
    match c.precision {
        Precision::F32 => cka_with::<f32>(c, a),
        Precision::F64 => cka_with::<f64>(c, a),
    }
}

fn cka_with<S: Scalar>(c: &Common, a: &CkaArgs) -> Res<()> {
    let (variant, data, projector, seed, folds_by_subject, run_dir) = match &a.run_dir {
        Some(dir) => {
            let l = load_run(dir, a.data.as_deref())?;
            let summary: TaskReport = read_json(&dir.join("summary.json"))?;
            (
                l.run.variant,
                l.data,
                l.projector,
                l.run.train.seed,
                summary.folds,
                Some(dir.clone()),
            )
        }
        None => {
            let path = a.data.as_ref().ok_or("cka needs --data or --run-dir")?;
            let task: Task = a.task.as_deref().unwrap_or("6cat").parse()?;
            let set = TrialSet::load(path)?;
            let montage = load_montage(path, a.montage.as_deref(), set.channels())?;
            let model_args = ModelArgs {
                variant: a.variant.clone().unwrap_or_else(|| "slim".into()),
                heads: a.heads,
            };
            let (_, variant) = resolve_variant(&model_args, task.num_classes(), set.frames())?;
            let data = apply_task(&set, task)?;
            let projector = MeshProjector::new(&montage, variant.mesh + 2)?;
            let mut folds = Vec::new();
            for subject in data.set.subjects() {
                let positions = data.subject_indices(subject);
                let labels: Vec<usize> = positions.iter().map(|&p| data.labels[p]).collect();
                let split =
                    stratified_kfold(&labels, a.folds, fold_seed(c.seed, subject, a.folds))?;
                folds.push((
                    subject,
                    split
                        .iter()
                        .map(|f| f.iter().map(|&r| positions[r]).collect())
                        .collect(),
                ));
            }
            log::warn!("no --run-dir given, analyzing untrained models");
            (variant, data, projector, c.seed, folds, None)
        }
    };
    let mut sets = Vec::new();
    for (subject, held_out) in &folds_by_subject {
        let run = held_out.len().min(a.max_folds.unwrap_or(usize::MAX));
        for (fold, positions) in held_out.iter().enumerate().take(run) {
            let model: Model<S> = match &run_dir {
                Some(dir) => {
                    Model::load_checkpoint(&variant, &checkpoint_path(dir, *subject, fold))?
                }
                None => Model::build(&variant, fold_seed(seed, *subject, fold))?,
            };
            let bank = MeshBank::<S>::build(&projector, &data.set, Some(positions))?;
            let rows: Vec<usize> = (0..positions.len()).collect();
            for ct in 1..=CT_MODULES {
                let pairs: Vec<HeadPair> = pairwise_head_cka(
                    &model,
                    &bank,
                    &rows,
                    ct,
                    a.cap,
                    fold_seed(seed, *subject, fold),
                    a.batch,
                )?;
                sets.push(CkaSampleSet {
                    task: data.task.to_string(),
                    variant: variant.variant.to_string(),
                    subject: *subject,
                    fold,
                    ct_index: ct,
                    pairs,
                });
            }
        }
    }
    write_samples_csv(&out_path(c, Path::new("cka_samples.csv"))?, &sets)?;
    let summary = summarize(&sets)?;
    fs::write(
        out_path(c, Path::new("cka_summary.json"))?,
        serde_json::to_vec_pretty(&summary)?,
    )?;
    for s in &summary {
        println!(
            "{} {} CT{}: mean CKA {:.4} over {} pairs",
            s.task, s.variant, s.ct_index, s.mean, s.samples
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AccuracyRow {
    task: String,
    variant: String,
    subjects: usize,
    folds: usize,
    mean: f64,
    sd: f64,
}

fn report(c: &Common, a: &ReportArgs) -> Res<()> {
    let mut acc = Vec::new();
    let mut cka_sets = Vec::new();
    for dir in &a.inputs {
        let summary = dir.join("summary.json");
        let samples = dir.join("cka_samples.csv");
        if !summary.exists() && !samples.exists() {
            return Err(format!(
                "{} has neither summary.json nor cka_samples.csv",
                dir.display()
            )
            .into());
        }
        if summary.exists() {
            let r: TaskReport = read_json(&summary)?;
            acc.push(AccuracyRow {
                task: r.task,
                variant: r.variant,
                subjects: r.subject_means.len(),
                folds: r.results.len(),
                mean: r.mean,
                sd: r.sd,
            });
        }
        if samples.exists() {
            for row in read_samples_csv(&samples)? {
                cka_sets.push(CkaSampleSet {
                    task: row.task,
                    variant: row.variant,
                    subject: row.subject,
                    fold: row.fold,
                    ct_index: row.ct_index,
                    pairs: vec![HeadPair {
                        head_i: row.head_i,
                        head_j: row.head_j,
                        cka: row.cka,
                    }],
                });
            }
        }
    }
    if !acc.is_empty() {
        let mut w = csv::Writer::from_path(out_path(c, Path::new("accuracy_table.csv"))?)?;
        for r in &acc {
            w.serialize(r)?;
        }
        w.flush()?;
        let cells: BTreeMap<(String, String), String> = acc
            .iter()
            .map(|r| {
                (
                    (r.task.clone(), r.variant.clone()),
                    format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.sd),
                )
            })
            .collect();
        print_table("Accuracy (%)", &cells);
    }
    if !cka_sets.is_empty() {
        let summary = summarize(&cka_sets)?;
        let mut w = csv::Writer::from_path(out_path(c, Path::new("cka_table.csv"))?)?;
        for s in &summary {
            w.serialize(s)?;
        }
        w.flush()?;
        let cells: BTreeMap<(String, String), String> = summary
            .iter()
            .map(|s| {
                (
                    (format!("{} CT{}", s.task, s.ct_index), s.variant.clone()),
                    format!("{:.3}", s.mean),
                )
            })
            .collect();
        print_table("Mean inter-head CKA", &cells);
    }
    Ok(())
}

/// Markdown table with one row per task and one column per variant.
fn print_table(title: &str, cells: &BTreeMap<(String, String), String>) {
    let order = |v: &str| {
        ["slim", "fit", "wide"]
            .iter()
            .position(|x| *x == v)
            .unwrap_or(3)
    };
    let mut variants: Vec<&String> = cells.keys().map(|(_, v)| v).collect();
    variants.sort_by_key(|v| (order(v), v.to_string()));
    variants.dedup();
    let mut rows: Vec<&String> = cells.keys().map(|(t, _)| t).collect();
    rows.dedup();
    println!("{title}\n");
    println!(
        "| task | {} |",
        variants
            .iter()
            .map(|v| v.as_str())
            .collect::<Vec<_>>()
            .join(" | ")
    );
    println!("|---|{}", "---|".repeat(variants.len()));
    for t in rows {
        let line: Vec<&str> = variants
            .iter()
            .map(|v| {
                cells
                    .get(&(t.clone(), (*v).clone()))
                    .map_or("", String::as_str)
            })
            .collect();
        println!("| {t} | {} |", line.join(" | "));
    }
    println!();
}

fn arch(a: &ArchArgs) -> Res<()> {
    let (_, cfg) = resolve_variant(&a.model, a.classes, a.frames)?;
    let model = Model::<f32>::build(&cfg, 0)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&model.architecture_summary())?
    );
    Ok(())
}
