//! Per-seed execution: realize the dataset, train the task sequence, attach
//! the forgetting analysis, and wrap everything in a persistable bundle.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use cil_core::checkpoint::{save_checkpoint, Checkpoint};
use cil_core::data::{
    generate_prototypes, load_csv, sample_dataset, split_tasks, ClassPrototypeSet, LabeledDataset,
    TaskSequence,
};
use cil_core::metrics::{
    aggregate_similarity, avg_incremental_accuracy, correlation_from_profile, forgetting_profile,
    similarity_vectors_f1, Aggregation, CorrelationReport, ForgettingProfile,
};
use cil_core::model::init_model;
use cil_core::replay::{update_buffer, ReplayBuffer};
use cil_core::train::{continue_sequence, RunRecord, SequenceConfig};
use cil_core::{Error, Mat, Result};

use crate::config::ExperimentConfig;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Concrete train/test splits, plus the prototype set when synthetic.
pub struct RealizedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub prototypes: Option<ClassPrototypeSet>,
    pub n_classes: usize,
}

/// Materializes the configured data source. Synthetic data is a pure
/// function of its settings, so every caller sees identical bytes.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<RealizedData> {
    if let Some(spec) = &cfg.data.synthetic {
        let protos =
            generate_prototypes(spec.n_classes, spec.dim, &spec.collisions, spec.data_seed)?;
        let (train, test) = sample_dataset(
            &protos,
            spec.n_train_per_class,
            spec.n_test_per_class,
            spec.noise_sigma,
            spec.data_seed,
        )?;
        return Ok(RealizedData {
            train,
            test,
            prototypes: Some(protos),
            n_classes: spec.n_classes,
        });
    }
    let paths = cfg
        .data
        .csv
        .as_ref()
        .ok_or_else(|| Error::Config("no data source configured".into()))?;
    let train_csv = load_csv(&paths.train)?;
    let test_csv = load_csv(&paths.test)?;
    if train_csv.data.dim() != test_csv.data.dim() {
        return Err(Error::Config(format!(
            "train dim {} != test dim {}",
            train_csv.data.dim(),
            test_csv.data.dim()
        )));
    }
    if cfg.model.input_dim != train_csv.data.dim() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match data dim {}",
            cfg.model.input_dim,
            train_csv.data.dim()
        )));
    }
    // Both files re-index labels independently; rejoin the test split onto
    // the train vocabulary so dense ids agree.
    let map = train_csv.label_map();
    let labels = test_csv
        .data
        .labels
        .iter()
        .map(|&dense| {
            let orig = test_csv.original_labels[dense];
            map.get(&orig).copied().ok_or_else(|| {
                Error::Config(format!("test label {orig} does not occur in the train set"))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let n_classes = train_csv.original_labels.len();
    let test = LabeledDataset::new(test_csv.data.x.clone(), labels)?;
    Ok(RealizedData {
        train: train_csv.data,
        test,
        prototypes: None,
        n_classes,
    })
}

pub fn build_sequence(cfg: &ExperimentConfig, data: &RealizedData) -> Result<TaskSequence> {
    split_tasks(
        &data.train,
        &data.test,
        data.n_classes,
        cfg.split.base_size,
        cfg.split.increment,
        cfg.split.shuffle_seed,
    )
}

fn sequence_config(cfg: &ExperimentConfig, seed: u64) -> SequenceConfig {
    SequenceConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        exemplars_per_class: cfg.exemplars_per_class,
        normalize_herding: cfg.normalize_herding,
        root_seed: seed,
    }
}

/// Forgetting analysis attached to one run, both aggregations side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleAnalysis {
    pub profile_max: ForgettingProfile,
    pub profile_mean: ForgettingProfile,
    /// None when the correlation is undefined on this run (fewer than three
    /// scatter points, or zero variance on either axis).
    pub correlation_max: Option<CorrelationReport>,
    pub correlation_mean: Option<CorrelationReport>,
}

/// Wall-clock only; never part of canonical comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
}

/// Everything one run produced, self-describing via the echoed config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub format_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub record: RunRecord,
    pub avg_incremental_accuracy: f64,
    pub analysis: Option<BundleAnalysis>,
    pub timings: Timings,
}

#[derive(Serialize)]
struct CanonicalBundle<'a> {
    format_version: u32,
    seed: u64,
    config: &'a ExperimentConfig,
    record: &'a RunRecord,
    avg_incremental_accuracy: f64,
    analysis: &'a Option<BundleAnalysis>,
}

#[derive(Deserialize)]
struct BundleHeader {
    format_version: u32,
}

impl ResultBundle {
    /// The measurement-determined part: two runs of the same config and seed
    /// must agree on this string byte for byte.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CanonicalBundle {
            format_version: self.format_version,
            seed: self.seed,
            config: &self.config,
            record: &self.record,
            avg_incremental_accuracy: self.avg_incremental_accuracy,
            analysis: &self.analysis,
        })?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<ResultBundle> {
        let header: BundleHeader = serde_json::from_str(text)?;
        if header.format_version > BUNDLE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: header.format_version,
                supported: BUNDLE_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }
}

fn restrict(m: &BTreeMap<usize, f64>, keys: &[usize]) -> BTreeMap<usize, f64> {
    keys.iter().filter_map(|k| m.get(k).map(|&v| (*k, v))).collect()
}

/// Rebuilds the forgetting profiles and correlations for a finished record.
///
/// Single-task runs have no later classes to score, hence no analysis.
pub fn analyze_record(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    record: &RunRecord,
) -> Result<Option<BundleAnalysis>> {
    if record.outcomes.len() < 2 {
        return Ok(None);
    }
    let f1 = record
        .checkpoints
        .first()
        .ok_or_else(|| Error::Config("record carries no model snapshots".into()))?;
    let base = &record.outcomes[0].classes;
    // Introduction order equals head-column order.
    let old: Vec<(usize, usize)> = base.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut later: Vec<(usize, Mat)> = Vec::new();
    for task in seq.tasks.iter().take(record.outcomes.len()).skip(1) {
        for &c in &task.classes {
            let rows = task.train.indices_of(c);
            later.push((c, task.train.x.select_rows(&rows)));
        }
    }
    let sims = similarity_vectors_f1(f1, &later, &old)?;
    let base_acc = restrict(
        record
            .base_accuracies()
            .ok_or_else(|| Error::Config("record has no outcomes".into()))?,
        base,
    );
    let final_acc = restrict(
        record
            .final_accuracies()
            .ok_or_else(|| Error::Config("record has no outcomes".into()))?,
        base,
    );
    let mut profiles = Vec::with_capacity(2);
    for agg in [Aggregation::Max, Aggregation::Mean] {
        let level = aggregate_similarity(&sims, agg);
        let profile = forgetting_profile(&base_acc, &final_acc, &level, agg)?;
        let corr = if profile.scatter().len() < 3 {
            None
        } else {
            match correlation_from_profile(
                &profile,
                cfg.analysis.permutations,
                cfg.analysis.correlation_seed,
            ) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            }
        };
        profiles.push((profile, corr));
    }
    let (profile_mean, correlation_mean) = profiles.pop().expect("two aggregations");
    let (profile_max, correlation_max) = profiles.pop().expect("two aggregations");
    Ok(Some(BundleAnalysis {
        profile_max,
        profile_mean,
        correlation_max,
        correlation_mean,
    }))
}

/// One full run for one replicate seed.
pub fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<ResultBundle> {
    run_one_checkpointed(cfg, seed, None)
}

/// As `run_one`, optionally persisting a resumable checkpoint after every
/// task into `checkpoint_dir` as `checkpoint-task-<t>.json`.
pub fn run_one_checkpointed(
    cfg: &ExperimentConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<ResultBundle> {
    cfg.validate()?;
    let start = Instant::now();
    let data = build_dataset(cfg)?;
    let seq = build_sequence(cfg, &data)?;
    let model = init_model(&cfg.model, seed)?;
    let buffer = ReplayBuffer::new(cfg.exemplars_per_class);
    let record = RunRecord {
        class_order: seq.class_order.clone(),
        base_size: seq.base_size,
        increment: seq.increment,
        root_seed: seed,
        outcomes: Vec::new(),
        checkpoints: Vec::new(),
    };
    let record = continue_sequence(&seq, &sequence_config(cfg, seed), model, buffer, record)?;
    if let Some(dir) = checkpoint_dir {
        write_task_checkpoints(cfg, &seq, &record, dir)?;
    }
    finish_bundle(cfg, &seq, record, seed, start)
}

fn finish_bundle(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    record: RunRecord,
    seed: u64,
    start: Instant,
) -> Result<ResultBundle> {
    let analysis = analyze_record(cfg, seq, &record)?;
    let avg = avg_incremental_accuracy(&record.overall_accuracies())?;
    Ok(ResultBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        seed,
        config: cfg.clone(),
        record,
        avg_incremental_accuracy: avg,
        analysis,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Reconstructs the state of a finished run after its first `tasks_done`
/// tasks as a resumable checkpoint.
///
/// The model is already in the record; the buffer is a pure function of
/// those models and the task data, so re-running the buffer updates
/// reproduces it without retraining.
pub fn task_checkpoint(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    record: &RunRecord,
    tasks_done: usize,
) -> Result<Checkpoint> {
    if tasks_done == 0 || tasks_done > record.outcomes.len() {
        return Err(Error::Config(format!(
            "cannot checkpoint after {tasks_done} of {} tasks",
            record.outcomes.len()
        )));
    }
    let column_of: BTreeMap<usize, usize> = seq
        .class_order
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut buffer = ReplayBuffer::new(cfg.exemplars_per_class);
    for (t, task) in seq.tasks.iter().enumerate().take(tasks_done) {
        let labels = task
            .train
            .labels
            .iter()
            .map(|c| column_of[c])
            .collect::<Vec<usize>>();
        let relabeled = LabeledDataset::new(task.train.x.clone(), labels)?;
        update_buffer(
            &mut buffer,
            &relabeled,
            record.checkpoints[t].params(),
            cfg.normalize_herding,
        )?;
    }
    let mut partial = record.clone();
    partial.outcomes.truncate(tasks_done);
    partial.checkpoints.truncate(tasks_done);
    Ok(Checkpoint::new(
        record.checkpoints[tasks_done - 1].params().clone(),
        buffer,
        partial,
    ))
}

fn write_task_checkpoints(
    cfg: &ExperimentConfig,
    seq: &TaskSequence,
    record: &RunRecord,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 1..=record.outcomes.len() {
        let cp = task_checkpoint(cfg, seq, record, t)?;
        save_checkpoint(&dir.join(format!("checkpoint-task-{t}.json")), &cp)?;
    }
    Ok(())
}

/// Finishes an interrupted run from its checkpointed state, producing the
/// same bundle the uninterrupted run would have.
pub fn resume_from(cfg: &ExperimentConfig, cp: Checkpoint) -> Result<ResultBundle> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cp.record.root_seed;
    let data = build_dataset(cfg)?;
    let seq = build_sequence(cfg, &data)?;
    if cp.record.class_order != seq.class_order {
        return Err(Error::Config(
            "checkpoint class order does not match the configured split".into(),
        ));
    }
    let record = continue_sequence(
        &seq,
        &sequence_config(cfg, seed),
        cp.model,
        cp.buffer,
        cp.record,
    )?;
    finish_bundle(cfg, &seq, record, seed, start)
}

/// As [`resume_from`], loading the checkpoint from disk.
pub fn resume_one(cfg: &ExperimentConfig, path: &Path) -> Result<ResultBundle> {
    resume_from(cfg, cil_core::checkpoint::load_checkpoint(path)?)
}
