//! Replay-based incremental trainer.
//!
//! [`run_sequence`] drives the whole protocol: per task it snapshots the
//! previous model, scores each incoming class against the old ones, picks
//! conflict sets, trains on the joint pool of new data and buffer exemplars,
//! refreshes the buffer, and evaluates on every class seen so far.
//! [`train_task`] is one task's SGD loop; the per-batch loss is
//! `L_ce + lambda * L_distill + eta * L_disentangle`, and either coefficient
//! at zero skips its term entirely, so a zero-coefficient run is bitwise
//! identical to one that never had the term.
//!
//! Determinism: every random choice draws from a stream derived from
//! `(root_seed, purpose, indices)`, never from shared mutable state, so a
//! run can be reproduced or resumed from any task boundary without storing
//! generator state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clad::{
    build_conflict_map, build_frozen_cache, clad_loss_literal, clad_loss_text,
    forgetting_prediction, ConflictMap, FrozenConflictCache, Measurement, RdPairing,
    SimilarityVector, Strategy,
};
use crate::data::{LabeledDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::metrics::{overall_accuracy, per_class_accuracy};
use crate::model::{
    init_model, snapshot, ForwardTrace, ModelConfig, ModelParams, ModelSnapshot,
};
use crate::num::{sgd_step, softmax_cross_entropy, Rng};
use crate::replay::{joint_batches, update_buffer, ReplayBuffer};
use crate::Mat;

/// Optimization and loss-composition settings for one task's training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplied into the learning rate at each milestone.
    pub lr_decay_factor: f64,
    /// Epoch fractions in (0, 1), strictly increasing.
    pub lr_milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the logit-distillation term; 0 disables it.
    pub lambda: f64,
    pub distill_temperature: f64,
    /// Weight of the disentanglement term; 0 disables conflict machinery.
    pub eta: f64,
    /// Fraction of old classes marked as conflicts per new class.
    pub proportion: f64,
    pub strategy: Strategy,
    pub measurement: Measurement,
    pub rd_pairing: RdPairing,
    /// Detach the exemplar side of the online disentanglement term.
    pub stop_exemplar_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 60,
            batch_size: 128,
            lr: 0.1,
            lr_decay_factor: 0.1,
            lr_milestones: vec![0.5, 0.75],
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 0.0,
            distill_temperature: 2.0,
            eta: 2.0,
            proportion: 0.1,
            strategy: Strategy::Top,
            measurement: Measurement::Logits,
            rd_pairing: RdPairing::Text,
            stop_exemplar_grad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs_per_task == 0 {
            return fail("epochs_per_task must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size {} must be ≥ 2", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        for w in self.lr_milestones.windows(2) {
            if w[1] <= w[0] {
                return fail("lr_milestones must be strictly increasing".into());
            }
        }
        if self.lr_milestones.iter().any(|&m| !(0.0..1.0).contains(&m) || m == 0.0) {
            return fail("lr_milestones must lie in (0, 1)".into());
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} must be ≥ 0", self.weight_decay));
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda {} must be ≥ 0", self.lambda));
        }
        if self.distill_temperature <= 0.0 {
            return fail(format!(
                "distill_temperature {} must be positive",
                self.distill_temperature
            ));
        }
        if self.eta < 0.0 {
            return fail(format!("eta {} must be ≥ 0", self.eta));
        }
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return fail(format!("proportion {} outside (0, 1]", self.proportion));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch under the milestone schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs_per_task as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay_factor.powi(passed as i32)
    }
}

/// Everything above the single-task level that a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Buffer capacity per class; 0 disables replay.
    pub exemplars_per_class: usize,
    /// L2-normalize features before herding selection.
    pub normalize_herding: bool,
    pub root_seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            exemplars_per_class: 20,
            normalize_herding: true,
            root_seed: 0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Per-epoch mean loss components for one task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub ce: Vec<f64>,
    pub distill: Vec<f64>,
    pub disentangle: Vec<f64>,
    pub total: Vec<f64>,
}

/// What one completed task contributed to the record. Class ids are the
/// caller's original ids, not head columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    /// 1-based task number.
    pub task: usize,
    /// Classes introduced by this task.
    pub classes: Vec<usize>,
    /// Accuracy on every class seen so far.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub overall_accuracy: f64,
    pub similarity: Vec<SimilarityVector>,
    pub conflict_map: ConflictMap,
    pub loss_trace: LossTrace,
}

/// Full trajectory of one incremental run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub class_order: Vec<usize>,
    pub base_size: usize,
    pub increment: usize,
    pub root_seed: u64,
    pub outcomes: Vec<TaskOutcome>,
    /// Model state after each task; index 0 is the post-base snapshot.
    pub checkpoints: Vec<ModelSnapshot>,
}

impl RunRecord {
    /// `A_1..A_t` so far.
    pub fn overall_accuracies(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.overall_accuracy).collect()
    }

    /// Per-class accuracy right after the base task.
    pub fn base_accuracies(&self) -> Option<&BTreeMap<usize, f64>> {
        self.outcomes.first().map(|o| &o.per_class_accuracy)
    }

    /// Per-class accuracy after the last completed task.
    pub fn final_accuracies(&self) -> Option<&BTreeMap<usize, f64>> {
        self.outcomes.last().map(|o| &o.per_class_accuracy)
    }
}

/// Cross-entropy over all current classes, averaged over the batch, with
/// full parameter gradients.
pub fn loss_ce(model: &ModelParams, x: &Mat, labels: &[usize]) -> Result<(f64, Vec<Mat>)> {
    let trace = model.forward_trace(x)?;
    let (loss, d_logits) = softmax_cross_entropy(&trace.logits, labels)?;
    let grads = model.backward_trace(&trace, &d_logits, None)?;
    Ok((loss, grads))
}

fn take_cols(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::zeros(m.rows(), k);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..k]);
    }
    out
}

/// Row-wise log-softmax of `m / temperature`, max-stabilized.
fn log_softmax_scaled(m: &Mat, temperature: f64) -> Mat {
    let mut out = m.map(|v| v / temperature);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Softened cross-entropy from teacher to student logits; returns the
/// gradient for the student side only.
///
/// Both inputs are raw logits over the same (old) columns. The loss is
/// `-(1/n) sum_i sum_k p_t log p_s` with both distributions at the given
/// temperature; at `student == teacher` it equals the teacher's softened
/// entropy and the gradient is exactly zero.
pub fn distill_softened_ce(
    student_old: &Mat,
    teacher_old: &Mat,
    temperature: f64,
) -> Result<(f64, Mat)> {
    if student_old.shape() != teacher_old.shape() {
        return Err(Error::ShapeMismatch {
            op: "distill_softened_ce",
            left: student_old.shape_str(),
            right: teacher_old.shape_str(),
        });
    }
    let (n, k) = student_old.shape();
    if n == 0 || k == 0 {
        return Ok((0.0, Mat::zeros(n, k)));
    }
    // Both sides go through the same log-softmax pipeline; bitwise-equal
    // logits then cancel to an exactly zero gradient.
    let log_ps = log_softmax_scaled(student_old, temperature);
    let log_pt = log_softmax_scaled(teacher_old, temperature);
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d = Mat::zeros(n, k);
    for r in 0..n {
        for c in 0..k {
            let pt = log_pt.get(r, c).exp();
            let lps = log_ps.get(r, c);
            loss -= pt * lps * inv;
            d.set(r, c, (lps.exp() - pt) * inv / temperature);
        }
    }
    Ok((loss, d))
}

/// Distillation against a frozen snapshot's old-class logits, with full
/// parameter gradients for the live model.
pub fn loss_distill(
    model: &ModelParams,
    snap: &ModelSnapshot,
    x: &Mat,
    temperature: f64,
) -> Result<(f64, Vec<Mat>)> {
    let k_old = snap.num_classes();
    if model.num_classes() < k_old {
        return Err(Error::Config(format!(
            "live model has {} classes but the snapshot covers {}",
            model.num_classes(),
            k_old
        )));
    }
    let trace = model.forward_trace(x)?;
    let student_old = take_cols(&trace.logits, k_old);
    let teacher_old = snap.logits(x)?;
    let (loss, d_old) = distill_softened_ce(&student_old, &teacher_old, temperature)?;
    let mut d_logits = Mat::zeros(x.rows(), model.num_classes());
    for r in 0..x.rows() {
        d_logits.row_mut(r)[..k_old].copy_from_slice(d_old.row(r));
    }
    let grads = model.backward_trace(&trace, &d_logits, None)?;
    Ok((loss, grads))
}

/// Buffer exemplars of the conflict classes, kept in input space so the
/// literal pairing can forward them through the live model each batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxSet {
    pub row_class: Vec<usize>,
    pub x: Mat,
}

pub fn build_aux_set(buffer: &ReplayBuffer, conflict_classes: &[usize], dim: usize) -> AuxSet {
    let mut row_class = Vec::new();
    let mut mats = Vec::new();
    for &class in conflict_classes {
        if let Ok(e) = buffer.exemplars(class) {
            row_class.extend(std::iter::repeat(class).take(e.x.rows()));
            mats.push(&e.x);
        }
    }
    let x = if mats.is_empty() {
        Mat::zeros(0, dim)
    } else {
        Mat::vstack(&mats).expect("exemplar matrices share the input dim")
    };
    AuxSet { row_class, x }
}

/// Per-task state assembled by the sequence runner before training starts.
pub struct TaskContext<'a> {
    /// 0-based position in the sequence.
    pub task_index: usize,
    /// Namespace separating stream families (0 = main run, 1 = oracle).
    pub stream_ns: u64,
    pub snapshot: Option<&'a ModelSnapshot>,
    pub conflict_map: &'a ConflictMap,
    pub frozen_cache: &'a FrozenConflictCache,
    /// Required by the literal pairing when the conflict map is nonempty.
    pub aux: Option<&'a AuxSet>,
}

/// One task's SGD loop over the joint pool; mutates the model in place and
/// returns the per-epoch loss trace.
pub fn train_task(
    model: &mut ModelParams,
    task_train: &LabeledDataset,
    buffer: &ReplayBuffer,
    ctx: &TaskContext,
    cfg: &TrainConfig,
    root_seed: u64,
) -> Result<LossTrace> {
    cfg.validate()?;
    let use_clad = cfg.eta > 0.0 && !ctx.conflict_map.is_empty();
    let use_distill = cfg.lambda > 0.0 && ctx.snapshot.is_some();
    if use_clad && cfg.rd_pairing == RdPairing::Literal && ctx.snapshot.is_none() {
        return Err(Error::Config(
            "literal pairing needs the previous-task snapshot".into(),
        ));
    }
    let mut velocity = model.zeros_like_tensors();
    let mut out = LossTrace::default();

    for epoch in 0..cfg.epochs_per_task {
        let lr = cfg.lr_at(epoch);
        let mut rng = Rng::stream(
            root_seed,
            "batch",
            &[ctx.stream_ns, ctx.task_index as u64, epoch as u64],
        );
        let batches = joint_batches(task_train, buffer, cfg.batch_size, &mut rng)?;
        let mut sums = (0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let trace = model.forward_trace(&batch.x)?;
            let (ce, mut d_logits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;

            let mut distill = 0.0;
            if use_distill {
                let snap = ctx.snapshot.unwrap();
                let k_old = snap.num_classes();
                let student_old = take_cols(&trace.logits, k_old);
                let teacher_old = snap.logits(&batch.x)?;
                let (dl, d_old) =
                    distill_softened_ce(&student_old, &teacher_old, cfg.distill_temperature)?;
                distill = dl;
                for r in 0..d_old.rows() {
                    let dst = &mut d_logits.row_mut(r)[..k_old];
                    for (acc, &g) in dst.iter_mut().zip(d_old.row(r)) {
                        *acc += cfg.lambda * g;
                    }
                }
            }

            let mut disentangle = 0.0;
            let mut d_feat: Option<Mat> = None;
            let mut aux_back: Option<(ForwardTrace, Mat)> = None;
            if use_clad {
                match cfg.rd_pairing {
                    RdPairing::Text => {
                        let (l, mut df) = clad_loss_text(
                            &batch.labels,
                            &batch.from_buffer,
                            &trace.features,
                            ctx.conflict_map,
                            ctx.frozen_cache,
                            cfg.stop_exemplar_grad,
                        )?;
                        disentangle = l;
                        df.scale(cfg.eta);
                        d_feat = Some(df);
                    }
                    RdPairing::Literal => {
                        let snap = ctx.snapshot.unwrap();
                        let frozen_batch = snap.features(&batch.x)?;
                        let aux = ctx.aux.ok_or_else(|| {
                            Error::Config("literal pairing needs an aux exemplar set".into())
                        })?;
                        let aux_trace;
                        let aux_feats = if aux.x.rows() > 0 {
                            aux_trace = Some(model.forward_trace(&aux.x)?);
                            aux_trace.as_ref().unwrap().features.clone()
                        } else {
                            aux_trace = None;
                            Mat::zeros(0, trace.features.cols())
                        };
                        let (l, mut df, mut da) = clad_loss_literal(
                            &batch.labels,
                            &batch.from_buffer,
                            &trace.features,
                            &frozen_batch,
                            ctx.conflict_map,
                            &aux.row_class,
                            &aux_feats,
                            cfg.stop_exemplar_grad,
                        )?;
                        disentangle = l;
                        df.scale(cfg.eta);
                        d_feat = Some(df);
                        if let Some(t) = aux_trace {
                            da.scale(cfg.eta);
                            aux_back = Some((t, da));
                        }
                    }
                }
            }

            let total = ce + cfg.lambda * distill + cfg.eta * disentangle;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "task {} epoch {epoch} batch {bi}: ce={ce} distill={distill} \
                         disentangle={disentangle}",
                        ctx.task_index + 1
                    ),
                });
            }

            let mut grads = model.backward_trace(&trace, &d_logits, d_feat.as_ref())?;
            if let Some((aux_trace, da)) = &aux_back {
                let zero = Mat::zeros(da.rows(), model.num_classes());
                let aux_grads = model.backward_trace(aux_trace, &zero, Some(da))?;
                for (g, a) in grads.iter_mut().zip(&aux_grads) {
                    g.add_scaled(a, 1.0)?;
                }
            }
            for ((p, g), v) in model
                .tensors_mut()
                .into_iter()
                .zip(&grads)
                .zip(velocity.iter_mut())
            {
                sgd_step(p, g, v, lr, cfg.momentum, cfg.weight_decay)?;
            }
            sums.0 += ce;
            sums.1 += distill;
            sums.2 += disentangle;
        }
        let nb = batches.len() as f64;
        out.ce.push(sums.0 / nb);
        out.distill.push(sums.1 / nb);
        out.disentangle.push(sums.2 / nb);
        out.total
            .push((sums.0 + cfg.lambda * sums.1 + cfg.eta * sums.2) / nb);
    }
    Ok(out)
}

fn relabel(ds: &LabeledDataset, column_of: &BTreeMap<usize, usize>) -> Result<LabeledDataset> {
    let labels = ds
        .labels
        .iter()
        .map(|l| {
            column_of
                .get(l)
                .copied()
                .ok_or_else(|| Error::Config(format!("class {l} not in the class order")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(ds.x.clone(), labels)
}

fn union_test(seq: &TaskSequence, through: usize, column_of: &BTreeMap<usize, usize>) -> Result<LabeledDataset> {
    let xs: Vec<&Mat> = seq.tasks[..=through].iter().map(|t| &t.test.x).collect();
    let mut labels = Vec::new();
    for t in &seq.tasks[..=through] {
        labels.extend_from_slice(&t.test.labels);
    }
    relabel(&LabeledDataset::new(Mat::vstack(&xs)?, labels)?, column_of)
}

fn translate_sim(sv: &SimilarityVector, class_of: &[usize]) -> SimilarityVector {
    SimilarityVector {
        new_class: class_of[sv.new_class],
        old_classes: sv.old_classes.iter().map(|&c| class_of[c]).collect(),
        scores: sv.scores.clone(),
        measurement: sv.measurement,
    }
}

fn translate_map(map: &ConflictMap, class_of: &[usize]) -> ConflictMap {
    ConflictMap {
        proportion: map.proportion,
        strategy: map.strategy,
        conflicts: map
            .conflicts
            .iter()
            .map(|(&k, v)| (class_of[k], v.iter().map(|&c| class_of[c]).collect()))
            .collect(),
    }
}

/// Joint training over all tasks at once; its snapshot stands in for the
/// frozen scorer when the oracle measurement is selected.
fn train_oracle(
    seq: &TaskSequence,
    cfg: &SequenceConfig,
    column_of: &BTreeMap<usize, usize>,
) -> Result<ModelSnapshot> {
    let xs: Vec<&Mat> = seq.tasks.iter().map(|t| &t.train.x).collect();
    let mut labels = Vec::new();
    for t in &seq.tasks {
        labels.extend_from_slice(&t.train.labels);
    }
    let joint = relabel(&LabeledDataset::new(Mat::vstack(&xs)?, labels)?, column_of)?;
    let oracle_root = Rng::stream(cfg.root_seed, "oracle", &[]).next_u64();
    let mut model = init_model(&cfg.model, oracle_root)?;
    model.expand_head(seq.class_order.len(), oracle_root)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.eta = 0.0;
    train_cfg.lambda = 0.0;
    let empty_map = ConflictMap::empty(cfg.train.proportion, cfg.train.strategy);
    let empty_cache = FrozenConflictCache::empty();
    let ctx = TaskContext {
        task_index: 0,
        stream_ns: 1,
        snapshot: None,
        conflict_map: &empty_map,
        frozen_cache: &empty_cache,
        aux: None,
    };
    train_task(
        &mut model,
        &joint,
        &ReplayBuffer::new(0),
        &ctx,
        &train_cfg,
        oracle_root,
    )?;
    Ok(snapshot(&model, 0))
}

/// Runs the full incremental protocol from scratch.
pub fn run_sequence(seq: &TaskSequence, cfg: &SequenceConfig) -> Result<RunRecord> {
    let model = init_model(&cfg.model, cfg.root_seed)?;
    let buffer = ReplayBuffer::new(cfg.exemplars_per_class);
    let record = RunRecord {
        class_order: seq.class_order.clone(),
        base_size: seq.base_size,
        increment: seq.increment,
        root_seed: cfg.root_seed,
        outcomes: Vec::new(),
        checkpoints: Vec::new(),
    };
    continue_sequence(seq, cfg, model, buffer, record)
}

/// Picks the protocol up after `record.outcomes.len()` completed tasks.
///
/// Because all randomness is derived from `(root_seed, purpose, indices)`,
/// continuing from saved model/buffer/record state reproduces the
/// uninterrupted run bit for bit.
pub fn continue_sequence(
    seq: &TaskSequence,
    cfg: &SequenceConfig,
    mut model: ModelParams,
    mut buffer: ReplayBuffer,
    mut record: RunRecord,
) -> Result<RunRecord> {
    cfg.validate()?;
    if seq.num_tasks() == 0 {
        return Err(Error::Config("task sequence is empty".into()));
    }
    if seq.tasks[0].train.dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "data dim {} does not match model input_dim {}",
            seq.tasks[0].train.dim(),
            cfg.model.input_dim
        )));
    }
    let class_of = &seq.class_order;
    let column_of: BTreeMap<usize, usize> =
        class_of.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let oracle = if cfg.train.measurement == Measurement::OracleLogits && cfg.train.eta > 0.0 {
        Some(train_oracle(seq, cfg, &column_of)?)
    } else {
        None
    };

    for t in record.outcomes.len()..seq.num_tasks() {
        let task = &seq.tasks[t];
        let train_cols = relabel(&task.train, &column_of)?;

        let mut sims: Vec<SimilarityVector> = Vec::new();
        let mut map = ConflictMap::empty(cfg.train.proportion, cfg.train.strategy);
        let mut cache = FrozenConflictCache::empty();
        let mut snap_opt: Option<ModelSnapshot> = None;
        if t > 0 && (cfg.train.eta > 0.0 || cfg.train.lambda > 0.0) {
            let snap = snapshot(&model, t);
            if cfg.train.eta > 0.0 {
                let k_old = snap.num_classes();
                let old_pairs: Vec<(usize, usize)> = (0..k_old).map(|c| (c, c)).collect();
                let scorer = oracle.as_ref().unwrap_or(&snap);
                for &class in &task.classes {
                    let col = column_of[&class];
                    let rows = train_cols.indices_of(col);
                    let class_x = train_cols.x.select_rows(&rows);
                    sims.push(forgetting_prediction(
                        scorer,
                        &class_x,
                        col,
                        &old_pairs,
                        cfg.train.measurement,
                        Some(&buffer),
                    )?);
                }
                let mut conflict_rng = Rng::stream(cfg.root_seed, "conflict", &[t as u64]);
                map = build_conflict_map(
                    &sims,
                    cfg.train.proportion,
                    cfg.train.strategy,
                    &mut conflict_rng,
                )?;
                cache = build_frozen_cache(&snap, &buffer, &map.conflict_classes())?;
            }
            snap_opt = Some(snap);
        }
        let aux = if cfg.train.eta > 0.0
            && cfg.train.rd_pairing == RdPairing::Literal
            && !map.is_empty()
        {
            Some(build_aux_set(
                &buffer,
                &map.conflict_classes(),
                train_cols.dim(),
            ))
        } else {
            None
        };

        model.expand_head(task.classes.len(), cfg.root_seed)?;
        let ctx = TaskContext {
            task_index: t,
            stream_ns: 0,
            snapshot: snap_opt.as_ref(),
            conflict_map: &map,
            frozen_cache: &cache,
            aux: aux.as_ref(),
        };
        let loss_trace = train_task(&mut model, &train_cols, &buffer, &ctx, &cfg.train, cfg.root_seed)?;
        update_buffer(&mut buffer, &train_cols, &model, cfg.normalize_herding)?;

        let eval = union_test(seq, t, &column_of)?;
        let seen: Vec<usize> = (0..model.num_classes()).collect();
        let acc_cols = per_class_accuracy(&model, &eval, &seen)?;
        let overall = overall_accuracy(&model, &eval)?;
        record.outcomes.push(TaskOutcome {
            task: t + 1,
            classes: task.classes.clone(),
            per_class_accuracy: acc_cols
                .into_iter()
                .map(|(col, a)| (class_of[col], a))
                .collect(),
            overall_accuracy: overall,
            similarity: sims.iter().map(|s| translate_sim(s, class_of)).collect(),
            conflict_map: translate_map(&map, class_of),
            loss_trace,
        });
        record.checkpoints.push(snapshot(&model, t + 1));
    }
    Ok(record)
}
