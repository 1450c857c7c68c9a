//! Per-class exemplar buffer with greedy herding selection.
//!
//! After a task is trained, each of its classes contributes up to `cap`
//! exemplars, chosen so that the running mean of selected features tracks the
//! class mean feature as closely as possible at every prefix. During later
//! tasks the buffer is read-only: its samples are mixed into every epoch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::num::Rng;
use crate::Mat;

/// Exemplars of one class: input rows in selection order plus the task-set
/// row each came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExemplars {
    pub x: Mat,
    pub source_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub cap: usize,
    pub per_class: BTreeMap<usize, ClassExemplars>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            per_class: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    pub fn total_len(&self) -> usize {
        self.per_class.values().map(|e| e.x.rows()).sum()
    }

    pub fn exemplars(&self, class: usize) -> Result<&ClassExemplars> {
        self.per_class
            .get(&class)
            .ok_or(Error::MissingExemplars(class))
    }

    /// All exemplars as one dataset, classes in ascending order.
    pub fn as_dataset(&self, dim: usize) -> LabeledDataset {
        let mats: Vec<&Mat> = self.per_class.values().map(|e| &e.x).collect();
        let x = if mats.is_empty() {
            Mat::zeros(0, dim)
        } else {
            Mat::vstack(&mats).expect("per-class exemplars share input dim")
        };
        let labels = self
            .per_class
            .iter()
            .flat_map(|(&c, e)| std::iter::repeat(c).take(e.x.rows()))
            .collect();
        LabeledDataset { x, labels }
    }
}

/// Greedy herding order over one class's feature rows.
///
/// With `μ` the mean feature row, step `k` picks the unchosen row `i`
/// minimizing `‖μ − mean(chosen ∪ {i})‖₂`, ties to the lowest index.
/// Returns `min(r, n)` indices in selection order.
pub fn herding_select(class_features: &Mat, r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(Error::Config("herding cap must be ≥ 1".into()));
    }
    let n = class_features.rows();
    if n == 0 {
        return Err(Error::Config("herding over an empty class".into()));
    }
    let dim = class_features.cols();
    let mu = class_features.col_mean();
    let mu = mu.row(0);
    let mut chosen = Vec::with_capacity(r.min(n));
    let mut taken = vec![false; n];
    let mut sum = vec![0.0; dim];
    for step in 0..r.min(n) {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let row = class_features.row(i);
            let mut dist = 0.0;
            for d in 0..dim {
                let m = (sum[d] + row[d]) / denom;
                let diff = mu[d] - m;
                dist += diff * diff;
            }
            match best {
                Some((_, b)) if dist >= b => {}
                _ => best = Some((i, dist)),
            }
        }
        let (pick, _) = best.expect("an unchosen row exists");
        taken[pick] = true;
        for (s, &v) in sum.iter_mut().zip(class_features.row(pick)) {
            *s += v;
        }
        chosen.push(pick);
    }
    Ok(chosen)
}

fn normalize_rows(features: &mut Mat) {
    for r in 0..features.rows() {
        let row = features.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// Fills buffer slots for every class of the just-trained task.
///
/// Features come from the freshly trained model; `normalize` selects the
/// L2-normalized variant of herding. Classes already in the buffer are an
/// internal-consistency violation. A zero-cap buffer stays empty.
pub fn update_buffer(
    buffer: &mut ReplayBuffer,
    task_train: &LabeledDataset,
    model_after_task: &ModelParams,
    normalize: bool,
) -> Result<()> {
    if buffer.cap == 0 {
        return Ok(());
    }
    let classes = task_train.distinct_labels();
    for &class in &classes {
        if buffer.per_class.contains_key(&class) {
            return Err(Error::ClassAlreadyBuffered(class));
        }
    }
    for class in classes {
        let rows = task_train.indices_of(class);
        if rows.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        let class_x = task_train.x.select_rows(&rows);
        let mut feats = model_after_task.features(&class_x)?;
        if normalize {
            normalize_rows(&mut feats);
        }
        let picks = herding_select(&feats, buffer.cap)?;
        let source_indices: Vec<usize> = picks.iter().map(|&p| rows[p]).collect();
        buffer.per_class.insert(
            class,
            ClassExemplars {
                x: task_train.x.select_rows(&source_indices),
                source_indices,
            },
        );
    }
    Ok(())
}

/// One training batch drawn from the joint pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Mat,
    pub labels: Vec<usize>,
    /// Per row: whether it came from the replay buffer.
    pub from_buffer: Vec<bool>,
}

/// One epoch over the joint pool `task ∪ buffer`: a single uniform shuffle,
/// chunked into batches (the last may be short). Every pooled sample appears
/// exactly once per epoch.
pub fn joint_batches(
    task_train: &LabeledDataset,
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} must be ≥ 2")));
    }
    let buf_ds = buffer.as_dataset(task_train.dim());
    let pool_x = Mat::vstack(&[&task_train.x, &buf_ds.x])?;
    let mut labels = task_train.labels.clone();
    labels.extend_from_slice(&buf_ds.labels);
    let n_task = task_train.len();
    let total = labels.len();

    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);

    let mut out = Vec::with_capacity(total.div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        out.push(Batch {
            x: pool_x.select_rows(chunk),
            labels: chunk.iter().map(|&i| labels[i]).collect(),
            from_buffer: chunk.iter().map(|&i| i >= n_task).collect(),
        });
    }
    Ok(out)
}
