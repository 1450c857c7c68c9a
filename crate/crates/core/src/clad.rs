//! Conflict-aware disentanglement: predicting which old classes a new class
//! will collide with, and a cosine regularizer that pushes their
//! representations apart.
//!
//! Before a task trains, each new class is scored against every old class
//! using the frozen previous model ([`forgetting_prediction`]); the
//! highest-scoring fraction becomes that class's conflict set
//! ([`select_conflicts`]). During training, new-class samples are penalized
//! for pointing in the same direction as conflict-class representations, in
//! two ways at once: against the live features of conflict exemplars mixed
//! into the same batch ([`loss_online`]), and against the frozen features of
//! all conflict exemplars in the buffer ([`loss_offline`]). Both penalties
//! are `1 + cos` terms, so each lies in [0, 2] and is minimized by antipodal
//! features.
//!
//! [`RdPairing::Literal`] swaps which side is live and which is frozen, for
//! comparison; [`RdPairing::Text`] is the default described above.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::num::{cosine_sim, Rng, COSINE_NORM_EPS};
use crate::replay::ReplayBuffer;
use crate::Mat;

/// Whether a feature row has a usable direction. Post-activation features can
/// be exactly zero (every unit off); such rows are excluded from the batch
/// losses rather than fed to [`cosine_sim`], which rejects them.
fn has_direction(row: &[f64]) -> bool {
    row.iter().map(|v| v * v).sum::<f64>().sqrt() > COSINE_NORM_EPS
}

/// How new-vs-old similarity is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    /// Mean previous-model logit over the new class's samples (default).
    Logits,
    /// Cosine between mean frozen features of the new class and of each old
    /// class's buffer exemplars.
    Cosine,
    /// Like `Logits` but scored by a jointly trained reference model; an
    /// upper-bound probe, not usable in a real incremental run.
    OracleLogits,
}

/// Which end of the similarity ranking becomes the conflict set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Top,
    Smallest,
    Random,
}

/// Pairing of live/frozen sides in the two disentanglement terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RdPairing {
    /// Online = live batch exemplars, offline = frozen buffer features.
    Text,
    /// Online = live features of all buffer conflict exemplars, offline =
    /// frozen features of in-batch conflict exemplars.
    Literal,
}

/// Similarity of one new class to every old class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub new_class: usize,
    /// Old class ids, aligned with `scores`.
    pub old_classes: Vec<usize>,
    pub scores: Vec<f64>,
    pub measurement: Measurement,
}

/// Ordered conflict list per new class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictMap {
    pub proportion: f64,
    pub strategy: Strategy,
    pub conflicts: BTreeMap<usize, Vec<usize>>,
}

impl ConflictMap {
    pub fn empty(proportion: f64, strategy: Strategy) -> Self {
        Self {
            proportion,
            strategy,
            conflicts: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.conflicts.is_empty()
    }

    /// Distinct old classes appearing in any conflict list, ascending.
    pub fn conflict_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.conflicts.values().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Conflict set size for `n_old` old classes at proportion `p`:
/// `max(1, ⌈p·n_old⌉)`, capped at `n_old`. The epsilon keeps products like
/// 0.1·50 from ceiling to 6 through float noise.
pub fn conflict_count(n_old: usize, p: f64) -> usize {
    let raw = (p * n_old as f64 - 1e-9).ceil() as usize;
    raw.max(1).min(n_old)
}

/// Scores one new class against the old classes under the frozen model.
///
/// `old` pairs each old class id with its head column in `frozen`.
/// `Logits` (and `OracleLogits`, which differs only in which model the
/// caller froze) takes the mean raw logit vector over the class's samples,
/// restricted to old columns. `Cosine` compares mean frozen features of the
/// class against each old class's mean frozen exemplar feature and needs the
/// buffer.
pub fn forgetting_prediction(
    frozen: &ModelSnapshot,
    class_x: &Mat,
    new_class: usize,
    old: &[(usize, usize)],
    measurement: Measurement,
    buffer: Option<&ReplayBuffer>,
) -> Result<SimilarityVector> {
    if class_x.rows() == 0 {
        return Err(Error::EmptyClass(new_class));
    }
    for &(class, col) in old {
        if col >= frozen.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: frozen.num_classes(),
            });
        }
    }
    let scores = match measurement {
        Measurement::Logits | Measurement::OracleLogits => {
            let mean_logits = frozen.logits(class_x)?.col_mean();
            old.iter().map(|&(_, col)| mean_logits.get(0, col)).collect()
        }
        Measurement::Cosine => {
            let buffer = buffer.ok_or_else(|| {
                Error::Config("cosine measurement requires a replay buffer".into())
            })?;
            let class_mean = frozen.features(class_x)?.col_mean();
            let mut scores = Vec::with_capacity(old.len());
            for &(class, _) in old {
                let exemplars = buffer.exemplars(class)?;
                let old_mean = frozen.features(&exemplars.x)?.col_mean();
                let (c, _, _) = cosine_sim(class_mean.row(0), old_mean.row(0))?;
                scores.push(c);
            }
            scores
        }
    };
    Ok(SimilarityVector {
        new_class,
        old_classes: old.iter().map(|&(class, _)| class).collect(),
        scores,
        measurement,
    })
}

/// Picks one new class's conflict set from its similarity vector.
///
/// `Top` takes the largest scores, `Smallest` the smallest, `Random` a
/// uniform draw without replacement; score ties resolve toward the lower
/// class id. No old classes yields an empty list.
pub fn select_conflicts(
    sim: &SimilarityVector,
    p: f64,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 {
        return Err(Error::Config(format!("conflict proportion {p} outside (0, 1]")));
    }
    let n = sim.old_classes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = conflict_count(n, p);
    let mut order: Vec<usize> = (0..n).collect();
    match strategy {
        Strategy::Top => {
            order.sort_by(|&a, &b| {
                sim.scores[b]
                    .total_cmp(&sim.scores[a])
                    .then(sim.old_classes[a].cmp(&sim.old_classes[b]))
            });
        }
        Strategy::Smallest => {
            order.sort_by(|&a, &b| {
                sim.scores[a]
                    .total_cmp(&sim.scores[b])
                    .then(sim.old_classes[a].cmp(&sim.old_classes[b]))
            });
        }
        Strategy::Random => order = rng.choose_k(n, k),
    }
    Ok(order[..k].iter().map(|&i| sim.old_classes[i]).collect())
}

/// Builds the task's conflict map; `sims` order fixes the RNG consumption
/// order for the random strategy.
pub fn build_conflict_map(
    sims: &[SimilarityVector],
    p: f64,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<ConflictMap> {
    let mut conflicts = BTreeMap::new();
    for sim in sims {
        let list = select_conflicts(sim, p, strategy, rng)?;
        if !list.is_empty() {
            conflicts.insert(sim.new_class, list);
        }
    }
    Ok(ConflictMap {
        proportion: p,
        strategy,
        conflicts,
    })
}

/// Mean `1 + cos` against live conflict features; gradients for both sides.
///
/// Returns `(loss, d_x_feat, d_conflict_feats)` with the loss in [0, 2].
pub fn loss_online(x_feat: &[f64], conflict_feats: &Mat) -> Result<(f64, Vec<f64>, Mat)> {
    let m = conflict_feats.rows();
    if m == 0 {
        return Err(Error::Config("online loss over an empty conflict set".into()));
    }
    let inv = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut dx = vec![0.0; x_feat.len()];
    let mut dconf = Mat::zeros(m, conflict_feats.cols());
    for j in 0..m {
        let (c, du, dv) = cosine_sim(x_feat, conflict_feats.row(j))?;
        loss += (1.0 + c) * inv;
        for (acc, d) in dx.iter_mut().zip(&du) {
            *acc += d * inv;
        }
        for (acc, d) in dconf.row_mut(j).iter_mut().zip(&dv) {
            *acc = d * inv;
        }
    }
    Ok((loss, dx, dconf))
}

/// Mean `1 + cos` against frozen conflict features; gradient only for the
/// live side.
pub fn loss_offline(x_feat: &[f64], frozen_feats: &Mat) -> Result<(f64, Vec<f64>)> {
    let m = frozen_feats.rows();
    if m == 0 {
        return Err(Error::Config("offline loss over an empty conflict set".into()));
    }
    let inv = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut dx = vec![0.0; x_feat.len()];
    for j in 0..m {
        let (c, du, _) = cosine_sim(x_feat, frozen_feats.row(j))?;
        loss += (1.0 + c) * inv;
        for (acc, d) in dx.iter_mut().zip(&du) {
            *acc += d * inv;
        }
    }
    Ok((loss, dx))
}

/// Frozen previous-extractor features of buffer exemplars, one matrix per
/// conflict class; computed once per task.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConflictCache {
    pub per_class: BTreeMap<usize, Mat>,
}

impl FrozenConflictCache {
    pub fn empty() -> Self {
        Self {
            per_class: BTreeMap::new(),
        }
    }

    /// Pooled rows for a conflict list, classes in list order.
    fn pooled(&self, classes: &[usize]) -> Option<Mat> {
        let mats: Vec<&Mat> = classes
            .iter()
            .filter_map(|c| self.per_class.get(c))
            .collect();
        if mats.is_empty() {
            return None;
        }
        Some(Mat::vstack(&mats).expect("cached features share feature_dim"))
    }
}

/// Builds the cache from the frozen extractor; exemplar rows whose frozen
/// features lack a direction are dropped, and a class with none left is
/// omitted entirely.
pub fn build_frozen_cache(
    snapshot: &ModelSnapshot,
    buffer: &ReplayBuffer,
    conflict_classes: &[usize],
) -> Result<FrozenConflictCache> {
    let mut per_class = BTreeMap::new();
    for &class in conflict_classes {
        if let Ok(e) = buffer.exemplars(class) {
            let feats = snapshot.features(&e.x)?;
            let live: Vec<usize> =
                (0..feats.rows()).filter(|&r| has_direction(feats.row(r))).collect();
            if live.len() == feats.rows() {
                per_class.insert(class, feats);
            } else if !live.is_empty() {
                per_class.insert(class, feats.select_rows(&live));
            }
        }
    }
    Ok(FrozenConflictCache { per_class })
}

/// Batch-level disentanglement loss, text pairing.
///
/// Over the batch's new-class samples (rows whose labels are conflict-map
/// keys): the online term averages [`loss_online`] against live features of
/// in-batch conflict exemplars, over the samples that have any; the offline
/// term averages [`loss_offline`] against the frozen cache, over all of
/// them. Rows without a feature direction drop out of both averages.
/// Returns the summed loss and its gradient into every participating live
/// feature row. `stop_exemplar_grad` detaches the exemplar side of the
/// online term.
pub fn clad_loss_text(
    labels: &[usize],
    from_buffer: &[bool],
    features: &Mat,
    map: &ConflictMap,
    cache: &FrozenConflictCache,
    stop_exemplar_grad: bool,
) -> Result<(f64, Mat)> {
    let mut d_features = Mat::zeros(features.rows(), features.cols());
    if map.is_empty() {
        return Ok((0.0, d_features));
    }
    let new_rows: Vec<usize> = (0..labels.len())
        .filter(|&i| map.conflicts.contains_key(&labels[i]) && has_direction(features.row(i)))
        .collect();
    if new_rows.is_empty() {
        return Ok((0.0, d_features));
    }

    // Online term over samples with in-batch conflict exemplars.
    let mut on_terms: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &new_rows {
        let conflict_list = &map.conflicts[&labels[i]];
        let exemplar_rows: Vec<usize> = (0..labels.len())
            .filter(|&j| {
                from_buffer[j]
                    && conflict_list.contains(&labels[j])
                    && has_direction(features.row(j))
            })
            .collect();
        if !exemplar_rows.is_empty() {
            on_terms.push((i, exemplar_rows));
        }
    }
    let mut loss = 0.0;
    if !on_terms.is_empty() {
        let inv_on = 1.0 / on_terms.len() as f64;
        for (i, exemplar_rows) in &on_terms {
            let conf = features.select_rows(exemplar_rows);
            let (l, dx, dconf) = loss_online(features.row(*i), &conf)?;
            loss += l * inv_on;
            for (acc, d) in d_features.row_mut(*i).iter_mut().zip(&dx) {
                *acc += d * inv_on;
            }
            if !stop_exemplar_grad {
                for (k, &j) in exemplar_rows.iter().enumerate() {
                    for (acc, &d) in d_features.row_mut(j).iter_mut().zip(dconf.row(k)) {
                        *acc += d * inv_on;
                    }
                }
            }
        }
    }

    // Offline term over every new-class sample with cached conflict rows.
    let mut off_terms: Vec<(usize, Mat)> = Vec::new();
    for &i in &new_rows {
        if let Some(frozen) = cache.pooled(&map.conflicts[&labels[i]]) {
            off_terms.push((i, frozen));
        }
    }
    if !off_terms.is_empty() {
        let inv_off = 1.0 / off_terms.len() as f64;
        for (i, frozen) in &off_terms {
            let (l, dx) = loss_offline(features.row(*i), frozen)?;
            loss += l * inv_off;
            for (acc, d) in d_features.row_mut(*i).iter_mut().zip(&dx) {
                *acc += d * inv_off;
            }
        }
    }
    Ok((loss, d_features))
}

/// Batch-level disentanglement loss, literal pairing.
///
/// The online term pairs each new-class sample with the live features of all
/// buffer exemplars of its conflict classes (`aux_*`, forwarded through the
/// live model by the trainer); the offline term pairs it with the frozen
/// features of conflict exemplars present in the batch, over the samples
/// that have any. Rows without a feature direction drop out of both
/// averages. Returns `(loss, d_features, d_aux_features)`.
pub fn clad_loss_literal(
    labels: &[usize],
    from_buffer: &[bool],
    features: &Mat,
    frozen_batch_feats: &Mat,
    map: &ConflictMap,
    aux_row_class: &[usize],
    aux_features: &Mat,
    stop_exemplar_grad: bool,
) -> Result<(f64, Mat, Mat)> {
    let mut d_features = Mat::zeros(features.rows(), features.cols());
    let mut d_aux = Mat::zeros(aux_features.rows(), aux_features.cols());
    if map.is_empty() {
        return Ok((0.0, d_features, d_aux));
    }
    let new_rows: Vec<usize> = (0..labels.len())
        .filter(|&i| map.conflicts.contains_key(&labels[i]) && has_direction(features.row(i)))
        .collect();
    if new_rows.is_empty() {
        return Ok((0.0, d_features, d_aux));
    }

    // Online: against live aux features of all buffer conflict exemplars.
    let mut on_terms: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &new_rows {
        let conflict_list = &map.conflicts[&labels[i]];
        let aux_rows: Vec<usize> = (0..aux_row_class.len())
            .filter(|&j| {
                conflict_list.contains(&aux_row_class[j]) && has_direction(aux_features.row(j))
            })
            .collect();
        if !aux_rows.is_empty() {
            on_terms.push((i, aux_rows));
        }
    }
    let mut loss = 0.0;
    if !on_terms.is_empty() {
        let inv_on = 1.0 / on_terms.len() as f64;
        for (i, aux_rows) in &on_terms {
            let conf = aux_features.select_rows(aux_rows);
            let (l, dx, dconf) = loss_online(features.row(*i), &conf)?;
            loss += l * inv_on;
            for (acc, d) in d_features.row_mut(*i).iter_mut().zip(&dx) {
                *acc += d * inv_on;
            }
            if !stop_exemplar_grad {
                for (k, &j) in aux_rows.iter().enumerate() {
                    for (acc, &d) in d_aux.row_mut(j).iter_mut().zip(dconf.row(k)) {
                        *acc += d * inv_on;
                    }
                }
            }
        }
    }

    // Offline: against frozen features of in-batch conflict exemplars.
    let mut off_terms: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &new_rows {
        let conflict_list = &map.conflicts[&labels[i]];
        let exemplar_rows: Vec<usize> = (0..labels.len())
            .filter(|&j| {
                from_buffer[j]
                    && conflict_list.contains(&labels[j])
                    && has_direction(frozen_batch_feats.row(j))
            })
            .collect();
        if !exemplar_rows.is_empty() {
            off_terms.push((i, exemplar_rows));
        }
    }
    if !off_terms.is_empty() {
        let inv_off = 1.0 / off_terms.len() as f64;
        for (i, exemplar_rows) in &off_terms {
            let frozen = frozen_batch_feats.select_rows(exemplar_rows);
            let (l, dx) = loss_offline(features.row(*i), &frozen)?;
            loss += l * inv_off;
            for (acc, d) in d_features.row_mut(*i).iter_mut().zip(&dx) {
                *acc += d * inv_off;
            }
        }
    }
    Ok((loss, d_features, d_aux))
}
