//! Measurement machinery: per-class accuracy, normalized forgetting,
//! average incremental accuracy, similarity aggregation, and the
//! similarity-forgetting correlation with a permutation significance test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clad::{forgetting_prediction, Measurement, SimilarityVector};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSnapshot};
use crate::num::Rng;
use crate::Mat;

/// Predicted column per test row: argmax over all current logits, ties to
/// the lower column.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `(correct, total)` per class label present in the test set.
pub fn per_class_counts(
    model: &ModelParams,
    test: &LabeledDataset,
) -> Result<BTreeMap<usize, (usize, usize)>> {
    let k = model.num_classes();
    let logits = model.logits(&test.x)?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, &label) in test.labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let e = counts.entry(label).or_insert((0, 0));
        e.1 += 1;
        if argmax(logits.row(r)) == label {
            e.0 += 1;
        }
    }
    Ok(counts)
}

/// Accuracy for each class in `classes`; a class without test rows is an
/// error rather than a silent zero.
pub fn per_class_accuracy(
    model: &ModelParams,
    test: &LabeledDataset,
    classes: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let counts = per_class_counts(model, test)?;
    let mut out = BTreeMap::new();
    for &c in classes {
        let &(correct, total) = counts.get(&c).ok_or(Error::EmptyClass(c))?;
        out.insert(c, correct as f64 / total as f64);
    }
    Ok(out)
}

/// Fraction of all test rows classified correctly.
pub fn overall_accuracy(model: &ModelParams, test: &LabeledDataset) -> Result<f64> {
    let counts = per_class_counts(model, test)?;
    let correct: usize = counts.values().map(|&(c, _)| c).sum();
    let total: usize = counts.values().map(|&(_, t)| t).sum();
    if total == 0 {
        return Err(Error::Config("empty test set".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Normalized accuracy drop `(A_base - A_all) / A_base`.
///
/// Negative values mean backward transfer; `A_base = 0` leaves the drop
/// undefined and the class is excluded from correlation analysis.
pub fn normalized_forgetting(a_base: f64, a_all: f64) -> Result<f64> {
    if a_base <= 0.0 {
        return Err(Error::UndefinedForgetting);
    }
    Ok((a_base - a_all) / a_base)
}

/// Mean of the per-task overall accuracies `A_1..A_t`.
pub fn avg_incremental_accuracy(per_task_overall: &[f64]) -> Result<f64> {
    if per_task_overall.is_empty() {
        return Err(Error::Config("no per-task accuracies to average".into()));
    }
    Ok(per_task_overall.iter().sum::<f64>() / per_task_overall.len() as f64)
}

/// How one old class's scores across later classes collapse to a single
/// similarity level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

/// Scores every later class against the base classes under the post-base
/// snapshot; `later` pairs each class id with its training rows, `old` pairs
/// each base class id with its head column.
pub fn similarity_vectors_f1(
    frozen_f1: &ModelSnapshot,
    later: &[(usize, Mat)],
    old: &[(usize, usize)],
) -> Result<Vec<SimilarityVector>> {
    later
        .iter()
        .map(|(class, x)| {
            forgetting_prediction(frozen_f1, x, *class, old, Measurement::Logits, None)
        })
        .collect()
}

/// Collapses per-later-class similarity vectors to one level per old class.
pub fn aggregate_similarity(
    sims: &[SimilarityVector],
    aggregation: Aggregation,
) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for sv in sims {
        for (&old_class, &score) in sv.old_classes.iter().zip(&sv.scores) {
            let e = acc.entry(old_class).or_insert((f64::NEG_INFINITY, 0));
            match aggregation {
                Aggregation::Max => e.0 = e.0.max(score),
                Aggregation::Mean => {
                    if e.1 == 0 {
                        e.0 = 0.0;
                    }
                    e.0 += score;
                }
            }
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(c, (v, n))| match aggregation {
            Aggregation::Max => (c, v),
            Aggregation::Mean => (c, v / n as f64),
        })
        .collect()
}

/// Per old class: similarity level `S_i` under both scoring passes folded to
/// the chosen aggregation.
pub fn similarity_level(
    frozen_f1: &ModelSnapshot,
    later: &[(usize, Mat)],
    old: &[(usize, usize)],
    aggregation: Aggregation,
) -> Result<BTreeMap<usize, f64>> {
    Ok(aggregate_similarity(
        &similarity_vectors_f1(frozen_f1, later, old)?,
        aggregation,
    ))
}

/// One base-task class's accuracy history and similarity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassForgetting {
    pub class: usize,
    pub a_base: f64,
    pub a_all: f64,
    /// `None` when `a_base = 0`, which excludes the class from correlation.
    pub delta: Option<f64>,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProfile {
    pub aggregation: Aggregation,
    pub rows: Vec<ClassForgetting>,
}

impl ForgettingProfile {
    /// Classes whose drop is undefined.
    pub fn excluded(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.delta.is_none())
            .map(|r| r.class)
            .collect()
    }

    /// `(S_i, delta_i)` pairs for the defined classes.
    pub fn scatter(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.delta.map(|d| (r.similarity, d)))
            .collect()
    }
}

/// Joins base accuracies, final accuracies, and similarity levels on the
/// base-class set.
pub fn forgetting_profile(
    base_acc: &BTreeMap<usize, f64>,
    final_acc: &BTreeMap<usize, f64>,
    similarity: &BTreeMap<usize, f64>,
    aggregation: Aggregation,
) -> Result<ForgettingProfile> {
    let mut rows = Vec::with_capacity(base_acc.len());
    for (&class, &a_base) in base_acc {
        let &a_all = final_acc
            .get(&class)
            .ok_or_else(|| Error::Config(format!("class {class} missing final accuracy")))?;
        let &sim = similarity
            .get(&class)
            .ok_or_else(|| Error::Config(format!("class {class} missing similarity level")))?;
        let delta = match normalized_forgetting(a_base, a_all) {
            Ok(d) => Some(d),
            Err(Error::UndefinedForgetting) => None,
            Err(e) => return Err(e),
        };
        rows.push(ClassForgetting {
            class,
            a_base,
            a_all,
            delta,
            similarity: sim,
        });
    }
    Ok(ForgettingProfile { aggregation, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    /// Fraction of label permutations whose |r'| reached |r|.
    pub permutation_p: f64,
    pub permutations: usize,
    pub n: usize,
    pub pairs: Vec<(f64, f64)>,
}

fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in one variable".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson correlation with permutation significance.
///
/// Each permutation shuffles `ys` under its own derived stream, so the test
/// is reproducible for a given `seed` and independent of iteration order.
pub fn pearson(xs: &[f64], ys: &[f64], permutations: usize, seed: u64) -> Result<CorrelationReport> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "correlation inputs of unequal length {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Config(format!(
            "correlation needs at least 3 pairs, got {}",
            xs.len()
        )));
    }
    let r = pearson_r(xs, ys)?;
    let mut hits = 0usize;
    for p in 0..permutations {
        let mut perm = ys.to_vec();
        Rng::stream(seed, "perm", &[p as u64]).shuffle(&mut perm);
        // A permuted copy can be constant only if ys was; variance is safe.
        let rp = pearson_r(xs, &perm)?;
        if rp.abs() >= r.abs() {
            hits += 1;
        }
    }
    let permutation_p = if permutations == 0 {
        1.0
    } else {
        hits as f64 / permutations as f64
    };
    Ok(CorrelationReport {
        r,
        permutation_p,
        permutations,
        n: xs.len(),
        pairs: xs.iter().copied().zip(ys.iter().copied()).collect(),
    })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Config(format!(
            "rank correlation needs ≥ 3 equal-length inputs, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    pearson_r(&ranks(xs), &ranks(ys))
}

/// Correlates similarity against the defined forgetting values.
pub fn correlation_from_profile(
    profile: &ForgettingProfile,
    permutations: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let pairs = profile.scatter();
    let xs: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
    let ys: Vec<f64> = pairs.iter().map(|&(_, d)| d).collect();
    pearson(&xs, &ys, permutations, seed)
}

/// CSV form, one row per class; undefined drops render as `nan`.
pub fn profile_to_csv(profile: &ForgettingProfile) -> String {
    let mut out = String::from("class,a_base,a_all,delta,similarity\n");
    for r in &profile.rows {
        let delta = match r.delta {
            Some(d) => format!("{d}"),
            None => "nan".into(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.class, r.a_base, r.a_all, delta, r.similarity
        ));
    }
    out
}

/// Two-column scatter data (`similarity delta`) for gnuplot, defined classes
/// only.
pub fn profile_to_scatter(profile: &ForgettingProfile) -> String {
    let mut out = String::from("# similarity delta\n");
    for (s, d) in profile.scatter() {
        out.push_str(&format!("{s} {d}\n"));
    }
    out
}
