//! Synthetic benchmark generation with controllable inter-class similarity,
//! CSV ingestion, and task-sequence construction.
//!
//! Classes live on the unit sphere: each class is a unit prototype vector and
//! samples are the prototype plus isotropic Gaussian noise. Similarity
//! between classes is dialed in directly as prototype cosine; "collision"
//! pairs are constructed to a target cosine, every other pair is kept at
//! |cos| ≤ 0.5 so dissimilar classes exist as a contrast group.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Rng;
use crate::Mat;

/// Above this magnitude a prototype pair counts as similar; unspecified pairs
/// are resampled until they are below it.
pub const MAX_INCIDENTAL_COS: f64 = 0.5;

/// Tolerance on realized collision cosines.
pub const COLLISION_TOL: f64 = 0.02;

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Borrowed view of one labeled sample.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

/// Row-aligned features and labels: row `i` of `x` has label `labels[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub x: Mat,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(x: Mat, labels: Vec<usize>) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "LabeledDataset",
                left: format!("x {}", x.shape_str()),
                right: format!("{} labels", labels.len()),
            });
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn get(&self, i: usize) -> Sample<'_> {
        Sample {
            features: self.x.row(i),
            label: self.labels[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Row indices carrying `label`, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Distinct labels in ascending order.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut set: Vec<usize> = self.labels.clone();
        set.sort_unstable();
        set.dedup();
        set
    }

    /// Subset with only the given classes, preserving row order.
    pub fn filter_classes(&self, classes: &[usize]) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        LabeledDataset {
            x: self.x.select_rows(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One engineered similarity pair: the new class's prototype is built to have
/// `cos(proto_new, proto_old) ≈ target_cosine`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionSpec {
    pub new_class: usize,
    pub old_class: usize,
    pub target_cosine: f64,
}

/// Unit prototype per class plus the collision pairs they were built to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypeSet {
    pub prototypes: Mat,
    pub collision_spec: Vec<CollisionSpec>,
}

impl ClassPrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        dot(self.prototypes.row(a), self.prototypes.row(b))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 1e-9 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

fn validate_collision_spec(n_classes: usize, spec: &[CollisionSpec]) -> Result<()> {
    let mut seen_new = Vec::new();
    for c in spec {
        if c.new_class >= n_classes || c.old_class >= n_classes {
            return Err(Error::InfeasibleSpec(format!(
                "collision ({}, {}) references a class ≥ {n_classes}",
                c.new_class, c.old_class
            )));
        }
        if c.new_class == c.old_class {
            return Err(Error::InfeasibleSpec(format!(
                "collision pairs class {} with itself",
                c.new_class
            )));
        }
        if !(0.0..1.0).contains(&c.target_cosine) {
            return Err(Error::InfeasibleSpec(format!(
                "target cosine {} outside [0, 1)",
                c.target_cosine
            )));
        }
        if seen_new.contains(&c.new_class) {
            return Err(Error::InfeasibleSpec(format!(
                "class {} given more than one collision target",
                c.new_class
            )));
        }
        seen_new.push(c.new_class);
    }
    for c in spec {
        if seen_new.contains(&c.old_class) {
            return Err(Error::InfeasibleSpec(format!(
                "class {} is both a collision source and target",
                c.old_class
            )));
        }
    }
    Ok(())
}

/// Builds one unit prototype per class.
///
/// Classes without a collision entry are drawn uniformly on the sphere and
/// resampled until every unspecified pair sits at |cos| ≤ 0.5. A collision
/// class is then placed exactly at its target cosine from its partner,
/// `p = t·p_old + √(1−t²)·u` with `u` a random unit direction orthogonal to
/// `p_old`, re-drawing `u` until the class also clears 0.5 against everyone
/// else. Deterministic per seed.
pub fn generate_prototypes(
    n_classes: usize,
    dim: usize,
    collision_spec: &[CollisionSpec],
    seed: u64,
) -> Result<ClassPrototypeSet> {
    if dim < 4 {
        return Err(Error::Config(format!("prototype dim {dim} < 4")));
    }
    if n_classes == 0 {
        return Err(Error::NoClasses);
    }
    validate_collision_spec(n_classes, collision_spec)?;
    let mut rng = Rng::stream(seed, "proto", &[]);
    let mut placed: Vec<Option<Vec<f64>>> = vec![None; n_classes];

    let clear_of_others = |placed: &[Option<Vec<f64>>], cand: &[f64], skip: &[usize]| {
        placed.iter().enumerate().all(|(j, p)| match p {
            Some(p) if !skip.contains(&j) => dot(cand, p).abs() <= MAX_INCIDENTAL_COS,
            _ => true,
        })
    };

    let collision_classes: Vec<usize> = collision_spec.iter().map(|c| c.new_class).collect();
    for class in 0..n_classes {
        if collision_classes.contains(&class) {
            continue;
        }
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cand = random_unit(&mut rng, dim);
            if clear_of_others(&placed, &cand, &[class]) {
                placed[class] = Some(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::InfeasibleSpec(format!(
                "could not place class {class} with all pairs at |cos| ≤ {MAX_INCIDENTAL_COS} \
                 after {MAX_PLACEMENT_TRIES} tries (dim {dim} too small for {n_classes} classes)"
            )));
        }
    }

    for c in collision_spec {
        let anchor = placed[c.old_class]
            .clone()
            .expect("collision sources are placed in the first pass");
        let t = c.target_cosine;
        let s = (1.0 - t * t).sqrt();
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            // Orthonormal direction away from the anchor.
            let g = random_unit(&mut rng, dim);
            let proj = dot(&g, &anchor);
            let mut u: Vec<f64> = g
                .iter()
                .zip(&anchor)
                .map(|(&gi, &ai)| gi - proj * ai)
                .collect();
            if normalize(&mut u) <= 1e-9 {
                continue;
            }
            let mut cand: Vec<f64> = anchor
                .iter()
                .zip(&u)
                .map(|(&ai, &ui)| t * ai + s * ui)
                .collect();
            normalize(&mut cand);
            if clear_of_others(&placed, &cand, &[c.new_class, c.old_class]) {
                placed[c.new_class] = Some(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::InfeasibleSpec(format!(
                "could not place collision class {} at cosine {} from class {} while staying \
                 |cos| ≤ {MAX_INCIDENTAL_COS} to the rest",
                c.new_class, c.target_cosine, c.old_class
            )));
        }
    }

    let rows: Vec<Vec<f64>> = placed
        .into_iter()
        .map(|p| p.expect("all classes placed"))
        .collect();
    let set = ClassPrototypeSet {
        prototypes: Mat::from_rows(&rows)?,
        collision_spec: collision_spec.to_vec(),
    };
    for c in collision_spec {
        let realized = set.cosine(c.new_class, c.old_class);
        debug_assert!(
            (realized - c.target_cosine).abs() <= COLLISION_TOL,
            "realized {realized} target {}",
            c.target_cosine
        );
    }
    Ok(set)
}

/// Draws `prototype + N(0, σ²)` samples per class, class-major order.
///
/// Train and test come from disjoint named streams, so changing one count
/// never disturbs the other split.
pub fn sample_dataset(
    protos: &ClassPrototypeSet,
    n_train_per_class: usize,
    n_test_per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if noise_sigma <= 0.0 {
        return Err(Error::Config(format!("noise_sigma {noise_sigma} must be > 0")));
    }
    let draw = |stream: &str, n_per: usize| {
        let mut x = Mat::zeros(protos.n_classes() * n_per, protos.dim());
        let mut labels = Vec::with_capacity(protos.n_classes() * n_per);
        for class in 0..protos.n_classes() {
            let mut rng = Rng::stream(seed, stream, &[class as u64]);
            let proto = protos.prototypes.row(class).to_vec();
            for i in 0..n_per {
                let row = x.row_mut(class * n_per + i);
                for (r, &p) in row.iter_mut().zip(&proto) {
                    *r = p + noise_sigma * rng.normal::<f64>();
                }
                labels.push(class);
            }
        }
        LabeledDataset { x, labels }
    };
    Ok((draw("train", n_train_per_class), draw("test", n_test_per_class)))
}

/// One task's classes and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub classes: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Class-incremental split: the first task holds `base_size` classes, each
/// later task `increment`, over a seeded shuffle of all class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub class_order: Vec<usize>,
    pub base_size: usize,
    pub increment: usize,
    pub tasks: Vec<TaskData>,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes introduced in tasks `0..=t`, in introduction order.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect()
    }
}

/// Splits a dataset into a task sequence.
///
/// Class ids are shuffled by `shuffle_seed`; the first `base_size` form task
/// 1, each following `increment` one task. The class count must come out
/// even: `base_size + k·increment == n_classes`. `base_size == n_classes`
/// (one joint task) is allowed.
pub fn split_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    n_classes: usize,
    base_size: usize,
    increment: usize,
    shuffle_seed: u64,
) -> Result<TaskSequence> {
    if base_size == 0 || base_size > n_classes {
        return Err(Error::Config(format!(
            "base task size {base_size} must be in 1..={n_classes}"
        )));
    }
    let rest = n_classes - base_size;
    if rest > 0 {
        if increment == 0 {
            return Err(Error::Config("increment must be ≥ 1 when tasks remain".into()));
        }
        if rest % increment != 0 {
            return Err(Error::Config(format!(
                "{rest} classes after the base task do not divide into increments of {increment}"
            )));
        }
    }
    let mut class_order: Vec<usize> = (0..n_classes).collect();
    let mut rng = Rng::stream(shuffle_seed, "shuffle", &[]);
    rng.shuffle(&mut class_order);

    let mut tasks = Vec::new();
    let mut start = 0;
    while start < n_classes {
        let size = if start == 0 { base_size } else { increment };
        let classes: Vec<usize> = class_order[start..start + size].to_vec();
        tasks.push(TaskData {
            train: train.filter_classes(&classes),
            test: test.filter_classes(&classes),
            classes,
        });
        start += size;
    }
    Ok(TaskSequence {
        class_order,
        base_size,
        increment,
        tasks,
    })
}

/// A parsed CSV: header plus string cells, every row the same width.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Reads any CSV this crate emits: comma-separated, one header line,
/// consistent column count. Errors carry 1-based physical line numbers.
pub fn read_table(path: &Path) -> Result<Table> {
    parse_table(&std::fs::read_to_string(path)?)
}

pub fn parse_table(text: &str) -> Result<Table> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if header.iter().any(|h| h.is_empty()) {
        return Err(Error::CsvParse {
            line: 1,
            msg: "empty header field".into(),
        });
    }
    let mut rows = Vec::new();
    for (ix, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cells.len() != header.len() {
            return Err(Error::CsvParse {
                line: ix + 1,
                msg: format!("{} fields, header has {}", cells.len(), header.len()),
            });
        }
        rows.push(cells);
    }
    Ok(Table { header, rows })
}

/// Dataset loaded from CSV, with the original-label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvDataset {
    pub data: LabeledDataset,
    /// Original label for each dense id; position = dense id, populated in
    /// first-appearance order.
    pub original_labels: Vec<i64>,
}

impl CsvDataset {
    pub fn label_map(&self) -> BTreeMap<i64, usize> {
        self.original_labels
            .iter()
            .enumerate()
            .map(|(dense, &orig)| (orig, dense))
            .collect()
    }
}

/// Loads a `label,f0,f1,…` CSV; labels are re-indexed densely in
/// first-appearance order.
pub fn load_csv(path: &Path) -> Result<CsvDataset> {
    let table = read_table(path)?;
    if table.header.first().map(String::as_str) != Some("label") {
        return Err(Error::CsvParse {
            line: 1,
            msg: format!(
                "header must start with 'label', found '{}'",
                table.header.first().cloned().unwrap_or_default()
            ),
        });
    }
    if table.rows.is_empty() {
        return Err(Error::CsvParse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let dim = table.header.len() - 1;
    let mut original_labels: Vec<i64> = Vec::new();
    let mut labels = Vec::with_capacity(table.rows.len());
    let mut x = Mat::zeros(table.rows.len(), dim);
    for (i, row) in table.rows.iter().enumerate() {
        // Physical line: header is line 1, row 0 is line 2.
        let line = i + 2;
        let orig: i64 = row[0].parse().map_err(|_| Error::CsvParse {
            line,
            msg: format!("label '{}' is not an integer", row[0]),
        })?;
        let dense = match original_labels.iter().position(|&l| l == orig) {
            Some(d) => d,
            None => {
                original_labels.push(orig);
                original_labels.len() - 1
            }
        };
        labels.push(dense);
        for (c, cell) in row[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                line,
                msg: format!("field '{cell}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvParse {
                    line,
                    msg: format!("field '{cell}' is not finite"),
                });
            }
            x.set(i, c, v);
        }
    }
    Ok(CsvDataset {
        data: LabeledDataset { x, labels },
        original_labels,
    })
}

/// Serializes a dataset to the `label,f0,f1,…` format. `f64` values print in
/// shortest round-trip form, so write→load is bit-exact.
pub fn dataset_to_csv(ds: &LabeledDataset) -> String {
    let mut out = String::from("label");
    for c in 0..ds.dim() {
        let _ = write!(out, ",f{c}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let _ = write!(out, "{}", ds.labels[i]);
        for &v in ds.x.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(ds))?;
    Ok(())
}
