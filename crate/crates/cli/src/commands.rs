//! Filesystem-facing commands: each takes a resolved config plus an output
//! directory, writes its artifacts, and returns them in memory for callers
//! that want to keep going (tests, sweeps).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cil_core::clad::{Measurement, Strategy};
use cil_core::data::write_csv;
use cil_core::metrics::{pearson, profile_to_csv, profile_to_scatter, Aggregation, CorrelationReport, ForgettingProfile};
use cil_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::runner::{build_dataset, run_one_checkpointed, BundleAnalysis, ResultBundle};

fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Cross-seed aggregate of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub avg_incremental_accuracy: MeanStd,
    pub final_overall_accuracy: MeanStd,
    /// One entry per task, in task order.
    pub per_task_overall: Vec<MeanStd>,
}

pub fn summarize(bundles: &[ResultBundle]) -> Result<RunSummary> {
    if bundles.is_empty() {
        return Err(Error::Config("no bundles to summarize".into()));
    }
    let tasks = bundles[0].record.outcomes.len();
    if bundles.iter().any(|b| b.record.outcomes.len() != tasks) {
        return Err(Error::Config("bundles cover different task counts".into()));
    }
    let aia: Vec<f64> = bundles.iter().map(|b| b.avg_incremental_accuracy).collect();
    let final_overall: Vec<f64> = bundles
        .iter()
        .map(|b| b.record.overall_accuracies()[tasks - 1])
        .collect();
    let per_task_overall = (0..tasks)
        .map(|t| {
            let xs: Vec<f64> = bundles
                .iter()
                .map(|b| b.record.outcomes[t].overall_accuracy)
                .collect();
            mean_std(&xs)
        })
        .collect();
    Ok(RunSummary {
        seeds: bundles.iter().map(|b| b.seed).collect(),
        avg_incremental_accuracy: mean_std(&aia),
        final_overall_accuracy: mean_std(&final_overall),
        per_task_overall,
    })
}

/// Artifact paths written by `cmd_generate`.
#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub prototypes_json: PathBuf,
    pub collision_audit_csv: PathBuf,
}

/// Writes the synthetic dataset to disk: train/test CSVs, the prototype set,
/// and a per-pair audit of realized collision cosines.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateOutput> {
    cfg.validate()?;
    if cfg.data.synthetic.is_none() {
        return Err(Error::Config("generate needs a synthetic data spec".into()));
    }
    let data = build_dataset(cfg)?;
    let protos = data.prototypes.as_ref().expect("synthetic spec present");
    std::fs::create_dir_all(out)?;
    let paths = GenerateOutput {
        train_csv: out.join("train.csv"),
        test_csv: out.join("test.csv"),
        prototypes_json: out.join("prototypes.json"),
        collision_audit_csv: out.join("collision_audit.csv"),
    };
    write_csv(&data.train, &paths.train_csv)?;
    write_csv(&data.test, &paths.test_csv)?;
    write_string(&paths.prototypes_json, &serde_json::to_string_pretty(protos)?)?;
    let mut audit = String::from("new_class,old_class,target_cosine,realized_cosine\n");
    for c in &protos.collision_spec {
        audit.push_str(&format!(
            "{},{},{},{}\n",
            c.new_class,
            c.old_class,
            c.target_cosine,
            protos.cosine(c.new_class, c.old_class)
        ));
    }
    write_string(&paths.collision_audit_csv, &audit)?;
    Ok(paths)
}

/// Artifacts of a full multi-seed training command.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub out_dir: PathBuf,
    pub bundles: Vec<ResultBundle>,
    pub summary: RunSummary,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write_seed_artifacts(dir: &Path, bundle: &ResultBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_string(&dir.join("bundle.json"), &bundle.to_json()?)?;
    if let Some(a) = &bundle.analysis {
        write_analysis(dir, a)?;
    }
    Ok(())
}

fn write_analysis(dir: &Path, a: &BundleAnalysis) -> Result<()> {
    write_string(&dir.join("profile_max.csv"), &profile_to_csv(&a.profile_max))?;
    write_string(&dir.join("profile_mean.csv"), &profile_to_csv(&a.profile_mean))?;
    write_string(&dir.join("scatter_max.dat"), &profile_to_scatter(&a.profile_max))?;
    write_string(&dir.join("scatter_mean.dat"), &profile_to_scatter(&a.profile_mean))?;
    if let Some(c) = &a.correlation_max {
        write_string(&dir.join("correlation_max.json"), &serde_json::to_string_pretty(c)?)?;
    }
    if let Some(c) = &a.correlation_mean {
        write_string(&dir.join("correlation_mean.json"), &serde_json::to_string_pretty(c)?)?;
    }
    Ok(())
}

/// Runs every replicate seed, writing per-seed artifacts plus a cross-seed
/// summary. `with_checkpoints` additionally saves resumable per-task states.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, with_checkpoints: bool) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    write_string(&out.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    let mut bundles = Vec::with_capacity(cfg.replicate_seeds.len());
    for &seed in &cfg.replicate_seeds {
        let dir = seed_dir(out, seed);
        let ckpt_dir = with_checkpoints.then(|| dir.clone());
        let bundle = run_one_checkpointed(cfg, seed, ckpt_dir.as_deref())?;
        write_seed_artifacts(&dir, &bundle)?;
        bundles.push(bundle);
    }
    let summary = summarize(&bundles)?;
    write_string(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_string(&out.join("summary.csv"), &summary_csv(&bundles))?;
    Ok(TrainOutput {
        out_dir: out.to_path_buf(),
        bundles,
        summary,
    })
}

fn summary_csv(bundles: &[ResultBundle]) -> String {
    let tasks = bundles.first().map_or(0, |b| b.record.outcomes.len());
    let mut out = String::from("seed,avg_incremental_accuracy,final_overall_accuracy");
    for t in 1..=tasks {
        out.push_str(&format!(",task_{t}_overall"));
    }
    out.push('\n');
    for b in bundles {
        let overall = b.record.overall_accuracies();
        out.push_str(&format!(
            "{},{},{}",
            b.seed,
            b.avg_incremental_accuracy,
            overall[tasks - 1]
        ));
        for v in &overall {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// One swept hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Strategy,
    Proportion,
    Eta,
    Exemplars,
    Measurement,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Strategy => "strategy",
            SweepAxis::Proportion => "proportion",
            SweepAxis::Eta => "eta",
            SweepAxis::Exemplars => "exemplars",
            SweepAxis::Measurement => "measurement",
        }
    }
}

pub fn parse_sweep_axis(s: &str) -> Result<SweepAxis> {
    match s {
        "strategy" => Ok(SweepAxis::Strategy),
        "proportion" => Ok(SweepAxis::Proportion),
        "eta" => Ok(SweepAxis::Eta),
        "exemplars" => Ok(SweepAxis::Exemplars),
        "measurement" => Ok(SweepAxis::Measurement),
        _ => Err(Error::Config(format!(
            "unknown sweep '{s}' (expected strategy, proportion, eta, exemplars, or measurement)"
        ))),
    }
}

/// One grid point's label, the config it produces, and a numeric stand-in
/// for categorical values (their grid index).
struct GridPoint {
    label: String,
    value: f64,
    cfg: ExperimentConfig,
}

fn sweep_grid(base: &ExperimentConfig, axis: SweepAxis) -> Vec<GridPoint> {
    let mk = |label: String, value: f64, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        GridPoint { label, value, cfg }
    };
    match axis {
        SweepAxis::Strategy => [Strategy::Top, Strategy::Smallest, Strategy::Random]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                mk(format!("{s:?}").to_lowercase(), i as f64, &|c| {
                    c.train.strategy = s
                })
            })
            .collect(),
        SweepAxis::Proportion => [0.05, 0.1, 0.2, 0.4]
            .iter()
            .map(|&p| mk(format!("{p}"), p, &|c| c.train.proportion = p))
            .collect(),
        SweepAxis::Eta => [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&e| mk(format!("{e}"), e, &|c| c.train.eta = e))
            .collect(),
        SweepAxis::Exemplars => [5usize, 10, 20, 30, 40]
            .iter()
            .map(|&r| mk(format!("{r}"), r as f64, &|c| c.exemplars_per_class = r))
            .collect(),
        SweepAxis::Measurement => [
            Measurement::Logits,
            Measurement::Cosine,
            Measurement::OracleLogits,
        ]
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let label = match m {
                Measurement::Logits => "logits",
                Measurement::Cosine => "cosine",
                Measurement::OracleLogits => "oracle_logits",
            };
            mk(label.into(), i as f64, &|c| c.train.measurement = m)
        })
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub label: String,
    /// The swept value; grid index for categorical axes.
    pub value: f64,
    pub avg_incremental_accuracy: MeanStd,
    pub final_overall_accuracy: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblateRow>,
}

/// Sweeps one axis over its grid, averaging each point over the ablation
/// seeds, and writes `ablate-<axis>.csv` / `.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: SweepAxis, out: &Path) -> Result<AblateTable> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let seeds = cfg.ablation_seeds().to_vec();
    let mut rows = Vec::new();
    for point in sweep_grid(cfg, axis) {
        let mut bundles = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            bundles.push(crate::runner::run_one(&point.cfg, seed)?);
        }
        let summary = summarize(&bundles)?;
        rows.push(AblateRow {
            label: point.label,
            value: point.value,
            avg_incremental_accuracy: summary.avg_incremental_accuracy,
            final_overall_accuracy: summary.final_overall_accuracy,
        });
    }
    let table = AblateTable {
        axis: axis.name().into(),
        seeds,
        rows,
    };
    let mut csv = format!(
        "{},value,avg_incremental_accuracy_mean,avg_incremental_accuracy_std,\
         final_overall_mean,final_overall_std\n",
        table.axis
    );
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.value,
            r.avg_incremental_accuracy.mean,
            r.avg_incremental_accuracy.std,
            r.final_overall_accuracy.mean,
            r.final_overall_accuracy.std
        ));
    }
    write_string(&out.join(format!("ablate-{}.csv", table.axis)), &csv)?;
    write_string(
        &out.join(format!("ablate-{}.json", table.axis)),
        &serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}

/// Per-seed reports plus the cross-seed pooled correlations.
#[derive(Clone, Debug)]
pub struct AnalyzeOutput {
    pub per_seed: Vec<(u64, Option<BundleAnalysis>)>,
    pub pooled_max: Option<CorrelationReport>,
    pub pooled_mean: Option<CorrelationReport>,
}

/// Loads every `seed-*/bundle.json` under `dir`, sorted by seed.
pub fn scan_bundles(dir: &Path) -> Result<Vec<ResultBundle>> {
    let mut bundles = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path().join("bundle.json");
            if path.is_file() {
                bundles.push(ResultBundle::from_json(&std::fs::read_to_string(&path)?)?);
            }
        }
    }
    if bundles.is_empty() {
        return Err(Error::Config(format!(
            "no result bundles under {}",
            dir.display()
        )));
    }
    bundles.sort_by_key(|b| b.seed);
    Ok(bundles)
}

fn pooled_pairs(
    bundles: &[ResultBundle],
    pick: impl Fn(&BundleAnalysis) -> &ForgettingProfile,
) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for b in bundles {
        if let Some(a) = &b.analysis {
            for (s, d) in pick(a).scatter() {
                xs.push(s);
                ys.push(d);
            }
        }
    }
    (xs, ys)
}

/// Correlation over the union of every bundle's defined scatter points.
pub fn pooled_correlation(
    bundles: &[ResultBundle],
    aggregation: Aggregation,
    permutations: usize,
    seed: u64,
) -> Result<Option<CorrelationReport>> {
    let (xs, ys) = pooled_pairs(bundles, |a| match aggregation {
        Aggregation::Max => &a.profile_max,
        Aggregation::Mean => &a.profile_mean,
    });
    if xs.len() < 3 {
        return Ok(None);
    }
    match pearson(&xs, &ys, permutations, seed) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Recomputes the analysis for every bundle in a training output directory,
/// rewrites the per-seed analysis artifacts, and pools the scatter points
/// across seeds into one correlation per aggregation.
pub fn cmd_analyze(dir: &Path) -> Result<AnalyzeOutput> {
    let bundles = scan_bundles(dir)?;
    let mut per_seed = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let data = build_dataset(&b.config)?;
        let seq = crate::runner::build_sequence(&b.config, &data)?;
        let analysis = crate::runner::analyze_record(&b.config, &seq, &b.record)?;
        if let Some(a) = &analysis {
            write_analysis(&seed_dir(dir, b.seed), a)?;
        }
        per_seed.push((b.seed, analysis));
    }
    let acfg = &bundles[0].config.analysis;
    let mut pooled = [None, None];
    for (slot, agg) in pooled.iter_mut().zip([Aggregation::Max, Aggregation::Mean]) {
        *slot = pooled_correlation(&bundles, agg, acfg.permutations, acfg.correlation_seed)?;
        if let Some(c) = slot {
            let name = match agg {
                Aggregation::Max => "max",
                Aggregation::Mean => "mean",
            };
            write_string(
                &dir.join(format!("pooled_correlation_{name}.json")),
                &serde_json::to_string_pretty(c)?,
            )?;
            let mut scatter = String::from("# similarity delta\n");
            for (s, d) in &c.pairs {
                scatter.push_str(&format!("{s} {d}\n"));
            }
            write_string(&dir.join(format!("pooled_scatter_{name}.dat")), &scatter)?;
        }
    }
    let [pooled_max, pooled_mean] = pooled;
    Ok(AnalyzeOutput {
        per_seed,
        pooled_max,
        pooled_mean,
    })
}
