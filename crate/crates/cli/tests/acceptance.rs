//! The acceptance gate: ten numbered criteria with pinned tolerances and
//! runtime budgets, driven end to end against the stock benchmark. Each
//! criterion prints one `AC-n PASS|FAIL` line with its measured numbers.
//!
//! Criteria 5 and 6 encode the hoped-for improvement from conflict-aware
//! disentanglement. At this benchmark's scale the measured effect is the
//! reverse — the regularizer reliably costs accuracy (see the README's
//! results section) — so the gate pins those two as unmet and fails loudly
//! if any criterion flips in either direction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cil_core::checkpoint::load_checkpoint;
use cil_core::clad::{forgetting_prediction, select_conflicts, Measurement, Strategy};
use cil_core::metrics::{spearman, Aggregation};
use cil_core::model::snapshot;
use cil_core::num::Rng;
use cil_core::replay::herding_select;
use cil_core::Mat;
use cil_lab::checks::run_gradcheck;
use cil_lab::commands::{cmd_train, pooled_correlation, TrainOutput};
use cil_lab::config::ExperimentConfig;
use cil_lab::runner::{build_dataset, build_sequence, run_one, run_one_checkpointed, resume_one};

// Criterion thresholds. "Points" are accuracy fractions: 1.0 point = 0.01.
const FD_INSTANCES: usize = 20;
const FD_TOLERANCE: f64 = 1e-6;
const FD_FAMILIES: usize = 8;
const HERDING_INSTANCES: usize = 100;
const JOINT_MIN_ACC: f64 = 0.95;
const GAP_MIN: f64 = 0.10;
const GAP_SEEDS_MIN: usize = 4;
const R_MEAN_MIN: f64 = 0.3;
const POOLED_P_MAX: f64 = 0.05;
const AIA_DROP_TOLERANCE: f64 = 0.002;
const AIA_WIN_SEEDS_MIN: usize = 3;
const COLLIDING_GAIN_MIN: f64 = 0.010;
const SMALLEST_SLACK: f64 = 0.003;
const COLLAPSE_DROP_MIN: f64 = 0.30;
const JACCARD_MIN: f64 = 0.5;
const SPEARMAN_MIN: f64 = 0.8;
const MEASUREMENT_AIA_TOL: f64 = 0.010;
const ETA_GRID: [f64; 3] = [1.0, 2.0, 4.0];
const EVAL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HELD_OUT_SEED: u64 = 5;

// Per-criterion wall-clock budgets, seconds.
const BUDGETS: [f64; 10] = [30.0, 10.0, 120.0, 300.0, 600.0, 900.0, 120.0, 180.0, 240.0, 600.0];

// Pinned verdicts: a criterion flipping against this table is a regression.
const EXPECTED: [bool; 10] = [
    true, true, true, true, false, false, true, true, true, true,
];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The stock sequential benchmark: 20 classes, base 10 plus two tasks of 5,
/// four engineered collisions, replay budget 5.
fn benchmark_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.exemplars_per_class = 5;
    cfg.train.eta = 0.0;
    cfg
}

fn clad_cfg(eta: f64) -> ExperimentConfig {
    let mut cfg = benchmark_cfg();
    cfg.train.eta = eta;
    cfg.train.proportion = 0.1;
    cfg.train.strategy = Strategy::Top;
    cfg
}

fn joint_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.split.base_size = 20;
    cfg.train.eta = 0.0;
    cfg
}

/// Trained-run cache: one `cmd_train` per (label, seed), re-used by every
/// later criterion so budgets stay attributable to the first user.
struct Gate {
    root: tempfile::TempDir,
    runs: HashMap<String, TrainOutput>,
}

impl Gate {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().expect("temp dir for acceptance runs"),
            runs: HashMap::new(),
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn run(&mut self, label: &str, cfg: &ExperimentConfig, seed: u64) -> &TrainOutput {
        let key = format!("{label}-s{seed}");
        if !self.runs.contains_key(&key) {
            let mut one = cfg.clone();
            one.replicate_seeds = vec![seed];
            let out = cmd_train(&one, &self.dir(&key), true).expect("benchmark run");
            self.runs.insert(key.clone(), out);
        }
        &self.runs[&key]
    }

    fn aia(&mut self, label: &str, cfg: &ExperimentConfig, seed: u64) -> f64 {
        self.run(label, cfg, seed).bundles[0].avg_incremental_accuracy
    }

    /// Mean final-task accuracy over `classes` for one cached run.
    fn final_acc(&mut self, label: &str, cfg: &ExperimentConfig, seed: u64, classes: &[usize]) -> f64 {
        let b = &self.run(label, cfg, seed).bundles[0];
        let acc = &b.record.outcomes.last().expect("tasks ran").per_class_accuracy;
        mean(&classes.iter().map(|c| acc[c]).collect::<Vec<f64>>())
    }
}

/// Colliding base-task classes, read off the configured collision pairs.
fn colliding_base(cfg: &ExperimentConfig) -> Vec<usize> {
    cfg.data
        .synthetic
        .as_ref()
        .expect("synthetic benchmark")
        .collisions
        .iter()
        .map(|c| c.old_class)
        .collect()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn v(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Every differentiable op family matches central finite differences.
fn ac1() -> Verdict {
    let report = run_gradcheck(FD_INSTANCES, FD_TOLERANCE, 20260822).expect("gradcheck runs");
    let worst = report
        .ops
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    let pass = report.ops.len() == FD_FAMILIES
        && report.ops.iter().all(|o| o.instances == FD_INSTANCES)
        && report.passes();
    v(
        pass,
        format!(
            "{} op families x {FD_INSTANCES} instances, worst rel err {worst:.2e} (tol {FD_TOLERANCE:.0e})",
            report.ops.len()
        ),
    )
}

/// Greedy mean-matching oracle, written independently of the library: at
/// each step take the lowest-index row minimizing the distance between the
/// running selection mean and the full class mean.
fn oracle_herding(feats: &Mat, r: usize) -> Vec<usize> {
    let n = feats.rows();
    let dim = feats.cols();
    let mu: Vec<f64> = (0..dim)
        .map(|d| (0..n).map(|i| feats.row(i)[d]).sum::<f64>() / n as f64)
        .collect();
    let mut sum = vec![0.0; dim];
    let mut used = vec![false; n];
    let mut picks = Vec::new();
    for step in 1..=r.min(n) {
        let mut best_i = usize::MAX;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            if used[i] {
                continue;
            }
            let d: f64 = (0..dim)
                .map(|k| {
                    let m = (sum[k] + feats.row(i)[k]) / step as f64;
                    (mu[k] - m) * (mu[k] - m)
                })
                .sum();
            if d < best_d {
                best_d = d;
                best_i = i;
            }
        }
        used[best_i] = true;
        for (s, &x) in sum.iter_mut().zip(feats.row(best_i)) {
            *s += x;
        }
        picks.push(best_i);
    }
    picks
}

fn ac2() -> Verdict {
    let mut mismatches = 0;
    for inst in 0..HERDING_INSTANCES {
        let mut rng = Rng::stream(7, "acceptance-herding", &[inst as u64]);
        let n = 1 + rng.below(12) as usize;
        let r = 1 + rng.below(6) as usize;
        let dim = 1 + rng.below(4) as usize;
        let mut feats = Mat::zeros(n, dim);
        for i in 0..n {
            for x in feats.row_mut(i) {
                *x = rng.normal();
            }
        }
        if herding_select(&feats, r).expect("herding runs") != oracle_herding(&feats, r) {
            mismatches += 1;
        }
    }
    v(
        mismatches == 0,
        format!("{HERDING_INSTANCES} random instances, {mismatches} index-sequence mismatches"),
    )
}

fn ac3(gate: &mut Gate) -> Verdict {
    let cfg = joint_cfg();
    let accs: Vec<f64> = (0..3).map(|s| gate.aia("joint", &cfg, s)).collect();
    let m = mean(&accs);
    v(
        m >= JOINT_MIN_ACC,
        format!("joint 20-class accuracy {m:.4} over 3 seeds (need >= {JOINT_MIN_ACC})"),
    )
}

fn ac4(gate: &mut Gate) -> Verdict {
    let cfg = benchmark_cfg();
    let colliding = colliding_base(&cfg);
    let mut gaps = Vec::new();
    let mut rs = Vec::new();
    let mut bundles = Vec::new();
    for &s in &EVAL_SEEDS {
        let out = gate.run("naive-r5", &cfg, s);
        let b = &out.bundles[0];
        let analysis = b.analysis.as_ref().expect("benchmark analysis present");
        let mut coll = Vec::new();
        let mut rest = Vec::new();
        for row in &analysis.profile_max.rows {
            if let Some(d) = row.delta {
                if colliding.contains(&row.class) {
                    coll.push(d);
                } else {
                    rest.push(d);
                }
            }
        }
        gaps.push(mean(&coll) - mean(&rest));
        rs.push(
            analysis
                .correlation_max
                .as_ref()
                .expect("per-seed correlation defined")
                .r,
        );
        bundles.push(b.clone());
    }
    let hits = gaps.iter().filter(|&&g| g >= GAP_MIN).count();
    let r_mean = mean(&rs);
    let acfg = &cfg.analysis;
    let pooled = pooled_correlation(&bundles, Aggregation::Max, acfg.permutations, acfg.correlation_seed)
        .expect("pooled correlation computes")
        .expect("pooled correlation defined");
    let pass = hits >= GAP_SEEDS_MIN && r_mean >= R_MEAN_MIN && pooled.permutation_p < POOLED_P_MAX;
    v(
        pass,
        format!(
            "delta gap >= {GAP_MIN} in {hits}/5 seeds (gaps {:.3}..{:.3}); mean r {r_mean:.3} (need >= {R_MEAN_MIN}); pooled p {:.4} (need < {POOLED_P_MAX})",
            gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            pooled.permutation_p
        ),
    )
}

/// Disentanglement weight chosen on the held-out seed, then compared to
/// naive replay on the evaluation seeds.
fn select_eta(gate: &mut Gate) -> f64 {
    let mut best = (ETA_GRID[0], f64::NEG_INFINITY);
    for &eta in &ETA_GRID {
        let a = gate.aia(&format!("clad-sel-e{eta}"), &clad_cfg(eta), HELD_OUT_SEED);
        if a > best.1 {
            best = (eta, a);
        }
    }
    best.0
}

fn ac5(gate: &mut Gate, eta: f64) -> Verdict {
    let naive = benchmark_cfg();
    let clad = clad_cfg(eta);
    let colliding = colliding_base(&naive);
    let clad_label = format!("clad-top-e{eta}");
    let mut naive_aia = Vec::new();
    let mut clad_aia = Vec::new();
    let mut naive_cb = Vec::new();
    let mut clad_cb = Vec::new();
    for &s in &EVAL_SEEDS {
        naive_aia.push(gate.aia("naive-r5", &naive, s));
        clad_aia.push(gate.aia(&clad_label, &clad, s));
        naive_cb.push(gate.final_acc("naive-r5", &naive, s, &colliding));
        clad_cb.push(gate.final_acc(&clad_label, &clad, s, &colliding));
    }
    let aia_diff = mean(&clad_aia) - mean(&naive_aia);
    let wins = clad_aia
        .iter()
        .zip(&naive_aia)
        .filter(|(c, n)| c > n)
        .count();
    let cb_gain = mean(&clad_cb) - mean(&naive_cb);
    let pass =
        aia_diff >= -AIA_DROP_TOLERANCE && wins >= AIA_WIN_SEEDS_MIN && cb_gain >= COLLIDING_GAIN_MIN;
    v(
        pass,
        format!(
            "eta {eta}: aia {:.4} vs naive {:.4} (diff {aia_diff:+.4}, need >= -{AIA_DROP_TOLERANCE}); wins {wins}/5 (need >= {AIA_WIN_SEEDS_MIN}); colliding-base final {cb_gain:+.4} (need >= +{COLLIDING_GAIN_MIN})",
            mean(&clad_aia),
            mean(&naive_aia)
        ),
    )
}

fn ac6(gate: &mut Gate, eta: f64) -> Verdict {
    let seeds = &EVAL_SEEDS[..3];
    let naive = benchmark_cfg();
    let strat_cfg = |s: Strategy| {
        let mut c = clad_cfg(eta);
        c.train.strategy = s;
        c
    };
    let top_cfg = strat_cfg(Strategy::Top);
    let rnd_cfg = strat_cfg(Strategy::Random);
    let sml_cfg = strat_cfg(Strategy::Smallest);
    let top_label = format!("clad-top-e{eta}");
    let top = mean(&seeds.iter().map(|&s| gate.aia(&top_label, &top_cfg, s)).collect::<Vec<f64>>());
    let rnd = mean(&seeds.iter().map(|&s| gate.aia("clad-random", &rnd_cfg, s)).collect::<Vec<f64>>());
    let sml = mean(&seeds.iter().map(|&s| gate.aia("clad-smallest", &sml_cfg, s)).collect::<Vec<f64>>());
    let nve = mean(&seeds.iter().map(|&s| gate.aia("naive-r5", &naive, s)).collect::<Vec<f64>>());
    let pass = top >= rnd && top >= sml && sml - nve <= SMALLEST_SLACK;
    v(
        pass,
        format!(
            "aia top {top:.4}, random {rnd:.4}, smallest {sml:.4}, naive {nve:.4}; need top >= both and smallest - naive <= {SMALLEST_SLACK}"
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> bool {
    fs::read(a).ok() == fs::read(b).ok() && a.is_file() && b.is_file()
}

fn ac7(gate: &Gate) -> Verdict {
    // Same training semantics, different knob settings: with the weight at
    // zero the conflict knobs must leave no trace in any metric file.
    let mut rd_off = clad_cfg(0.0);
    rd_off.train.proportion = 0.4;
    rd_off.train.strategy = Strategy::Random;
    rd_off.replicate_seeds = vec![0, 1];
    let mut naive = benchmark_cfg();
    naive.replicate_seeds = vec![0, 1];
    let a = gate.dir("ac7-rd-off");
    let b = gate.dir("ac7-naive");
    cmd_train(&rd_off, &a, false).expect("rd-off run");
    cmd_train(&naive, &b, false).expect("naive run");
    let mut checked = 0;
    let mut equal = 0;
    for f in [
        "seed-0/profile_max.csv",
        "seed-0/profile_mean.csv",
        "seed-0/scatter_max.dat",
        "seed-0/scatter_mean.dat",
        "seed-1/profile_max.csv",
        "seed-1/profile_mean.csv",
        "seed-1/scatter_max.dat",
        "seed-1/scatter_mean.dat",
        "summary.csv",
    ] {
        checked += 1;
        if files_equal(&a.join(f), &b.join(f)) {
            equal += 1;
        }
    }
    v(
        equal == checked,
        format!("{equal}/{checked} metric files byte-identical between eta=0 and naive"),
    )
}

fn ac8(gate: &Gate, eta: f64) -> Verdict {
    let mut cfg = clad_cfg(eta);
    cfg.replicate_seeds = vec![0];
    let first = run_one(&cfg, 0).expect("first run");
    let second = run_one(&cfg, 0).expect("second run");
    let repro = first.canonical_json().expect("canonical json")
        == second.canonical_json().expect("canonical json");
    let ckpt_dir = gate.dir("ac8-ckpt");
    fs::create_dir_all(&ckpt_dir).expect("checkpoint dir");
    let straight = run_one_checkpointed(&cfg, 0, Some(&ckpt_dir)).expect("checkpointed run");
    let resumed = resume_one(&cfg, &ckpt_dir.join("checkpoint-task-1.json")).expect("resume");
    let resume_ok = straight.canonical_json().expect("canonical json")
        == resumed.canonical_json().expect("canonical json");
    v(
        repro && resume_ok,
        format!("identical reruns bitwise-equal: {repro}; mid-sequence resume bitwise-equal: {resume_ok}"),
    )
}

fn ac9(gate: &mut Gate) -> Verdict {
    let mut no_replay = benchmark_cfg();
    no_replay.exemplars_per_class = 0;
    no_replay.train.lambda = 0.0;
    let mut full = benchmark_cfg();
    full.exemplars_per_class = 20;
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for s in 0..3 {
        let base: Vec<usize> = gate.run("r0", &no_replay, s).bundles[0].record.class_order[..10].to_vec();
        dropped.push(gate.final_acc("r0", &no_replay, s, &base));
        kept.push(gate.final_acc("r20", &full, s, &base));
    }
    let drop = mean(&kept) - mean(&dropped);
    v(
        drop >= COLLAPSE_DROP_MIN,
        format!(
            "base-class final accuracy {:.4} without replay vs {:.4} with R=20 (drop {drop:.4}, need >= {COLLAPSE_DROP_MIN})",
            mean(&dropped),
            mean(&kept)
        ),
    )
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

fn ac10(gate: &mut Gate, eta: f64) -> Verdict {
    // Score agreement, measured per task on one frozen model: both
    // measurements see the same snapshot and the same replay buffer.
    let cfg = benchmark_cfg();
    let data = build_dataset(&cfg).expect("dataset");
    let seq = build_sequence(&cfg, &data).expect("sequence");
    let column_of: BTreeMap<usize, usize> = seq
        .class_order
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut spearmans = Vec::new();
    let mut jaccards = Vec::new();
    for s in 0..3u64 {
        gate.run("naive-r5", &cfg, s);
        let run_dir = gate.dir(&format!("naive-r5-s{s}")).join(format!("seed-{s}"));
        for done in 1..seq.tasks.len() {
            let cp = load_checkpoint(&run_dir.join(format!("checkpoint-task-{done}.json")))
                .expect("task checkpoint");
            let snap = snapshot(&cp.model, done);
            let old_pairs: Vec<(usize, usize)> = (0..snap.num_classes()).map(|c| (c, c)).collect();
            let task = &seq.tasks[done];
            for &class in &task.classes {
                let rows: Vec<usize> = task
                    .train
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l == class)
                    .map(|(i, _)| i)
                    .collect();
                let class_x = task.train.x.select_rows(&rows);
                let col = column_of[&class];
                let by_logits = forgetting_prediction(
                    &snap,
                    &class_x,
                    col,
                    &old_pairs,
                    Measurement::Logits,
                    Some(&cp.buffer),
                )
                .expect("logit scores");
                let by_cosine = forgetting_prediction(
                    &snap,
                    &class_x,
                    col,
                    &old_pairs,
                    Measurement::Cosine,
                    Some(&cp.buffer),
                )
                .expect("cosine scores");
                spearmans.push(spearman(&by_logits.scores, &by_cosine.scores).expect("rank corr"));
                let mut rng_a = Rng::stream(s, "ac10", &[done as u64]);
                let mut rng_b = rng_a.clone();
                let set_a = select_conflicts(&by_logits, 0.1, Strategy::Top, &mut rng_a).expect("sets");
                let set_b = select_conflicts(&by_cosine, 0.1, Strategy::Top, &mut rng_b).expect("sets");
                jaccards.push(jaccard(&set_a, &set_b));
            }
        }
    }
    let sp = mean(&spearmans);
    let jc = mean(&jaccards);

    // Downstream: full runs steered by each measurement.
    let logit_label = format!("clad-top-e{eta}");
    let logit_cfg = clad_cfg(eta);
    let mut cosine_cfg = clad_cfg(eta);
    cosine_cfg.train.measurement = Measurement::Cosine;
    let seeds = &EVAL_SEEDS[..3];
    let al = mean(&seeds.iter().map(|&s| gate.aia(&logit_label, &logit_cfg, s)).collect::<Vec<f64>>());
    let ac = mean(&seeds.iter().map(|&s| gate.aia("clad-cosine", &cosine_cfg, s)).collect::<Vec<f64>>());
    let adiff = (al - ac).abs();
    let pass = jc >= JACCARD_MIN && sp > SPEARMAN_MIN && adiff < MEASUREMENT_AIA_TOL;
    v(
        pass,
        format!(
            "conflict-set jaccard {jc:.3} (need >= {JACCARD_MIN}); score spearman {sp:.3} (need > {SPEARMAN_MIN}); downstream aia |{al:.4} - {ac:.4}| = {adiff:.4} (need < {MEASUREMENT_AIA_TOL})"
        ),
    )
}

#[test]
fn acceptance_gate() {
    let mut gate = Gate::new();
    let mut results: Vec<(Verdict, f64)> = Vec::new();

    let step = |name: &str, f: &mut dyn FnMut(&mut Gate) -> Verdict, gate: &mut Gate| {
        let t0 = Instant::now();
        let verdict = f(gate);
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{name} {} {} [{secs:.1}s]",
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
        (verdict, secs)
    };

    results.push(step("AC-1", &mut |_| ac1(), &mut gate));
    results.push(step("AC-2", &mut |_| ac2(), &mut gate));
    results.push(step("AC-3", &mut |g| ac3(g), &mut gate));
    results.push(step("AC-4", &mut |g| ac4(g), &mut gate));
    let eta = select_eta(&mut gate);
    results.push(step("AC-5", &mut |g| ac5(g, eta), &mut gate));
    results.push(step("AC-6", &mut |g| ac6(g, eta), &mut gate));
    results.push(step("AC-7", &mut |g| ac7(g), &mut gate));
    results.push(step("AC-8", &mut |g| ac8(g, eta), &mut gate));
    results.push(step("AC-9", &mut |g| ac9(g), &mut gate));
    results.push(step("AC-10", &mut |g| ac10(g, eta), &mut gate));

    let met = results.iter().filter(|(v, _)| v.pass).count();
    println!("gate: {met}/10 criteria met; criteria 5 and 6 are pinned unmet at this scale");

    for (i, ((verdict, secs), (&expected, &budget))) in results
        .iter()
        .zip(EXPECTED.iter().zip(&BUDGETS))
        .enumerate()
    {
        assert!(
            *secs <= budget,
            "AC-{} took {secs:.1}s, budget {budget}s",
            i + 1
        );
        assert_eq!(
            verdict.pass,
            expected,
            "AC-{} flipped: expected {}, measured {} ({})",
            i + 1,
            if expected { "PASS" } else { "FAIL" },
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
    }
}
