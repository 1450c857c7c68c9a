//! Randomized gradient sweeps and the end-to-end selftest.
//!
//! Each op family gets freshly sampled instances; instances that sit too
//! close to a relu kink or a degenerate vector norm are resampled, because
//! central differences are meaningless across a non-differentiable point.

use std::collections::BTreeMap;

use serde::Serialize;

use cil_core::clad::{clad_loss_text, loss_offline, loss_online, ConflictMap, FrozenConflictCache};
use cil_core::model::{init_model, snapshot, Activation, ModelConfig};
use cil_core::num::{
    affine_backward, affine_forward, grad_check, relu_backward, relu_forward,
    softmax_cross_entropy, GradCheckReport, Rng,
};
use cil_core::train::distill_softened_ce;
use cil_core::{Error, Mat, Result};

const FD_STEP: f64 = 1e-6;
/// Keep sampled points this far from relu kinks and zero norms.
const KINK_MARGIN: f64 = 1e-3;
const RESAMPLE_LIMIT: usize = 200;

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal();
    }
    m
}

/// Normal draws with every coordinate pushed at least `KINK_MARGIN` from 0.
fn randn_off_kink(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let mut m = randn(rng, rows, cols);
    for v in m.data_mut() {
        if v.abs() < KINK_MARGIN {
            *v = KINK_MARGIN.copysign(*v + f64::MIN_POSITIVE);
        }
    }
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.ops.iter().all(|o| o.max_rel_err <= self.tolerance)
    }
}

fn fold(worst: &mut f64, report: GradCheckReport) {
    if report.max_relative_error > *worst {
        *worst = report.max_relative_error;
    }
}

fn check_affine(rng: &mut Rng) -> GradCheckReport {
    let (n, d_in, d_out) = (
        1 + rng.below(4) as usize,
        2 + rng.below(4) as usize,
        2 + rng.below(4) as usize,
    );
    let x = randn(rng, n, d_in);
    let w = randn(rng, d_in, d_out);
    let b = randn(rng, 1, d_out);
    let probe = randn(rng, n, d_out);
    let mut f = |p: &[Mat]| {
        let out = affine_forward(&p[0], &p[1], &p[2]).unwrap();
        let loss = out
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&o, &c)| o * c)
            .sum::<f64>();
        let (dx, dw, db) = affine_backward(&probe, &p[0], &p[1]).unwrap();
        (loss, vec![dx, dw, db])
    };
    grad_check(&mut f, &[x, w, b], FD_STEP, rng)
}

fn check_relu(rng: &mut Rng) -> GradCheckReport {
    let (n, d) = (1 + rng.below(4) as usize, 2 + rng.below(5) as usize);
    let x = randn_off_kink(rng, n, d);
    let probe = randn(rng, n, d);
    let mut f = |p: &[Mat]| {
        let out = relu_forward(&p[0]);
        let loss = out
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&o, &c)| o * c)
            .sum::<f64>();
        let dx = relu_backward(&probe, &p[0]).unwrap();
        (loss, vec![dx])
    };
    grad_check(&mut f, &[x], FD_STEP, rng)
}

fn check_cross_entropy(rng: &mut Rng) -> GradCheckReport {
    let (n, k) = (1 + rng.below(5) as usize, 2 + rng.below(5) as usize);
    let logits = randn(rng, n, k);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
    let mut f = |p: &[Mat]| {
        let (loss, d) = softmax_cross_entropy(&p[0], &labels).unwrap();
        (loss, vec![d])
    };
    grad_check(&mut f, &[logits], FD_STEP, rng)
}

/// `x` vs one frozen row: the single-pair cosine penalty.
fn check_cosine(rng: &mut Rng) -> GradCheckReport {
    let d = 3 + rng.below(5) as usize;
    let x = randn(rng, 1, d);
    let frozen = randn(rng, 1, d);
    let mut f = |p: &[Mat]| {
        let (loss, dx) = loss_offline(p[0].row(0), &frozen).unwrap();
        let mut g = Mat::zeros(1, d);
        g.row_mut(0).copy_from_slice(&dx);
        (loss, vec![g])
    };
    grad_check(&mut f, &[x], FD_STEP, rng)
}

fn check_distillation(rng: &mut Rng) -> GradCheckReport {
    let (n, k) = (1 + rng.below(5) as usize, 2 + rng.below(5) as usize);
    let student = randn(rng, n, k);
    let teacher = randn(rng, n, k);
    let temp = 1.0 + rng.next_f64() * 3.0;
    let mut f = |p: &[Mat]| {
        let (loss, d) = distill_softened_ce(&p[0], &teacher, temp).unwrap();
        (loss, vec![d])
    };
    grad_check(&mut f, &[student], FD_STEP, rng)
}

/// Live sample against live conflict exemplars, gradients on both sides.
fn check_online(rng: &mut Rng) -> GradCheckReport {
    let d = 3 + rng.below(5) as usize;
    let m = 1 + rng.below(4) as usize;
    let x = randn(rng, 1, d);
    let conf = randn(rng, m, d);
    let mut f = |p: &[Mat]| {
        let (loss, dx, dconf) = loss_online(p[0].row(0), &p[1]).unwrap();
        let mut g = Mat::zeros(1, d);
        g.row_mut(0).copy_from_slice(&dx);
        (loss, vec![g, dconf])
    };
    grad_check(&mut f, &[x, conf], FD_STEP, rng)
}

/// Live sample against frozen features; gradient on the live side only.
fn check_offline(rng: &mut Rng) -> GradCheckReport {
    let d = 3 + rng.below(5) as usize;
    let m = 1 + rng.below(4) as usize;
    let x = randn(rng, 1, d);
    let frozen = randn(rng, m, d);
    let mut f = |p: &[Mat]| {
        let (loss, dx) = loss_offline(p[0].row(0), &frozen).unwrap();
        let mut g = Mat::zeros(1, d);
        g.row_mut(0).copy_from_slice(&dx);
        (loss, vec![g])
    };
    grad_check(&mut f, &[x], FD_STEP, rng)
}

/// The full per-batch objective through a small model: cross-entropy plus
/// weighted distillation and disentanglement, differentiated with respect to
/// every parameter tensor.
fn check_composite(rng: &mut Rng) -> Result<GradCheckReport> {
    let config = ModelConfig {
        input_dim: 5,
        hidden_dims: vec![7],
        feature_dim: 5,
        activation: Activation::Relu,
    };
    let (lambda, eta, temp) = (0.7, 1.3, 2.0);
    let k_old = 3;
    let k_new = 2;
    let n = 6;

    // Instances whose forward pass skirts a relu kink or a tiny feature norm
    // are discarded; the finite-difference probe would cross the kink.
    for _ in 0..RESAMPLE_LIMIT {
        let mut model = init_model(&config, rng.next_u64())?;
        model.expand_head(k_old, rng.next_u64())?;
        let mut teacher = init_model(&config, rng.next_u64())?;
        teacher.expand_head(k_old, rng.next_u64())?;
        let snap = snapshot(&teacher, 1);
        model.expand_head(k_new, rng.next_u64())?;

        let x = randn(rng, n, config.input_dim);
        // Rows 0..3 are new-class samples, 3..6 replayed old-class rows.
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                if i < 3 {
                    k_old + rng.below(k_new as u64) as usize
                } else {
                    rng.below(k_old as u64) as usize
                }
            })
            .collect();
        let from_buffer: Vec<bool> = (0..n).map(|i| i >= 3).collect();
        let mut conflicts = BTreeMap::new();
        conflicts.insert(k_old, vec![0usize, 1]);
        conflicts.insert(k_old + 1, vec![2usize]);
        let map = ConflictMap {
            proportion: 0.5,
            strategy: cil_core::clad::Strategy::Top,
            conflicts,
        };
        let mut per_class = BTreeMap::new();
        for c in 0..k_old {
            per_class.insert(c, randn(rng, 2, config.feature_dim));
        }
        let cache = FrozenConflictCache { per_class };

        let loss_and_grads = |p: &[Mat]| -> Result<(f64, Vec<Mat>)> {
            let m = model.with_tensors(p);
            let trace = m.forward_trace(&x)?;
            let (ce, mut d_logits) = softmax_cross_entropy(&trace.logits, &labels)?;
            let student_old = take_cols(&trace.logits, k_old);
            let teacher_old = snap.logits(&x)?;
            let (distill, d_old) = distill_softened_ce(&student_old, &teacher_old, temp)?;
            for r in 0..d_old.rows() {
                let dst = &mut d_logits.row_mut(r)[..k_old];
                for (acc, &g) in dst.iter_mut().zip(d_old.row(r)) {
                    *acc += lambda * g;
                }
            }
            let (dis, mut d_feat) =
                clad_loss_text(&labels, &from_buffer, &trace.features, &map, &cache, false)?;
            d_feat.scale(eta);
            let grads = m.backward_trace(&trace, &d_logits, Some(&d_feat))?;
            Ok((ce + lambda * distill + eta * dis, grads))
        };

        let params: Vec<Mat> = model.tensors().into_iter().cloned().collect();
        let probe = model.forward_trace(&x)?;
        let kink = probe
            .pre
            .iter()
            .flat_map(|m| m.data())
            .fold(f64::INFINITY, |a, &v| a.min(v.abs()));
        let min_norm = (0..probe.features.rows())
            .map(|r| probe.features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if kink < KINK_MARGIN || min_norm < 0.1 {
            continue;
        }
        let mut f = |p: &[Mat]| {
            let (l, g) = loss_and_grads(p).expect("composite loss evaluates");
            (l, g)
        };
        return Ok(grad_check(&mut f, &params, FD_STEP, rng));
    }
    Err(Error::Config(
        "could not sample a kink-free composite instance".into(),
    ))
}

fn take_cols(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::zeros(m.rows(), k);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..k]);
    }
    out
}

/// Runs every op family `instances` times; the report carries the worst
/// relative error seen per family.
pub fn run_gradcheck(instances: usize, tolerance: f64, seed: u64) -> Result<GradReport> {
    let named: Vec<(&str, Box<dyn Fn(&mut Rng) -> Result<GradCheckReport>>)> = vec![
        ("affine", Box::new(|r| Ok(check_affine(r)))),
        ("relu", Box::new(|r| Ok(check_relu(r)))),
        ("cross_entropy", Box::new(|r| Ok(check_cross_entropy(r)))),
        ("cosine", Box::new(|r| Ok(check_cosine(r)))),
        ("distillation", Box::new(|r| Ok(check_distillation(r)))),
        ("online_disentangle", Box::new(|r| Ok(check_online(r)))),
        ("offline_disentangle", Box::new(|r| Ok(check_offline(r)))),
        ("composite", Box::new(check_composite)),
    ];
    let mut ops = Vec::with_capacity(named.len());
    for (oi, (op, f)) in named.iter().enumerate() {
        let mut worst = 0.0;
        for i in 0..instances {
            let mut rng = Rng::stream(seed, "gradcheck", &[oi as u64, i as u64]);
            fold(&mut worst, f(&mut rng)?);
        }
        ops.push(OpReport {
            op: (*op).into(),
            instances,
            max_rel_err: worst,
        });
    }
    Ok(GradReport {
        tolerance,
        ops,
    })
}

/// One passed selftest step.
#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub name: &'static str,
    pub detail: String,
}

fn selftest_config() -> crate::config::ExperimentConfig {
    use crate::config::{ExperimentConfig, SyntheticSpec};
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = Some(SyntheticSpec {
        n_classes: 6,
        dim: 8,
        n_train_per_class: 40,
        n_test_per_class: 20,
        noise_sigma: 0.3,
        data_seed: 7,
        collisions: vec![],
    });
    cfg.model = ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        activation: Activation::Relu,
    };
    cfg.split.base_size = 2;
    cfg.split.increment = 2;
    cfg.train.epochs_per_task = 10;
    cfg.train.batch_size = 32;
    cfg.exemplars_per_class = 4;
    cfg.replicate_seeds = vec![0];
    cfg.analysis.permutations = 200;
    cfg
}

/// Small end-to-end exercise of the pipeline's key invariants. Any failed
/// step aborts with an error naming it.
pub fn run_selftest() -> Result<Vec<SelfCheck>> {
    let mut out = Vec::new();
    let cfg = selftest_config();

    let a = crate::runner::build_dataset(&cfg)?;
    let b = crate::runner::build_dataset(&cfg)?;
    if cil_core::data::dataset_to_csv(&a.train) != cil_core::data::dataset_to_csv(&b.train) {
        return Err(Error::Config("selftest: dataset generation drifted".into()));
    }
    out.push(SelfCheck {
        name: "dataset determinism",
        detail: format!("{} train rows reproduced byte-identically", a.train.len()),
    });

    let run1 = crate::runner::run_one(&cfg, 0)?;
    let run2 = crate::runner::run_one(&cfg, 0)?;
    if run1.canonical_json()? != run2.canonical_json()? {
        return Err(Error::Config("selftest: repeated run diverged".into()));
    }
    out.push(SelfCheck {
        name: "run determinism",
        detail: format!(
            "three-task run repeated bitwise, final accuracy {:.3}",
            run1.record.overall_accuracies().last().unwrap()
        ),
    });

    let data = crate::runner::build_dataset(&cfg)?;
    let seq = crate::runner::build_sequence(&cfg, &data)?;
    let cp = crate::runner::task_checkpoint(&cfg, &seq, &run1.record, 1)?;
    let resumed = crate::runner::resume_from(&cfg, cp)?;
    if resumed.canonical_json()? != run1.canonical_json()? {
        return Err(Error::Config("selftest: checkpoint resume diverged".into()));
    }
    out.push(SelfCheck {
        name: "checkpoint resume",
        detail: "resume after the base task matches the straight run bitwise".into(),
    });

    let mut naive = cfg.clone();
    naive.train.eta = 0.0;
    let mut flagged = cfg.clone();
    crate::config::Overrides {
        method: Some(crate::config::Method::Naive),
        ..Default::default()
    }
    .apply(&mut flagged);
    let run_naive = crate::runner::run_one(&naive, 0)?;
    let run_flagged = crate::runner::run_one(&flagged, 0)?;
    if run_naive.record != run_flagged.record {
        return Err(Error::Config("selftest: baseline override mismatch".into()));
    }
    out.push(SelfCheck {
        name: "baseline equivalence",
        detail: "η=0 and the naive method flag agree bitwise".into(),
    });

    let grad = run_gradcheck(3, 1e-6, 0)?;
    if !grad.passes() {
        return Err(Error::NonFinite {
            context: "selftest: gradient check exceeded tolerance".into(),
        });
    }
    let worst = grad
        .ops
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    out.push(SelfCheck {
        name: "gradient spot check",
        detail: format!("8 op families, worst relative error {worst:.2e}"),
    });

    Ok(out)
}
