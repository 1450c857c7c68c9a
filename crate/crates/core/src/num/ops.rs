//! Differentiable primitives with hand-derived gradients.
//!
//! Backward functions take the upstream gradient first, then the forward
//! inputs they need. Every gradient here is validated against central finite
//! differences in the test suite.

use crate::error::{Error, Result};

use super::{Matrix, Scalar};

/// Norm floor below which cosine similarity is refused as degenerate.
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// `x·W + b`, broadcasting the bias row over the batch.
pub fn affine_forward<S: Scalar>(
    x: &Matrix<S>,
    w: &Matrix<S>,
    b: &Matrix<S>,
) -> Result<Matrix<S>> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "affine_forward",
            left: format!("W {}", w.shape_str()),
            right: format!("b {}", b.shape_str()),
        });
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bias) in out.row_mut(r).iter_mut().zip(b.row(0)) {
            *o += bias;
        }
    }
    Ok(out)
}

/// Gradients of an affine layer: `(dx, dW, db)`.
///
/// `dx = upstream·Wᵀ`, `dW = xᵀ·upstream`, `db[j] = Σ_i upstream[i,j]`.
pub fn affine_backward<S: Scalar>(
    upstream: &Matrix<S>,
    x: &Matrix<S>,
    w: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    if upstream.rows() != x.rows() || upstream.cols() != w.cols() || x.cols() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "affine_backward",
            left: format!("upstream {}", upstream.shape_str()),
            right: format!("x {} W {}", x.shape_str(), w.shape_str()),
        });
    }
    let dx = upstream.matmul(&w.transpose())?;
    let dw = x.transpose().matmul(upstream)?;
    let mut db = Matrix::zeros(1, upstream.cols());
    for r in 0..upstream.rows() {
        for (o, &u) in db.row_mut(0).iter_mut().zip(upstream.row(r)) {
            *o += u;
        }
    }
    Ok((dx, dw, db))
}

pub fn relu_forward<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Masks the upstream gradient where `x ≤ 0`; the subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(upstream: &Matrix<S>, x: &Matrix<S>) -> Result<Matrix<S>> {
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: upstream.shape_str(),
            right: x.shape_str(),
        });
    }
    let mut out = upstream.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= S::zero() {
            *o = S::zero();
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilized by subtracting each row's max.
pub fn softmax_rows<S: Scalar>(logits: &Matrix<S>) -> Matrix<S> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch, with its gradient.
///
/// `loss = −(1/batch)·Σ_i log softmax(logits)[i, label_i]` and
/// `dlogits = (softmax − onehot)/batch`.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[usize],
) -> Result<(S, Matrix<S>)> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: format!("logits {}", logits.shape_str()),
            right: format!("{} labels", labels.len()),
        });
    }
    for &l in labels {
        if l >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: logits.cols(),
            });
        }
    }
    let batch = logits.rows();
    let inv_batch = S::one() / S::of(batch as f64);
    let mut dlogits = softmax_rows(logits);
    let mut loss = S::zero();
    for (r, &label) in labels.iter().enumerate() {
        let p = dlogits.get(r, label);
        // p == exp(l − max)/sum > 0 whenever logits are finite, so ln is safe.
        loss -= p.ln();
        let row = dlogits.row_mut(r);
        row[label] -= S::one();
        for v in row.iter_mut() {
            *v *= inv_batch;
        }
    }
    Ok((loss * inv_batch, dlogits))
}

/// Cosine similarity of two vectors with analytic gradients `(value, du, dv)`.
pub fn cosine_sim<S: Scalar>(u: &[S], v: &[S]) -> Result<(S, Vec<S>, Vec<S>)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: format!("len {}", u.len()),
            right: format!("len {}", v.len()),
        });
    }
    let dot: S = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nv = v.iter().map(|&b| b * b).sum::<S>().sqrt();
    for n in [nu, nv] {
        if n.to_f64_lossy() <= COSINE_NORM_EPS {
            return Err(Error::DegenerateVector {
                op: "cosine_sim",
                norm: n.to_f64_lossy(),
            });
        }
    }
    let value = dot / (nu * nv);
    // d cos/du = v/(‖u‖‖v‖) − cos·u/‖u‖²; symmetric for dv.
    let inv_nunv = S::one() / (nu * nv);
    let cu = value / (nu * nu);
    let cv = value / (nv * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b * inv_nunv - a * cu)
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a * inv_nunv - b * cv)
        .collect();
    Ok((value, du, dv))
}

/// One SGD update with momentum, weight decay folded into the gradient:
/// `v ← momentum·v + (grad + weight_decay·param)`, `param ← param − lr·v`.
pub fn sgd_step<S: Scalar>(
    param: &mut Matrix<S>,
    grad: &Matrix<S>,
    velocity: &mut Matrix<S>,
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            left: format!("param {}", param.shape_str()),
            right: format!(
                "grad {} velocity {}",
                grad.shape_str(),
                velocity.shape_str()
            ),
        });
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            context: format!("sgd_step gradient for param {}", param.shape_str()),
        });
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + (*g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn mat(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_weights() {
        let x = mat(&[vec![1.0, 2.0]]);
        let w = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = mat(&[vec![0.0, 0.0]]);
        assert_eq!(affine_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn affine_hand_sum() {
        let x = mat(&[vec![1.0, 1.0]]);
        let w = mat(&[vec![2.0], vec![3.0]]);
        let b = mat(&[vec![1.0]]);
        assert_eq!(affine_forward(&x, &w, &b).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut rng = super::super::Rng::new(17);
        let x = Mat::from_vec(3, 4, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = Mat::from_vec(4, 2, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let b = Mat::from_vec(1, 2, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let got = affine_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                acc += b.get(0, j);
                assert_eq!(got.get(i, j), acc);
            }
        }
    }

    #[test]
    fn affine_backward_scalar_chain_rule() {
        let x = mat(&[vec![2.0]]);
        let w = mat(&[vec![3.0]]);
        let up = mat(&[vec![1.0]]);
        let (dx, dw, db) = affine_backward(&up, &x, &w).unwrap();
        assert_eq!(dx.get(0, 0), 3.0);
        assert_eq!(dw.get(0, 0), 2.0);
        assert_eq!(db.get(0, 0), 1.0);
    }

    #[test]
    fn affine_backward_zero_upstream() {
        let x = mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = mat(&[vec![1.0], vec![-1.0]]);
        let up = Mat::zeros(2, 1);
        let (dx, dw, db) = affine_backward(&up, &x, &w).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_and_masks() {
        let x = mat(&[vec![-1.0, 0.0, 2.0]]);
        assert_eq!(relu_forward(&x).row(0), &[0.0, 0.0, 2.0]);
        let up = mat(&[vec![5.0, 5.0, 5.0]]);
        assert_eq!(relu_backward(&up, &x).unwrap().row(0), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_k() {
        let logits = mat(&[vec![0.7, 0.7, 0.7, 0.7]]);
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn near_certain_correct_has_tiny_loss() {
        let logits = mat(&[vec![10.0, -10.0]]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - 2.061e-9).abs() < 1e-11, "loss {loss:e}");
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot_over_batch() {
        let logits = mat(&[vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 0.0]]);
        let probs = softmax_rows(&logits);
        let (_, dl) = softmax_cross_entropy(&logits, &[1, 0]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let onehot = if (r, c) == (0, 1) || (r, c) == (1, 0) {
                    1.0
                } else {
                    0.0
                };
                let want = (probs.get(r, c) - onehot) / 2.0;
                assert!((dl.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = mat(&[vec![0.0, 0.0]]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_translation_invariant() {
        let logits = mat(&[vec![0.3, -1.2, 2.4]]);
        let shifted = logits.map(|v| v + 100.0);
        let (l0, d0) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let (l1, d1) = softmax_cross_entropy(&shifted, &[2]).unwrap();
        assert!((l0 - l1).abs() <= 1e-12);
        for (a, b) in d0.data().iter().zip(d1.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_endpoints() {
        let u = [3.0f64, 4.0];
        let (c, _, _) = cosine_sim(&u, &u).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        let (c, _, _) = cosine_sim(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
        let neg = [-3.0, -4.0];
        let (c, _, _) = cosine_sim(&u, &neg).unwrap();
        assert!((c + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_scale_invariant() {
        let u = [0.2, -0.7, 1.1];
        let v = [1.4, 0.3, -0.2];
        let us: Vec<f64> = u.iter().map(|x| x * 3.5).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * 0.01).collect();
        let (c0, _, _) = cosine_sim(&u, &v).unwrap();
        let (c1, _, _) = cosine_sim(&us, &vs).unwrap();
        assert!((c0 - c1).abs() <= 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = mat(&[vec![1.0]]);
        let g = mat(&[vec![0.5]]);
        let mut v = Mat::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.get(0, 0), 0.95);
    }

    #[test]
    fn sgd_zero_grad_zero_wd_is_identity() {
        let mut p = mat(&[vec![2.0, -3.0]]);
        let g = Mat::zeros(1, 2);
        let mut v = Mat::zeros(1, 2);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.row(0), &[2.0, -3.0]);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let (g1, g2) = (0.5, -0.2);
        let mut p = mat(&[vec![1.0]]);
        let mut v = Mat::zeros(1, 1);
        sgd_step(&mut p, &mat(&[vec![g1]]), &mut v, lr, m, wd).unwrap();
        sgd_step(&mut p, &mat(&[vec![g2]]), &mut v, lr, m, wd).unwrap();

        let mut vh = 0.0;
        let mut ph = 1.0;
        for g in [g1, g2] {
            vh = m * vh + (g + wd * ph);
            ph -= lr * vh;
        }
        assert_eq!(p.get(0, 0), ph);
        assert_eq!(v.get(0, 0), vh);
    }

    #[test]
    fn sgd_rejects_non_finite_grad() {
        let mut p = mat(&[vec![1.0]]);
        let g = mat(&[vec![f64::NAN]]);
        let mut v = Mat::zeros(1, 1);
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }
}
