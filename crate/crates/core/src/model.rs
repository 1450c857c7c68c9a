//! Incremental classifier: an MLP feature extractor behind an expandable
//! linear head.
//!
//! The head grows one column block per task; old columns are never touched,
//! so logits for previously learned classes are preserved bit for bit across
//! expansion. Frozen copies of the whole model ([`ModelSnapshot`]) stand in
//! for the previous-task model during replay training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{affine_backward, affine_forward, relu_backward, relu_forward, Rng};
use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![128, 128],
            feature_dim: 64,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be ≥ 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "hidden_dims must be nonempty with positive entries".into(),
            ));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Extractor layer dimensions: `input → hidden… → feature`.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Mat,
    pub b: Mat,
}

/// Full parameter set: extractor layers plus the class head.
///
/// `head_w` is `feature_dim × K`; K grows via [`ModelParams::expand_head`].
/// Every extractor layer applies the activation, so features are
/// post-activation (nonnegative under ReLU) and pairwise feature cosines lie
/// in [0, 1], the same regime a convolutional backbone's penultimate
/// activations occupy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub head_w: Mat,
    pub head_b: Mat,
}

/// Fan-in scaled uniform draw: limit √(6/fan_in), giving std √(2/fan_in).
fn fan_in_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / rows as f64).sqrt();
    let mut w = Mat::zeros(rows, cols);
    for v in w.data_mut() {
        *v = rng.uniform(-limit, limit);
    }
    w
}

/// Fresh model with a zero-class head; deterministic per `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let dims = config.layer_dims();
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, pair) in dims.windows(2).enumerate() {
        let mut rng = Rng::stream(seed, "init", &[i as u64]);
        layers.push(Layer {
            w: fan_in_uniform(&mut rng, pair[0], pair[1]),
            b: Mat::zeros(1, pair[1]),
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        layers,
        head_w: Mat::zeros(config.feature_dim, 0),
        head_b: Mat::zeros(1, 0),
    })
}

/// Forward pass intermediates, kept for the backward pass.
pub struct ForwardTrace {
    /// Pre-activation of each extractor layer.
    pub pre: Vec<Mat>,
    /// Input to each extractor layer (`acts[0]` is the batch itself).
    pub acts: Vec<Mat>,
    pub features: Mat,
    pub logits: Mat,
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.head_w.cols()
    }

    /// Extractor output for a batch, without keeping intermediates.
    pub fn features(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_extractor(x)?.2)
    }

    /// Head logits over all current classes.
    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        if self.num_classes() == 0 {
            return Err(Error::NoClasses);
        }
        let feats = self.features(x)?;
        affine_forward(&feats, &self.head_w, &self.head_b)
    }

    fn forward_extractor(&self, x: &Mat) -> Result<(Vec<Mat>, Vec<Mat>, Mat)> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "features",
                left: format!("input {}", x.shape_str()),
                right: format!("input_dim {}", self.config.input_dim),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let p = affine_forward(&a, &layer.w, &layer.b)?;
            acts.push(a);
            a = relu_forward(&p);
            pre.push(p);
        }
        Ok((pre, acts, a))
    }

    /// Forward pass that retains everything the backward pass needs.
    pub fn forward_trace(&self, x: &Mat) -> Result<ForwardTrace> {
        if self.num_classes() == 0 {
            return Err(Error::NoClasses);
        }
        let (pre, acts, features) = self.forward_extractor(x)?;
        let logits = affine_forward(&features, &self.head_w, &self.head_b)?;
        Ok(ForwardTrace {
            pre,
            acts,
            features,
            logits,
        })
    }

    /// Backpropagates `d_logits` (and an optional extra gradient injected at
    /// the feature layer, used by feature-space regularizers) into parameter
    /// gradients in [`ModelParams::tensors`] order.
    pub fn backward_trace(
        &self,
        trace: &ForwardTrace,
        d_logits: &Mat,
        d_features_extra: Option<&Mat>,
    ) -> Result<Vec<Mat>> {
        let (mut d_feat, d_head_w, d_head_b) =
            affine_backward(d_logits, &trace.features, &self.head_w)?;
        if let Some(extra) = d_features_extra {
            d_feat.add_scaled(extra, 1.0)?;
        }
        let mut layer_grads = vec![None; self.layers.len()];
        let mut d = d_feat;
        for i in (0..self.layers.len()).rev() {
            let d_pre = relu_backward(&d, &trace.pre[i])?;
            let (dx, dw, db) = affine_backward(&d_pre, &trace.acts[i], &self.layers[i].w)?;
            layer_grads[i] = Some((dw, db));
            d = dx;
        }
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for g in layer_grads {
            let (dw, db) = g.expect("every layer visited");
            out.push(dw);
            out.push(db);
        }
        out.push(d_head_w);
        out.push(d_head_b);
        Ok(out)
    }

    /// Appends `n_new` freshly initialized head columns; existing columns are
    /// copied bit for bit. Reproducible per `(seed, current K)`.
    pub fn expand_head(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Config("expand_head requires n_new ≥ 1".into()));
        }
        let k_old = self.num_classes();
        let k_new = k_old + n_new;
        let fd = self.config.feature_dim;
        let mut rng = Rng::stream(seed, "head", &[k_old as u64]);
        let limit = (6.0 / fd as f64).sqrt();
        let mut w = Mat::zeros(fd, k_new);
        for r in 0..fd {
            w.row_mut(r)[..k_old].copy_from_slice(self.head_w.row(r));
        }
        // Column-major draw so each class column is one contiguous stretch of
        // the stream.
        for c in k_old..k_new {
            for r in 0..fd {
                w.set(r, c, rng.uniform(-limit, limit));
            }
        }
        let mut b = Mat::zeros(1, k_new);
        b.row_mut(0)[..k_old].copy_from_slice(self.head_b.row(0));
        self.head_w = w;
        self.head_b = b;
        Ok(())
    }

    /// All tensors in a fixed order: `[W0, b0, W1, b1, …, head_w, head_b]`.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Zero matrices shaped like [`ModelParams::tensors`]; velocity buffers.
    pub fn zeros_like_tensors(&self) -> Vec<Mat> {
        self.tensors()
            .into_iter()
            .map(|t| Mat::zeros(t.rows(), t.cols()))
            .collect()
    }

    /// Copy of `self` with tensor values replaced, in [`ModelParams::tensors`]
    /// order; shapes must match. For gradient-check harnesses.
    pub fn with_tensors(&self, ts: &[Mat]) -> ModelParams {
        let mut out = self.clone();
        let dst = out.tensors_mut();
        assert_eq!(dst.len(), ts.len(), "tensor count mismatch");
        for (d, s) in dst.into_iter().zip(ts) {
            assert_eq!(d.shape(), s.shape(), "tensor shape mismatch");
            *d = s.clone();
        }
        out
    }
}

/// Deep frozen copy of the model after a task; stands in for the
/// previous-task model during the next task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    params: ModelParams,
    pub task_index: usize,
}

pub fn snapshot(params: &ModelParams, task_index: usize) -> ModelSnapshot {
    ModelSnapshot {
        params: params.clone(),
        task_index,
    }
}

impl ModelSnapshot {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn features(&self, x: &Mat) -> Result<Mat> {
        self.params.features(x)
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        self.params.logits(x)
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }
}
