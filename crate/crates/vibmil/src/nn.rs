//! Model components: encoder, instance gate, bag heads, and the losses
//! that tie them together.
//!
//! The gate scores every instance with a Bernoulli keep-probability. During
//! training those probabilities are blended with a sampled hard mask —
//! `mask = (probs + hard) / 2` — where the hard sample is a constant, so
//! gradients reach the gate only through the probabilities. A KL penalty
//! against a fixed Bernoulli prior keeps the expected mask rate near the
//! target sparsity; the training objective is cross-entropy plus a
//! beta-weighted KL term.
//!
//! Heads map gated instance features to bag logits. Gated attention computes
//! `softmax(wT (tanh(Vz) * sigmoid(Uz)))` weights over instances; the
//! pooling variants average features or take per-class logit maxima.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;

use crate::autodiff::{Init, Tensor};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Encoder and head dimensions. Defaults give a 64 -> 48 -> 32 encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    /// Output feature width of the encoder.
    pub feat_dim: usize,
    /// Width of the gated-attention hidden projection.
    pub attention_dim: usize,
    /// Standardize each linear layer's output with fitted statistics.
    pub norm: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![48],
            feat_dim: 32,
            attention_dim: 16,
            norm: true,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            w: Tensor::from_init(vec![fan_in, fan_out], Init::XavierUniform, rng),
            b: Tensor::from_init(vec![fan_out], Init::Zeros, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_bias(&self.b)
    }
}

/// Multi-layer instance encoder. Hidden layers are linear -> norm ->
/// activation; the final layer is linear -> norm with no activation.
///
/// Norm layers standardize with statistics fitted by
/// [`Encoder::fit_norm_stats`] and held constant during training; before
/// fitting they fall back to live batch statistics. For evaluation on a
/// possibly shifted distribution, [`Encoder::standardized_to`] refits the
/// statistics on the evaluation bags. Every forward pass counts the
/// instances it processes, so selection efficiency can be audited.
pub struct Encoder {
    layers: Vec<Linear>,
    /// Per-layer (mean, inv_std) of pre-norm activations.
    norm_stats: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    norm: bool,
    activation: Activation,
    obs_dim: usize,
    feat_dim: usize,
    instance_forwards: Cell<u64>,
}

impl Encoder {
    pub fn new(obs_dim: usize, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Encoder {
        assert!(config.feat_dim > 0, "feat_dim must be positive");
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.feat_dim);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Encoder {
            layers,
            norm_stats: None,
            norm: config.norm,
            activation: config.activation,
            obs_dim,
            feat_dim: config.feat_dim,
            instance_forwards: Cell::new(0),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Instances processed by `forward` since the last reset.
    pub fn instance_forwards(&self) -> u64 {
        self.instance_forwards.get()
    }

    pub fn reset_instance_forwards(&self) {
        self.instance_forwards.set(0);
    }

    fn activate(&self, x: &Tensor) -> Tensor {
        match self.activation {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    /// Encodes `[n, obs_dim]` instances to `[n, feat_dim]` features.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0] as u64;
        self.instance_forwards.set(self.instance_forwards.get() + n);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.norm {
                h = match &self.norm_stats {
                    Some(stats) => {
                        let (mean, istd) = &stats[i];
                        h.normalize_cols(mean, istd)
                    }
                    None => h.batch_norm_cols(NORM_EPS),
                };
            }
            if i + 1 < self.layers.len() {
                h = self.activate(&h);
            }
        }
        h
    }

    /// Detached features for a raw instance matrix.
    pub fn extract(&self, instances: &Matrix) -> Matrix {
        let out = self.forward(&Tensor::from_matrix(instances, false));
        Matrix::from_vec(instances.rows, self.feat_dim, out.to_vec())
    }

    /// Fits per-layer normalization statistics over the given bags and
    /// freezes them. Layers are fitted front to back so each layer sees its
    /// predecessors already normalized. No-op when norm is disabled.
    pub fn fit_norm_stats(&mut self, bags: &[&Matrix]) {
        if !self.norm {
            return;
        }
        let mut stats: Vec<(Vec<f64>, Vec<f64>)> = vec![];
        for li in 0..self.layers.len() {
            let width = self.layers[li].b.numel();
            let mut sum = vec![0.0; width];
            let mut sumsq = vec![0.0; width];
            let mut count = 0usize;
            for &m in bags {
                let mut h = Tensor::from_matrix(m, false);
                for (i, stat) in stats.iter().enumerate() {
                    h = self.layers[i].forward(&h);
                    h = h.normalize_cols(&stat.0, &stat.1);
                    if i + 1 < self.layers.len() {
                        h = self.activate(&h);
                    }
                }
                let pre = self.layers[li].forward(&h);
                let data = pre.data();
                for r in 0..m.rows {
                    for (j, x) in data[r * width..(r + 1) * width].iter().enumerate() {
                        sum[j] += x;
                        sumsq[j] += x * x;
                    }
                }
                count += m.rows;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let istd: Vec<f64> = sumsq
                .iter()
                .zip(&mean)
                .map(|(sq, m)| 1.0 / ((sq / count as f64 - m * m).max(0.0) + NORM_EPS).sqrt())
                .collect();
            stats.push((mean, istd));
        }
        self.norm_stats = Some(stats);
    }

    /// A copy of this encoder (sharing parameters) whose normalization
    /// statistics are refit on the given bags: deployment-time
    /// standardization, so evaluation absorbs covariate shift in its inputs
    /// instead of passing it through to the heads. No-op copy when norm is
    /// disabled.
    pub fn standardized_to(&self, bags: &[&Matrix]) -> Encoder {
        let mut out = Encoder {
            layers: self.layers.clone(),
            norm_stats: None,
            norm: self.norm,
            activation: self.activation,
            obs_dim: self.obs_dim,
            feat_dim: self.feat_dim,
            instance_forwards: Cell::new(0),
        };
        out.fit_norm_stats(bags);
        out
    }

    /// Freezes the first `k` layers and unfreezes the rest.
    pub fn set_frozen_prefix(&self, k: usize) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.w.set_requires_grad(i >= k);
            layer.b.set_requires_grad(i >= k);
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("enc.{i}.w"), layer.w.clone()));
            out.push((format!("enc.{i}.b"), layer.b.clone()));
        }
        out
    }

    /// Fitted normalization statistics as named vectors, for checkpoints.
    pub fn norm_state(&self) -> Vec<(String, Vec<f64>)> {
        match &self.norm_stats {
            None => vec![],
            Some(stats) => stats
                .iter()
                .enumerate()
                .flat_map(|(i, (mean, istd))| {
                    [
                        (format!("enc.{i}.norm_mean"), mean.clone()),
                        (format!("enc.{i}.norm_istd"), istd.clone()),
                    ]
                })
                .collect(),
        }
    }

    /// Restores statistics saved by [`Encoder::norm_state`].
    pub fn set_norm_state(&mut self, entries: &[(String, Vec<f64>)]) {
        if entries.is_empty() {
            self.norm_stats = None;
            return;
        }
        let mut stats = vec![(vec![], vec![]); self.layers.len()];
        for (name, data) in entries {
            let rest = name.strip_prefix("enc.").expect("unexpected norm state name");
            let (idx, field) = rest.split_once('.').expect("unexpected norm state name");
            let i: usize = idx.parse().expect("unexpected norm state index");
            match field {
                "norm_mean" => stats[i].0 = data.clone(),
                "norm_istd" => stats[i].1 = data.clone(),
                other => panic!("unexpected norm state field {other}"),
            }
        }
        self.norm_stats = Some(stats);
    }
}

const NORM_EPS: f64 = 1e-5;

/// Instance gate: keep-probability `sigmoid(z . w + b)` per instance.
pub struct Gate {
    pub w: Tensor,
    pub b: Tensor,
}

impl Gate {
    pub fn new(feat_dim: usize, rng: &mut ChaCha8Rng) -> Gate {
        Gate {
            w: Tensor::from_init(vec![feat_dim, 1], Init::XavierUniform, rng),
            b: Tensor::from_init(vec![1], Init::Zeros, rng),
        }
    }

    /// `[n, feat_dim]` features to `[n, 1]` keep-probabilities.
    pub fn probs(&self, z: &Tensor) -> Tensor {
        z.matmul(&self.w).add_bias(&self.b).sigmoid()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![("gate.w".into(), self.w.clone()), ("gate.b".into(), self.b.clone())]
    }
}

/// Blended stochastic mask: `(probs + hard) / 2` with `hard ~ Bernoulli(p)`
/// treated as a constant, so the gradient path runs through `probs` alone.
pub fn blended_mask(probs: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let p = probs.to_vec();
    let hard: Vec<f64> = p
        .iter()
        .map(|&pi| if rng.random::<f64>() < pi { 1.0 } else { 0.0 })
        .collect();
    let hard = Tensor::new(probs.shape(), hard, false);
    probs.add(&hard).scale(0.5)
}

/// Mean KL divergence from Bernoulli(p_i) to the prior Bernoulli(pi), in
/// nats. Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
pub fn bernoulli_kl(probs: &Tensor, pi: f64) -> Tensor {
    assert!(pi > 0.0 && pi < 1.0, "prior must lie strictly inside (0, 1)");
    let p = probs.clamp(1e-7, 1.0 - 1e-7);
    let pos = p.mul(&p.log().add_const(-pi.ln()));
    let q = p.affine(-1.0, 1.0);
    let neg = q.mul(&q.log().add_const(-(1.0 - pi).ln()));
    pos.add(&neg).mean()
}

/// The training objective: cross-entropy plus beta times the KL penalty.
pub fn vib_loss(ce: &Tensor, kl: &Tensor, beta: f64) -> Tensor {
    ce.add(&kl.scale(beta))
}

/// Indices of the `k` largest values, highest first; ties break toward the
/// lower index. The arg-max always survives selection, for any k >= 1.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// `k` distinct indices from `0..n`, drawn uniformly.
pub fn random_k_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k.min(n));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    GatedAttention,
    MeanPool,
    MaxPool,
}

/// Bag-level classifier over instance features.
pub struct Head {
    pub variant: HeadVariant,
    /// Gated-attention projections; present only for that variant.
    attn: Option<(Tensor, Tensor, Tensor)>, // (V, U, w)
    cls_w: Tensor,
    cls_b: Tensor,
}

impl Head {
    pub fn new(
        variant: HeadVariant,
        feat_dim: usize,
        n_labels: usize,
        attention_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Head {
        let attn = match variant {
            HeadVariant::GatedAttention => {
                assert!(attention_dim > 0, "attention_dim must be positive");
                Some((
                    Tensor::from_init(vec![feat_dim, attention_dim], Init::XavierUniform, rng),
                    Tensor::from_init(vec![feat_dim, attention_dim], Init::XavierUniform, rng),
                    Tensor::from_init(vec![attention_dim, 1], Init::XavierUniform, rng),
                ))
            }
            _ => None,
        };
        Head {
            variant,
            attn,
            cls_w: Tensor::from_init(vec![feat_dim, n_labels], Init::XavierUniform, rng),
            cls_b: Tensor::from_init(vec![n_labels], Init::Zeros, rng),
        }
    }

    /// `[n, feat_dim]` instance features to `[1, n_labels]` bag logits.
    pub fn forward(&self, z: &Tensor) -> Tensor {
        match self.variant {
            HeadVariant::GatedAttention => {
                let bag = self.attend(z).matmul(z); // [1, feat_dim]
                bag.matmul(&self.cls_w).add_bias(&self.cls_b)
            }
            HeadVariant::MeanPool => {
                let bag = z.mean_axis0().reshape(vec![1, z.shape()[1]]);
                bag.matmul(&self.cls_w).add_bias(&self.cls_b)
            }
            HeadVariant::MaxPool => {
                // Max pooling happens at the logit level, per class.
                let logits = z.matmul(&self.cls_w).add_bias(&self.cls_b); // [n, c]
                let c = logits.shape()[1];
                logits.max_axis0().reshape(vec![1, c])
            }
        }
    }

    /// Attention weights `[1, n]` over instances; rows sum to one.
    pub fn attend(&self, z: &Tensor) -> Tensor {
        let (v, u, w) = self.attn.as_ref().expect("attend() on a non-attention head");
        let h = z.matmul(v).tanh().mul(&z.matmul(u).sigmoid()); // [n, a]
        let scores = h.matmul(w); // [n, 1]
        scores.reshape(vec![1, z.shape()[0]]).softmax()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![];
        if let Some((v, u, w)) = &self.attn {
            out.push(("head.attn.v".into(), v.clone()));
            out.push(("head.attn.u".into(), u.clone()));
            out.push(("head.attn.w".into(), w.clone()));
        }
        out.push(("head.cls.w".into(), self.cls_w.clone()));
        out.push(("head.cls.b".into(), self.cls_b.clone()));
        out
    }
}

/// One gated training forward: gate probabilities, blended mask, masked
/// head logits, and the loss terms.
pub struct VibForward {
    pub loss: Tensor,
    pub ce: Tensor,
    pub kl: Tensor,
    pub probs: Tensor,
}

/// Runs the gated objective on encoded features `z` for one bag.
pub fn vib_forward(
    gate: &Gate,
    head: &Head,
    z: &Tensor,
    bag_label: usize,
    beta: f64,
    pi: f64,
    mask_rng: &mut ChaCha8Rng,
) -> VibForward {
    let n = z.shape()[0];
    let probs = gate.probs(z);
    let mask = blended_mask(&probs, mask_rng);
    let gated = z.scale_rows(&mask.reshape(vec![n]));
    let logits = head.forward(&gated);
    let ce = logits.cross_entropy(&[bag_label]);
    let kl = bernoulli_kl(&probs, pi);
    let loss = vib_loss(&ce, &kl, beta);
    VibForward { loss, ce, kl, probs }
}
