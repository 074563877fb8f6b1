//! Weakly-supervised multiple-instance learning with a variational
//! information-bottleneck instance gate.
//!
//! A bag is a set of instance feature vectors carrying a single bag-level
//! label. The gate learns a Bernoulli keep/drop probability per instance from
//! bag labels alone, oversized bags are distilled to their top-K instances,
//! the instance encoder is fine-tuned end-to-end on the distilled bags, and a
//! fresh attention head is retrained on the fine-tuned features.
//!
//! Module map:
//! - [`autodiff`]: dense-tensor reverse-mode automatic differentiation
//! - [`synthgen`]: synthetic bag datasets, corruptions, splits, dataset files
//! - [`nn`]: encoder, gate, mask sampling, bag heads, the gated loss
//! - [`optim`]: the AdamW optimizer and gradient clipping
//! - [`pipeline`]: the three training stages, distillation, ablations
//! - [`checkpoint`]: integrity-checked binary checkpoint files
//! - [`metrics`]: macro-AUC/F1, v-score, top-K recall, KNN probes

pub mod autodiff;
pub mod checkpoint;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod synthgen;

pub use autodiff::Tensor;
pub use matrix::Matrix;
