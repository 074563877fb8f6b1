//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Moment and decay hyperparameters shared by every optimizer instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// AdamW over one parameter group. Weight decay multiplies the parameter
/// directly (decoupled from the adaptive step). Parameters whose
/// `requires_grad` is off, or that carry no gradient, are skipped but keep
/// their moment state.
pub struct AdamW {
    params: Vec<(String, Tensor)>,
    lr: f64,
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, cfg: OptimizerConfig) -> AdamW {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { params, lr, cfg, m, v, step_count: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|w| {
                for j in 0..w.len() {
                    m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                    v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    w[j] -= self.lr
                        * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                            + self.cfg.weight_decay * w[j]);
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Moment state as named vectors, for checkpoints. Names are
    /// `<param>.m`, `<param>.v`, plus a single `step` record.
    pub fn state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![("step".to_string(), vec![self.step_count as f64])];
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("{name}.m"), self.m[i].clone()));
            out.push((format!("{name}.v"), self.v[i].clone()));
        }
        out
    }

    /// Restores state saved by [`AdamW::state`]. Unknown names are errors;
    /// missing names keep their zero initialization.
    pub fn load_state(&mut self, entries: &[(String, Vec<f64>)]) {
        for (name, data) in entries {
            if name == "step" {
                self.step_count = data[0] as u64;
                continue;
            }
            let (param, field) = name.rsplit_once('.').expect("malformed optimizer state name");
            let idx = self
                .params
                .iter()
                .position(|(n, _)| n == param)
                .unwrap_or_else(|| panic!("optimizer state for unknown parameter {param}"));
            let slot = match field {
                "m" => &mut self.m[idx],
                "v" => &mut self.v[idx],
                other => panic!("unknown optimizer state field {other}"),
            };
            assert_eq!(slot.len(), data.len(), "optimizer state length mismatch for {name}");
            slot.copy_from_slice(data);
        }
    }
}

/// L2 norm of all gradients across the given parameters (frozen or
/// gradient-free parameters contribute nothing).
pub fn global_grad_norm(params: &[(String, Tensor)]) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for x in g {
                sq += x * x;
            }
        }
    }
    sq.sqrt()
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params {
            if p.grad().is_some() {
                p.update_grad(|g| {
                    for x in g {
                        *x *= scale;
                    }
                });
            }
        }
    }
    norm
}
