//! Split-recipe optimization: plain SGD for the convolutional trunk, Adam
//! for everything attention-side, a per-epoch learning-rate decay on both,
//! and a global-norm clip applied to the attention group only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::{Elem, SharedTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub cnn_lr: Elem,
    pub attention_lr: Elem,
    pub beta1: Elem,
    pub beta2: Elem,
    pub epsilon: Elem,
    /// Both learning rates are multiplied by decay^epoch.
    pub decay: Elem,
    /// Cap on the attention group's global gradient norm.
    pub clip_norm: Elem,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            cnn_lr: 1e-2,
            attention_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.9,
            clip_norm: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cnn_lr <= 0.0 || self.attention_lr <= 0.0 {
            return Err(Error::config("learning_rate", "learning rates must be positive".to_string()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm", format!("{} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta", format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay", format!("{} outside (0, 1]", self.decay)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon", format!("{} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// First/second moment buffers for one Adam-managed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<Elem>,
    pub v: Vec<Elem>,
    pub t: u64,
}

impl AdamSlot {
    fn new(len: usize) -> Self {
        AdamSlot { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

pub struct Optimizers {
    pub cfg: OptimizerConfig,
    /// Adam state keyed by parameter path; persisted in checkpoints.
    pub adam: HashMap<String, AdamSlot>,
}

impl Optimizers {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizers { cfg, adam: HashMap::new() })
    }

    pub fn effective_cnn_lr(&self, epoch: usize) -> Elem {
        self.cfg.cnn_lr * self.cfg.decay.powi(epoch as i32)
    }

    pub fn effective_attention_lr(&self, epoch: usize) -> Elem {
        self.cfg.attention_lr * self.cfg.decay.powi(epoch as i32)
    }

    /// Rescales attention-group gradients so their joint norm is at most
    /// clip_norm. Returns the pre-clip norm.
    pub fn clip_attention_group(&self, params: &[(String, SharedTensor, ParamGroup)]) -> Elem {
        let mut norm_sq = 0.0;
        for (_, cell, group) in params {
            if *group == ParamGroup::Attention {
                norm_sq += cell.borrow().grad_norm_sq();
            }
        }
        let norm = norm_sq.sqrt();
        if norm > self.cfg.clip_norm {
            let factor = self.cfg.clip_norm / norm;
            for (_, cell, group) in params {
                if *group == ParamGroup::Attention {
                    cell.borrow_mut().scale_grad(factor);
                }
            }
        }
        norm
    }

    /// Applies one update to every parameter that accumulated a gradient this
    /// pass, then clears all gradients. Parameters without gradients (frozen
    /// bindings) are left bitwise untouched, including their Adam state.
    pub fn step(&mut self, params: &[(String, SharedTensor, ParamGroup)], epoch: usize) -> Result<()> {
        self.clip_attention_group(params);
        let lr_cnn = self.effective_cnn_lr(epoch);
        let lr_att = self.effective_attention_lr(epoch);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
        for (path, cell, group) in params {
            let mut tensor = cell.borrow_mut();
            let Some(grad) = tensor.grad().map(<[Elem]>::to_vec) else { continue };
            match group {
                ParamGroup::Cnn => {
                    for (w, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= lr_cnn * g;
                    }
                }
                ParamGroup::Attention => {
                    let slot = self.adam.entry(path.clone()).or_insert_with(|| AdamSlot::new(grad.len()));
                    if slot.m.len() != grad.len() {
                        return Err(Error::config(
                            "optimizer_state",
                            format!("stale Adam slot for {path}: {} vs {}", slot.m.len(), grad.len()),
                        ));
                    }
                    slot.t += 1;
                    let m_corr = 1.0 - b1.powi(slot.t as i32);
                    let v_corr = 1.0 - b2.powi(slot.t as i32);
                    for ((w, g), (m, v)) in tensor
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / m_corr;
                        let v_hat = *v / v_corr;
                        *w -= lr_att * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
