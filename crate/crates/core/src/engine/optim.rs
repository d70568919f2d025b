//! AdamW with optimizer-state elision: moment arrays exist only for
//! trainable parameters, so freezing a module removes its state entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<S: Scalar> {
    name: String,
    param: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
    decay: bool,
}

/// First/second moment arrays for every trainable parameter, plus the
/// step counter. Weight decay is skipped for biases and layer-norm
/// parameters.
pub struct OptimizerState<S: Scalar> {
    slots: Vec<Slot<S>>,
    pub hyper: AdamWHyper,
    pub step_count: u64,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(model: &Model<S>, hyper: AdamWHyper) -> Self {
        Self::from_params(model.trainable_parameters(), hyper)
    }

    pub fn from_params(params: Vec<(String, Tensor<S>)>, hyper: AdamWHyper) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, param)| {
                let len = param.len();
                Slot {
                    decay: decays(&name),
                    name,
                    param,
                    m: vec![S::zero(); len],
                    v: vec![S::zero(); len],
                }
            })
            .collect();
        OptimizerState {
            slots,
            hyper,
            step_count: 0,
        }
    }

    /// Total moment-array elements; exactly 2x the trainable parameter
    /// count by construction.
    pub fn element_count(&self) -> u64 {
        self.slots.iter().map(|s| (s.m.len() + s.v.len()) as u64).sum()
    }

    pub fn tracked_params(&self) -> usize {
        self.slots.len()
    }

    /// Global-norm gradient clipping over all trainable parameters.
    /// Returns the pre-clip norm.
    pub fn clip_gradients(&self, max_norm: f64) -> Result<f64> {
        let mut sq_sum = 0.0f64;
        for slot in &self.slots {
            let grad = slot
                .param
                .grad()
                .ok_or_else(|| Error::MissingGradient { name: slot.name.clone() })?;
            for gv in &grad {
                let x = gv.to_f64_lossy();
                sq_sum += x * x;
            }
        }
        let norm = sq_sum.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = S::from_f64_lossy(max_norm / norm);
            for slot in &self.slots {
                slot.param.update_grad(|g| {
                    for gv in g.iter_mut() {
                        *gv = *gv * scale;
                    }
                });
            }
        }
        Ok(norm)
    }

    /// Bias-corrected AdamW update on trainable parameters only; frozen
    /// parameters are untouched (they hold no slot at all).
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (beta1, beta2) = (S::from_f64_lossy(h.beta1), S::from_f64_lossy(h.beta2));
        let one_m_b1 = S::from_f64_lossy(1.0 - h.beta1);
        let one_m_b2 = S::from_f64_lossy(1.0 - h.beta2);
        let eps = S::from_f64_lossy(h.eps);
        let lr_s = S::from_f64_lossy(lr);
        let inv_bc1 = S::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);

        for slot in &mut self.slots {
            let grad = slot
                .param
                .grad()
                .ok_or_else(|| Error::MissingGradient { name: slot.name.clone() })?;
            let decay_factor = if slot.decay {
                S::from_f64_lossy(1.0 - lr * h.weight_decay)
            } else {
                S::one()
            };
            slot.param.update_data(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    if slot.decay {
                        w[i] = w[i] * decay_factor;
                    }
                    slot.m[i] = beta1 * slot.m[i] + one_m_b1 * g;
                    slot.v[i] = beta2 * slot.v[i] + one_m_b2 * g * g;
                    let m_hat = slot.m[i] * inv_bc1;
                    let v_hat = slot.v[i] * inv_bc2;
                    w[i] = w[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Give every slot without a gradient an explicit zero gradient.
    /// Trainable parameters that an objective never touches (a disabled
    /// head, say) then take a plain decay-only step instead of erroring.
    pub fn seed_missing_grads(&self) {
        for slot in &self.slots {
            if slot.param.grad().is_none() {
                slot.param.accumulate_grad(&vec![S::zero(); slot.param.len()]);
            }
        }
    }
}

/// Linear warmup from zero to the peak over `warmup_frac * steps`, then
/// linear decay to zero at `steps`.
pub fn lr_schedule(step: usize, steps: usize, peak_lr: f64, warmup_frac: f64) -> f64 {
    debug_assert!(step < steps);
    let warmup = (warmup_frac * steps as f64).floor() as usize;
    if step < warmup {
        peak_lr * step as f64 / warmup as f64
    } else {
        peak_lr * (steps - step) as f64 / (steps - warmup) as f64
    }
}
