//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::params::{round_f32, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-9,
        }
    }
}

/// First and second moments plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. `grads[i]` of `None` is treated as a zero gradient.
    ///
    /// With `round_f32` set, parameters and moments are rounded to the
    /// nearest `f32` afterwards so they survive a single-precision checkpoint.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<&Tensor>],
        lr: f64,
        hyper: AdamHyper,
        round: bool,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if !(lr >= 0.0) || !(0.0..1.0).contains(&hyper.beta1) || !(0.0..1.0).contains(&hyper.beta2)
        {
            return Err(invalid!("invalid optimizer hyperparameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powf(self.t as f64);
        let bc2 = 1.0 - hyper.beta2.powf(self.t as f64);
        let decay = 1.0 - lr * hyper.weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                if g.shape() != p.shape() {
                    return Err(shape_err!(
                        "gradient {i}: {:?} vs {:?}",
                        g.shape(),
                        p.shape()
                    ));
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = grads[i].map_or(0.0, |g| g.data()[j]);
                m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
                v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] = pd[j] * decay - lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
            }
            if round {
                round_f32(m);
                round_f32(v);
                round_f32(pd);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn lr_schedule(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid!("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(invalid!("step {step} beyond total {total_steps}"));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}
