//! Adam with standard constants and bias correction.

use super::{Result, TrainError};
use crate::tensor::Param;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators for one parameter group, shaped like
/// the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update over the whole group. `grads[i]` must be
    /// shaped like `params[i]`; parameter order must match `new`.
    pub fn step(
        &mut self,
        params: &mut [&mut Param],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if grad.len() != param.values.len() {
                return Err(TrainError::Config(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    param.name,
                    grad.len(),
                    param.values.len()
                )));
            }
            for ((x, &g), (mi, vi)) in
                param.values.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
