//! SGD and Adam parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Network, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for one network.
///
/// Adam keeps bias-corrected first/second moments per parameter tensor; SGD
/// keeps nothing. The step counter advances by exactly one per `step` call.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    /// `(m, v)` moment pairs per layer, aligned `(weights, bias)`.
    moments: Vec<((Tensor, Tensor), (Tensor, Tensor))>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer::adam_with(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn adam_with(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(learning_rate),
            OptimizerKind::Adam => Optimizer::adam(learning_rate),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn ensure_moments(&mut self, network: &Network) {
        if self.kind == OptimizerKind::Adam && self.moments.is_empty() {
            self.moments = network
                .layers()
                .iter()
                .map(|l| {
                    let zw = Tensor::zeros(l.weights.shape().to_vec());
                    let zb = Tensor::zeros(l.bias.shape().to_vec());
                    ((zw.clone(), zb.clone()), (zw, zb))
                })
                .collect();
        }
    }

    /// Applies one update to every parameter of `network`.
    pub fn step(&mut self, network: &mut Network, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != network.layers().len() {
            return Err(Error::ShapeMismatch(
                "gradient layer count does not match network".into(),
            ));
        }
        for (layer, (gw, gb)) in network.layers().iter().zip(&grads.layers) {
            if gw.shape() != layer.weights.shape() || gb.shape() != layer.bias.shape() {
                return Err(Error::ShapeMismatch(
                    "gradient shapes do not match parameters".into(),
                ));
            }
            gw.check_finite("weight gradient")?;
            gb.check_finite("bias gradient")?;
        }
        self.ensure_moments(network);
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, (gw, gb)) in network.layers_mut().iter_mut().zip(&grads.layers) {
                    sgd_update(layer.weights.data_mut(), gw.data(), self.learning_rate);
                    sgd_update(layer.bias.data_mut(), gb.data(), self.learning_rate);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count;
                let bc1 = 1.0 - self.beta1.powi(t as i32);
                let bc2 = 1.0 - self.beta2.powi(t as i32);
                for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in network
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.moments)
                {
                    adam_update(
                        layer.weights.data_mut(),
                        gw.data(),
                        mw.data_mut(),
                        vw.data_mut(),
                        self.learning_rate,
                        self.beta1,
                        self.beta2,
                        self.epsilon,
                        bc1,
                        bc2,
                    );
                    adam_update(
                        layer.bias.data_mut(),
                        gb.data(),
                        mb.data_mut(),
                        vb.data_mut(),
                        self.learning_rate,
                        self.beta1,
                        self.beta2,
                        self.epsilon,
                        bc1,
                        bc2,
                    );
                }
            }
        }
        Ok(())
    }
}

fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bias_correction1: f64,
    bias_correction2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bias_correction1;
        let v_hat = v[i] / bias_correction2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}
