//! Numeric verification of analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{cross_entropy, Network, Upstream};

/// Compares backprop gradients of the cross-entropy loss against central
/// finite differences and returns the worst relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// parameters.
///
/// Perturbs every parameter twice, so keep networks small (≤ ~10⁴ params).
pub fn gradient_check(
    network: &Network,
    batch: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let trace = network.forward_traced(batch)?;
    let (_, grad_logits) = cross_entropy(trace.logits(), labels)?;
    let analytic = network.backward(&trace, &Upstream::Logits(grad_logits))?;

    let mut worst = 0.0_f64;
    let mut net = network.clone();
    let n_layers = net.layers().len();
    for li in 0..n_layers {
        for which in 0..2 {
            let len = {
                let l = &net.layers()[li];
                if which == 0 {
                    l.weights.len()
                } else {
                    l.bias.len()
                }
            };
            for idx in 0..len {
                let numeric = {
                    let loss_at = |net: &mut Network, delta: f64| -> Result<f64> {
                        let l = &mut net.layers_mut()[li];
                        let p = if which == 0 {
                            &mut l.weights.data_mut()[idx]
                        } else {
                            &mut l.bias.data_mut()[idx]
                        };
                        let original = *p;
                        *p = original + delta;
                        let (logits, _) = net.forward(batch)?;
                        let (loss, _) = cross_entropy(&logits, labels)?;
                        let l = &mut net.layers_mut()[li];
                        let p = if which == 0 {
                            &mut l.weights.data_mut()[idx]
                        } else {
                            &mut l.bias.data_mut()[idx]
                        };
                        *p = original;
                        Ok(loss)
                    };
                    let plus = loss_at(&mut net, epsilon)?;
                    let minus = loss_at(&mut net, -epsilon)?;
                    (plus - minus) / (2.0 * epsilon)
                };
                let a = {
                    let (gw, gb) = &analytic.layers[li];
                    if which == 0 {
                        gw.data()[idx]
                    } else {
                        gb.data()[idx]
                    }
                };
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
