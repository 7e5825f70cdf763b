//! Minimal dense-network engine.
//!
//! Networks are stacks of dense layers (`y = act(xW + b)`) over row-major
//! batches. Inference is pure; training goes through a [`Tape`] that records
//! one forward pass and plays it backward for parameter gradients. Two
//! gradient entry points exist: from the logits (classification losses) and
//! from the penultimate activation (feature-space penalties).

mod gradcheck;
mod loss;
mod optimizer;

pub use gradcheck::gradient_check;
pub use loss::{cross_entropy, softmax};
pub use optimizer::{Optimizer, OptimizerKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Descriptor for one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// One dense layer with its parameters. Weights have shape `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn validate(&self) -> Result<()> {
        let w = self.weights.shape();
        if w != [self.spec.in_dim, self.spec.out_dim] || self.bias.shape() != [self.spec.out_dim] {
            return Err(Error::ShapeMismatch(format!(
                "layer params {:?}/{:?} do not match spec {}x{}",
                w,
                self.bias.shape(),
                self.spec.in_dim,
                self.spec.out_dim
            )));
        }
        Ok(())
    }
}

/// A feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
    rng_seed: u64,
}

impl Network {
    /// Builds a network from layer specs with seeded Glorot-uniform weights
    /// (`U[-l, l]`, `l = sqrt(6/(fan_in+fan_out))`) and zero biases.
    pub fn from_specs(specs: &[LayerSpec], rng_seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidModel("network needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        if specs.iter().any(|s| s.in_dim == 0 || s.out_dim == 0) {
            return Err(Error::InvalidModel("layer dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                DenseLayer {
                    spec,
                    weights: Tensor::new(vec![spec.in_dim, spec.out_dim], data)
                        .expect("init weights are finite"),
                    bias: Tensor::zeros(vec![spec.out_dim]),
                }
            })
            .collect();
        Ok(Network { layers, rng_seed })
    }

    /// Convenience constructor: ReLU hidden layers, identity output layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        Network::mlp_with_output(input_dim, hidden, output_dim, Activation::Identity, seed)
    }

    /// ReLU hidden layers with a chosen output activation.
    pub fn mlp_with_output(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                activation: Activation::Relu,
            });
            prev = h;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: output_dim,
            activation: output_activation,
        });
        Network::from_specs(&specs, seed)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }

    /// Width of the activation feeding the final dense layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layers.last().unwrap().spec.in_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Re-checks structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("network has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].spec.out_dim != pair[1].spec.in_dim {
                return Err(Error::ShapeMismatch("layer dims do not chain".into()));
            }
        }
        Ok(())
    }

    /// Pure forward pass over a `(n, input_dim)` batch.
    ///
    /// Returns `(logits, penultimate)` where `penultimate` is the activation
    /// entering the final dense layer (the batch itself for 1-layer nets).
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let trace = self.forward_traced(batch)?;
        Ok((trace.logits().clone(), trace.penultimate().clone()))
    }

    /// Forward pass that records every intermediate activation for backprop.
    pub fn forward_traced(&self, batch: &Tensor) -> Result<ForwardTrace> {
        if !batch.is_matrix() || batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} does not match input dim {}",
                batch.shape(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weights)?;
            let (rows, cols) = (z.rows(), z.cols());
            let bias = layer.bias.data();
            let zd = z.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    zd[i * cols + j] += bias[j];
                }
            }
            let mut a = z.clone();
            for v in a.data_mut() {
                *v = layer.spec.activation.apply(*v);
            }
            pre.push(z);
            post.push(a.clone());
            current = a;
        }
        let trace = ForwardTrace {
            input: batch.clone(),
            pre,
            post,
        };
        trace.logits().check_finite("forward logits")?;
        Ok(trace)
    }

    /// Backpropagates `upstream` through a recorded pass.
    ///
    /// `Upstream::Logits` carries `dL/d(logits)`; `Upstream::Penultimate`
    /// carries `dL/d(penultimate)` and leaves the final layer's gradients at
    /// zero (for 1-layer nets all gradients are zero: the penultimate is the
    /// raw input).
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<ParamGrads> {
        let n_layers = self.layers.len();
        let mut grads: Vec<(Tensor, Tensor)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    Tensor::zeros(l.weights.shape().to_vec()),
                    Tensor::zeros(l.bias.shape().to_vec()),
                )
            })
            .collect();

        // `start` indexes the deepest layer whose output the upstream grad is
        // taken with respect to; `grad_post` is dL/d(post[start]).
        let (start, mut grad_post) = match upstream {
            Upstream::Logits(g) => {
                if g.shape() != trace.post[n_layers - 1].shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "upstream {:?} vs logits {:?}",
                        g.shape(),
                        trace.post[n_layers - 1].shape()
                    )));
                }
                (n_layers - 1, g.clone())
            }
            Upstream::Penultimate(g) => {
                if n_layers == 1 {
                    // Penultimate is the input; nothing upstream of it is a parameter.
                    if g.shape() != trace.input.shape() {
                        return Err(Error::ShapeMismatch(
                            "upstream does not match input shape".into(),
                        ));
                    }
                    return Ok(ParamGrads { layers: grads });
                }
                if g.shape() != trace.post[n_layers - 2].shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "upstream {:?} vs penultimate {:?}",
                        g.shape(),
                        trace.post[n_layers - 2].shape()
                    )));
                }
                (n_layers - 2, g.clone())
            }
        };

        for li in (0..=start).rev() {
            let layer = &self.layers[li];
            // dL/d(pre) = dL/d(post) ⊙ act'(pre)
            let mut grad_pre = grad_post.clone();
            {
                let pre = trace.pre[li].data();
                let gd = grad_pre.data_mut();
                for (g, &z) in gd.iter_mut().zip(pre) {
                    *g *= layer.spec.activation.derivative(z);
                }
            }
            let below = if li == 0 {
                &trace.input
            } else {
                &trace.post[li - 1]
            };
            grads[li].0 = below.transpose_matmul(&grad_pre)?;
            grads[li].1 = grad_pre.column_sums();
            if li > 0 {
                grad_post = grad_pre.matmul_transpose(&layer.weights)?;
            }
        }
        Ok(ParamGrads { layers: grads })
    }
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.post.last().unwrap()
    }

    pub fn penultimate(&self) -> &Tensor {
        if self.post.len() >= 2 {
            &self.post[self.post.len() - 2]
        } else {
            &self.input
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Upstream gradient entry point for [`Network::backward`].
#[derive(Debug, Clone)]
pub enum Upstream {
    Logits(Tensor),
    Penultimate(Tensor),
}

/// Per-layer `(dW, db)` gradients, aligned with `Network::layers`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl ParamGrads {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()))
            .fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

/// Pairs one recorded forward pass with one backward pass.
///
/// Backward without a prior forward (or a second backward on the same pass)
/// is a state error.
#[derive(Debug, Default)]
pub struct Tape {
    trace: Option<ForwardTrace>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { trace: None }
    }

    /// Runs and records a forward pass, returning `(logits, penultimate)` views.
    pub fn forward(&mut self, network: &Network, batch: &Tensor) -> Result<(&Tensor, &Tensor)> {
        self.trace = Some(network.forward_traced(batch)?);
        let t = self.trace.as_ref().unwrap();
        Ok((t.logits(), t.penultimate()))
    }

    /// Consumes the recorded pass and returns parameter gradients.
    pub fn backward(&mut self, network: &Network, upstream: &Upstream) -> Result<ParamGrads> {
        let trace = self.trace.take().ok_or(Error::BackwardWithoutForward)?;
        network.backward(&trace, upstream)
    }
}
