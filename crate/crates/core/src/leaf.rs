//! One-class leaf classifiers.
//!
//! A leaf's feature network trains by alternating steps: a cross-entropy
//! step over a reference-set minibatch (keeping features able to describe
//! many classes) and a feature-consistency step over a buffer minibatch
//! (pulling the new class's features toward their mean, scaled by `beta`).
//! Recognition measures the distance from an instance's penultimate features
//! to the buffer's feature center and accepts strictly inside the rejection
//! line.

use serde::{Deserialize, Serialize};

use crate::cascade::{Instance, ReferenceSet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Network, Optimizer, Tape, Upstream};
use crate::openmax::Decision;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Cosine,
    Euclidean,
}

impl DistanceKind {
    pub fn measure(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            DistanceKind::Cosine => cosine_distance(u, v),
            DistanceKind::Euclidean => {
                if u.len() != v.len() {
                    return Err(Error::ShapeMismatch("distance over mixed lengths".into()));
                }
                Ok(crate::openmax::euclidean(u, v))
            }
        }
    }

    /// Total variant: a zero vector has no direction, which the engine treats
    /// as maximally distant rather than an error.
    fn measure_or_max(self, u: &[f64], v: &[f64]) -> f64 {
        self.measure(u, v).unwrap_or(match self {
            DistanceKind::Cosine => 2.0,
            DistanceKind::Euclidean => f64::MAX,
        })
    }
}

/// `1 − u·v / (|u||v|)`, in `[0, 2]`. Zero vectors are an error.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch("cosine over mixed lengths".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let squ: f64 = u.iter().map(|a| a * a).sum();
    let sqv: f64 = v.iter().map(|a| a * a).sum();
    if squ == 0.0 || sqv == 0.0 {
        return Err(Error::InsufficientData(
            "cosine distance undefined for zero vector".into(),
        ));
    }
    // Single square root keeps u == v at exactly zero distance; clamp guards
    // rounding drift just outside [-1, 1].
    Ok(1.0 - (dot / (squ * sqv).sqrt()).clamp(-1.0, 1.0))
}

/// Buffer of instances detected as unknown, all sharing one identity group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub group_id: String,
    pub instances: Vec<Instance>,
    pub capacity: usize,
}

impl Buffer {
    pub fn new(group_id: impl Into<String>, capacity: usize) -> Self {
        Buffer {
            group_id: group_id.into(),
            instances: Vec::new(),
            capacity,
        }
    }

    /// Appends an instance; the caller guarantees the group matches.
    pub fn push(&mut self, instance: Instance) -> Result<()> {
        if instance.group_id != self.group_id {
            return Err(Error::DatasetMismatch(format!(
                "instance group `{}` does not match buffer group `{}`",
                instance.group_id, self.group_id
            )));
        }
        if self.instances.len() >= self.capacity {
            return Err(Error::InsufficientData(format!(
                "buffer `{}` already at capacity {}",
                self.group_id, self.capacity
            )));
        }
        self.instances.push(instance);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.instances.len() >= self.capacity
    }

    /// Most frequent ground-truth label among buffered instances, if any
    /// carry one. Ties break toward the smaller label.
    pub fn majority_label(&self) -> Option<u32> {
        use std::collections::BTreeMap;
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for x in &self.instances {
            if let Some(l) = x.label {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
            .into_iter()
            .max_by_key(|&(label, count)| (count, std::cmp::Reverse(label)))
            .map(|(label, _)| label)
    }
}

/// A trained one-class leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafModel {
    pub network: Network,
    /// Class id this leaf accepts.
    pub class_label: u32,
    /// Mean penultimate feature vector of the training buffer.
    pub center: Vec<f64>,
    /// Accept strictly below, reject at or above.
    pub rejection_line: f64,
    /// Outlier fraction used to place the rejection line.
    pub theta: f64,
    /// Penalty trade-off the leaf was trained with.
    pub beta: f64,
    pub distance_kind: DistanceKind,
}

impl LeafModel {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.center.len() != self.network.penultimate_dim() {
            return Err(Error::InvalidModel(format!(
                "leaf center has {} dims, network features have {}",
                self.center.len(),
                self.network.penultimate_dim()
            )));
        }
        if !(self.rejection_line >= 0.0 && self.rejection_line.is_finite()) {
            return Err(Error::InvalidModel("rejection line must be finite ≥ 0".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidModel("theta outside (0, 1]".into()));
        }
        Ok(())
    }

    /// Penultimate feature vector for one instance.
    pub fn features(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = Tensor::new(vec![1, input.len()], input.to_vec())?;
        let (_, penult) = self.network.forward(&batch)?;
        Ok(penult.data().to_vec())
    }

    /// Distance from an instance's features to the leaf center.
    pub fn distance_to_center(&self, input: &[f64]) -> Result<f64> {
        let h = self.features(input)?;
        Ok(self.distance_kind.measure_or_max(&h, &self.center))
    }

    /// Accepts the leaf's class strictly inside the rejection line; the
    /// boundary itself rejects.
    pub fn decide(&self, input: &[f64]) -> Result<Decision> {
        let d = self.distance_to_center(input)?;
        if d >= self.rejection_line {
            Ok(Decision::Reject)
        } else {
            Ok(Decision::Accept(self.class_label))
        }
    }
}

/// Mean over instances and dimensions of squared deviation from the feature
/// mean: `(1/(B·H)) Σ |h_i − mean|²`. Zero iff all vectors coincide.
pub fn self_describing_penalty(features: &[Vec<f64>]) -> Result<f64> {
    let b = features.len();
    if b == 0 {
        return Err(Error::InsufficientData(
            "penalty needs at least one feature vector".into(),
        ));
    }
    let h = features[0].len();
    if features.iter().any(|f| f.len() != h) {
        return Err(Error::ShapeMismatch("feature lengths differ".into()));
    }
    if h == 0 {
        return Err(Error::ShapeMismatch("empty feature vectors".into()));
    }
    let mut mean = vec![0.0; h];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let mut total = 0.0;
    for f in features {
        for (m, v) in mean.iter().zip(f) {
            let d = v - m;
            total += d * d;
        }
    }
    Ok(total / (b as f64 * h as f64))
}

/// Elementwise mean of the buffer instances' penultimate features.
pub fn compute_center(network: &Network, buffer: &Buffer) -> Result<Vec<f64>> {
    if buffer.instances.is_empty() {
        return Err(Error::InsufficientData("buffer is empty".into()));
    }
    let dim = buffer.instances[0].features.len();
    let idx: Vec<usize> = (0..buffer.instances.len()).collect();
    let batch = crate::openmax::batch_tensor(&buffer.instances, &idx, dim)?;
    let (_, penult) = network.forward(&batch)?;
    let h = penult.cols();
    let mut mean = vec![0.0; h];
    for i in 0..penult.rows() {
        for (m, v) in mean.iter_mut().zip(penult.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= penult.rows() as f64;
    }
    Ok(mean)
}

/// Sorts ascending, discards the `ceil(theta·n)` largest distances, and
/// returns the largest survivor (or the smallest distance if none survive).
pub fn compute_rejection_line(distances: &[f64], theta: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::InsufficientData("no distances for rejection line".into()));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config("theta", "must lie in (0, 1]"));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::NonFinite("rejection-line distances".into()));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let removed = ((theta * n as f64).ceil() as usize).min(n);
    if removed == n {
        return Ok(sorted[0]);
    }
    Ok(sorted[n - removed - 1])
}

/// Per-iteration loss trail of one leaf's training.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Cross-entropy over the reference minibatch, per iteration.
    pub outer_loss: Vec<f64>,
    /// Feature-consistency penalty over the buffer minibatch, per iteration.
    pub penalty: Vec<f64>,
    /// `outer + beta · penalty`, per iteration.
    pub total_loss: Vec<f64>,
}

/// Trains a leaf for `class_label` from a full buffer against the current
/// reference set.
pub fn train_leaf(
    buffer: &Buffer,
    reference: &ReferenceSet,
    class_label: u32,
    config: &RunConfig,
    seed: u64,
) -> Result<(LeafModel, TrainingLog)> {
    if buffer.instances.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "buffer `{}` has {} instances, need at least 2",
            buffer.group_id,
            buffer.instances.len()
        )));
    }
    let ref_classes = reference.classes();
    if ref_classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "reference set has {} classes, need at least 2",
            ref_classes.len()
        )));
    }
    let ref_instances: Vec<&Instance> = reference.iter().collect();
    if ref_instances.is_empty() {
        return Err(Error::InsufficientData("reference set is empty".into()));
    }
    let dim = buffer.instances[0].features.len();
    if ref_instances.iter().any(|x| x.features.len() != dim)
        || buffer.instances.iter().any(|x| x.features.len() != dim)
    {
        return Err(Error::ShapeMismatch(
            "buffer and reference feature lengths differ".into(),
        ));
    }

    let mut network = Network::mlp(dim, &config.hidden_layers, ref_classes.len(), seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr_leaf);
    let class_index = |label: u32| ref_classes.binary_search(&label).unwrap();

    let mut ref_sampler = crate::openmax::MinibatchSampler::new(
        ref_instances.len(),
        seed.wrapping_add(1),
    );
    let mut buf_sampler = crate::openmax::MinibatchSampler::new(
        buffer.instances.len(),
        seed.wrapping_add(2),
    );

    let mut log = TrainingLog::default();
    let mut tape = Tape::new();
    for _ in 0..config.leaf_iters {
        // Outer step: cross-entropy over a reference minibatch.
        let idx = ref_sampler.next_batch(config.batch_size);
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            data.extend_from_slice(&ref_instances[i].features);
            labels.push(class_index(
                ref_instances[i]
                    .label
                    .ok_or_else(|| Error::InsufficientData("unlabeled reference instance".into()))?,
            ));
        }
        let batch = Tensor::new(vec![idx.len(), dim], data)?;
        let (logits, _) = tape.forward(&network, &batch)?;
        let (outer, grad) = cross_entropy(logits, &labels)?;
        let grads = tape.backward(&network, &Upstream::Logits(grad))?;
        optimizer.step(&mut network, &grads)?;

        // Consistency step: pull buffer features toward their minibatch mean.
        let bidx = buf_sampler.next_batch(config.batch_size);
        let bbatch = crate::openmax::batch_tensor(&buffer.instances, &bidx, dim)?;
        let penalty = if config.beta > 0.0 {
            let (_, penult) = tape.forward(&network, &bbatch)?;
            let (value, grad_penult) = penalty_and_grad(penult)?;
            let mut scaled = grad_penult;
            for g in scaled.data_mut() {
                *g *= config.beta;
            }
            let grads = tape.backward(&network, &Upstream::Penultimate(scaled))?;
            optimizer.step(&mut network, &grads)?;
            value
        } else {
            // Beta 0: the penalty never touches parameters; record it for
            // the log without stepping.
            let (_, penult) = network.forward(&bbatch)?;
            let rows: Vec<Vec<f64>> =
                (0..penult.rows()).map(|i| penult.row(i).to_vec()).collect();
            self_describing_penalty(&rows)?
        };

        log.outer_loss.push(outer);
        log.penalty.push(penalty);
        log.total_loss.push(outer + config.beta * penalty);
    }

    let center = compute_center(&network, buffer)?;
    let mut distances = Vec::with_capacity(buffer.instances.len());
    for x in &buffer.instances {
        let batch = Tensor::new(vec![1, dim], x.features.clone())?;
        let (_, penult) = network.forward(&batch)?;
        distances.push(
            config
                .distance_kind
                .measure_or_max(penult.data(), &center),
        );
    }
    let rejection_line = compute_rejection_line(&distances, config.theta)?;

    let model = LeafModel {
        network,
        class_label,
        center,
        rejection_line,
        theta: config.theta,
        beta: config.beta,
        distance_kind: config.distance_kind,
    };
    model.validate()?;
    Ok((model, log))
}

/// Penalty value and its gradient with respect to the feature batch.
///
/// The mean's own dependence on each feature cancels exactly, so the
/// gradient is `2(h_i − mean) / (B·H)`.
fn penalty_and_grad(features: &Tensor) -> Result<(f64, Tensor)> {
    let (b, h) = (features.rows(), features.cols());
    let rows: Vec<Vec<f64>> = (0..b).map(|i| features.row(i).to_vec()).collect();
    let value = self_describing_penalty(&rows)?;
    let mut mean = vec![0.0; h];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let scale = 2.0 / (b as f64 * h as f64);
    let mut grad = vec![0.0; b * h];
    for (i, row) in rows.iter().enumerate() {
        for j in 0..h {
            grad[i * h + j] = scale * (row[j] - mean[j]);
        }
    }
    Ok((value, Tensor::new(vec![b, h], grad)?))
}
