//! Root node: a multi-class network whose pre-softmax activations are
//! revised through per-class Weibull calibration, yielding a probability for
//! a pseudo "unknown" class and an accept/reject decision.
//!
//! The activation vector is the final pre-softmax layer output; the same
//! vectors feed the per-class mean activation vectors (MAVs) and the
//! Euclidean distances the Weibull tails are fitted on.

use serde::{Deserialize, Serialize};

use crate::cascade::Instance;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evt::{fit_weibull_tail, WeibullModel};
use crate::nn::{cross_entropy, Network, Optimizer, Tape, Upstream};
use crate::tensor::Tensor;
use crate::{derive_seed, UNKNOWN_LABEL};

/// Accept/reject outcome of a single node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept(u32),
    Reject,
}

/// How the root maps openmax scores to a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionRule {
    /// Reject when the unknown probability reaches the threshold.
    Threshold,
    /// Reject only when the unknown slot wins the argmax.
    Argmax,
}

/// Trained root classifier with openmax calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootModel {
    pub network: Network,
    /// Ordered class ids; position matches the network output slot.
    pub class_labels: Vec<u32>,
    /// Per-class mean activation vectors over correctly classified
    /// training instances.
    pub mavs: Vec<Vec<f64>>,
    /// Per-class Weibull models over activation distances to the MAV.
    pub weibulls: Vec<WeibullModel>,
    /// Number of top-ranked classes revised.
    pub alpha: usize,
    /// Rejection threshold on the unknown probability.
    pub gamma: f64,
    pub rejection_rule: RejectionRule,
    /// Plain-softmax accuracy on the training set, recorded at train time.
    pub train_accuracy: f64,
}

impl RootModel {
    /// Structural consistency check, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let k = self.class_labels.len();
        if k < 2 {
            return Err(Error::InvalidModel("root needs at least 2 classes".into()));
        }
        if self.network.output_dim() != k {
            return Err(Error::InvalidModel(format!(
                "network outputs {} classes but {} labels recorded",
                self.network.output_dim(),
                k
            )));
        }
        if self.mavs.len() != k || self.weibulls.len() != k {
            return Err(Error::InvalidModel(
                "calibration incomplete: need one MAV and one Weibull per class".into(),
            ));
        }
        if self.mavs.iter().any(|m| m.len() != k) {
            return Err(Error::InvalidModel(
                "MAV length does not match activation width".into(),
            ));
        }
        for w in &self.weibulls {
            w.validate()?;
        }
        if self.alpha == 0 || self.alpha > k {
            return Err(Error::InvalidModel(format!(
                "alpha {} out of range for {} classes",
                self.alpha, k
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidModel("gamma outside [0, 1]".into()));
        }
        if self.class_labels.contains(&UNKNOWN_LABEL) {
            return Err(Error::InvalidModel("class id 0 is reserved".into()));
        }
        Ok(())
    }

    /// Pre-softmax activation vector for one feature vector.
    pub fn activation_vector(&self, features: &[f64]) -> Result<Vec<f64>> {
        let batch = Tensor::new(vec![1, features.len()], features.to_vec())?;
        let (logits, _) = self.network.forward(&batch)?;
        Ok(logits.data().to_vec())
    }

    /// Revises activations: each of the top `alpha` classes is damped by its
    /// Weibull CDF at the activation's distance to the class MAV, with rank 1
    /// carrying full CDF weight and the weight decaying linearly; the removed
    /// mass becomes the pseudo-activation. Returns `(revised, pseudo)`.
    pub fn revise_activations(&self, activations: &[f64]) -> (Vec<f64>, f64) {
        let alpha = self.alpha.min(activations.len());
        let mut ranked: Vec<usize> = (0..activations.len()).collect();
        ranked.sort_by(|&a, &b| {
            activations[b]
                .partial_cmp(&activations[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut revised = activations.to_vec();
        let mut pseudo = 0.0;
        for (rank, &class_idx) in ranked.iter().take(alpha).enumerate() {
            let d = euclidean(activations, &self.mavs[class_idx]);
            let cdf = self.weibulls[class_idx].cdf(d);
            let weight = 1.0 - ((alpha - rank) as f64 / alpha as f64) * cdf;
            let v = activations[class_idx];
            revised[class_idx] = v * weight;
            pseudo += v - revised[class_idx];
        }
        (revised, pseudo)
    }

    /// Probability vector over `[unknown, class_0, ..., class_{K-1}]`.
    pub fn openmax_scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.validate_calibration()?;
        let v = self.activation_vector(features)?;
        let (revised, pseudo) = self.revise_activations(&v);
        let mut row = Vec::with_capacity(revised.len() + 1);
        row.push(pseudo);
        row.extend_from_slice(&revised);
        let scores = crate::nn::softmax(&Tensor::new(vec![1, row.len()], row)?)?;
        Ok(scores.data().to_vec())
    }

    /// Accept (with the plain-softmax argmax class) or reject.
    pub fn decide(&self, features: &[f64]) -> Result<Decision> {
        let scores = self.openmax_scores(features)?;
        let reject = match self.rejection_rule {
            RejectionRule::Threshold => scores[0] >= self.gamma,
            RejectionRule::Argmax => {
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                best == 0
            }
        };
        if reject {
            return Ok(Decision::Reject);
        }
        let v = self.activation_vector(features)?;
        let best = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(Decision::Accept(self.class_labels[best]))
    }

    fn validate_calibration(&self) -> Result<()> {
        let k = self.class_labels.len();
        if self.mavs.len() != k || self.weibulls.len() != k {
            return Err(Error::InvalidModel(
                "model not calibrated: missing MAVs or Weibull models".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Trains the root network on labeled instances and calibrates it.
pub fn train_root(train: &[Instance], config: &RunConfig) -> Result<RootModel> {
    let (class_labels, by_class) = group_by_class(train)?;
    if class_labels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "root training needs at least 2 classes, got {}",
            class_labels.len()
        )));
    }
    for (label, members) in class_labels.iter().zip(&by_class) {
        if members.is_empty() {
            return Err(Error::InsufficientData(format!("class {label} is empty")));
        }
        if members.len() < config.batch_size {
            return Err(Error::InsufficientData(format!(
                "class {label} has {} instances, fewer than batch size {}",
                members.len(),
                config.batch_size
            )));
        }
    }
    if config.alpha_root > class_labels.len() {
        return Err(Error::config(
            "alpha_root",
            format!("exceeds the {} known classes", class_labels.len()),
        ));
    }
    let dim = train[0].features.len();
    if train.iter().any(|x| x.features.len() != dim) {
        return Err(Error::ShapeMismatch(
            "training instances have mixed feature lengths".into(),
        ));
    }

    let mut network = Network::mlp(
        dim,
        &config.hidden_layers,
        class_labels.len(),
        derive_seed(config.seed, "root-init"),
    )?;
    let mut optimizer = Optimizer::new(config.optimizer, config.lr_root);
    let mut sampler = MinibatchSampler::new(train.len(), derive_seed(config.seed, "root-batches"));
    let label_index = |label: u32| class_labels.binary_search(&label).unwrap();

    let mut tape = Tape::new();
    for _ in 0..config.root_iters {
        let idx = sampler.next_batch(config.batch_size);
        let batch = batch_tensor(train, &idx, dim)?;
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| label_index(train[i].label.expect("validated above")))
            .collect();
        let (logits, _) = tape.forward(&network, &batch)?;
        let (_, grad) = cross_entropy(logits, &labels)?;
        let grads = tape.backward(&network, &Upstream::Logits(grad))?;
        optimizer.step(&mut network, &grads)?;
    }

    let all_idx: Vec<usize> = (0..train.len()).collect();
    let batch = batch_tensor(train, &all_idx, dim)?;
    let (logits, _) = network.forward(&batch)?;
    let mut correct = 0usize;
    for (i, x) in train.iter().enumerate() {
        if argmax(logits.row(i)) == label_index(x.label.unwrap()) {
            correct += 1;
        }
    }
    let train_accuracy = correct as f64 / train.len() as f64;

    let mavs = compute_mavs(&network, &class_labels, train)?;
    let weibulls = calibrate(&network, &class_labels, &mavs, train, config.eta_tail)?;

    let model = RootModel {
        network,
        class_labels,
        mavs,
        weibulls,
        alpha: config.alpha_root,
        gamma: config.gamma_root,
        rejection_rule: config.rejection_rule,
        train_accuracy,
    };
    model.validate()?;
    Ok(model)
}

/// Per-class mean activation vectors over correctly classified instances
/// (plain-softmax argmax decides correctness).
pub fn compute_mavs(
    network: &Network,
    class_labels: &[u32],
    train: &[Instance],
) -> Result<Vec<Vec<f64>>> {
    let width = network.output_dim();
    let mut sums = vec![vec![0.0; width]; class_labels.len()];
    let mut counts = vec![0usize; class_labels.len()];
    for x in train {
        let label = x
            .label
            .ok_or_else(|| Error::InsufficientData(format!("instance {} unlabeled", x.id)))?;
        let class_idx = class_labels
            .binary_search(&label)
            .map_err(|_| Error::InsufficientData(format!("label {label} not a known class")))?;
        let v = single_activation(network, &x.features)?;
        if argmax(&v) == class_idx {
            for (s, a) in sums[class_idx].iter_mut().zip(&v) {
                *s += a;
            }
            counts[class_idx] += 1;
        }
    }
    for (label, &count) in class_labels.iter().zip(&counts) {
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "class {label}: no correctly classified instances for its MAV"
            )));
        }
    }
    Ok(sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

/// Fits one Weibull tail per class on activation distances to the class MAV,
/// over correctly classified instances.
pub fn calibrate(
    network: &Network,
    class_labels: &[u32],
    mavs: &[Vec<f64>],
    train: &[Instance],
    eta_tail: usize,
) -> Result<Vec<WeibullModel>> {
    let mut distances: Vec<Vec<f64>> = vec![Vec::new(); class_labels.len()];
    for x in train {
        let label = x
            .label
            .ok_or_else(|| Error::InsufficientData(format!("instance {} unlabeled", x.id)))?;
        let class_idx = class_labels
            .binary_search(&label)
            .map_err(|_| Error::InsufficientData(format!("label {label} not a known class")))?;
        let v = single_activation(network, &x.features)?;
        if argmax(&v) == class_idx {
            distances[class_idx].push(euclidean(&v, &mavs[class_idx]));
        }
    }
    class_labels
        .iter()
        .zip(distances)
        .map(|(label, d)| {
            if d.len() < eta_tail {
                return Err(Error::InsufficientData(format!(
                    "class {label}: {} correctly classified instances, need at least {eta_tail} \
                     for Weibull calibration",
                    d.len()
                )));
            }
            fit_weibull_tail(&d, eta_tail)
        })
        .collect()
}

fn single_activation(network: &Network, features: &[f64]) -> Result<Vec<f64>> {
    let batch = Tensor::new(vec![1, features.len()], features.to_vec())?;
    let (logits, _) = network.forward(&batch)?;
    Ok(logits.data().to_vec())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Sorted distinct labels plus per-class index lists. Errors on unlabeled
/// instances.
fn group_by_class(train: &[Instance]) -> Result<(Vec<u32>, Vec<Vec<usize>>)> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, x) in train.iter().enumerate() {
        let label = x.label.ok_or_else(|| {
            Error::InsufficientData(format!("training instance {} has no label", x.id))
        })?;
        if label == UNKNOWN_LABEL {
            return Err(Error::InsufficientData(format!(
                "training instance {} labeled with reserved id 0",
                x.id
            )));
        }
        groups.entry(label).or_default().push(i);
    }
    let labels: Vec<u32> = groups.keys().copied().collect();
    let members: Vec<Vec<usize>> = groups.into_values().collect();
    Ok((labels, members))
}

pub(crate) fn batch_tensor(instances: &[Instance], idx: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        if instances[i].features.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "instance {} has {} features, expected {dim}",
                instances[i].id,
                instances[i].features.len()
            )));
        }
        data.extend_from_slice(&instances[i].features);
    }
    Tensor::new(vec![idx.len(), dim], data)
}

/// Seeded minibatch index stream: reshuffles each epoch.
pub(crate) struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl MinibatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut s = MinibatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.reshuffle();
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Model with hand-picked calibration: unit-shape Weibulls whose scales
    /// are solved so the CDF at the probe's MAV distance hits an exact target.
    fn crafted_model(activations: &[f64], target_cdfs: &[f64], alpha: usize) -> RootModel {
        let k = activations.len();
        let d = euclidean(activations, &vec![0.0; k]);
        let mut ranked: Vec<usize> = (0..k).collect();
        ranked.sort_by(|&a, &b| activations[b].partial_cmp(&activations[a]).unwrap());
        let mut weibulls: Vec<WeibullModel> = (0..k)
            .map(|_| WeibullModel {
                shape: 1.0,
                scale: 1.0,
                tail_size: 2,
                translation: 0.0,
            })
            .collect();
        for (rank, &class_idx) in ranked.iter().take(alpha).enumerate() {
            let c = target_cdfs[rank];
            // cdf = 1 - exp(-d/scale)  =>  scale = -d / ln(1-c)
            let scale = if c > 0.0 { -d / (1.0 - c).ln() } else { 1e12 };
            weibulls[class_idx].scale = scale;
        }
        RootModel {
            network: Network::mlp(k, &[], k, 0).unwrap(),
            class_labels: (1..=k as u32).collect(),
            mavs: vec![vec![0.0; k]; k],
            weibulls,
            alpha,
            gamma: 0.5,
            rejection_rule: RejectionRule::Threshold,
            train_accuracy: 1.0,
        }
    }

    #[test]
    fn zero_cdfs_leave_activations_unrevised() {
        // MAV at the probe itself: distance 0, every CDF 0, weights collapse to 1.
        let v = [3.0, 2.0, 1.0];
        let model = RootModel {
            network: Network::mlp(3, &[], 3, 0).unwrap(),
            class_labels: vec![1, 2, 3],
            mavs: vec![v.to_vec(); 3],
            weibulls: vec![
                WeibullModel {
                    shape: 1.0,
                    scale: 1.0,
                    tail_size: 2,
                    translation: 0.0
                };
                3
            ],
            alpha: 2,
            gamma: 0.5,
            rejection_rule: RejectionRule::Threshold,
            train_accuracy: 1.0,
        };
        let (revised, pseudo) = model.revise_activations(&v);
        assert_eq!(revised, v.to_vec());
        assert_eq!(pseudo, 0.0);
    }

    #[test]
    fn saturated_top_cdf_transfers_full_mass_at_alpha_one() {
        let v = [5.0, 1.0];
        let model = crafted_model(&v, &[1.0 - 1e-15], 1);
        let (revised, pseudo) = model.revise_activations(&v);
        assert!(revised[0].abs() < 1e-12, "revised top {}", revised[0]);
        assert!((pseudo - 5.0).abs() < 1e-12, "pseudo {pseudo}");
        assert_eq!(revised[1], 1.0);
    }

    #[test]
    fn three_class_hand_trace() {
        // activations [3,2,1], alpha 2, top-rank CDFs [0.5, 0.2]:
        // rank 1 weight 1-(2/2)(0.5)=0.5 -> 1.5; rank 2 weight 1-(1/2)(0.2)=0.9 -> 1.8;
        // unranked keeps 1.0; pseudo = 1.5+0.2+0 = 1.7.
        let v = [3.0, 2.0, 1.0];
        let model = crafted_model(&v, &[0.5, 0.2], 2);
        let (revised, pseudo) = model.revise_activations(&v);
        assert!((revised[0] - 1.5).abs() < 1e-9);
        assert!((revised[1] - 1.8).abs() < 1e-9);
        assert!((revised[2] - 1.0).abs() < 1e-12);
        assert!((pseudo - 1.7).abs() < 1e-9);

        // Full score vector equals an independently computed softmax of
        // [1.7, 1.5, 1.8, 1.0].
        let feats = vec![0.0; 3];
        let mut model = model;
        // Identity pass-through so activation_vector(features) == v.
        model.network = {
            let mut net = Network::mlp(3, &[], 3, 0).unwrap();
            for w in net.layers_mut()[0].weights.data_mut() {
                *w = 0.0;
            }
            for (j, b) in net.layers_mut()[0].bias.data_mut().iter_mut().enumerate() {
                *b = v[j];
            }
            net
        };
        let scores = model.openmax_scores(&feats).unwrap();
        let raw: [f64; 4] = [1.7, 1.5, 1.8, 1.0];
        let z: f64 = raw.iter().map(|x| x.exp()).sum();
        for (s, r) in scores.iter().zip(&raw) {
            assert!((s - r.exp() / z).abs() < 1e-9);
        }
        let total: f64 = scores.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_extremes_control_rejection() {
        let v = [4.0, 1.0];
        let mut model = crafted_model(&v, &[0.3, 0.1], 2);
        model.network = {
            let mut net = Network::mlp(2, &[], 2, 0).unwrap();
            for w in net.layers_mut()[0].weights.data_mut() {
                *w = 0.0;
            }
            for (j, b) in net.layers_mut()[0].bias.data_mut().iter_mut().enumerate() {
                *b = v[j];
            }
            net
        };
        model.gamma = 0.0;
        assert_eq!(model.decide(&[0.0, 0.0]).unwrap(), Decision::Reject);
        model.gamma = 1.0;
        assert_eq!(model.decide(&[0.0, 0.0]).unwrap(), Decision::Accept(1));
    }

    #[test]
    fn uncalibrated_model_errors() {
        let mut model = crafted_model(&[1.0, 0.0], &[0.1, 0.1], 1);
        model.weibulls.clear();
        assert!(matches!(
            model.openmax_scores(&[0.0, 0.0]),
            Err(Error::InvalidModel(_))
        ));
        assert!(model.validate().is_err());
    }

    fn gaussian_train_set(
        centers: &[Vec<f64>],
        per_class: usize,
        seed: u64,
    ) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (ci, center) in centers.iter().enumerate() {
            for i in 0..per_class {
                // Box-Muller pairs for unit-variance coordinates.
                let features: Vec<f64> = center
                    .iter()
                    .map(|&c| {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        c + (-2.0 * u1.ln()).sqrt() * u2.cos()
                    })
                    .collect();
                out.push(Instance {
                    id: format!("c{ci}-{i}"),
                    features,
                    label: Some(ci as u32 + 1),
                    group_id: format!("g{ci}"),
                });
            }
        }
        out
    }

    fn separable_config() -> RunConfig {
        RunConfig {
            root_iters: 400,
            eta_tail: 20,
            hidden_layers: vec![16],
            ..RunConfig::default()
        }
    }

    #[test]
    fn train_root_on_separable_clusters_reaches_high_accuracy() {
        // Two 16-D Gaussians with centers 6 units apart; a nearest-centroid
        // oracle on the same data must already be near-perfect, so the
        // trained root has no excuse.
        let mut c0 = vec![0.0; 16];
        let mut c1 = vec![0.0; 16];
        c0[0] = 3.0;
        c1[0] = -3.0;
        let train = gaussian_train_set(&[c0.clone(), c1.clone()], 200, 9);

        let mut centroid_correct = 0;
        for x in &train {
            let d0 = euclidean(&x.features, &c0);
            let d1 = euclidean(&x.features, &c1);
            let pred = if d0 <= d1 { 1 } else { 2 };
            if pred == x.label.unwrap() {
                centroid_correct += 1;
            }
        }
        assert!(centroid_correct as f64 / train.len() as f64 >= 0.99);

        let model = train_root(&train, &separable_config()).unwrap();
        assert!(
            model.train_accuracy >= 0.99,
            "train accuracy {}",
            model.train_accuracy
        );
    }

    #[test]
    fn train_root_rejects_single_class() {
        let train = gaussian_train_set(&[vec![0.0; 4]], 60, 1);
        assert!(matches!(
            train_root(&train, &separable_config()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn far_outlier_is_rejected_at_low_gamma() {
        let mut c0 = vec![0.0; 8];
        let mut c1 = vec![0.0; 8];
        c0[0] = 4.0;
        c1[0] = -4.0;
        let train = gaussian_train_set(&[c0, c1], 200, 3);
        let mut cfg = separable_config();
        cfg.gamma_root = 0.1;
        let model = train_root(&train, &cfg).unwrap();
        // Probe far beyond every calibration distance on every class.
        let probe = vec![1e4; 8];
        assert_eq!(model.decide(&probe).unwrap(), Decision::Reject);
    }

    #[test]
    fn mavs_are_plain_means_of_correct_activations() {
        // Identity network: activations equal features, so MAVs are class
        // means of features whose argmax slot matches the class index.
        let net = {
            let mut n = Network::mlp(2, &[], 2, 0).unwrap();
            let w = n.layers_mut()[0].weights.data_mut();
            w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            n
        };
        let inst = |id: &str, f: Vec<f64>, label: u32| Instance {
            id: id.into(),
            features: f,
            label: Some(label),
            group_id: "g".into(),
        };
        let train = vec![
            inst("a", vec![2.0, 0.0], 1),
            inst("b", vec![0.0, 2.0], 1), // misclassified for class 1, excluded
            inst("c", vec![4.0, 0.0], 1),
            inst("d", vec![0.0, 3.0], 2),
        ];
        let mavs = compute_mavs(&net, &[1, 2], &train).unwrap();
        assert_eq!(mavs[0], vec![3.0, 0.0]);
        assert_eq!(mavs[1], vec![0.0, 3.0]);

        // Two-pass oracle over the same filter.
        let mut sum = [0.0; 2];
        let mut count = 0;
        for x in &train {
            if x.label == Some(1) && x.features[0] > x.features[1] {
                sum[0] += x.features[0];
                sum[1] += x.features[1];
                count += 1;
            }
        }
        assert_eq!(mavs[0], vec![sum[0] / count as f64, sum[1] / count as f64]);
    }

    #[test]
    fn calibrate_requires_eta_correct_instances_and_names_the_class() {
        let net = Network::mlp(2, &[], 2, 1).unwrap();
        let train: Vec<Instance> = (0..30)
            .map(|i| Instance {
                id: format!("x{i}"),
                features: vec![1.0 + (i as f64) * 0.01, 0.0],
                label: Some(1),
                group_id: "g".into(),
            })
            .chain((0..3).map(|i| Instance {
                id: format!("y{i}"),
                features: vec![0.0, 1.0 + (i as f64) * 0.01],
                label: Some(2),
                group_id: "g".into(),
            }))
            .collect();
        let net = {
            let mut n = net;
            let w = n.layers_mut()[0].weights.data_mut();
            w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            n
        };
        let mavs = compute_mavs(&net, &[1, 2], &train).unwrap();
        let err = calibrate(&net, &[1, 2], &mavs, &train, 20).unwrap_err();
        assert!(err.to_string().contains("class 2"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn openmax_preserves_total_activation_and_normalizes(
            acts in proptest::collection::vec(-5.0_f64..5.0, 2..6),
            scales in proptest::collection::vec(0.2_f64..3.0, 6),
            alpha_pick in 1usize..6,
        ) {
            let k = acts.len();
            let alpha = alpha_pick.min(k);
            let weibulls: Vec<WeibullModel> = (0..k)
                .map(|i| WeibullModel {
                    shape: 1.0 + (i as f64) * 0.3,
                    scale: scales[i],
                    tail_size: 2,
                    translation: 0.0,
                })
                .collect();
            let model = RootModel {
                network: Network::mlp(k, &[], k, 0).unwrap(),
                class_labels: (1..=k as u32).collect(),
                mavs: (0..k).map(|i| vec![i as f64 * 0.1; k]).collect(),
                weibulls,
                alpha,
                gamma: 0.5,
                rejection_rule: RejectionRule::Threshold,
                train_accuracy: 1.0,
            };
            let (revised, pseudo) = model.revise_activations(&acts);
            let before: f64 = acts.iter().sum();
            let after: f64 = revised.iter().sum::<f64>() + pseudo;
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn unknown_probability_is_monotone_in_cdfs_for_nonnegative_activations(
            acts in proptest::collection::vec(0.0_f64..6.0, 2..5),
            base_cdfs in proptest::collection::vec(0.0_f64..0.9, 5),
            bump in 0.0_f64..0.1,
        ) {
            // Direct check of the revision arithmetic: raising every ranked
            // CDF never lowers the unknown probability when activations are
            // non-negative. (Negative activations can invert the transfer;
            // the engine's rank weights only see the non-negative regime in
            // calibrated use.)
            let k = acts.len();
            let alpha = 2usize.min(k);
            let mut ranked: Vec<usize> = (0..k).collect();
            ranked.sort_by(|&a, &b| acts[b].partial_cmp(&acts[a]).unwrap());

            let score_unknown = |cdfs: &[f64]| -> f64 {
                let mut revised = acts.clone();
                let mut pseudo = 0.0;
                for (rank, &ci) in ranked.iter().take(alpha).enumerate() {
                    let w = 1.0 - ((alpha - rank) as f64 / alpha as f64) * cdfs[rank];
                    let v = acts[ci];
                    revised[ci] = v * w;
                    pseudo += v - revised[ci];
                }
                let z: f64 = revised.iter().map(|v| v.exp()).sum::<f64>() + pseudo.exp();
                pseudo.exp() / z
            };

            let low: Vec<f64> = base_cdfs[..alpha].to_vec();
            let high: Vec<f64> = low.iter().map(|c| (c + bump).min(1.0)).collect();
            prop_assert!(score_unknown(&high) >= score_unknown(&low) - 1e-12);
        }
    }
}
