//! Cascade state machine: recognition over root plus ordered leaves,
//! unknown-instance buffering by identity group, leaf spawning on buffer
//! fill, and reference-set rebalancing under a fixed capacity.
//!
//! Spawning a leaf never touches the parameters of earlier nodes; recognition
//! consults nodes strictly in creation order and the first acceptance wins.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::leaf::{train_leaf, Buffer, LeafModel, TrainingLog};
use crate::openmax::{Decision, RootModel};
use crate::{derive_seed, UNKNOWN_LABEL};

/// Current cascade model file version.
const FILE_VERSION: u32 = 1;

/// One observation: a feature vector with optional ground truth and an
/// identity-group tag (instances sharing a tag belong to the same class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    /// Ground-truth class, when known. 0 is reserved for "unknown".
    pub label: Option<u32>,
    pub group_id: String,
}

/// Fixed-capacity multi-class sample store with a per-class quota of
/// `floor(capacity / classes)`, rebalanced whenever a class is added.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    capacity: usize,
    seed: u64,
    per_class: BTreeMap<u32, Vec<Instance>>,
}

impl ReferenceSet {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReferenceSet {
            capacity,
            seed,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted class ids currently present.
    pub fn classes(&self) -> Vec<u32> {
        self.per_class.keys().copied().collect()
    }

    pub fn class_count(&self, class: u32) -> usize {
        self.per_class.get(&class).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.per_class.values().flatten()
    }

    /// Adds a new class and downsamples every class (seeded, uniform) to the
    /// new quota `floor(capacity / classes)`. Classes holding fewer than the
    /// quota keep everything they have.
    pub fn rebalance(&mut self, new_class_id: u32, new_instances: Vec<Instance>) -> Result<()> {
        if self.per_class.contains_key(&new_class_id) {
            return Err(Error::DuplicateClass(new_class_id));
        }
        if new_instances.is_empty() {
            return Err(Error::InsufficientData(format!(
                "class {new_class_id} brings no instances to the reference set"
            )));
        }
        self.per_class.insert(new_class_id, new_instances);
        let classes = self.per_class.len();
        let quota = self.capacity / classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &format!("reference-rebalance-{classes}"),
        ));
        for members in self.per_class.values_mut() {
            if members.len() > quota {
                let mut picked = rand::seq::index::sample(&mut rng, members.len(), quota)
                    .into_vec();
                picked.sort_unstable();
                *members = picked.into_iter().map(|i| members[i].clone()).collect();
            }
        }
        Ok(())
    }

    /// Ids per class, for serialization.
    fn ids(&self) -> BTreeMap<u32, Vec<String>> {
        self.per_class
            .iter()
            .map(|(&c, v)| (c, v.iter().map(|x| x.id.clone()).collect()))
            .collect()
    }
}

/// Record of one stage transition (a leaf was trained and appended).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTransition {
    /// Stage counter after the transition.
    pub stage: usize,
    /// Class id assigned to the new leaf.
    pub class_id: u32,
    /// Identity group whose buffer filled.
    pub group_id: String,
    /// Index of the new leaf in creation order.
    pub leaf_index: usize,
    /// Majority ground-truth label of the training buffer, when labeled.
    pub majority_label: Option<u32>,
    /// Loss trail of the leaf's training.
    pub training_log: TrainingLog,
}

/// The full open-world recognizer at some stage `t`.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub config: RunConfig,
    pub root: RootModel,
    pub leaves: Vec<LeafModel>,
    pub reference_set: ReferenceSet,
    pub buffers: BTreeMap<String, Buffer>,
    /// Number of leaves spawned so far.
    pub stage: usize,
    /// Initial classes followed by spawned class ids, in creation order.
    pub known_classes: Vec<u32>,
    /// Spawned class id -> majority ground-truth label of its buffer.
    pub leaf_truth: BTreeMap<u32, u32>,
    /// False after loading from disk until features are reattached.
    hydrated: bool,
}

impl CascadeModel {
    /// A stage-0 cascade over a trained root.
    pub fn new(root: RootModel, reference_set: ReferenceSet, config: RunConfig) -> Self {
        let known_classes = root.class_labels.clone();
        CascadeModel {
            config,
            root,
            leaves: Vec::new(),
            reference_set,
            buffers: BTreeMap::new(),
            stage: 0,
            known_classes,
            leaf_truth: BTreeMap::new(),
            hydrated: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.root.network.input_dim()
    }

    pub fn is_hydrated(&self) -> bool {
        self.hydrated
    }

    /// Next fresh class id: one past the largest known id.
    pub fn next_class_id(&self) -> u32 {
        self.known_classes.iter().copied().max().unwrap_or(0) + 1
    }

    /// Structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.root.validate()?;
        for leaf in &self.leaves {
            leaf.validate()?;
        }
        if self.leaves.len() != self.stage {
            return Err(Error::InvalidModel(format!(
                "stage {} does not match {} leaves",
                self.stage,
                self.leaves.len()
            )));
        }
        if self.known_classes.len() != self.root.class_labels.len() + self.stage {
            return Err(Error::InvalidModel(
                "known classes do not cover initial classes plus one per leaf".into(),
            ));
        }
        for (i, leaf) in self.leaves.iter().enumerate() {
            if self.known_classes[self.root.class_labels.len() + i] != leaf.class_label {
                return Err(Error::InvalidModel(
                    "leaf order does not match known-class order".into(),
                ));
            }
        }
        Ok(())
    }

    /// Pure recognition: root first, then leaves in creation order; the
    /// first acceptance wins and exhaustion means unknown (label 0).
    pub fn recognize(&self, x: &Instance) -> Result<u32> {
        self.recognize_features(&x.features)
    }

    pub fn recognize_features(&self, features: &[f64]) -> Result<u32> {
        if features.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "instance has {} features, model expects {}",
                features.len(),
                self.feature_dim()
            )));
        }
        if let Decision::Accept(label) = self.root.decide(features)? {
            return Ok(label);
        }
        for leaf in &self.leaves {
            if let Decision::Accept(label) = leaf.decide(features)? {
                return Ok(label);
            }
        }
        Ok(UNKNOWN_LABEL)
    }

    /// Recognizes `x` and, when it is unknown, buffers it by identity group;
    /// a buffer reaching capacity trains a new leaf and advances the stage.
    ///
    /// Leaf-training failures leave the cascade at its current stage with the
    /// buffer intact; the transition is retried when the group next appears.
    pub fn ingest(&mut self, x: &Instance) -> Result<(u32, Option<StageTransition>)> {
        // A full buffer left behind by an earlier failed transition is
        // retried before anything else happens.
        if self
            .buffers
            .get(&x.group_id)
            .is_some_and(Buffer::is_full)
        {
            let transition = self.spawn_leaf(&x.group_id)?;
            let prediction = self.recognize(x)?;
            return Ok((prediction, Some(transition)));
        }

        let prediction = self.recognize(x)?;
        if prediction != UNKNOWN_LABEL {
            return Ok((prediction, None));
        }
        if !self.hydrated {
            return Err(Error::InvalidModel(
                "reference set not hydrated; reload features before ingesting".into(),
            ));
        }
        let capacity = self.config.buffer_capacity;
        let buffer = self
            .buffers
            .entry(x.group_id.clone())
            .or_insert_with(|| Buffer::new(x.group_id.clone(), capacity));
        buffer.push(x.clone())?;
        if !buffer.is_full() {
            return Ok((UNKNOWN_LABEL, None));
        }
        let transition = self.spawn_leaf(&x.group_id)?;
        Ok((UNKNOWN_LABEL, Some(transition)))
    }

    /// Trains a leaf from the named group's full buffer, appends it, folds
    /// the buffer into the reference set, and advances the stage.
    fn spawn_leaf(&mut self, group_id: &str) -> Result<StageTransition> {
        let buffer = self
            .buffers
            .get(group_id)
            .ok_or_else(|| Error::InsufficientData(format!("no buffer for group {group_id}")))?;
        let class_id = self.next_class_id();
        let seed = derive_seed(self.config.seed, &format!("leaf-{}", self.stage + 1));
        let (leaf, training_log) = train_leaf(buffer, &self.reference_set, class_id, &self.config, seed)?;

        // Training succeeded: commit the transition.
        let buffer = self
            .buffers
            .remove(group_id)
            .expect("buffer existed above");
        let majority_label = buffer.majority_label();
        self.reference_set.rebalance(class_id, buffer.instances)?;
        self.leaves.push(leaf);
        self.stage += 1;
        self.known_classes.push(class_id);
        if let Some(truth) = majority_label {
            self.leaf_truth.insert(class_id, truth);
        }
        Ok(StageTransition {
            stage: self.stage,
            class_id,
            group_id: group_id.to_string(),
            leaf_index: self.stage - 1,
            majority_label,
            training_log,
        })
    }

    /// Translates an engine prediction into ground-truth vocabulary using the
    /// recorded buffer majorities (initial classes map to themselves).
    pub fn truth_label(&self, prediction: u32) -> u32 {
        self.leaf_truth
            .get(&prediction)
            .copied()
            .unwrap_or(prediction)
    }

    /// Ground-truth classes the model has learned so far.
    pub fn learned_truth_classes(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.root.class_labels.clone();
        out.extend(self.leaf_truth.values().copied());
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Writes the model as versioned JSON. Reference-set members are stored
    /// by instance id, not raw features.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&SavedCascade::from(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Loads a saved model. Recognition works immediately; ingestion needs
    /// [`CascadeModel::rehydrate`] to reattach reference-set features.
    pub fn load(path: impl AsRef<Path>) -> Result<CascadeModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let saved: SavedCascade = serde_json::from_str(&text)?;
        saved.into_model()
    }

    /// Reattaches reference-set features by instance id.
    pub fn rehydrate(&mut self, pool: &[Instance]) -> Result<()> {
        let by_id: BTreeMap<&str, &Instance> =
            pool.iter().map(|x| (x.id.as_str(), x)).collect();
        for members in self.reference_set.per_class.values_mut() {
            for slot in members.iter_mut() {
                let found = by_id.get(slot.id.as_str()).ok_or_else(|| {
                    Error::DatasetMismatch(format!(
                        "reference instance `{}` not present in the dataset",
                        slot.id
                    ))
                })?;
                *slot = (*found).clone();
            }
        }
        self.hydrated = true;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SavedReferenceSet {
    capacity: usize,
    seed: u64,
    per_class: BTreeMap<u32, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SavedCascade {
    version: u32,
    config: RunConfig,
    stage: usize,
    known_classes: Vec<u32>,
    leaf_truth: BTreeMap<u32, u32>,
    root: RootModel,
    leaves: Vec<LeafModel>,
    reference: SavedReferenceSet,
}

impl From<&CascadeModel> for SavedCascade {
    fn from(m: &CascadeModel) -> Self {
        SavedCascade {
            version: FILE_VERSION,
            config: m.config.clone(),
            stage: m.stage,
            known_classes: m.known_classes.clone(),
            leaf_truth: m.leaf_truth.clone(),
            root: m.root.clone(),
            leaves: m.leaves.clone(),
            reference: SavedReferenceSet {
                capacity: m.reference_set.capacity,
                seed: m.reference_set.seed,
                per_class: m.reference_set.ids(),
            },
        }
    }
}

impl SavedCascade {
    fn into_model(self) -> Result<CascadeModel> {
        if self.version != FILE_VERSION {
            return Err(Error::VersionMismatch {
                expected: FILE_VERSION,
                got: self.version,
            });
        }
        let per_class = self
            .reference
            .per_class
            .into_iter()
            .map(|(class, ids)| {
                let stubs = ids
                    .into_iter()
                    .map(|id| Instance {
                        id,
                        features: Vec::new(),
                        label: Some(class),
                        group_id: String::new(),
                    })
                    .collect();
                (class, stubs)
            })
            .collect();
        let model = CascadeModel {
            config: self.config,
            root: self.root,
            leaves: self.leaves,
            reference_set: ReferenceSet {
                capacity: self.reference.capacity,
                seed: self.reference.seed,
                per_class,
            },
            buffers: BTreeMap::new(),
            stage: self.stage,
            known_classes: self.known_classes,
            leaf_truth: self.leaf_truth,
            hydrated: false,
        };
        model.validate()?;
        Ok(model)
    }
}
