//! Run configuration: defaults, named presets, JSON loading, exhaustive
//! validation, and `MDCC_`-prefixed environment overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leaf::DistanceKind;
use crate::nn::OptimizerKind;
use crate::openmax::RejectionRule;

/// All knobs of a training/evaluation run.
///
/// Every random choice downstream derives from `seed`, so a config plus a
/// dataset fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root-network learning rate.
    pub lr_root: f64,
    /// Leaf-network learning rate.
    pub lr_leaf: f64,
    /// Minibatch size for both root and leaf training.
    pub batch_size: usize,
    /// Number of top-ranked classes whose activations get revised.
    pub alpha_root: usize,
    /// Rejection threshold on the unknown-class probability.
    pub gamma_root: f64,
    /// Fraction of largest buffer distances discarded as outliers when
    /// placing a leaf's rejection line.
    pub theta: f64,
    /// Trade-off weight of the feature-consistency penalty in leaf training.
    pub beta: f64,
    /// Reference-set capacity (total instances across classes).
    pub reference_capacity: usize,
    /// Buffer fill level that triggers training a new leaf.
    pub buffer_capacity: usize,
    /// Tail size for Weibull calibration.
    pub eta_tail: usize,
    /// Gradient steps for root training.
    pub root_iters: usize,
    /// Alternating-step iterations for leaf training (each iteration is one
    /// reference-set step plus one buffer step).
    pub leaf_iters: usize,
    /// Master seed; all stream seeds derive from it.
    pub seed: u64,
    /// Hidden layer widths of both root and leaf networks.
    pub hidden_layers: Vec<usize>,
    /// Distance used by leaf classifiers.
    pub distance_kind: DistanceKind,
    /// Optimizer for both root and leaf training.
    pub optimizer: OptimizerKind,
    /// How the root turns openmax scores into accept/reject.
    pub rejection_rule: RejectionRule,
    /// Classes to train the root on. Defaults to the two smallest class ids.
    pub initial_known: Option<Vec<u32>>,
    /// Arrival order of the remaining classes. Defaults to ascending ids.
    pub arrival_order: Option<Vec<u32>>,
    /// Stop the streaming protocol after this many stage transitions.
    pub max_stages: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr_root: 0.005,
            lr_leaf: 0.002,
            batch_size: 50,
            alpha_root: 2,
            gamma_root: 0.008,
            theta: 0.5,
            beta: 1.0,
            reference_capacity: 120,
            buffer_capacity: 1000,
            eta_tail: 20,
            root_iters: 600,
            leaf_iters: 1500,
            seed: 7,
            hidden_layers: vec![32],
            distance_kind: DistanceKind::Cosine,
            optimizer: OptimizerKind::Adam,
            rejection_rule: RejectionRule::Threshold,
            initial_known: None,
            arrival_order: None,
            max_stages: None,
        }
    }
}

impl RunConfig {
    /// Named parameter sets mirroring the published experiment tables.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        match name {
            "rf-table2" => {
                cfg.lr_root = 0.005;
                cfg.lr_leaf = 0.002;
                cfg.batch_size = 50;
                cfg.alpha_root = 2;
                cfg.gamma_root = 0.008;
                cfg.theta = 0.7;
                cfg.buffer_capacity = 1000;
            }
            "twitter-table2" => {
                cfg.lr_root = 0.001;
                cfg.lr_leaf = 0.002;
                cfg.batch_size = 20;
                cfg.alpha_root = 2;
                cfg.gamma_root = 0.008;
                cfg.theta = 0.5;
                cfg.buffer_capacity = 80;
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}` (expected rf-table2 or twitter-table2)"),
                ))
            }
        }
        Ok(cfg)
    }

    /// Reads a JSON config file. Unknown fields are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Applies `MDCC_*` environment overrides from an explicit key/value
    /// iterator (pass `std::env::vars()` in production code).
    pub fn apply_env_overrides<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            let Some(field) = key.strip_prefix("MDCC_") else {
                continue;
            };
            let v = value.trim();
            match field {
                "LR_ROOT" => self.lr_root = parse_field(field, v)?,
                "LR_LEAF" => self.lr_leaf = parse_field(field, v)?,
                "BATCH_SIZE" => self.batch_size = parse_field(field, v)?,
                "ALPHA_ROOT" => self.alpha_root = parse_field(field, v)?,
                "GAMMA_ROOT" => self.gamma_root = parse_field(field, v)?,
                "THETA" => self.theta = parse_field(field, v)?,
                "BETA" => self.beta = parse_field(field, v)?,
                "REFERENCE_CAPACITY" => self.reference_capacity = parse_field(field, v)?,
                "BUFFER_CAPACITY" => self.buffer_capacity = parse_field(field, v)?,
                "ETA_TAIL" => self.eta_tail = parse_field(field, v)?,
                "ROOT_ITERS" => self.root_iters = parse_field(field, v)?,
                "LEAF_ITERS" => self.leaf_iters = parse_field(field, v)?,
                "SEED" => self.seed = parse_field(field, v)?,
                "MAX_STAGES" => self.max_stages = Some(parse_field(field, v)?),
                "HIDDEN_LAYERS" => {
                    self.hidden_layers = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse_field::<usize>(field, s.trim()))
                        .collect::<Result<_>>()?;
                }
                "DISTANCE_KIND" => {
                    self.distance_kind = serde_plain(field, v)?;
                }
                "OPTIMIZER" => {
                    self.optimizer = serde_plain(field, v)?;
                }
                "REJECTION_RULE" => {
                    self.rejection_rule = serde_plain(field, v)?;
                }
                other => {
                    return Err(Error::config(
                        format!("MDCC_{other}"),
                        "unrecognized environment override",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Checks every bound, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_root > 0.0 && self.lr_root.is_finite()) {
            return Err(Error::config("lr_root", "must be a positive real"));
        }
        if !(self.lr_leaf > 0.0 && self.lr_leaf.is_finite()) {
            return Err(Error::config("lr_leaf", "must be a positive real"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be a positive integer"));
        }
        if self.alpha_root == 0 {
            return Err(Error::config("alpha_root", "must be a positive integer"));
        }
        if !(0.0..=1.0).contains(&self.gamma_root) {
            return Err(Error::config("gamma_root", "must lie in [0, 1]"));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::config("theta", "must lie in (0, 1]"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be a non-negative real"));
        }
        if self.reference_capacity == 0 {
            return Err(Error::config(
                "reference_capacity",
                "must be a positive integer",
            ));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config(
                "buffer_capacity",
                "must be a positive integer",
            ));
        }
        if self.eta_tail < 2 {
            return Err(Error::config("eta_tail", "must be at least 2"));
        }
        if self.root_iters == 0 {
            return Err(Error::config("root_iters", "must be a positive integer"));
        }
        if self.leaf_iters == 0 {
            return Err(Error::config("leaf_iters", "must be a positive integer"));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_layers", "widths must be positive"));
        }
        if let Some(known) = &self.initial_known {
            if known.len() != 2 {
                return Err(Error::config(
                    "initial_known",
                    "must list exactly two class ids",
                ));
            }
            if known.contains(&crate::UNKNOWN_LABEL) {
                return Err(Error::config("initial_known", "class id 0 is reserved"));
            }
        }
        if let Some(order) = &self.arrival_order {
            if order.contains(&crate::UNKNOWN_LABEL) {
                return Err(Error::config("arrival_order", "class id 0 is reserved"));
            }
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(
            format!("MDCC_{field}"),
            format!("cannot parse `{value}`"),
        )
    })
}

fn serde_plain<T: serde::de::DeserializeOwned>(field: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| {
        Error::config(
            format!("MDCC_{field}"),
            format!("cannot parse `{value}`"),
        )
    })
}
