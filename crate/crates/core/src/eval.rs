//! Streaming evaluation protocol and metrics.
//!
//! A run trains the root on two initial classes and streams the remaining
//! classes' training instances one at a time, in arrival order. Evaluation
//! runs against the full test split after root training and after every
//! stage transition, and a report is emitted whenever the test set still
//! holds classes the model has not learned (alongside the learned ones).
//! Each emitted report therefore doubles as the post-transition snapshot of
//! its stage and the pre-transition detection snapshot of the next.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, Instance, ReferenceSet, StageTransition};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::openmax::train_root;
use crate::{derive_seed, UNKNOWN_LABEL};

/// Which classes the root starts with and how the rest arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    /// Exactly two class ids for root training.
    pub initial_known: Vec<u32>,
    /// Remaining classes in arrival order.
    pub arrival_order: Vec<u32>,
    /// Seed shuffling each class's instances before streaming.
    pub interleave_seed: u64,
}

impl StreamSchedule {
    /// Builds a schedule from config overrides, defaulting to the two
    /// smallest train classes followed by the rest in ascending order.
    pub fn from_config(dataset: &Dataset, config: &RunConfig) -> Result<StreamSchedule> {
        let all = dataset.train_class_ids();
        let initial_known = match &config.initial_known {
            Some(k) => k.clone(),
            None => all.iter().take(2).copied().collect(),
        };
        let arrival_order = match &config.arrival_order {
            Some(o) => o.clone(),
            None => all
                .iter()
                .filter(|c| !initial_known.contains(c))
                .copied()
                .collect(),
        };
        let schedule = StreamSchedule {
            initial_known,
            arrival_order,
            interleave_seed: derive_seed(config.seed, "stream-interleave"),
        };
        schedule.validate(dataset)?;
        Ok(schedule)
    }

    /// Checks the schedule against the dataset: two initial classes, no
    /// overlap, and full coverage of the training classes.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.initial_known.len() != 2 {
            return Err(Error::config(
                "initial_known",
                format!("must name exactly 2 classes, got {}", self.initial_known.len()),
            ));
        }
        let train_classes = dataset.train_class_ids();
        for c in self.initial_known.iter().chain(&self.arrival_order) {
            if !train_classes.contains(c) {
                return Err(Error::DatasetMismatch(format!(
                    "schedule references class {c}, which has no training instances"
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in self.initial_known.iter().chain(&self.arrival_order) {
            if !seen.insert(*c) {
                return Err(Error::DatasetMismatch(format!(
                    "class {c} appears twice in the schedule"
                )));
            }
        }
        if seen.len() != train_classes.len() {
            return Err(Error::DatasetMismatch(format!(
                "schedule covers {} classes, dataset has {}",
                seen.len(),
                train_classes.len()
            )));
        }
        Ok(())
    }
}

/// Raw counts behind the two metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    /// Total test instances evaluated.
    pub n: u64,
    /// Known-class instances predicted as exactly their class.
    pub n_known: u64,
    /// Unknown-class instances predicted unknown.
    pub n_unknown: u64,
    /// Unknown-class instances predicted unknown (the positive class).
    pub tp: u64,
    /// Known-class instances wrongly predicted unknown.
    pub fp: u64,
    /// Unknown-class instances wrongly predicted as a known class.
    #[serde(rename = "fn")]
    pub fn_count: u64,
}

/// `(correct known + correct unknown) / total`.
pub fn en_accuracy(counts: &MetricCounts) -> Result<f64> {
    if counts.n == 0 {
        return Err(Error::InsufficientData(
            "accuracy undefined over zero instances".into(),
        ));
    }
    Ok((counts.n_known + counts.n_unknown) as f64 / counts.n as f64)
}

/// `2TP / (2TP + FP + FN)` with unknown as the positive class; all-zero
/// counts are defined as 0 with a warning.
pub fn f_score(tp: u64, fp: u64, fn_count: u64) -> f64 {
    if tp + fp + fn_count == 0 {
        log::warn!("f-score counts are all zero; reporting 0");
        return 0.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_count as f64)
}

/// Metrics of one model state against the full test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    /// Number of leaves in the evaluated model.
    pub stage: usize,
    pub en_accuracy: f64,
    pub f_score: f64,
    pub counts: MetricCounts,
    /// Ground-truth class -> translated prediction -> count. Predictions in
    /// ground-truth vocabulary, 0 for unknown.
    pub confusion: BTreeMap<u32, BTreeMap<u32, u64>>,
}

/// Evaluates a frozen cascade on labeled test instances.
///
/// A test class counts as known once the model has learned it (initial root
/// classes, or a leaf whose buffer majority matched); otherwise its correct
/// answer is unknown.
pub fn evaluate_stage<'a, I>(model: &CascadeModel, test: I) -> Result<StageReport>
where
    I: IntoIterator<Item = &'a Instance>,
{
    let learned: std::collections::BTreeSet<u32> =
        model.learned_truth_classes().into_iter().collect();
    let mut counts = MetricCounts::default();
    let mut confusion: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    for x in test {
        let truth = x.label.ok_or_else(|| {
            Error::InsufficientData(format!("test instance `{}` has no label", x.id))
        })?;
        let raw = model.recognize(x)?;
        let predicted = if raw == UNKNOWN_LABEL {
            UNKNOWN_LABEL
        } else {
            model.truth_label(raw)
        };
        counts.n += 1;
        if learned.contains(&truth) {
            if predicted == truth {
                counts.n_known += 1;
            } else if predicted == UNKNOWN_LABEL {
                counts.fp += 1;
            }
        } else if predicted == UNKNOWN_LABEL {
            counts.n_unknown += 1;
            counts.tp += 1;
        } else {
            counts.fn_count += 1;
        }
        *confusion
            .entry(truth)
            .or_default()
            .entry(predicted)
            .or_insert(0) += 1;
    }
    Ok(StageReport {
        stage: model.stage,
        en_accuracy: en_accuracy(&counts)?,
        f_score: f_score(counts.tp, counts.fp, counts.fn_count),
        counts,
        confusion,
    })
}

/// Everything a protocol run produces.
#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub schedule: StreamSchedule,
    pub reports: Vec<StageReport>,
    pub transitions: Vec<StageTransition>,
    /// Snapshot of the cascade at the moment of the last emitted report.
    pub model_at_last_report: Option<CascadeModel>,
    /// Cascade after the full stream (may have learned classes past the
    /// last reportable stage).
    pub final_model: CascadeModel,
}

/// Runs the staged protocol end to end.
pub fn run_protocol(
    dataset: &Dataset,
    schedule: &StreamSchedule,
    config: &RunConfig,
) -> Result<ProtocolOutcome> {
    config.validate()?;
    schedule.validate(dataset)?;

    let root_train: Vec<Instance> = dataset
        .train()
        .filter(|x| x.label.is_some_and(|l| schedule.initial_known.contains(&l)))
        .cloned()
        .collect();
    let root = train_root(&root_train, config)?;

    let mut reference = ReferenceSet::new(
        config.reference_capacity,
        derive_seed(config.seed, "reference-set"),
    );
    for &class in &schedule.initial_known {
        let members: Vec<Instance> = root_train
            .iter()
            .filter(|x| x.label == Some(class))
            .cloned()
            .collect();
        reference.rebalance(class, members)?;
    }

    let mut model = CascadeModel::new(root, reference, config.clone());
    let test: Vec<&Instance> = dataset.test().collect();

    let mut reports = Vec::new();
    let mut transitions = Vec::new();
    let mut model_at_last_report = None;
    maybe_report(
        &model,
        &test,
        &mut reports,
        &mut model_at_last_report,
    )?;

    'stream: for &class in &schedule.arrival_order {
        let mut arriving: Vec<&Instance> = dataset.train_of_class(class);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            schedule.interleave_seed,
            &format!("class-{class}"),
        ));
        arriving.shuffle(&mut rng);
        for x in arriving {
            let (_, transition) = model.ingest(x)?;
            if let Some(t) = transition {
                transitions.push(t);
                maybe_report(&model, &test, &mut reports, &mut model_at_last_report)?;
                if config
                    .max_stages
                    .is_some_and(|limit| model.stage >= limit)
                {
                    break 'stream;
                }
            }
        }
    }

    Ok(ProtocolOutcome {
        schedule: schedule.clone(),
        reports,
        transitions,
        model_at_last_report,
        final_model: model,
    })
}

/// Emits a report when the test split still contains unlearned classes.
fn maybe_report(
    model: &CascadeModel,
    test: &[&Instance],
    reports: &mut Vec<StageReport>,
    snapshot: &mut Option<CascadeModel>,
) -> Result<()> {
    if test.is_empty() {
        return Ok(());
    }
    let learned: std::collections::BTreeSet<u32> =
        model.learned_truth_classes().into_iter().collect();
    let has_unlearned = test
        .iter()
        .any(|x| x.label.is_some_and(|l| !learned.contains(&l)));
    if !has_unlearned {
        return Ok(());
    }
    reports.push(evaluate_stage(model, test.iter().copied())?);
    *snapshot = Some(model.clone());
    Ok(())
}

/// Writes one CSV row per stage report.
pub fn write_reports_csv(reports: &[StageReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "stage,en_accuracy,f_score,N,N_known,N_unknown,TP,FP,FN")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.en_accuracy,
            r.f_score,
            r.counts.n,
            r.counts.n_known,
            r.counts.n_unknown,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_count
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Self-describing JSON bundle: resolved config, schedule, class mapping,
/// and every report with its confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub version: u32,
    pub config: RunConfig,
    pub schedule: StreamSchedule,
    /// Spawned class id -> ground-truth class.
    pub leaf_truth: BTreeMap<u32, u32>,
    pub reports: Vec<StageReport>,
}

impl ReportBundle {
    pub fn from_outcome(outcome: &ProtocolOutcome, config: &RunConfig) -> ReportBundle {
        ReportBundle {
            version: 1,
            config: config.clone(),
            schedule: outcome.schedule.clone(),
            leaf_truth: outcome.final_model.leaf_truth.clone(),
            reports: outcome.reports.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthParams};

    #[test]
    fn en_accuracy_direct_formula() {
        let counts = MetricCounts {
            n: 10,
            n_known: 4,
            n_unknown: 3,
            tp: 3,
            fp: 1,
            fn_count: 2,
        };
        assert_eq!(en_accuracy(&counts).unwrap(), 0.7);
        assert!(en_accuracy(&MetricCounts::default()).is_err());
        let perfect = MetricCounts {
            n: 5,
            n_known: 2,
            n_unknown: 3,
            ..Default::default()
        };
        assert_eq!(en_accuracy(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn f_score_direct_formula() {
        assert!((f_score(5, 3, 2) - 10.0 / 15.0).abs() < 1e-15);
        assert_eq!(f_score(4, 0, 0), 1.0);
        assert_eq!(f_score(0, 2, 1), 0.0);
        assert_eq!(f_score(0, 0, 0), 0.0);
    }

    fn small_dataset() -> Dataset {
        synth_generate(&SynthParams {
            num_classes: 4,
            dim: 8,
            separation: 8.0,
            per_class_train: 60,
            per_class_test: 20,
            seed: 31,
        })
        .unwrap()
    }

    fn small_config() -> RunConfig {
        RunConfig {
            batch_size: 20,
            root_iters: 300,
            leaf_iters: 250,
            buffer_capacity: 60,
            reference_capacity: 80,
            hidden_layers: vec![16],
            theta: 0.2,
            seed: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn schedule_defaults_cover_all_classes() {
        let ds = small_dataset();
        let schedule = StreamSchedule::from_config(&ds, &small_config()).unwrap();
        assert_eq!(schedule.initial_known, vec![1, 2]);
        assert_eq!(schedule.arrival_order, vec![3, 4]);
    }

    #[test]
    fn schedule_rejects_missing_class_and_overlap() {
        let ds = small_dataset();
        let bad = StreamSchedule {
            initial_known: vec![1, 2],
            arrival_order: vec![3, 9],
            interleave_seed: 0,
        };
        assert!(bad.validate(&ds).is_err());
        let overlap = StreamSchedule {
            initial_known: vec![1, 2],
            arrival_order: vec![2, 3, 4],
            interleave_seed: 0,
        };
        assert!(overlap.validate(&ds).is_err());
    }

    #[test]
    fn protocol_emits_reports_and_transitions() {
        let ds = small_dataset();
        let config = small_config();
        let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
        let outcome = run_protocol(&ds, &schedule, &config).unwrap();

        // 4 classes, 2 initial: transitions for classes 3 and 4; reports at
        // stage 0 and stage 1 (stage 2 has nothing unlearned).
        assert_eq!(outcome.transitions.len(), 2);
        assert_eq!(outcome.reports.len(), 2);
        assert_eq!(outcome.reports[0].stage, 0);
        assert_eq!(outcome.reports[1].stage, 1);
        assert_eq!(outcome.final_model.stage, 2);
        assert_eq!(
            outcome.model_at_last_report.as_ref().unwrap().stage,
            1
        );
        // Leaf truth mapping is exact on pure synthetic buffers.
        assert_eq!(
            outcome.final_model.leaf_truth.values().copied().collect::<Vec<_>>(),
            vec![3, 4]
        );
    }

    #[test]
    fn protocol_is_deterministic() {
        let ds = small_dataset();
        let config = small_config();
        let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
        let a = run_protocol(&ds, &schedule, &config).unwrap();
        let b = run_protocol(&ds, &schedule, &config).unwrap();
        let ja = serde_json::to_string(&a.reports).unwrap();
        let jb = serde_json::to_string(&b.reports).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn evaluation_matches_independent_counting_pass() {
        let ds = small_dataset();
        let config = small_config();
        let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
        let outcome = run_protocol(&ds, &schedule, &config).unwrap();
        let model = outcome.model_at_last_report.as_ref().unwrap();
        let report = evaluate_stage(model, ds.test()).unwrap();

        // Independent pass: re-derive every prediction and count by hand.
        let learned: Vec<u32> = model.learned_truth_classes();
        let mut n_known = 0u64;
        let mut n_unknown = 0u64;
        let mut n = 0u64;
        let (mut tp, mut fp, mut fn_count) = (0u64, 0u64, 0u64);
        for x in ds.test() {
            let truth = x.label.unwrap();
            let raw = model.recognize(x).unwrap();
            let pred = if raw == 0 { 0 } else { model.truth_label(raw) };
            n += 1;
            if learned.contains(&truth) {
                if pred == truth {
                    n_known += 1;
                }
                if pred == 0 {
                    fp += 1;
                }
            } else if pred == 0 {
                n_unknown += 1;
                tp += 1;
            } else {
                fn_count += 1;
            }
        }
        assert_eq!(report.counts.n, n);
        assert_eq!(report.counts.n_known, n_known);
        assert_eq!(report.counts.n_unknown, n_unknown);
        assert_eq!(report.counts.tp, tp);
        assert_eq!(report.counts.fp, fp);
        assert_eq!(report.counts.fn_count, fn_count);
        assert_eq!(
            report.en_accuracy,
            (n_known + n_unknown) as f64 / n as f64
        );
        assert_eq!(report.f_score, f_score(tp, fp, fn_count));
        // Confusion totals match N.
        let total: u64 = report
            .confusion
            .values()
            .flat_map(|m| m.values())
            .sum();
        assert_eq!(total, n);
    }

    #[test]
    fn no_leakage_model_has_exactly_stage_leaves() {
        let ds = small_dataset();
        let config = small_config();
        let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
        let outcome = run_protocol(&ds, &schedule, &config).unwrap();
        for (i, report) in outcome.reports.iter().enumerate() {
            assert_eq!(report.stage, i);
        }
        // The evaluated snapshot holds exactly its stage's leaves.
        let snap = outcome.model_at_last_report.as_ref().unwrap();
        assert_eq!(snap.leaves.len(), snap.stage);
    }

    #[test]
    fn max_stages_stops_the_stream() {
        let ds = small_dataset();
        let mut config = small_config();
        config.max_stages = Some(1);
        let schedule = StreamSchedule::from_config(&ds, &config).unwrap();
        let outcome = run_protocol(&ds, &schedule, &config).unwrap();
        assert_eq!(outcome.final_model.stage, 1);
        assert_eq!(outcome.transitions.len(), 1);
    }
}
