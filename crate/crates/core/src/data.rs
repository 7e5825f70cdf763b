//! Dataset ingestion (CSV and JSONL) and synthetic open-world data.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::Instance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("bad split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Jsonl,
}

impl FileFormat {
    /// Picks a format from an explicit name or a file extension.
    pub fn detect(name: Option<&str>, path: &Path) -> Result<FileFormat> {
        let tag = match name {
            Some(n) => n.to_string(),
            None => path
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("")
                .to_ascii_lowercase(),
        };
        match tag.as_str() {
            "csv" => Ok(FileFormat::Csv),
            "jsonl" => Ok(FileFormat::Jsonl),
            other => Err(Error::config(
                "format",
                format!("unsupported format `{other}` (expected csv or jsonl)"),
            )),
        }
    }
}

/// An ordered collection of instances with split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<(Split, Instance)>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Instance> {
        self.records
            .iter()
            .filter(|(s, _)| *s == Split::Train)
            .map(|(_, x)| x)
    }

    pub fn test(&self) -> impl Iterator<Item = &Instance> {
        self.records
            .iter()
            .filter(|(s, _)| *s == Split::Test)
            .map(|(_, x)| x)
    }

    /// Sorted distinct labels over the whole dataset.
    pub fn class_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .records
            .iter()
            .filter_map(|(_, x)| x.label)
            .collect();
        set.into_iter().collect()
    }

    /// Sorted distinct labels present in the training split.
    pub fn train_class_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.train().filter_map(|x| x.label).collect();
        set.into_iter().collect()
    }

    pub fn train_of_class(&self, class: u32) -> Vec<&Instance> {
        self.train().filter(|x| x.label == Some(class)).collect()
    }

    pub fn all_instances(&self) -> Vec<Instance> {
        self.records.iter().map(|(_, x)| x.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InsufficientData("dataset is empty".into()));
        }
        for (split, x) in &self.records {
            if x.features.len() != self.feature_dim {
                return Err(Error::DatasetMismatch(format!(
                    "instance `{}` has {} features, expected {}",
                    x.id,
                    x.features.len(),
                    self.feature_dim
                )));
            }
            if *split == Split::Train && x.group_id.is_empty() {
                return Err(Error::DatasetMismatch(format!(
                    "train instance `{}` has no group id",
                    x.id
                )));
            }
        }
        Ok(())
    }
}

/// Loads a dataset file. CSV columns are
/// `id,split,group_id,label,f_0..f_{D-1}` with a mandatory header; JSONL
/// carries one object per line.
pub fn load_dataset(path: impl AsRef<Path>, format: FileFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        FileFormat::Csv => load_csv(path),
        FileFormat::Jsonl => load_jsonl(path),
    }
}

fn parse_label(raw: &str, line: u64) -> Result<Option<u32>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let value: u32 = raw.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("label `{raw}` is not an unsigned integer"),
    })?;
    if value == crate::UNKNOWN_LABEL {
        return Err(Error::Parse {
            line,
            reason: "label 0 is reserved for the unknown class".into(),
        });
    }
    Ok(Some(value))
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    if headers.len() < 5
        || &headers[0] != "id"
        || &headers[1] != "split"
        || &headers[2] != "group_id"
        || &headers[3] != "label"
    {
        return Err(Error::Parse {
            line: 1,
            reason: "header must start with id,split,group_id,label,f_0,...".into(),
        });
    }
    let dim = headers.len() - 4;
    for (i, name) in headers.iter().skip(4).enumerate() {
        if name != format!("f_{i}") {
            return Err(Error::Parse {
                line: 1,
                reason: format!("feature column {} must be named f_{i}, found `{name}`", i + 5),
            });
        }
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = match e.position() {
                    Some(p) => p.line(),
                    None => 0,
                };
                return Err(Error::Parse {
                    line,
                    reason: e.to_string(),
                });
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} columns, found {}", headers.len(), row.len()),
            });
        }
        let split: Split = row[1].parse().map_err(|reason| Error::Parse {
            line,
            reason,
        })?;
        let label = parse_label(&row[3], line)?;
        let mut features = Vec::with_capacity(dim);
        for (i, raw) in row.iter().skip(4).enumerate() {
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                reason: format!("feature f_{i} value `{raw}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("feature f_{i} is not finite"),
                });
            }
            features.push(v);
        }
        records.push((
            split,
            Instance {
                id: row[0].to_string(),
                features,
                label,
                group_id: row[2].to_string(),
            },
        ));
    }
    let ds = Dataset {
        records,
        feature_dim: dim,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: String,
    split: Split,
    group_id: String,
    label: Option<u32>,
    features: Vec<f64>,
}

fn load_jsonl(path: &Path) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i as u64 + 1;
        let row: JsonlRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if row.label == Some(crate::UNKNOWN_LABEL) {
            return Err(Error::Parse {
                line: lineno,
                reason: "label 0 is reserved for the unknown class".into(),
            });
        }
        if row.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno,
                reason: "non-finite feature value".into(),
            });
        }
        let d = *dim.get_or_insert(row.features.len());
        if row.features.len() != d {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected {d} features, found {}", row.features.len()),
            });
        }
        records.push((
            row.split,
            Instance {
                id: row.id,
                features: row.features,
                label: row.label,
                group_id: row.group_id,
            },
        ));
    }
    let ds = Dataset {
        records,
        feature_dim: dim.unwrap_or(0),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the given format. Floats use the shortest
/// representation that parses back exactly.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    match format {
        FileFormat::Csv => {
            let mut header = String::from("id,split,group_id,label");
            for i in 0..dataset.feature_dim {
                header.push_str(&format!(",f_{i}"));
            }
            writeln!(out, "{header}").map_err(|e| Error::io(path.display().to_string(), e))?;
            for (split, x) in &dataset.records {
                let split = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                let label = x.label.map(|l| l.to_string()).unwrap_or_default();
                let mut line = format!("{},{},{},{}", x.id, split, x.group_id, label);
                for v in &x.features {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
        FileFormat::Jsonl => {
            for (split, x) in &dataset.records {
                let row = JsonlRow {
                    id: x.id.clone(),
                    split: *split,
                    group_id: x.group_id.clone(),
                    label: x.label,
                    features: x.features.clone(),
                };
                let line = serde_json::to_string(&row)?;
                writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parameters for synthetic open-world data.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

/// Generates isotropic unit-variance Gaussian clusters whose centers are
/// pairwise at least `separation` apart. Train instances carry their class
/// id as identity group. Deterministic under the seed.
pub fn synth_generate(params: &SynthParams) -> Result<Dataset> {
    if params.num_classes == 0 || params.dim == 0 {
        return Err(Error::config("classes/dim", "must be positive"));
    }
    if !(params.separation > 0.0) {
        return Err(Error::config("separation", "must be positive"));
    }
    if params.per_class_train + params.per_class_test == 0 {
        return Err(Error::config("per_class counts", "no instances requested"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers = place_centers(&mut rng, params)?;

    let mut records = Vec::new();
    for (ci, center) in centers.iter().enumerate() {
        let label = ci as u32 + 1;
        for i in 0..params.per_class_train {
            records.push((
                Split::Train,
                Instance {
                    id: format!("train-{label}-{i}"),
                    features: gaussian_point(&mut rng, center),
                    label: Some(label),
                    group_id: label.to_string(),
                },
            ));
        }
    }
    for (ci, center) in centers.iter().enumerate() {
        let label = ci as u32 + 1;
        for i in 0..params.per_class_test {
            records.push((
                Split::Test,
                Instance {
                    id: format!("test-{label}-{i}"),
                    features: gaussian_point(&mut rng, center),
                    label: Some(label),
                    group_id: label.to_string(),
                },
            ));
        }
    }
    let ds = Dataset {
        records,
        feature_dim: params.dim,
    };
    ds.validate()?;
    Ok(ds)
}

fn place_centers(rng: &mut ChaCha8Rng, params: &SynthParams) -> Result<Vec<Vec<f64>>> {
    let spread = 1.5
        * params.separation
        * (params.num_classes as f64).powf(1.0 / params.dim as f64);
    let budget = 1000 * params.num_classes;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(params.num_classes);
    let mut draws = 0;
    while centers.len() < params.num_classes {
        if draws >= budget {
            return Err(Error::InsufficientData(format!(
                "could not place {} centers at separation {} after {} draws",
                params.num_classes, params.separation, budget
            )));
        }
        draws += 1;
        let candidate: Vec<f64> = (0..params.dim)
            .map(|_| rng.gen_range(-spread..=spread))
            .collect();
        let ok = centers.iter().all(|c| {
            let d2: f64 = c
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= params.separation
        });
        if ok {
            centers.push(candidate);
        }
    }
    Ok(centers)
}

fn gaussian_point(rng: &mut ChaCha8Rng, center: &[f64]) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            c + (-2.0 * u1.ln()).sqrt() * u2.cos()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        Dataset {
            records: vec![
                (
                    Split::Train,
                    Instance {
                        id: "a".into(),
                        features: vec![1.0, 0.5],
                        label: Some(1),
                        group_id: "1".into(),
                    },
                ),
                (
                    Split::Train,
                    Instance {
                        id: "b".into(),
                        features: vec![0.1, -2.25],
                        label: Some(2),
                        group_id: "2".into(),
                    },
                ),
                (
                    Split::Test,
                    Instance {
                        id: "c".into(),
                        features: vec![0.3333333333333333, 1e-12],
                        label: None,
                        group_id: "".into(),
                    },
                ),
            ],
            feature_dim: 2,
        }
    }

    #[test]
    fn csv_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = tiny_dataset();
        save_dataset(&ds, &path, FileFormat::Csv).unwrap();
        let back = load_dataset(&path, FileFormat::Csv).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn jsonl_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = tiny_dataset();
        save_dataset(&ds, &path, FileFormat::Jsonl).unwrap();
        let back = load_dataset(&path, FileFormat::Jsonl).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn well_formed_csv_loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "id,split,group_id,label,f_0,f_1\n\
             a,train,g1,1,0.5,1.5\n\
             b,train,g2,2,-1,0\n\
             c,test,,,0,0\n",
        )
        .unwrap();
        let ds = load_dataset(&path, FileFormat::Csv).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.records[2].1.label, None);
    }

    #[test]
    fn short_row_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "id,split,group_id,label,f_0,f_1\n\
             a,train,g1,1,0.5,1.5\n\
             b,train,g2,2,-1\n",
        )
        .unwrap();
        match load_dataset(&path, FileFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error with line, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_feature_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "id,split,group_id,label,f_0\n\
             a,train,g1,1,abc\n",
        )
        .unwrap();
        match load_dataset(&path, FileFormat::Csv) {
            Err(Error::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("f_0"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,train,g1,1,0.5\nb,train,g2,2,1.5\n").unwrap();
        assert!(matches!(
            load_dataset(&path, FileFormat::Csv),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn synth_same_seed_is_identical_and_seeds_differ() {
        let p = SynthParams {
            num_classes: 3,
            dim: 4,
            separation: 5.0,
            per_class_train: 10,
            per_class_test: 5,
            seed: 21,
        };
        let a = synth_generate(&p).unwrap();
        let b = synth_generate(&p).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthParams { seed: 22, ..p }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_separated_clusters_pass_nearest_centroid_oracle() {
        let p = SynthParams {
            num_classes: 2,
            dim: 8,
            separation: 10.0,
            per_class_train: 200,
            per_class_test: 200,
            seed: 3,
        };
        let ds = synth_generate(&p).unwrap();
        // Train centroids.
        let mut centroids = vec![vec![0.0; p.dim]; 2];
        let mut counts = [0usize; 2];
        for x in ds.train() {
            let c = x.label.unwrap() as usize - 1;
            for (m, v) in centroids[c].iter_mut().zip(&x.features) {
                *m += v;
            }
            counts[c] += 1;
        }
        for (c, count) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= count as f64;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for x in ds.test() {
            let d: Vec<f64> = centroids
                .iter()
                .map(|c| {
                    c.iter()
                        .zip(&x.features)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let pred = if d[0] <= d[1] { 1 } else { 2 };
            if pred == x.label.unwrap() {
                correct += 1;
            }
            total += 1;
        }
        assert!(correct as f64 / total as f64 >= 0.999, "{correct}/{total}");
    }

    #[test]
    fn synth_tight_separation_still_generates() {
        let p = SynthParams {
            num_classes: 8,
            dim: 16,
            separation: 0.1,
            per_class_train: 2,
            per_class_test: 1,
            seed: 5,
        };
        let ds = synth_generate(&p).unwrap();
        assert_eq!(ds.class_ids().len(), 8);
    }

    #[test]
    fn synth_rejects_nonpositive_separation() {
        let p = SynthParams {
            num_classes: 2,
            dim: 2,
            separation: 0.0,
            per_class_train: 1,
            per_class_test: 1,
            seed: 0,
        };
        assert!(synth_generate(&p).is_err());
    }
}
