//! Scene records, line-delimited JSON dataset files, the synthetic long-tail
//! generator and model checkpoints.

mod checkpoint;
mod generator;

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use generator::{generate, generate_detections, zipf_weights, GeneratorConfig};

/// Relation id reserved for "no relationship".
pub const NONE_RELATION: usize = 0;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: invalid field `{field}`: {reason}")]
    Invalid {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("invalid scene `{image_id}`: field `{field}`: {reason}")]
    Scene {
        image_id: String,
        field: String,
        reason: String,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match the current model: {0}")]
    ShapeMismatch(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Vocabulary sizes and feature width every record must agree with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_object_classes: usize,
    pub n_relations: usize,
    pub d_v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub bbox: BoundingBox,
    pub label: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnionFeature {
    pub subject: usize,
    pub object: usize,
    pub feature: Vec<f64>,
}

/// `(subject index, relation id, object index)`, serialised as a 3-array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl From<[usize; 3]> for Triple {
    fn from(t: [usize; 3]) -> Self {
        Triple {
            subject: t[0],
            relation: t[1],
            object: t[2],
        }
    }
}

impl From<Triple> for [usize; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.relation, t.object]
    }
}

/// One image: objects, the shared scene feature and ground-truth triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSample {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    pub scene_feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub union_features: Vec<UnionFeature>,
    pub gt_triples: Vec<Triple>,
}

/// Elementwise mean of two object features, used when a union feature is absent.
pub fn fallback_union(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

impl SceneSample {
    /// Union feature of the ordered pair, or the mean of the two object features.
    pub fn union_feature(&self, subject: usize, object: usize) -> Cow<'_, [f64]> {
        match self
            .union_features
            .iter()
            .find(|u| u.subject == subject && u.object == object)
        {
            Some(u) => Cow::Borrowed(&u.feature),
            None => Cow::Owned(fallback_union(
                &self.objects[subject].feature,
                &self.objects[object].feature,
            )),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label).collect()
    }

    /// Checks every record invariant against `meta`.
    pub fn validate(&self, meta: &DatasetMeta) -> Result<(), DataError> {
        let fail = |field: &str, reason: String| DataError::Scene {
            image_id: self.image_id.clone(),
            field: field.to_string(),
            reason,
        };
        let n = self.objects.len();
        if n < 2 {
            return Err(fail("objects", format!("need at least 2 objects, got {n}")));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.label >= meta.n_object_classes {
                return Err(fail(
                    "objects.label",
                    format!("object {i} label {} >= {}", o.label, meta.n_object_classes),
                ));
            }
            check_feature(&o.feature, meta.d_v)
                .map_err(|r| fail("objects.feature", format!("object {i}: {r}")))?;
        }
        check_feature(&self.scene_feature, meta.d_v).map_err(|r| fail("scene_feature", r))?;
        for u in &self.union_features {
            if u.subject >= n || u.object >= n || u.subject == u.object {
                return Err(fail(
                    "union_features",
                    format!("invalid pair ({}, {})", u.subject, u.object),
                ));
            }
            check_feature(&u.feature, meta.d_v).map_err(|r| fail("union_features.feature", r))?;
        }
        for t in &self.gt_triples {
            if t.subject >= n || t.object >= n {
                return Err(fail(
                    "gt_triples",
                    format!("object index out of range in {:?}", <[usize; 3]>::from(*t)),
                ));
            }
            if t.subject == t.object {
                return Err(fail(
                    "gt_triples",
                    format!("subject equals object ({})", t.subject),
                ));
            }
            if t.relation >= meta.n_relations {
                return Err(fail(
                    "gt_triples",
                    format!("relation {} >= {}", t.relation, meta.n_relations),
                ));
            }
            if t.relation == NONE_RELATION {
                return Err(fail("gt_triples", "relation 0 is reserved for none".into()));
            }
        }
        Ok(())
    }
}

fn check_feature(f: &[f64], d_v: usize) -> Result<(), String> {
    if f.len() != d_v {
        return Err(format!("expected length {d_v}, got {}", f.len()));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entry".into());
    }
    Ok(())
}

/// Train/test splits plus their shared metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    /// Writes `meta.json`, `train.jsonl` and `test.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serialises");
        std::fs::write(&meta_path, meta).map_err(|e| DataError::io(&meta_path, e))?;
        save_dataset(&self.train, &dir.join(TRAIN_FILE))?;
        save_dataset(&self.test, &dir.join(TEST_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self {
            meta,
            train: load_dataset(&dir.join(TRAIN_FILE), &meta)?,
            test: load_dataset(&dir.join(TEST_FILE), &meta)?,
        })
    }

    /// Object-class occurrence counts over the training split.
    pub fn train_class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.meta.n_object_classes];
        for s in &self.train {
            for o in &s.objects {
                counts[o.label] += 1;
            }
        }
        counts
    }

    /// Ground-truth relation counts over the training split.
    pub fn train_relation_counts(&self) -> Vec<u64> {
        relation_histogram(&self.train, self.meta.n_relations)
    }
}

pub fn relation_histogram(scenes: &[SceneSample], n_relations: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_relations];
    for s in scenes {
        for t in &s.gt_triples {
            counts[t.relation] += 1;
        }
    }
    counts
}

/// Writes one JSON record per line.
pub fn save_dataset(scenes: &[SceneSample], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Reads and validates a line-delimited scene file. Blank lines are skipped.
pub fn load_dataset(path: &Path, meta: &DatasetMeta) -> Result<Vec<SceneSample>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut scenes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneSample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        scene.validate(meta).map_err(|e| match e {
            DataError::Scene { field, reason, .. } => DataError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                field,
                reason,
            },
            other => other,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// One detector output for the scene-graph detection task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_scores: Vec<f64>,
    pub feature: Vec<f64>,
}

/// All detections for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

pub fn save_detections(records: &[DetectionRecord], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_detections(path: &Path, meta: &DatasetMeta) -> Result<Vec<DetectionRecord>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        for (i, d) in rec.detections.iter().enumerate() {
            let invalid = |field: &str, reason: String| DataError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                field: field.into(),
                reason: format!("detection {i}: {reason}"),
            };
            if d.class_scores.len() != meta.n_object_classes {
                return Err(invalid(
                    "class_scores",
                    format!(
                        "expected {} entries, got {}",
                        meta.n_object_classes,
                        d.class_scores.len()
                    ),
                ));
            }
            check_feature(&d.feature, meta.d_v).map_err(|r| invalid("feature", r))?;
        }
        out.push(rec);
    }
    Ok(out)
}
