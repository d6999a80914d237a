//! Dataset sample records and the manifest format.
//!
//! A manifest is a JSONL file with one [`SampleRecord`] per line. Anomalous
//! samples must carry an anomaly type plus either a defect mask or a
//! ground-truth box; normal samples carry neither.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Bbox;

/// Source dataset of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    MVTec,
    VisA,
    LOCO,
    GoodsAD,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Dataset::MVTec => "MVTec",
            Dataset::VisA => "VisA",
            Dataset::LOCO => "LOCO",
            Dataset::GoodsAD => "GoodsAD",
            Dataset::Synthetic => "synthetic",
        };
        write!(f, "{name}")
    }
}

/// Binary ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }
}

/// One dataset image with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub dataset: Dataset,
    pub class_name: String,
    pub image_path: PathBuf,
    pub y_gt: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<Bbox>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("sample {id}: {reason}")]
    Invalid { id: String, reason: String },
}

impl SampleRecord {
    /// Enforce the label/field coupling.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let fail = |reason: &str| {
            Err(ManifestError::Invalid {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        match self.y_gt {
            Label::Anomalous => {
                if self.c_gt.is_none() {
                    return fail("anomalous sample without anomaly type");
                }
                if self.mask_path.is_none() && self.gt_bbox.is_none() {
                    return fail("anomalous sample without mask or gt bbox");
                }
            }
            Label::Normal => {
                if self.c_gt.is_some() {
                    return fail("normal sample with anomaly type");
                }
            }
        }
        Ok(())
    }
}

/// Load and validate a JSONL manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, ManifestError> {
    let file = fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        record.validate()?;
        samples.push(record);
    }
    Ok(samples)
}

/// Candidate anomaly labels per class, derived from the manifest's anomalous
/// samples. Classes with no labeled defects fall back to a single generic
/// entry so prompt construction always has a nonempty list.
pub fn candidate_labels(samples: &[SampleRecord]) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in samples {
        map.entry(s.class_name.clone()).or_default();
    }
    for s in samples {
        if let Some(c) = &s.c_gt {
            let list = map.get_mut(&s.class_name).expect("class inserted above");
            if !list.contains(c) {
                list.push(c.clone());
            }
        }
    }
    for list in map.values_mut() {
        list.sort();
        if list.is_empty() {
            list.push("defect".to_string());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anomalous() -> SampleRecord {
        SampleRecord {
            id: "s1".into(),
            dataset: Dataset::Synthetic,
            class_name: "widget".into(),
            image_path: "img.png".into(),
            y_gt: Label::Anomalous,
            c_gt: Some("scratch".into()),
            mask_path: None,
            gt_bbox: Some(Bbox::new(0.1, 0.1, 0.2, 0.2)),
        }
    }

    #[test]
    fn validation_couples_label_and_fields() {
        assert!(anomalous().validate().is_ok());

        let mut missing_type = anomalous();
        missing_type.c_gt = None;
        assert!(missing_type.validate().is_err());

        let mut missing_region = anomalous();
        missing_region.gt_bbox = None;
        assert!(missing_region.validate().is_err());

        let mut bad_normal = anomalous();
        bad_normal.y_gt = Label::Normal;
        assert!(bad_normal.validate().is_err());
    }

    #[test]
    fn candidate_labels_are_sorted_and_nonempty() {
        let mut s2 = anomalous();
        s2.id = "s2".into();
        s2.c_gt = Some("dent".into());
        let mut normal = anomalous();
        normal.id = "s3".into();
        normal.class_name = "gadget".into();
        normal.y_gt = Label::Normal;
        normal.c_gt = None;

        let labels = candidate_labels(&[anomalous(), s2, normal]);
        assert_eq!(labels["widget"], vec!["dent", "scratch"]);
        assert_eq!(labels["gadget"], vec!["defect"]);
    }
}
