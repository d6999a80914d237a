//! The two visual tools: normalized-bbox cropping over an episode's image
//! history, and deterministic normal-exemplar lookup per class.
//!
//! Crops are materialized as lossless PNG files under an episode-scoped
//! working directory so episodes can be replayed byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Bbox;

/// Fallback window size when a requested box collapses to zero area.
const MIN_DEGENERATE_CROP: u32 = 8;

/// One image in an episode's history. Indices are 1-based and gap-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub index: u32,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("bad image index {index}: history has {len} image(s)")]
    BadImageIndex { index: u32, len: usize },
    #[error("no exemplar for class \"{0}\"")]
    NoExemplar(String),
    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("cannot write crop {path}: {message}")]
    WriteCrop { path: PathBuf, message: String },
    #[error("cannot read exemplar manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("exemplar manifest entry {class}/{path} does not exist")]
    DanglingExemplar { class: String, path: PathBuf },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Pixel rectangle `(x, y, width, height)` for a normalized box on a
/// `width`×`height` image. Coordinates are clamped to `[0,1]`; `x2`/`y2` are
/// exclusive edges mapped with round-half-up. Returns `degenerate = true`
/// when the clamped box had zero area and was expanded to the fallback
/// window centered on the box center.
pub fn pixel_rect(bbox: &Bbox, width: u32, height: u32) -> (u32, u32, u32, u32, bool) {
    debug_assert!(width >= 1 && height >= 1);
    let b = bbox.clamped();
    let round = |v: f64| (v + 0.5).floor() as i64;

    if b.area() <= 0.0 {
        let (cx, cy) = b.center();
        let axis = |center: f64, dim: u32| -> (u32, u32) {
            let side = MIN_DEGENERATE_CROP.min(dim);
            let half = i64::from(side) / 2;
            let start = (round(center * f64::from(dim)) - half)
                .clamp(0, i64::from(dim - side));
            (start as u32, side)
        };
        let (x, w) = axis(cx, width);
        let (y, h) = axis(cy, height);
        return (x, y, w, h, true);
    }

    let axis = |lo: f64, hi: f64, dim: u32| -> (u32, u32) {
        let mut start = round(lo * f64::from(dim));
        let end = round(hi * f64::from(dim));
        let mut len = (end - start).max(0);
        if len == 0 {
            // Positive normalized area that rounded to an empty pixel rect.
            len = 1;
            start = start.min(i64::from(dim) - 1);
        }
        (start as u32, len as u32)
    };
    let (x, w) = axis(b.x1, b.x2, width);
    let (y, h) = axis(b.y1, b.y2, height);
    (x, y, w, h, false)
}

/// Image history plus the episode-scoped crop directory for one episode.
#[derive(Debug)]
pub struct ToolSession {
    episode_id: String,
    crop_dir: PathBuf,
    history: Vec<ImageRef>,
    crop_count: u32,
    /// Execution notes such as degenerate-bbox expansions.
    pub log: Vec<String>,
}

fn image_dims(path: &Path) -> Result<(u32, u32), ToolError> {
    image::image_dimensions(path).map_err(|e| ToolError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl ToolSession {
    /// Start a session on a source image; crops land in
    /// `<workdir>/<episode_id>/crop_<k>.png`.
    pub fn new(episode_id: &str, workdir: &Path, source_image: &Path) -> Result<Self, ToolError> {
        let (width, height) = image_dims(source_image)?;
        Ok(Self {
            episode_id: episode_id.to_string(),
            crop_dir: workdir.join(episode_id),
            history: vec![ImageRef {
                path: source_image.to_path_buf(),
                width,
                height,
                index: 1,
            }],
            crop_count: 0,
            log: Vec::new(),
        })
    }

    pub fn history(&self) -> &[ImageRef] {
        &self.history
    }

    /// Crop a normalized box out of image `target` (1-based) and append the
    /// result to the history.
    pub fn crop_normalized(&mut self, bbox: &Bbox, target: u32) -> Result<ImageRef, ToolError> {
        let len = self.history.len();
        if target == 0 || target as usize > len {
            return Err(ToolError::BadImageIndex { index: target, len });
        }
        let source = self.history[target as usize - 1].clone();
        let (x, y, w, h, degenerate) = pixel_rect(bbox, source.width, source.height);
        if degenerate {
            self.log.push(format!(
                "episode {}: degenerate bbox {:?} on image {} expanded to {}x{} window",
                self.episode_id,
                bbox.as_array(),
                target,
                w,
                h
            ));
        }

        let img = image::open(&source.path).map_err(|e| ToolError::Image {
            path: source.path.clone(),
            message: e.to_string(),
        })?;
        let crop = img.crop_imm(x, y, w, h);

        self.crop_count += 1;
        fs::create_dir_all(&self.crop_dir)?;
        let out_path = self.crop_dir.join(format!("crop_{}.png", self.crop_count));
        crop.save(&out_path).map_err(|e| ToolError::WriteCrop {
            path: out_path.clone(),
            message: e.to_string(),
        })?;

        let reference = ImageRef {
            path: out_path,
            width: w,
            height: h,
            index: self.history.len() as u32 + 1,
        };
        self.history.push(reference.clone());
        Ok(reference)
    }

    /// Append an externally retrieved image (an exemplar) to the history.
    pub fn append_image(&mut self, path: &Path) -> Result<ImageRef, ToolError> {
        let (width, height) = image_dims(path)?;
        let reference = ImageRef {
            path: path.to_path_buf(),
            width,
            height,
            index: self.history.len() as u32 + 1,
        };
        self.history.push(reference.clone());
        Ok(reference)
    }
}

/// Normal exemplars per class with a seed for deterministic selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarIndex {
    classes: BTreeMap<String, Vec<PathBuf>>,
    seed: u64,
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl ExemplarIndex {
    pub fn new(classes: BTreeMap<String, Vec<PathBuf>>, seed: u64) -> Self {
        let mut classes = classes;
        for list in classes.values_mut() {
            list.sort();
        }
        Self { classes, seed }
    }

    pub fn empty(seed: u64) -> Self {
        Self {
            classes: BTreeMap::new(),
            seed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Deterministically pick a normal exemplar of `class_name` whose path is
    /// not `exclude`. Same inputs, same exemplar.
    pub fn retrieve_normal(&self, class_name: &str, exclude: &Path) -> Result<&Path, ToolError> {
        let list = self
            .classes
            .get(class_name)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| ToolError::NoExemplar(class_name.to_string()))?;
        let start = (fnv1a(self.seed, class_name) % list.len() as u64) as usize;
        for offset in 0..list.len() {
            let candidate = &list[(start + offset) % list.len()];
            if candidate.as_path() != exclude {
                return Ok(candidate.as_path());
            }
        }
        Err(ToolError::NoExemplar(class_name.to_string()))
    }
}

/// Load an exemplar manifest: a JSON object mapping class name to an array of
/// image paths. Every listed path must exist; lists are sorted before use.
pub fn build_exemplar_index(manifest_path: &Path, seed: u64) -> Result<ExemplarIndex, ToolError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| ToolError::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let classes: BTreeMap<String, Vec<PathBuf>> =
        serde_json::from_str(&text).map_err(|e| ToolError::Manifest {
            path: manifest_path.to_path_buf(),
            message: e.to_string(),
        })?;
    for (class, paths) in &classes {
        for path in paths {
            if !path.exists() {
                return Err(ToolError::DanglingExemplar {
                    class: class.clone(),
                    path: path.clone(),
                });
            }
        }
    }
    Ok(ExemplarIndex::new(classes, seed))
}
