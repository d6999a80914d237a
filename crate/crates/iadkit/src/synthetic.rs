//! Seeded synthetic inspection set for tests and offline demos.
//!
//! Generates 12 images (6 normal, 6 defective with binary masks) across two
//! product classes, plus the dataset manifest, an exemplar manifest for the
//! reference tool, and scripted mock replies that solve every sample
//! correctly. Everything is a pure function of the seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::ScriptEntry;
use crate::bbox::Bbox;
use crate::protocol::{render_answer, render_tool_call, FinalAnswer, ToolCall};
use crate::sample::{Dataset, Label, SampleRecord};
use crate::trajectory::mask_file_to_bbox;

const IMAGE_SIDE: u32 = 128;

pub struct SyntheticSet {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub exemplars_path: PathBuf,
    pub script_path: PathBuf,
    pub samples: Vec<SampleRecord>,
}

struct ClassSpec {
    name: &'static str,
    base: [u8; 3],
    anomalies: [&'static str; 2],
}

const CLASSES: [ClassSpec; 2] = [
    ClassSpec {
        name: "widget",
        base: [170, 170, 180],
        anomalies: ["scratch", "dent"],
    },
    ClassSpec {
        name: "gadget",
        base: [140, 160, 140],
        anomalies: ["contamination", "crack"],
    },
];

fn base_image(rng: &mut ChaCha8Rng, base: [u8; 3]) -> RgbImage {
    let mut img = RgbImage::new(IMAGE_SIDE, IMAGE_SIDE);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let wave = ((x / 16 + y / 16) % 2) as i16 * 6;
        let noise = rng.random_range(-5i16..=5);
        let channel = |c: u8| (i16::from(c) + wave + noise).clamp(0, 255) as u8;
        *px = Rgb([channel(base[0]), channel(base[1]), channel(base[2])]);
    }
    img
}

fn paint_defect(img: &mut RgbImage, mask: &mut GrayImage, rng: &mut ChaCha8Rng) {
    let w = rng.random_range(14..34);
    let h = rng.random_range(14..34);
    let x0 = rng.random_range(8..IMAGE_SIDE - w - 8);
    let y0 = rng.random_range(8..IMAGE_SIDE - h - 8);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.put_pixel(x, y, Rgb([60, 18, 24]));
            mask.put_pixel(x, y, Luma([255]));
        }
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    file.write_all(b"\n")
}

/// Generate the full set under `out_dir`.
pub fn generate(out_dir: &Path, seed: u64) -> std::io::Result<SyntheticSet> {
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;

    let mut samples = Vec::new();
    let mut exemplars: std::collections::BTreeMap<String, Vec<PathBuf>> = Default::default();

    for (class_index, class) in CLASSES.iter().enumerate() {
        for i in 0..3u64 {
            // Normal sample.
            let id = format!("{}-n{}", class.name, i + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (class_index as u64) << 32 ^ i,
            );
            let img = base_image(&mut rng, class.base);
            let image_path = images_dir.join(format!("{id}.png"));
            img.save(&image_path).map_err(std::io::Error::other)?;
            exemplars
                .entry(class.name.to_string())
                .or_default()
                .push(image_path.clone());
            samples.push(SampleRecord {
                id,
                dataset: Dataset::Synthetic,
                class_name: class.name.to_string(),
                image_path,
                y_gt: Label::Normal,
                c_gt: None,
                mask_path: None,
                gt_bbox: None,
            });

            // Defective sample.
            let id = format!("{}-a{}", class.name, i + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x5eed ^ (class_index as u64) << 32 ^ i,
            );
            let mut img = base_image(&mut rng, class.base);
            let mut mask = GrayImage::new(IMAGE_SIDE, IMAGE_SIDE);
            paint_defect(&mut img, &mut mask, &mut rng);
            let image_path = images_dir.join(format!("{id}.png"));
            let mask_path = masks_dir.join(format!("{id}_mask.png"));
            img.save(&image_path).map_err(std::io::Error::other)?;
            mask.save(&mask_path).map_err(std::io::Error::other)?;
            samples.push(SampleRecord {
                id,
                dataset: Dataset::Synthetic,
                class_name: class.name.to_string(),
                image_path,
                y_gt: Label::Anomalous,
                c_gt: Some(class.anomalies[(i % 2) as usize].to_string()),
                mask_path: Some(mask_path),
                gt_bbox: None,
            });
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    for sample in &samples {
        serde_json::to_writer(&mut manifest, sample)?;
        manifest.write_all(b"\n")?;
    }

    let exemplars_path = out_dir.join("exemplars.json");
    write_json_pretty(&exemplars_path, &exemplars)?;

    let script_path = out_dir.join("mock_script.json");
    let script = always_correct_script(&samples).map_err(std::io::Error::other)?;
    write_json_pretty(&script_path, &script)?;

    Ok(SyntheticSet {
        root: out_dir.to_path_buf(),
        manifest_path,
        exemplars_path,
        script_path,
        samples,
    })
}

fn sample_crop_bbox(sample: &SampleRecord) -> Result<Bbox, String> {
    match (&sample.gt_bbox, &sample.mask_path) {
        (Some(b), _) => Ok(*b),
        (None, Some(mask)) => mask_file_to_bbox(mask).map_err(|e| e.to_string()),
        (None, None) => Ok(Bbox::new(0.25, 0.25, 0.75, 0.75)),
    }
}

fn correct_answer(sample: &SampleRecord) -> FinalAnswer {
    match &sample.c_gt {
        Some(c) => FinalAnswer::anomalous(c.clone(), vec![format!("visible {c} in the crop")]),
        None => FinalAnswer::normal(),
    }
}

/// Script that zooms onto the ground-truth region and answers correctly:
/// turn 0 crops, turn 1 answers.
pub fn always_correct_script(samples: &[SampleRecord]) -> Result<Vec<ScriptEntry>, String> {
    let mut entries = Vec::new();
    for sample in samples {
        let bbox = sample_crop_bbox(sample)?;
        let crop = render_tool_call(&ToolCall::Crop {
            bbox,
            target_image: 1,
        })
        .map_err(|e| e.to_string())?;
        entries.push(ScriptEntry {
            sample_id: sample.id.clone(),
            turn: 0,
            reply: format!("<think>Inspecting the most suspicious region up close.</think>\n{crop}"),
        });
        entries.push(ScriptEntry {
            sample_id: sample.id.clone(),
            turn: 1,
            reply: format!(
                "<think>The crop settles the verdict.</think>\n{}",
                render_answer(&correct_answer(sample))
            ),
        });
    }
    Ok(entries)
}

/// Script that tries the reference tool first (turn 0), then crops (turn 1),
/// then answers correctly (turn 2). Under pz_only mode the first call must be
/// rejected with a tool-error turn.
pub fn query_probe_script(samples: &[SampleRecord]) -> Result<Vec<ScriptEntry>, String> {
    let query = render_tool_call(&ToolCall::QueryImage).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for sample in samples {
        let bbox = sample_crop_bbox(sample)?;
        let crop = render_tool_call(&ToolCall::Crop {
            bbox,
            target_image: 1,
        })
        .map_err(|e| e.to_string())?;
        entries.push(ScriptEntry {
            sample_id: sample.id.clone(),
            turn: 0,
            reply: format!("<think>Let me fetch a reference first.</think>\n{query}"),
        });
        entries.push(ScriptEntry {
            sample_id: sample.id.clone(),
            turn: 1,
            reply: format!("<think>Zooming instead.</think>\n{crop}"),
        });
        entries.push(ScriptEntry {
            sample_id: sample.id.clone(),
            turn: 2,
            reply: format!(
                "<think>Decided.</think>\n{}",
                render_answer(&correct_answer(sample))
            ),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::load_manifest;
    use tempfile::TempDir;

    #[test]
    fn set_is_balanced_and_masks_resolve() {
        let dir = TempDir::new().unwrap();
        let set = generate(dir.path(), 17).unwrap();
        assert_eq!(set.samples.len(), 12);
        let normal = set.samples.iter().filter(|s| s.y_gt == Label::Normal).count();
        assert_eq!(normal, 6);
        for sample in &set.samples {
            sample.validate().unwrap();
            assert!(sample.image_path.exists());
            if let Some(mask) = &sample.mask_path {
                let bbox = mask_file_to_bbox(mask).unwrap();
                assert!(bbox.is_normalized());
                assert!(bbox.area() > 0.0);
            }
        }
        let loaded = load_manifest(&set.manifest_path).unwrap();
        assert_eq!(loaded.len(), 12);
    }

    #[test]
    fn generation_is_deterministic() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let a = generate(dir_a.path(), 5).unwrap();
        let b = generate(dir_b.path(), 5).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.id, sb.id);
            assert_eq!(
                fs::read(&sa.image_path).unwrap(),
                fs::read(&sb.image_path).unwrap()
            );
        }
        let c = generate(&dir_a.path().join("other_seed"), 6).unwrap();
        assert_ne!(
            fs::read(&a.samples[0].image_path).unwrap(),
            fs::read(&c.samples[0].image_path).unwrap()
        );
    }

    #[test]
    fn scripts_cover_every_sample() {
        let dir = TempDir::new().unwrap();
        let set = generate(dir.path(), 17).unwrap();
        let script = always_correct_script(&set.samples).unwrap();
        assert_eq!(script.len(), 24);
        let probe = query_probe_script(&set.samples).unwrap();
        assert_eq!(probe.len(), 36);
    }
}
