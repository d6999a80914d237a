//! Supervised trajectory construction.
//!
//! A trajectory is a full conversation: mode-matched system prompt, user
//! prompt with the sample image, endpoint-generated reasoning paired with
//! programmatically rendered tool calls, tool-result image turns, and a
//! terminal answer consistent with ground truth. Exactly two turns carry the
//! supervision flag: the last tool-invoking assistant turn and the final
//! answer turn.

mod templates;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    complete_with_retries, BackendError, ChatBackend, ChatMessage, ChatRequest, ContentItem, Role,
};
use crate::bbox::Bbox;
use crate::grpo::TokenScore;
use crate::protocol::{self, FinalAnswer, ToolCall, ToolMode};
use crate::sample::{Label, ManifestError, SampleRecord};
use crate::tools::{ExemplarIndex, ToolError, ToolSession};

/// Which inspection strategy a trajectory teaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Taxonomy {
    #[serde(rename = "pz")]
    Pz,
    #[serde(rename = "pz_cr")]
    PzCr,
}

impl Taxonomy {
    pub fn mode(self) -> ToolMode {
        match self {
            Taxonomy::Pz => ToolMode::PzOnly,
            Taxonomy::PzCr => ToolMode::PzCr,
        }
    }
}

/// One stored conversation turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub supervised: bool,
    pub content: Vec<ContentItem>,
}

impl Turn {
    fn text(role: Role, supervised: bool, text: String) -> Self {
        Self {
            role,
            supervised,
            content: vec![ContentItem::text(text)],
        }
    }

    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|c| match c {
                ContentItem::Text { text } => Some(text.as_str()),
                ContentItem::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A complete SFT training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub dataset: crate::sample::Dataset,
    #[serde(rename = "class")]
    pub class_name: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_type: Option<String>,
    pub taxonomy: Taxonomy,
    pub roi_bbox: Bbox,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("mask {0} has no positive pixel")]
    EmptyMask(PathBuf),
    #[error("cannot read mask {path}: {message}")]
    MaskRead { path: PathBuf, message: String },
    #[error("sample {id}: {source}")]
    Manifest {
        id: String,
        #[source]
        source: ManifestError,
    },
    #[error("sample {id}: endpoint failed: {source}")]
    Endpoint {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("sample {id}: generated answer disagrees with ground truth: {reason}")]
    Inconsistent { id: String, reason: String },
    #[error("sample {id}: tool: {source}")]
    Tool {
        id: String,
        #[source]
        source: ToolError,
    },
    #[error("sample {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ── mask → bbox ───────────────────────────────────────────────────────────────

/// Positive-pixel threshold on 8-bit masks (binary masks stored as grayscale).
const MASK_POSITIVE_THRESHOLD: u8 = 127;

/// Tight normalized bounding box of the union of all positive mask pixels.
/// Right/bottom edges are exclusive: a positive pixel at column `c` extends
/// the box to `(c + 1) / width`.
pub fn mask_to_bbox(mask: &image::GrayImage) -> Option<Bbox> {
    let (width, height) = mask.dimensions();
    let mut min_col = u32::MAX;
    let mut max_col = 0;
    let mut min_row = u32::MAX;
    let mut max_row = 0;
    let mut any = false;
    for (x, y, pixel) in mask.enumerate_pixels() {
        if pixel.0[0] > MASK_POSITIVE_THRESHOLD {
            any = true;
            min_col = min_col.min(x);
            max_col = max_col.max(x);
            min_row = min_row.min(y);
            max_row = max_row.max(y);
        }
    }
    if !any {
        return None;
    }
    Some(Bbox::new(
        f64::from(min_col) / f64::from(width),
        f64::from(min_row) / f64::from(height),
        f64::from(max_col + 1) / f64::from(width),
        f64::from(max_row + 1) / f64::from(height),
    ))
}

/// [`mask_to_bbox`] over a mask file.
pub fn mask_file_to_bbox(path: &Path) -> Result<Bbox, TrajectoryError> {
    let mask = image::open(path)
        .map_err(|e| TrajectoryError::MaskRead {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    mask_to_bbox(&mask).ok_or_else(|| TrajectoryError::EmptyMask(path.to_path_buf()))
}

/// Fill in `gt_bbox` from the defect mask when only the mask is present.
pub fn resolve_gt_bbox(sample: &mut SampleRecord) -> Result<(), TrajectoryError> {
    if sample.y_gt == Label::Anomalous && sample.gt_bbox.is_none() {
        let mask = sample.mask_path.clone().ok_or_else(|| TrajectoryError::Invalid {
            id: sample.id.clone(),
            reason: "anomalous sample without mask or gt bbox".into(),
        })?;
        sample.gt_bbox = Some(mask_file_to_bbox(&mask)?);
    }
    Ok(())
}

// ── masked SFT loss ───────────────────────────────────────────────────────────

/// Masked negative log-likelihood: `-sum(logp_policy)` over supervised tokens.
pub fn masked_sft_loss(tokens: &[TokenScore]) -> f64 {
    -tokens
        .iter()
        .filter(|t| t.supervised)
        .map(|t| t.logp_policy)
        .sum::<f64>()
}

// ── ROI proposal ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

/// Center-box fallback when the endpoint never produces a usable ROI.
pub const ROI_FALLBACK: Bbox = Bbox {
    x1: 0.25,
    y1: 0.25,
    x2: 0.75,
    y2: 0.75,
};

const ROI_CONTENT_ATTEMPTS: usize = 3;

/// Scan a reply for the first `[x, y, x, y]` group of four numbers.
fn extract_bbox(reply: &str) -> Option<Bbox> {
    let bytes = reply.as_bytes();
    let mut start = 0;
    while let Some(open) = reply[start..].find('[') {
        let open = start + open;
        if let Some(close) = reply[open..].find(']') {
            let body = &reply[open + 1..open + close];
            let parts: Vec<f64> = body
                .split(',')
                .filter_map(|p| p.trim().parse::<f64>().ok())
                .collect();
            if parts.len() == 4 && parts.iter().all(|v| v.is_finite()) {
                let b = Bbox::new(parts[0], parts[1], parts[2], parts[3]).clamped();
                if b.is_ordered() && b.area() > 0.0 {
                    return Some(b);
                }
            }
            start = open + close + 1;
        } else {
            break;
        }
        if start >= bytes.len() {
            break;
        }
    }
    None
}

/// Ask the endpoint for a plausible inspection region on a normal sample.
/// Returns the clamped box and whether the center fallback was used.
pub fn propose_normal_roi(
    sample: &SampleRecord,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
) -> Result<(Bbox, bool), TrajectoryError> {
    let prompt = templates::ROI_PROPOSAL_USER.replace("{class_name}", &sample.class_name);
    let messages = vec![ChatMessage {
        role: Role::User,
        content: vec![
            ContentItem::text(prompt),
            ContentItem::image(&sample.image_path),
        ],
    }];
    for attempt in 0..ROI_CONTENT_ATTEMPTS {
        let request = ChatRequest {
            sample_id: &sample.id,
            turn_index: attempt,
            messages: &messages,
            temperature: 0.0,
        };
        let reply = complete_with_retries(backend, &request, retry.attempts, retry.base_delay)
            .map_err(|source| TrajectoryError::Endpoint {
                id: sample.id.clone(),
                source,
            })?;
        if let Some(bbox) = extract_bbox(&reply) {
            return Ok((bbox, false));
        }
    }
    Ok((ROI_FALLBACK, true))
}

// ── trajectory builder ────────────────────────────────────────────────────────

// Request indices reserved per builder step so scripted backends can address
// each call: ROI proposal uses 0..=2, the remaining steps start at 3.
const REQ_GLOBAL_REASONING: usize = 3;
const REQ_LOCAL_REASONING: usize = 4;
const REQ_LOCAL_REASONING_RETRY: usize = 5;
const REQ_COMPARATIVE_REASONING: usize = 6;

pub struct TrajectoryBuilder<'a> {
    pub backend: &'a dyn ChatBackend,
    pub exemplars: &'a ExemplarIndex,
    /// Candidate anomaly labels per class for prompt construction.
    pub labels: &'a BTreeMap<String, Vec<String>>,
    /// Crops are materialized under this directory, one subdirectory per
    /// trajectory.
    pub workdir: &'a Path,
    pub retry: RetryPolicy,
}

struct VerifiedReasoning {
    think: String,
    answer: FinalAnswer,
    raw: String,
}

impl<'a> TrajectoryBuilder<'a> {
    fn class_labels(&self, class_name: &str) -> Vec<String> {
        self.labels
            .get(class_name)
            .cloned()
            .unwrap_or_else(|| vec!["defect".to_string()])
    }

    fn fill(template: &str, sample: &SampleRecord, bbox: &Bbox, labels: &[String]) -> String {
        template
            .replace("{class_name}", &sample.class_name)
            .replace("{anomaly_type}", sample.c_gt.as_deref().unwrap_or("none"))
            .replace(
                "{bbox_coords}",
                &format!("[{}, {}, {}, {}]", bbox.x1, bbox.y1, bbox.x2, bbox.y2),
            )
            .replace("{anomalies_str}", &labels.join(", "))
    }

    fn ask(
        &self,
        sample: &SampleRecord,
        turn_index: usize,
        system: &str,
        user: String,
        images: &[&Path],
    ) -> Result<String, TrajectoryError> {
        let mut content = vec![ContentItem::text(user)];
        for image in images {
            content.push(ContentItem::image(*image));
        }
        let messages = vec![
            ChatMessage::text(Role::System, system),
            ChatMessage {
                role: Role::User,
                content,
            },
        ];
        let request = ChatRequest {
            sample_id: &sample.id,
            turn_index,
            messages: &messages,
            temperature: 0.0,
        };
        complete_with_retries(self.backend, &request, self.retry.attempts, self.retry.base_delay)
            .map_err(|source| TrajectoryError::Endpoint {
                id: sample.id.clone(),
                source,
            })
    }

    /// Check a generated `<think>/<answer>` reply against the ground truth.
    fn verify_reasoning(sample: &SampleRecord, reply: &str) -> Result<VerifiedReasoning, String> {
        let turn = protocol::parse_assistant_turn(reply);
        if !turn.format_valid {
            return Err(format!("reply failed format validation: {:?}", turn.diagnostics));
        }
        let answer = turn.answer.ok_or("reply carries no answer")?;
        if answer.anomaly_present != sample.y_gt.is_anomalous() {
            return Err("answer polarity disagrees with label".to_string());
        }
        if let Some(c_gt) = &sample.c_gt {
            if !answer.top_anomaly.trim().eq_ignore_ascii_case(c_gt.trim()) {
                return Err(format!(
                    "answer type \"{}\" disagrees with \"{c_gt}\"",
                    answer.top_anomaly
                ));
            }
        }
        Ok(VerifiedReasoning {
            think: turn.think_texts.join("\n"),
            answer,
            raw: reply.trim().to_string(),
        })
    }

    /// Run the local-reasoning step, regenerating once on inconsistency.
    fn local_reasoning(
        &self,
        sample: &SampleRecord,
        bbox: &Bbox,
        crop_path: &Path,
    ) -> Result<VerifiedReasoning, TrajectoryError> {
        let labels = self.class_labels(&sample.class_name);
        let template = match sample.y_gt {
            Label::Anomalous => templates::LOCAL_REASONING_USER_ABNORMAL,
            Label::Normal => templates::LOCAL_REASONING_USER_NORMAL,
        };
        let user = Self::fill(template, sample, bbox, &labels);
        let mut last_reason = String::new();
        for turn_index in [REQ_LOCAL_REASONING, REQ_LOCAL_REASONING_RETRY] {
            let reply = self.ask(
                sample,
                turn_index,
                templates::LOCAL_REASONING_SYSTEM,
                user.clone(),
                &[&sample.image_path, crop_path],
            )?;
            match Self::verify_reasoning(sample, &reply) {
                Ok(verified) => return Ok(verified),
                Err(reason) => last_reason = reason,
            }
        }
        Err(TrajectoryError::Inconsistent {
            id: sample.id.clone(),
            reason: last_reason,
        })
    }

    /// Build one trajectory. The ROI comes from the defect mask for anomalous
    /// samples and from an endpoint proposal for normal ones.
    pub fn build(
        &self,
        sample: &SampleRecord,
        taxonomy: Taxonomy,
    ) -> Result<Trajectory, TrajectoryError> {
        sample.validate().map_err(|source| TrajectoryError::Manifest {
            id: sample.id.clone(),
            source,
        })?;

        let roi_bbox = match sample.y_gt {
            Label::Anomalous => match (&sample.gt_bbox, &sample.mask_path) {
                (Some(b), _) => *b,
                (None, Some(mask)) => mask_file_to_bbox(mask)?,
                (None, None) => unreachable!("validated above"),
            },
            Label::Normal => propose_normal_roi(sample, self.backend, &self.retry)?.0,
        };

        let mut session = ToolSession::new(
            &format!("traj-{}", sample.id),
            self.workdir,
            &sample.image_path,
        )
        .map_err(|source| TrajectoryError::Tool {
            id: sample.id.clone(),
            source,
        })?;
        let crop = session
            .crop_normalized(&roi_bbox, 1)
            .map_err(|source| TrajectoryError::Tool {
                id: sample.id.clone(),
                source,
            })?;

        let labels = self.class_labels(&sample.class_name);
        let global_template = match sample.y_gt {
            Label::Anomalous => templates::GLOBAL_REASONING_USER_ABNORMAL,
            Label::Normal => templates::GLOBAL_REASONING_USER_NORMAL,
        };
        let global_think = self
            .ask(
                sample,
                REQ_GLOBAL_REASONING,
                templates::GLOBAL_REASONING_SYSTEM,
                Self::fill(global_template, sample, &roi_bbox, &labels),
                &[&sample.image_path, &crop.path],
            )?
            .trim()
            .to_string();

        let local = self.local_reasoning(sample, &roi_bbox, &crop.path)?;

        let prompts = protocol::build_prompts(&sample.class_name, &labels, taxonomy.mode())?;
        let crop_call = protocol::render_tool_call(&ToolCall::Crop {
            bbox: roi_bbox,
            target_image: 1,
        })?;

        let mut turns = vec![
            Turn::text(Role::System, false, prompts.system_text),
            Turn {
                role: Role::User,
                supervised: false,
                content: vec![
                    ContentItem::text(prompts.user_text),
                    ContentItem::image(&sample.image_path),
                ],
            },
        ];

        match taxonomy {
            Taxonomy::Pz => {
                turns.push(Turn::text(
                    Role::Assistant,
                    true,
                    format!("<think>{global_think}</think>\n{crop_call}"),
                ));
                turns.push(Turn {
                    role: Role::Tool,
                    supervised: false,
                    content: vec![ContentItem::image(&crop.path)],
                });
                turns.push(Turn::text(Role::Assistant, true, local.raw));
            }
            Taxonomy::PzCr => {
                let exemplar = self
                    .exemplars
                    .retrieve_normal(&sample.class_name, &sample.image_path)
                    .map_err(|source| TrajectoryError::Tool {
                        id: sample.id.clone(),
                        source,
                    })?
                    .to_path_buf();
                let comparative_template = match sample.y_gt {
                    Label::Anomalous => templates::COMPARATIVE_REASONING_USER_ABNORMAL,
                    Label::Normal => templates::COMPARATIVE_REASONING_USER_NORMAL,
                };
                let comparative_think = self
                    .ask(
                        sample,
                        REQ_COMPARATIVE_REASONING,
                        templates::COMPARATIVE_REASONING_SYSTEM,
                        Self::fill(comparative_template, sample, &roi_bbox, &labels),
                        &[&sample.image_path, &crop.path, &exemplar],
                    )?
                    .trim()
                    .to_string();
                let query_call = protocol::render_tool_call(&ToolCall::QueryImage)?;

                turns.push(Turn::text(
                    Role::Assistant,
                    false,
                    format!("<think>{global_think}</think>\n{crop_call}"),
                ));
                turns.push(Turn {
                    role: Role::Tool,
                    supervised: false,
                    content: vec![ContentItem::image(&crop.path)],
                });
                turns.push(Turn::text(
                    Role::Assistant,
                    true,
                    format!("<think>{}</think>\n{query_call}", local.think),
                ));
                turns.push(Turn {
                    role: Role::Tool,
                    supervised: false,
                    content: vec![ContentItem::image(&exemplar)],
                });
                turns.push(Turn::text(
                    Role::Assistant,
                    true,
                    format!(
                        "<think>{comparative_think}</think>\n{}",
                        protocol::render_answer(&local.answer)
                    ),
                ));
            }
        }

        let trajectory = Trajectory {
            id: sample.id.clone(),
            dataset: sample.dataset,
            class_name: sample.class_name.clone(),
            label: sample.y_gt,
            anomaly_type: sample.c_gt.clone(),
            taxonomy,
            roi_bbox,
            turns,
        };
        validate_trajectory(&trajectory).map_err(|reason| TrajectoryError::Invalid {
            id: sample.id.clone(),
            reason,
        })?;
        Ok(trajectory)
    }
}

/// Build trajectories for many samples, fanning out over the worker pool.
/// Per-sample failures (endpoint errors, inconsistent generations) come back
/// in place so callers can skip and log them.
pub fn build_batch(
    builder: &TrajectoryBuilder,
    jobs: &[(SampleRecord, Taxonomy)],
) -> Vec<Result<Trajectory, TrajectoryError>> {
    crate::par::map_slice(jobs, |(sample, taxonomy)| builder.build(sample, *taxonomy))
}

/// Structural invariants every emitted trajectory must satisfy.
pub fn validate_trajectory(trajectory: &Trajectory) -> Result<(), String> {
    let parsed: Vec<(usize, protocol::ParsedTurn)> = trajectory
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.role == Role::Assistant)
        .map(|(i, t)| (i, protocol::parse_assistant_turn(&t.joined_text())))
        .collect();
    if parsed.is_empty() {
        return Err("no assistant turns".into());
    }

    let supervised: Vec<usize> = trajectory
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.supervised)
        .map(|(i, _)| i)
        .collect();
    let last_tool_turn = parsed
        .iter()
        .filter(|(_, p)| !p.tool_calls.is_empty())
        .map(|(i, _)| *i)
        .next_back()
        .ok_or("no tool-invoking assistant turn")?;
    let (answer_turn, answer_parsed) = parsed.last().expect("nonempty");
    if answer_parsed.answer.is_none() {
        return Err("final assistant turn carries no answer".into());
    }
    if supervised != vec![last_tool_turn, *answer_turn] {
        return Err(format!(
            "supervised turns {supervised:?} are not the last tool turn {last_tool_turn} and the answer turn {answer_turn}"
        ));
    }

    let crop_count: usize = parsed
        .iter()
        .flat_map(|(_, p)| &p.tool_calls)
        .filter(|c| matches!(c, ToolCall::Crop { .. }))
        .count();
    let query_positions: Vec<usize> = parsed
        .iter()
        .filter(|(_, p)| p.tool_calls.iter().any(|c| matches!(c, ToolCall::QueryImage)))
        .map(|(i, _)| *i)
        .collect();
    if crop_count == 0 {
        return Err("no crop call".into());
    }
    match trajectory.taxonomy {
        Taxonomy::Pz => {
            if !query_positions.is_empty() {
                return Err("pz trajectory contains a query_image call".into());
            }
        }
        Taxonomy::PzCr => {
            if query_positions.len() != 1 {
                return Err(format!(
                    "pz_cr trajectory has {} query_image calls",
                    query_positions.len()
                ));
            }
            let first_crop_turn = parsed
                .iter()
                .find(|(_, p)| p.tool_calls.iter().any(|c| matches!(c, ToolCall::Crop { .. })))
                .map(|(i, _)| *i)
                .expect("crop exists");
            if query_positions[0] <= first_crop_turn {
                return Err("query_image precedes the crop".into());
            }
        }
    }

    let answer = answer_parsed.answer.as_ref().expect("checked above");
    if answer.anomaly_present != trajectory.label.is_anomalous() {
        return Err("final answer polarity disagrees with label".into());
    }
    if let Some(anomaly_type) = &trajectory.anomaly_type {
        if !answer
            .top_anomaly
            .trim()
            .eq_ignore_ascii_case(anomaly_type.trim())
        {
            return Err("final answer type disagrees with ground truth".into());
        }
    }
    Ok(())
}

// ── JSONL IO ──────────────────────────────────────────────────────────────────

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    for t in trajectories {
        serde_json::to_writer(&mut file, t)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_trajectories(path: &Path) -> std::io::Result<Vec<Trajectory>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
