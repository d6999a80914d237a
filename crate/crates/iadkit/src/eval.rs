//! Evaluation and replay.
//!
//! Evaluation runs one episode per manifest sample and aggregates binary
//! classification accuracy per category, then per dataset, then overall —
//! unweighted at every level. Replay re-executes stored episodes' tool calls
//! and reward math and reports any divergence from the stored records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::protocol::{self, ToolCall, ToolMode};
use crate::rewards::{accuracy_reward, total_reward, EpisodeSummary, GroupStats, StepStat};
use crate::rollout::{
    run_episode, score_episode, sha256_file, EpisodeRecord, RolloutContext, Termination,
};
use crate::sample::{candidate_labels, SampleRecord};
use crate::tools::ToolSession;

/// Accuracy of one (dataset, class) bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy_pct: f64,
}

/// Category-averaged evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ToolMode,
    pub config_fingerprint: String,
    /// Keyed `dataset/class`.
    pub per_category: BTreeMap<String, CategoryAccuracy>,
    /// Unweighted mean of each dataset's category accuracies.
    pub per_dataset: BTreeMap<String, f64>,
    /// Unweighted mean of the dataset averages.
    pub overall_pct: f64,
    pub total_samples: usize,
    pub total_correct: usize,
    /// Episodes that ended in an endpoint error (counted incorrect).
    pub endpoint_errors: Vec<String>,
}

/// Run one greedy episode per sample and aggregate accuracies. Returns the
/// report plus the episode records for storage and replay.
pub fn evaluate(
    ctx: &RolloutContext,
    samples: &[SampleRecord],
    mode: ToolMode,
    config_fingerprint: &str,
) -> Result<(EvalReport, Vec<EpisodeRecord>), protocol::ProtocolError> {
    let labels = candidate_labels(samples);
    let mut prompts_by_class = BTreeMap::new();
    for sample in samples {
        if !prompts_by_class.contains_key(&sample.class_name) {
            let class_labels = labels
                .get(&sample.class_name)
                .cloned()
                .unwrap_or_else(|| vec!["defect".to_string()]);
            prompts_by_class.insert(
                sample.class_name.clone(),
                protocol::build_prompts(&sample.class_name, &class_labels, mode)?,
            );
        }
    }

    let records = crate::par::map_slice(samples, |sample| {
        let prompts = &prompts_by_class[&sample.class_name];
        let mut record = run_episode(ctx, sample, prompts, &format!("eval-{}", sample.id));
        let query_rate = if record.executed_query() { 1.0 } else { 0.0 };
        score_episode(&mut record, query_rate, ctx.coeffs);
        record
    });

    Ok((build_report(&records, mode, config_fingerprint), records))
}

/// Aggregate stored episode records into a report.
pub fn build_report(
    records: &[EpisodeRecord],
    mode: ToolMode,
    config_fingerprint: &str,
) -> EvalReport {
    let mut nested: BTreeMap<String, BTreeMap<String, (usize, usize)>> = BTreeMap::new();
    let mut endpoint_errors = Vec::new();
    let mut total_correct = 0;
    for record in records {
        let correct = accuracy_reward(&record.summary, &record.sample) == 1.0;
        if record.termination == Termination::EndpointError {
            endpoint_errors.push(record.episode_id.clone());
        }
        if correct {
            total_correct += 1;
        }
        let slot = nested
            .entry(record.sample.dataset.to_string())
            .or_default()
            .entry(record.sample.class_name.clone())
            .or_insert((0, 0));
        slot.0 += usize::from(correct);
        slot.1 += 1;
    }

    let mut per_category = BTreeMap::new();
    let mut per_dataset = BTreeMap::new();
    for (dataset, classes) in &nested {
        let mut accuracies = Vec::new();
        for (class, &(correct, total)) in classes {
            let accuracy_pct = 100.0 * correct as f64 / total as f64;
            accuracies.push(accuracy_pct);
            per_category.insert(
                format!("{dataset}/{class}"),
                CategoryAccuracy {
                    correct,
                    total,
                    accuracy_pct,
                },
            );
        }
        per_dataset.insert(
            dataset.clone(),
            accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        );
    }
    let overall_pct = if per_dataset.is_empty() {
        0.0
    } else {
        per_dataset.values().sum::<f64>() / per_dataset.len() as f64
    };

    EvalReport {
        mode,
        config_fingerprint: config_fingerprint.to_string(),
        per_category,
        per_dataset,
        overall_pct,
        total_samples: records.len(),
        total_correct,
        endpoint_errors,
    }
}

/// Render the report as an aligned text table.
pub fn render_text_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}   config: {}", report.mode, report.config_fingerprint);
    let _ = writeln!(out);
    let width = report
        .per_category
        .keys()
        .map(String::len)
        .max()
        .unwrap_or(8)
        .max(8);
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>7}  {:>7}", "category", "n", "correct", "acc%");
    for (category, acc) in &report.per_category {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7}  {:>7.2}",
            category, acc.total, acc.correct, acc.accuracy_pct
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<width$}  {:>7}", "dataset", "acc%");
    for (dataset, pct) in &report.per_dataset {
        let _ = writeln!(out, "{:<width$}  {:>7.2}", dataset, pct);
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "overall: {:.2}  ({}/{} samples, {} endpoint errors)",
        report.overall_pct,
        report.total_correct,
        report.total_samples,
        report.endpoint_errors.len()
    );
    out
}

// ── replay ────────────────────────────────────────────────────────────────────

/// One difference between a stored episode and its re-execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub episode_id: String,
    pub kind: String,
    pub detail: String,
}

/// Replay outcome across an episode store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub episodes_checked: usize,
    pub divergences: Vec<Divergence>,
    /// Episodes that could not be replayed at all (missing source image).
    pub failures: Vec<Divergence>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergences.is_empty() && self.failures.is_empty()
    }
}

/// Reconstruct the reward-relevant summary from a stored transcript. Mirrors
/// the derivation `run_episode` performs while the episode is live.
fn summary_from_transcript(record: &EpisodeRecord) -> EpisodeSummary {
    let assistant: Vec<(usize, protocol::ParsedTurn)> = record
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.role == crate::backend::Role::Assistant)
        .map(|(i, t)| (i, protocol::parse_assistant_turn(&t.joined_text())))
        .collect();

    let steps: Vec<StepStat> = assistant
        .iter()
        .map(|(_, p)| StepStat {
            n_tool_calls: p.tool_calls.len() as u32,
            emitted_answer: p
                .answer
                .as_ref()
                .map(|a| a.anomaly_present == record.sample.y_gt.is_anomalous()),
        })
        .collect();

    // Crop calls that were actually executed are followed by an image turn.
    let mut pred_bbox: Option<Bbox> = None;
    for (turn_index, parsed) in &assistant {
        let followed_by_image = record
            .turns
            .get(turn_index + 1)
            .is_some_and(|t| {
                t.role == crate::backend::Role::Tool
                    && t.content
                        .iter()
                        .any(|c| matches!(c, crate::backend::ContentItem::Image { .. }))
            });
        if let Some(ToolCall::Crop { bbox, .. }) = parsed.tool_calls.first() {
            if followed_by_image {
                pred_bbox = Some(bbox.clamped());
            }
        }
    }

    let (final_answer, format_valid) = match assistant.last() {
        Some((_, parsed)) if parsed.answer.is_some() => (
            parsed.answer.clone(),
            parsed.format_valid && record.termination == Termination::Answered,
        ),
        _ => (None, false),
    };

    EpisodeSummary {
        steps,
        final_answer,
        pred_bbox,
        format_valid,
    }
}

fn replay_one(record: &EpisodeRecord, workdir: &Path) -> Result<Vec<Divergence>, Divergence> {
    let mut divergences = Vec::new();
    let diverge = |kind: &str, detail: String| Divergence {
        episode_id: record.episode_id.clone(),
        kind: kind.to_string(),
        detail,
    };

    if !record.sample.image_path.exists() {
        return Err(diverge(
            "missing_source_image",
            record.sample.image_path.display().to_string(),
        ));
    }
    let mut session = ToolSession::new(
        &format!("{}-replay", record.episode_id),
        workdir,
        &record.sample.image_path,
    )
    .map_err(|e| diverge("replay_setup", e.to_string()))?;

    // Re-execute tool calls in transcript order and compare against the
    // stored execution log.
    let mut stored = record.executed_tools.iter();
    for (turn_index, turn) in record.turns.iter().enumerate() {
        if turn.role != crate::backend::Role::Assistant {
            continue;
        }
        let parsed = protocol::parse_assistant_turn(&turn.joined_text());
        let Some(call) = parsed.tool_calls.first() else {
            continue;
        };
        let executed_originally = record
            .turns
            .get(turn_index + 1)
            .is_some_and(|t| {
                t.role == crate::backend::Role::Tool
                    && t.content
                        .iter()
                        .any(|c| matches!(c, crate::backend::ContentItem::Image { .. }))
            });
        match call {
            ToolCall::Crop { bbox, target_image } => {
                match (session.crop_normalized(bbox, *target_image), executed_originally) {
                    (Ok(crop), true) => {
                        let hash = sha256_file(&crop.path)
                            .map_err(|e| diverge("replay_setup", e.to_string()))?;
                        match stored.next() {
                            Some(entry) if entry.tool == protocol::CROP_TOOL_NAME => {
                                if entry.sha256 != hash {
                                    divergences.push(diverge(
                                        "crop_hash",
                                        format!(
                                            "turn {turn_index}: stored {} != replayed {hash}",
                                            entry.sha256
                                        ),
                                    ));
                                }
                            }
                            other => divergences.push(diverge(
                                "tool_log",
                                format!("turn {turn_index}: unexpected log entry {other:?}"),
                            )),
                        }
                    }
                    (Ok(_), false) => divergences.push(diverge(
                        "tool_outcome",
                        format!("turn {turn_index}: crop succeeds now but failed in the record"),
                    )),
                    (Err(_), true) => divergences.push(diverge(
                        "tool_outcome",
                        format!("turn {turn_index}: crop fails now but succeeded in the record"),
                    )),
                    (Err(_), false) => {}
                }
            }
            ToolCall::QueryImage => {
                if record.mode == ToolMode::PzOnly || !executed_originally {
                    continue;
                }
                match stored.next() {
                    Some(entry) if entry.tool == protocol::QUERY_TOOL_NAME => {
                        match sha256_file(&entry.path) {
                            Ok(hash) if hash == entry.sha256 => {
                                // Keep history indices aligned for later crops.
                                if session.append_image(&entry.path).is_err() {
                                    divergences.push(diverge(
                                        "exemplar_missing",
                                        entry.path.display().to_string(),
                                    ));
                                }
                            }
                            Ok(hash) => divergences.push(diverge(
                                "exemplar_hash",
                                format!("stored {} != current {hash}", entry.sha256),
                            )),
                            Err(e) => divergences.push(diverge(
                                "exemplar_missing",
                                format!("{}: {e}", entry.path.display()),
                            )),
                        }
                    }
                    other => divergences.push(diverge(
                        "tool_log",
                        format!("turn {turn_index}: unexpected log entry {other:?}"),
                    )),
                }
            }
        }
    }
    if let Some(extra) = stored.next() {
        divergences.push(diverge(
            "tool_log",
            format!("stored log has unreplayed entry for {}", extra.tool),
        ));
    }

    // Summary and reward recomputation.
    let summary = summary_from_transcript(record);
    if summary != record.summary {
        divergences.push(diverge(
            "summary",
            "stored summary differs from transcript-derived summary".to_string(),
        ));
    }
    let reward = if record.termination == Termination::EndpointError {
        crate::rewards::RewardBreakdown::zero()
    } else {
        total_reward(
            &summary,
            &record.sample,
            &GroupStats {
                query_rate: record.query_rate,
            },
            &record.coeffs,
        )
    };
    if reward != record.reward {
        divergences.push(diverge(
            "reward",
            format!("stored {:?} != recomputed {:?}", record.reward, reward),
        ));
    }
    Ok(divergences)
}

/// Re-execute stored episodes and report divergences. Crops are regenerated
/// under `workdir` and compared by content hash, so deleted crop files are
/// tolerated as long as the regenerated bytes match.
pub fn replay(episodes: &[EpisodeRecord], workdir: &Path) -> ReplayReport {
    let results = crate::par::map_slice(episodes, |record| replay_one(record, workdir));
    let mut report = ReplayReport {
        episodes_checked: episodes.len(),
        ..Default::default()
    };
    for result in results {
        match result {
            Ok(divergences) => report.divergences.extend(divergences),
            Err(failure) => report.failures.push(failure),
        }
    }
    report
}
