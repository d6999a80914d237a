//! Multi-turn episode orchestration.
//!
//! Drives one sample against a vision-chat backend: send the transcript,
//! parse the assistant's reply, execute tool calls (enforcing the mode's tool
//! set), append tool-result turns, and stop on a final answer or the turn
//! budget. Groups of K episodes share a prompt and are scored together.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    complete_with_retries, ChatBackend, ChatMessage, ChatRequest, ContentItem, Role,
};
use crate::bbox::Bbox;
use crate::grpo::{self, GroupEpisode, RolloutGroup, TokenScore};
use crate::protocol::{self, PromptBundle, ToolCall, ToolMode};
use crate::rewards::{
    total_reward, EpisodeSummary, GroupStats, RewardBreakdown, RewardCoefficients, StepStat,
};
use crate::sample::SampleRecord;
use crate::tools::{ExemplarIndex, ToolSession};

/// Endpoint and episode-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    /// Hard cap on assistant turns per episode.
    pub max_turns: u32,
    pub request_timeout_s: u64,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: Option<String>,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model_name: "local-vlm".to_string(),
            temperature: 1.0,
            max_turns: 6,
            request_timeout_s: 120,
            auth_token_env: None,
            retry_attempts: 3,
            retry_base_delay_ms: 200,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_turns < 2 {
            return Err(format!("max_turns must be >= 2, got {}", self.max_turns));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            ));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_s)
    }

    pub fn retry_delay(&self) -> Duration {
        Duration::from_millis(self.retry_base_delay_ms)
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnBudgetExceeded,
    EndpointError,
}

/// One stored transcript turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub role: Role,
    pub content: Vec<ContentItem>,
}

impl TranscriptTurn {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentItem::text(text.into())],
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

/// One executed tool call, recorded for replay verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolExecution {
    /// Transcript index of the assistant turn that requested the call.
    pub turn_index: usize,
    pub tool: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Marker text injected when a tool call cannot be honored.
pub const TOOL_ERROR_PREFIX: &str = "[tool_error]";
/// Tool-error message for a reference query outside pz_cr mode.
pub const TOOL_UNAVAILABLE: &str = "tool not available";
/// One-shot recovery prompt for replies with neither a tool call nor answer.
pub const NUDGE_TEXT: &str = "output a tool call or final answer";

/// A fully recorded episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    pub sample: SampleRecord,
    pub mode: ToolMode,
    pub turns: Vec<TranscriptTurn>,
    pub summary: EpisodeSummary,
    pub reward: RewardBreakdown,
    pub termination: Termination,
    pub wall_time_s: f64,
    /// Group query rate used when scoring this episode.
    pub query_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(default)]
    pub degraded_group: bool,
    #[serde(default)]
    pub zero_advantage_filtered: bool,
    pub executed_tools: Vec<ToolExecution>,
    /// Tool-execution notes (degenerate-bbox expansions and the like).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_log: Vec<String>,
    /// Coefficients the stored reward was computed with.
    pub coeffs: RewardCoefficients,
}

impl EpisodeRecord {
    pub fn executed_query(&self) -> bool {
        self.executed_tools
            .iter()
            .any(|t| t.tool == protocol::QUERY_TOOL_NAME)
    }
}

/// Everything episodes need besides the sample itself.
pub struct RolloutContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub exemplars: &'a ExemplarIndex,
    pub workdir: &'a Path,
    pub config: &'a BackendConfig,
    pub coeffs: &'a RewardCoefficients,
    /// Std-normalize group advantages.
    pub normalize_std: bool,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn to_chat_messages(turns: &[TranscriptTurn]) -> Vec<ChatMessage> {
    turns
        .iter()
        .map(|t| ChatMessage {
            role: t.role,
            content: t.content.clone(),
        })
        .collect()
}

/// Run one episode to completion.
pub fn run_episode(
    ctx: &RolloutContext,
    sample: &SampleRecord,
    prompts: &PromptBundle,
    episode_id: &str,
) -> EpisodeRecord {
    let start = Instant::now();
    let mut turns = vec![
        TranscriptTurn::text(Role::System, prompts.system_text.clone()),
        TranscriptTurn {
            role: Role::User,
            content: vec![
                ContentItem::text(prompts.user_text.clone()),
                ContentItem::image(&sample.image_path),
            ],
        },
    ];
    let mut steps: Vec<StepStat> = Vec::new();
    let mut executed_tools: Vec<ToolExecution> = Vec::new();
    let mut pred_bbox: Option<Bbox> = None;
    let mut final_answer = None;
    let mut format_valid = false;
    let mut nudged = false;
    let mut termination = Termination::TurnBudgetExceeded;

    // Unreadable source image: keep the episode for bookkeeping.
    let mut session = ToolSession::new(episode_id, ctx.workdir, &sample.image_path).ok();

    if let Some(session) = session.as_mut() {
        for turn_index in 0..ctx.config.max_turns as usize {
            let messages = to_chat_messages(&turns);
            let request = ChatRequest {
                sample_id: &sample.id,
                turn_index,
                messages: &messages,
                temperature: ctx.config.temperature,
            };
            let reply = match complete_with_retries(
                ctx.backend,
                &request,
                ctx.config.retry_attempts,
                ctx.config.retry_delay(),
            ) {
                Ok(reply) => reply,
                Err(_) => {
                    termination = Termination::EndpointError;
                    break;
                }
            };
            let assistant_index = turns.len();
            turns.push(TranscriptTurn::text(Role::Assistant, reply.clone()));
            let parsed = protocol::parse_assistant_turn(&reply);
            steps.push(StepStat {
                n_tool_calls: parsed.tool_calls.len() as u32,
                emitted_answer: parsed
                    .answer
                    .as_ref()
                    .map(|a| a.anomaly_present == sample.y_gt.is_anomalous()),
            });

            if parsed.answer.is_some() {
                final_answer = parsed.answer;
                format_valid = parsed.format_valid;
                termination = Termination::Answered;
                break;
            }

            if let Some(call) = parsed.tool_calls.first() {
                match call {
                    ToolCall::Crop { bbox, target_image } => {
                        match session.crop_normalized(bbox, *target_image) {
                            Ok(crop) => {
                                pred_bbox = Some(bbox.clamped());
                                let sha256 =
                                    sha256_file(&crop.path).unwrap_or_default();
                                executed_tools.push(ToolExecution {
                                    turn_index: assistant_index,
                                    tool: protocol::CROP_TOOL_NAME.to_string(),
                                    path: crop.path.clone(),
                                    sha256,
                                });
                                turns.push(TranscriptTurn {
                                    role: Role::Tool,
                                    content: vec![ContentItem::image(crop.path)],
                                });
                            }
                            Err(err) => {
                                turns.push(TranscriptTurn::text(
                                    Role::Tool,
                                    format!("{TOOL_ERROR_PREFIX} {err}"),
                                ));
                            }
                        }
                    }
                    ToolCall::QueryImage => {
                        if prompts.mode == ToolMode::PzOnly {
                            turns.push(TranscriptTurn::text(
                                Role::Tool,
                                format!("{TOOL_ERROR_PREFIX} {TOOL_UNAVAILABLE}: query_image"),
                            ));
                        } else {
                            match ctx
                                .exemplars
                                .retrieve_normal(&sample.class_name, &sample.image_path)
                            {
                                Ok(exemplar) => {
                                    let exemplar = exemplar.to_path_buf();
                                    match session.append_image(&exemplar) {
                                        Ok(_) => {
                                            let sha256 =
                                                sha256_file(&exemplar).unwrap_or_default();
                                            executed_tools.push(ToolExecution {
                                                turn_index: assistant_index,
                                                tool: protocol::QUERY_TOOL_NAME.to_string(),
                                                path: exemplar.clone(),
                                                sha256,
                                            });
                                            turns.push(TranscriptTurn {
                                                role: Role::Tool,
                                                content: vec![ContentItem::image(exemplar)],
                                            });
                                        }
                                        Err(err) => {
                                            turns.push(TranscriptTurn::text(
                                                Role::Tool,
                                                format!("{TOOL_ERROR_PREFIX} {err}"),
                                            ));
                                        }
                                    }
                                }
                                Err(err) => {
                                    turns.push(TranscriptTurn::text(
                                        Role::Tool,
                                        format!("{TOOL_ERROR_PREFIX} {err}"),
                                    ));
                                }
                            }
                        }
                    }
                }
                continue;
            }

            // Neither a tool call nor an answer.
            if !nudged {
                nudged = true;
                turns.push(TranscriptTurn::text(Role::User, NUDGE_TEXT));
                continue;
            }
            termination = Termination::TurnBudgetExceeded;
            break;
        }
    } else {
        termination = Termination::EndpointError;
    }

    let summary = EpisodeSummary {
        steps,
        final_answer,
        pred_bbox,
        format_valid: format_valid && termination == Termination::Answered,
    };
    let tool_log = session.map(|s| s.log).unwrap_or_default();

    EpisodeRecord {
        episode_id: episode_id.to_string(),
        group_id: None,
        sample: sample.clone(),
        mode: prompts.mode,
        turns,
        summary,
        reward: RewardBreakdown::zero(),
        termination,
        wall_time_s: start.elapsed().as_secs_f64(),
        query_rate: 0.0,
        advantage: None,
        degraded_group: false,
        zero_advantage_filtered: false,
        executed_tools,
        tool_log,
        coeffs: *ctx.coeffs,
    }
}

/// Score one episode record in place with the given query rate.
/// Endpoint-error episodes keep all-zero components.
pub fn score_episode(record: &mut EpisodeRecord, query_rate: f64, coeffs: &RewardCoefficients) {
    record.query_rate = query_rate;
    record.coeffs = *coeffs;
    record.reward = if record.termination == Termination::EndpointError {
        RewardBreakdown::zero()
    } else {
        total_reward(
            &record.summary,
            &record.sample,
            &GroupStats { query_rate },
            coeffs,
        )
    };
}

/// Run K independent episodes for one sample, compute the group query rate,
/// score every episode, attach advantages, and mark degraded or
/// zero-advantage groups.
pub fn run_group(
    ctx: &RolloutContext,
    sample: &SampleRecord,
    prompts: &PromptBundle,
    group_size: usize,
) -> Vec<EpisodeRecord> {
    assert!(group_size >= 2, "group_size must be >= 2");
    let group_id = format!("grp-{}", sample.id);
    let mut episodes = crate::par::map_indices(group_size, |i| {
        run_episode(ctx, sample, prompts, &format!("{group_id}-e{}", i + 1))
    });

    let query_count = episodes.iter().filter(|e| e.executed_query()).count();
    let query_rate = query_count as f64 / group_size as f64;
    for episode in &mut episodes {
        episode.group_id = Some(group_id.clone());
        score_episode(episode, query_rate, ctx.coeffs);
    }

    let errors = episodes
        .iter()
        .filter(|e| e.termination == Termination::EndpointError)
        .count();
    let degraded = errors * 2 > group_size;

    let totals: Vec<f64> = episodes.iter().map(|e| e.reward.total).collect();
    let advantages = grpo::group_advantages(&totals, ctx.normalize_std);
    let raw = grpo::group_advantages(&totals, false);
    let filtered = raw
        .iter()
        .fold(0.0f64, |acc, a| acc.max(a.abs()))
        < grpo::ZERO_ADVANTAGE_EPS;

    for (episode, advantage) in episodes.iter_mut().zip(advantages) {
        episode.advantage = Some(advantage);
        episode.degraded_group = degraded;
        episode.zero_advantage_filtered = filtered;
    }
    episodes
}

/// Rebuild the group-math view of stored episodes, attaching token scores by
/// episode id.
pub fn to_rollout_group(
    episodes: &[EpisodeRecord],
    token_scores: &std::collections::BTreeMap<String, Vec<TokenScore>>,
    normalize_std: bool,
) -> RolloutGroup {
    let query_rate = episodes.first().map_or(0.0, |e| e.query_rate);
    let group_episodes: Vec<GroupEpisode> = episodes
        .iter()
        .map(|e| GroupEpisode {
            summary: e.summary.clone(),
            reward: e.reward,
            tokens: token_scores.get(&e.episode_id).cloned().unwrap_or_default(),
        })
        .collect();
    RolloutGroup::from_episodes(group_episodes, query_rate, normalize_std)
}

// ── JSONL IO ──────────────────────────────────────────────────────────────────

pub fn write_episodes(path: &Path, episodes: &[EpisodeRecord]) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    for episode in episodes {
        serde_json::to_writer(&mut file, episode)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_episodes(path: &Path) -> std::io::Result<Vec<EpisodeRecord>> {
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

/// Group stored episodes by group id, preserving first-seen order. Ungrouped
/// episodes form singleton groups keyed by episode id.
pub fn group_by_id(episodes: Vec<EpisodeRecord>) -> Vec<(String, Vec<EpisodeRecord>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: std::collections::BTreeMap<String, Vec<EpisodeRecord>> =
        std::collections::BTreeMap::new();
    for episode in episodes {
        let key = episode
            .group_id
            .clone()
            .unwrap_or_else(|| episode.episode_id.clone());
        if !map.contains_key(&key) {
            order.push(key.clone());
        }
        map.entry(key).or_default().push(episode);
    }
    order
        .into_iter()
        .map(|key| {
            let group = map.remove(&key).expect("key inserted");
            (key, group)
        })
        .collect()
}

/// Recompute every episode's reward with new coefficients, preserving each
/// group's stored query rate.
pub fn rescore_episodes(episodes: &mut [EpisodeRecord], coeffs: &RewardCoefficients) {
    let rescored = crate::par::map_slice(episodes, |episode| {
        let mut copy = episode.clone();
        score_episode(&mut copy, episode.query_rate, coeffs);
        copy
    });
    for (slot, value) in episodes.iter_mut().zip(rescored) {
        *slot = value;
    }
}
