//! Objective-side group-relative policy optimization.
//!
//! Computes group-baseline advantages, the clipped surrogate, a sampled-token
//! KL penalty against the reference policy, and the combined objective over
//! externally supplied per-token log-probabilities. No weights are updated
//! here; training a model with these scores is out of scope.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{EpisodeSummary, RewardBreakdown};

/// Tolerance under which a group is considered signal-free.
pub const ZERO_ADVANTAGE_EPS: f64 = 1e-9;

/// Stabilizer added to the group standard deviation.
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Clip range for the surrogate ratio.
    pub epsilon: f64,
    /// KL penalty coefficient.
    pub beta_kl: f64,
    /// Rollouts per prompt.
    pub group_size: usize,
    /// Divide advantages by the group standard deviation.
    pub normalize_std: bool,
    /// Skip signal-free groups when computing objectives.
    pub zero_advantage_filtering: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta_kl: 0.1,
            group_size: 8,
            normalize_std: false,
            zero_advantage_filtering: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::Config(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !self.beta_kl.is_finite() || self.beta_kl < 0.0 {
            return Err(GrpoError::Config(format!(
                "beta_kl must be nonnegative, got {}",
                self.beta_kl
            )));
        }
        Ok(())
    }
}

/// One sampled token's log-probabilities under the policy and the reference,
/// plus its loss-mask bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    #[serde(rename = "lp_policy")]
    pub logp_policy: f64,
    #[serde(rename = "lp_ref")]
    pub logp_ref: f64,
    pub supervised: bool,
}

/// One scored episode inside a rollout group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEpisode {
    pub summary: EpisodeSummary,
    pub reward: RewardBreakdown,
    #[serde(default)]
    pub tokens: Vec<TokenScore>,
}

/// K episodes for one prompt with group statistics and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub episodes: Vec<GroupEpisode>,
    /// Fraction of episodes that executed the reference tool.
    pub query_rate: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Assemble a group from scored episodes, computing advantages from the
    /// episode totals.
    pub fn from_episodes(
        episodes: Vec<GroupEpisode>,
        query_rate: f64,
        normalize_std: bool,
    ) -> Self {
        let rewards: Vec<f64> = episodes.iter().map(|e| e.reward.total).collect();
        let advantages = group_advantages(&rewards, normalize_std);
        Self {
            episodes,
            query_rate,
            advantages,
        }
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("ratio and advantage lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no supervised tokens in group")]
    NoSupervisedTokens,
    #[error("cannot read token scores {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("token scores {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("episode {episode_id} token {index}: log-probability {value} must be finite and <= 0")]
    InvalidLogProb {
        episode_id: String,
        index: usize,
        value: f64,
    },
}

// ── operations ────────────────────────────────────────────────────────────────

/// Group-baseline advantages: `A_i = r_i - mean(r)`, optionally divided by the
/// population standard deviation plus a stabilizer.
pub fn group_advantages(rewards: &[f64], normalize_std: bool) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut advantages: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if normalize_std {
        let var = advantages.iter().map(|a| a * a).sum::<f64>() / n;
        let denom = var.sqrt() + STD_EPS;
        for a in &mut advantages {
            *a /= denom;
        }
    }
    advantages
}

/// Mean over tokens of `min(rho * A, clip(rho, 1-eps, 1+eps) * A)`.
pub fn clipped_surrogate(
    ratios: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<f64, GrpoError> {
    if ratios.len() != advantages.len() {
        return Err(GrpoError::LengthMismatch(ratios.len(), advantages.len()));
    }
    let mut sum = 0.0;
    for (&rho, &adv) in ratios.iter().zip(advantages) {
        if !rho.is_finite() || rho <= 0.0 {
            return Err(GrpoError::NonPositiveRatio(rho));
        }
        let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
        sum += (rho * adv).min(clipped * adv);
    }
    Ok(sum / ratios.len() as f64)
}

/// Nonnegative sampled-token KL estimator: mean of `r - ln r - 1` with
/// `r = exp(logp_ref - logp_policy)`. Zero exactly when the policies agree on
/// every token.
pub fn kl_penalty(tokens: &[TokenScore]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let sum: f64 = tokens
        .iter()
        .map(|t| {
            let log_r = t.logp_ref - t.logp_policy;
            log_r.exp() - log_r - 1.0
        })
        .sum();
    sum / tokens.len() as f64
}

/// Combined objective over all supervised tokens of a group: the clipped
/// surrogate with each episode's advantage broadcast to its tokens, minus
/// `beta_kl` times the KL penalty.
pub fn grpo_objective(group: &RolloutGroup, config: &GrpoConfig) -> Result<f64, GrpoError> {
    let mut ratios = Vec::new();
    let mut advantages = Vec::new();
    let mut supervised = Vec::new();
    for (episode, &adv) in group.episodes.iter().zip(&group.advantages) {
        for token in episode.tokens.iter().filter(|t| t.supervised) {
            ratios.push((token.logp_policy - token.logp_ref).exp());
            advantages.push(adv);
            supervised.push(*token);
        }
    }
    if supervised.is_empty() {
        return Err(GrpoError::NoSupervisedTokens);
    }
    let surrogate = clipped_surrogate(&ratios, &advantages, config.epsilon)?;
    Ok(surrogate - config.beta_kl * kl_penalty(&supervised))
}

/// Drop groups whose advantages carry no learning signal. The check uses the
/// unnormalized mean-baseline deviations so it is independent of std scaling.
pub fn filter_zero_advantage(group: RolloutGroup) -> Option<RolloutGroup> {
    let rewards: Vec<f64> = group.episodes.iter().map(|e| e.reward.total).collect();
    let raw = group_advantages(&rewards, false);
    let max_abs = raw.iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
    if max_abs < ZERO_ADVANTAGE_EPS {
        None
    } else {
        Some(group)
    }
}

// ── token-score side file ─────────────────────────────────────────────────────

/// One line of the token-score JSONL side file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenScoreRecord {
    pub episode_id: String,
    pub tokens: Vec<TokenScore>,
}

/// Load a token-score side file keyed by episode id.
pub fn load_token_scores(path: &Path) -> Result<BTreeMap<String, Vec<TokenScore>>, GrpoError> {
    let file = fs::File::open(path).map_err(|source| GrpoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut map = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GrpoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TokenScoreRecord =
            serde_json::from_str(&line).map_err(|source| GrpoError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        for (index, token) in record.tokens.iter().enumerate() {
            for value in [token.logp_policy, token.logp_ref] {
                if !value.is_finite() || value > 0.0 {
                    return Err(GrpoError::InvalidLogProb {
                        episode_id: record.episode_id.clone(),
                        index,
                        value,
                    });
                }
            }
        }
        map.insert(record.episode_id, record.tokens);
    }
    Ok(map)
}

/// Advantages for many groups at once.
pub fn batch_advantages(groups: &[Vec<f64>], normalize_std: bool) -> Vec<Vec<f64>> {
    crate::par::map_slice(groups, |rewards| group_advantages(rewards, normalize_std))
}

/// Sequential twin of [`batch_advantages`].
pub fn batch_advantages_seq(groups: &[Vec<f64>], normalize_std: bool) -> Vec<Vec<f64>> {
    groups
        .iter()
        .map(|rewards| group_advantages(rewards, normalize_std))
        .collect()
}
