//! Two-part verifiable reward: perception (accuracy, IoU, type) and behavior
//! (stepwise correctness, reference-tool diversity, tool-call efficiency).
//!
//! All operations are pure over plain data; episode transcripts are reduced to
//! [`EpisodeSummary`] before scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Bbox;
use crate::protocol::FinalAnswer;
use crate::sample::{Label, SampleRecord};

/// How the group diversity bonus is formed from the query rate `q`.
///
/// `Centered` is `lambda2 * (q - 1)`; `Raw` is `lambda2 * q`. The two differ
/// by a constant within a rollout group, so group-baseline advantages are
/// identical under either form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityForm {
    #[default]
    Centered,
    Raw,
}

/// Weights for every reward term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardCoefficients {
    /// Perception weight.
    pub alpha: f64,
    /// Behavior weight.
    pub beta_beh: f64,
    /// Type-match bonus.
    pub lambda_type: f64,
    /// Stepwise correctness weight.
    pub lambda1: f64,
    /// Reference-tool diversity weight.
    pub lambda2: f64,
    /// Tool-call efficiency penalty weight.
    pub lambda3: f64,
    /// Expected tool calls per step.
    pub n_bar: f64,
    /// IoU above this earns the full spatial bonus.
    pub iou_threshold: f64,
    /// Spatial reward paid above the threshold.
    pub iou_bonus: f64,
    pub diversity_form: DiversityForm,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_beh: 1.0,
            lambda_type: 0.3,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.05,
            n_bar: 1.0,
            iou_threshold: 0.5,
            iou_bonus: 1.0,
            diversity_form: DiversityForm::Centered,
        }
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward coefficients: {0}")]
    InvalidCoefficients(String),
}

impl RewardCoefficients {
    pub fn validate(&self) -> Result<(), RewardError> {
        let named = [
            ("alpha", self.alpha),
            ("beta_beh", self.beta_beh),
            ("lambda_type", self.lambda_type),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("n_bar", self.n_bar),
            ("iou_bonus", self.iou_bonus),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::InvalidCoefficients(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(RewardError::InvalidCoefficients(format!(
                "iou_threshold must lie in (0,1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    /// Diversity term shared by every step of a group's episodes.
    pub fn diversity(&self, query_rate: f64) -> f64 {
        match self.diversity_form {
            DiversityForm::Centered => self.lambda2 * (query_rate - 1.0),
            DiversityForm::Raw => self.lambda2 * query_rate,
        }
    }
}

/// Per-assistant-turn statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    /// Tool invocations requested at this step (all of them, executed or not).
    pub n_tool_calls: u32,
    /// `Some(correct)` when this step emitted an answer; `None` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emitted_answer: Option<bool>,
}

/// Everything the reward needs from one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: Vec<StepStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<FinalAnswer>,
    /// Normalized box of the last executed zoom crop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_bbox: Option<Bbox>,
    pub format_valid: bool,
}

/// Group statistics shared by every episode of a rollout group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Fraction of the group's episodes that executed the reference tool.
    pub query_rate: f64,
}

/// Full reward decomposition for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_iou: f64,
    pub r_type: f64,
    pub r_perc: f64,
    pub r_beh: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        Self {
            r_acc: 0.0,
            r_iou: 0.0,
            r_type: 0.0,
            r_perc: 0.0,
            r_beh: 0.0,
            total: 0.0,
        }
    }
}

// ── operations ────────────────────────────────────────────────────────────────

/// Intersection-over-union of two edge-ordered boxes. Zero-area unions yield 0.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    debug_assert!(a.is_ordered() && b.is_ordered());
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 1 iff the final answer is well-formed and its binary verdict matches the
/// ground truth.
pub fn accuracy_reward(summary: &EpisodeSummary, gt: &SampleRecord) -> f64 {
    let format_ok = summary.format_valid;
    let verdict_ok = summary
        .final_answer
        .as_ref()
        .is_some_and(|a| a.anomaly_present == gt.y_gt.is_anomalous());
    if format_ok && verdict_ok {
        1.0
    } else {
        0.0
    }
}

/// Graded spatial reward: full bonus above the threshold, the IoU itself
/// below it, 0 when either box is absent.
pub fn iou_reward(pred: Option<&Bbox>, gt: Option<&Bbox>, coeffs: &RewardCoefficients) -> f64 {
    match (pred, gt) {
        (Some(p), Some(g)) => {
            let v = iou(p, g);
            if v > coeffs.iou_threshold {
                coeffs.iou_bonus
            } else {
                v
            }
        }
        _ => 0.0,
    }
}

/// Type bonus for anomalous samples whose predicted defect label matches the
/// ground-truth type (case-insensitive, trimmed).
pub fn type_reward(
    summary: &EpisodeSummary,
    gt: &SampleRecord,
    coeffs: &RewardCoefficients,
) -> f64 {
    if gt.y_gt != Label::Anomalous {
        return 0.0;
    }
    let matches = match (&summary.final_answer, &gt.c_gt) {
        (Some(answer), Some(c_gt)) => answer
            .top_anomaly
            .trim()
            .eq_ignore_ascii_case(c_gt.trim()),
        _ => false,
    };
    if matches {
        coeffs.lambda_type
    } else {
        0.0
    }
}

/// Per-step mean of correctness, diversity, and efficiency terms. Steps that
/// emit no answer contribute nothing to the correctness term.
pub fn behavior_reward(steps: &[StepStat], query_rate: f64, coeffs: &RewardCoefficients) -> f64 {
    if steps.is_empty() {
        return 0.0;
    }
    let diversity = coeffs.diversity(query_rate);
    let sum: f64 = steps
        .iter()
        .map(|step| {
            let correctness = match step.emitted_answer {
                Some(true) => coeffs.lambda1,
                _ => 0.0,
            };
            let over_budget = (f64::from(step.n_tool_calls) - coeffs.n_bar).max(0.0);
            correctness + diversity - coeffs.lambda3 * over_budget
        })
        .sum();
    sum / steps.len() as f64
}

/// Assemble the full breakdown for one episode.
pub fn total_reward(
    summary: &EpisodeSummary,
    gt: &SampleRecord,
    group: &GroupStats,
    coeffs: &RewardCoefficients,
) -> RewardBreakdown {
    let r_acc = accuracy_reward(summary, gt);
    let r_iou = iou_reward(summary.pred_bbox.as_ref(), gt.gt_bbox.as_ref(), coeffs);
    let r_type = type_reward(summary, gt, coeffs);
    let r_beh = behavior_reward(&summary.steps, group.query_rate, coeffs);
    let r_perc = r_acc + r_iou + r_type;
    RewardBreakdown {
        r_acc,
        r_iou,
        r_type,
        r_perc,
        r_beh,
        total: coeffs.alpha * r_perc + coeffs.beta_beh * r_beh,
    }
}

/// Score a batch of episodes. Items are `(summary, ground truth, query rate)`.
pub fn score_batch(
    items: &[(EpisodeSummary, SampleRecord, f64)],
    coeffs: &RewardCoefficients,
) -> Vec<RewardBreakdown> {
    crate::par::map_slice(items, |(summary, gt, q)| {
        total_reward(summary, gt, &GroupStats { query_rate: *q }, coeffs)
    })
}

/// Sequential twin of [`score_batch`], kept for benchmarking and for builds
/// without the `parallel` feature.
pub fn score_batch_seq(
    items: &[(EpisodeSummary, SampleRecord, f64)],
    coeffs: &RewardCoefficients,
) -> Vec<RewardBreakdown> {
    items
        .iter()
        .map(|(summary, gt, q)| {
            total_reward(summary, gt, &GroupStats { query_rate: *q }, coeffs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Dataset;
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn gt(label: Label) -> SampleRecord {
        SampleRecord {
            id: "t".into(),
            dataset: Dataset::Synthetic,
            class_name: "widget".into(),
            image_path: "x.png".into(),
            y_gt: label,
            c_gt: (label == Label::Anomalous).then(|| "scratch".to_string()),
            mask_path: None,
            gt_bbox: (label == Label::Anomalous).then(|| Bbox::new(0.1, 0.1, 0.5, 0.5)),
        }
    }

    fn answered(correct_for: Label, top: &str) -> EpisodeSummary {
        EpisodeSummary {
            steps: vec![
                StepStat {
                    n_tool_calls: 1,
                    emitted_answer: None,
                },
                StepStat {
                    n_tool_calls: 0,
                    emitted_answer: Some(true),
                },
            ],
            final_answer: Some(match correct_for {
                Label::Normal => FinalAnswer::normal(),
                Label::Anomalous => FinalAnswer::anomalous(top, vec!["mark".into()]),
            }),
            pred_bbox: Some(Bbox::new(0.1, 0.1, 0.5, 0.5)),
            format_valid: true,
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = Bbox::new(0.1, 0.2, 0.6, 0.8);
        assert_eq!(iou(&a, &a), 1.0);
        let b = Bbox::new(0.0, 0.0, 0.4, 0.4);
        let c = Bbox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&b, &c), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let a = Bbox::new(0.0, 0.0, 0.5, 0.5);
        let b = Bbox::new(0.25, 0.25, 0.75, 0.75);
        let expected = 0.0625 / 0.4375;
        assert!((iou(&a, &b) - expected).abs() < TOL);
    }

    #[test]
    fn iou_degenerate_boxes_yield_zero() {
        let point = Bbox::new(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&point, &point), 0.0);
        let line = Bbox::new(0.1, 0.1, 0.1, 0.9);
        assert_eq!(iou(&line, &Bbox::new(0.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn accuracy_gates_on_format_and_polarity() {
        let sample = gt(Label::Anomalous);
        let ok = answered(Label::Anomalous, "scratch");
        assert_eq!(accuracy_reward(&ok, &sample), 1.0);

        let wrong = answered(Label::Normal, "");
        assert_eq!(accuracy_reward(&wrong, &sample), 0.0);

        let mut invalid = answered(Label::Anomalous, "scratch");
        invalid.format_valid = false;
        assert_eq!(accuracy_reward(&invalid, &sample), 0.0);
    }

    #[test]
    fn iou_reward_branches() {
        let coeffs = RewardCoefficients::default();
        let unit = Bbox::new(0.0, 0.0, 1.0, 1.0);
        let high = Bbox::new(0.0, 0.0, 1.0, 0.6);
        let low = Bbox::new(0.0, 0.0, 1.0, 0.3);
        let edge = Bbox::new(0.0, 0.0, 1.0, 0.5);
        assert_eq!(iou_reward(Some(&high), Some(&unit), &coeffs), 1.0);
        assert!((iou_reward(Some(&low), Some(&unit), &coeffs) - 0.3).abs() < TOL);
        assert!((iou_reward(Some(&edge), Some(&unit), &coeffs) - 0.5).abs() < TOL);
        assert_eq!(iou_reward(None, Some(&unit), &coeffs), 0.0);
        assert_eq!(iou_reward(Some(&high), None, &coeffs), 0.0);
    }

    #[test]
    fn type_reward_cases() {
        let coeffs = RewardCoefficients::default();
        assert!(
            (type_reward(&answered(Label::Anomalous, "scratch"), &gt(Label::Anomalous), &coeffs)
                - 0.3)
                .abs()
                < TOL
        );
        // Trimmed, case-insensitive match.
        assert!(
            (type_reward(
                &answered(Label::Anomalous, " Scratch "),
                &gt(Label::Anomalous),
                &coeffs
            ) - 0.3)
                .abs()
                < TOL
        );
        assert_eq!(
            type_reward(&answered(Label::Anomalous, "dent"), &gt(Label::Anomalous), &coeffs),
            0.0
        );
        assert_eq!(
            type_reward(&answered(Label::Normal, ""), &gt(Label::Normal), &coeffs),
            0.0
        );
    }

    #[test]
    fn behavior_reward_hand_cases() {
        let coeffs = RewardCoefficients::default();
        let step = |n, ans| StepStat {
            n_tool_calls: n,
            emitted_answer: ans,
        };
        assert!((behavior_reward(&[step(1, Some(true))], 1.0, &coeffs) - 1.0).abs() < TOL);
        assert!((behavior_reward(&[step(3, Some(true))], 1.0, &coeffs) - 0.9).abs() < TOL);
        assert!((behavior_reward(&[step(1, Some(false))], 0.0, &coeffs) - (-0.5)).abs() < TOL);
    }

    #[test]
    fn total_reward_hand_cases() {
        let coeffs = RewardCoefficients::default();
        let sample = gt(Label::Anomalous);
        let summary = EpisodeSummary {
            steps: vec![StepStat {
                n_tool_calls: 1,
                emitted_answer: Some(true),
            }],
            final_answer: Some(FinalAnswer::anomalous("scratch", vec!["mark".into()])),
            pred_bbox: Some(Bbox::new(0.1, 0.1, 0.5, 0.5)),
            format_valid: true,
        };
        let group = GroupStats { query_rate: 1.0 };
        let b = total_reward(&summary, &sample, &group, &coeffs);
        assert!((b.r_acc - 1.0).abs() < TOL);
        assert!((b.r_iou - 1.0).abs() < TOL);
        assert!((b.r_type - 0.3).abs() < TOL);
        assert!((b.r_beh - 1.0).abs() < TOL);
        assert!((b.total - 3.3).abs() < TOL);

        let scaled = RewardCoefficients {
            alpha: 2.0,
            ..coeffs
        };
        let b2 = total_reward(&summary, &sample, &group, &scaled);
        assert!((b2.total - 5.6).abs() < TOL);

        let empty = EpisodeSummary {
            steps: vec![StepStat {
                n_tool_calls: 0,
                emitted_answer: None,
            }],
            final_answer: None,
            pred_bbox: None,
            format_valid: false,
        };
        let b3 = total_reward(&empty, &gt(Label::Normal), &GroupStats { query_rate: 1.0 }, &coeffs);
        assert_eq!(b3.total, 0.0);
    }

    #[test]
    fn coefficient_validation() {
        assert!(RewardCoefficients::default().validate().is_ok());
        let bad = RewardCoefficients {
            lambda3: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad_threshold = RewardCoefficients {
            iou_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad_threshold.validate().is_err());
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        proptest::array::uniform4(0.0f64..=1.0).prop_map(|r| {
            Bbox::new(r[0].min(r[2]), r[1].min(r[3]), r[0].max(r[2]), r[1].max(r[3]))
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        // Holding all else fixed, more tool calls never increases the reward.
        #[test]
        fn efficiency_penalty_is_monotone(
            n in 0u32..10,
            extra in 1u32..5,
            q in 0.0f64..=1.0,
            correct in proptest::option::of(proptest::bool::ANY),
        ) {
            let coeffs = RewardCoefficients::default();
            let base = behavior_reward(&[StepStat { n_tool_calls: n, emitted_answer: correct }], q, &coeffs);
            let more = behavior_reward(&[StepStat { n_tool_calls: n + extra, emitted_answer: correct }], q, &coeffs);
            prop_assert!(more <= base + 1e-12);
        }

        // total == alpha * (acc + iou + type) + beta * beh, exactly as assembled.
        #[test]
        fn decomposition_identity(
            steps_n in proptest::collection::vec(0u32..5, 1..4),
            q in 0.0f64..=1.0,
            pred in proptest::option::of(arb_box()),
            valid in proptest::bool::ANY,
        ) {
            let coeffs = RewardCoefficients::default();
            let sample = gt(Label::Anomalous);
            let summary = EpisodeSummary {
                steps: steps_n.iter().map(|&n| StepStat { n_tool_calls: n, emitted_answer: None }).collect(),
                final_answer: Some(FinalAnswer::anomalous("scratch", vec![])),
                pred_bbox: pred,
                format_valid: valid,
            };
            let b = total_reward(&summary, &sample, &GroupStats { query_rate: q }, &coeffs);
            prop_assert!((b.r_perc - (b.r_acc + b.r_iou + b.r_type)).abs() < 1e-12);
            prop_assert!((b.total - (coeffs.alpha * b.r_perc + coeffs.beta_beh * b.r_beh)).abs() < 1e-12);
            prop_assert!(b.r_acc == 0.0 || b.r_acc == 1.0);
            prop_assert!((0.0..=1.0).contains(&b.r_iou));
            prop_assert!(b.r_type == 0.0 || (b.r_type - coeffs.lambda_type).abs() < 1e-12);
        }
    }
}
