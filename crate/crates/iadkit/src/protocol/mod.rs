//! Wire protocol for agent turns.
//!
//! An assistant turn is free text carrying zero or more `<think>…</think>`
//! segments plus either `<tool_call>{JSON}</tool_call>` blocks or a single
//! `<answer>{JSON}</answer>` block. Parsing is tolerant: malformed input is
//! never an error, it is reported through `format_valid` and diagnostics.

mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Bbox;
use crate::sample::{Label, SampleRecord};

pub const CROP_TOOL_NAME: &str = "crop_image_normalized";
pub const QUERY_TOOL_NAME: &str = "query_image";

/// Which tools an episode may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolMode {
    PzOnly,
    PzCr,
}

impl std::fmt::Display for ToolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ToolMode::PzOnly => write!(f, "pz_only"),
            ToolMode::PzCr => write!(f, "pz_cr"),
        }
    }
}

/// A parsed agent action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToolCall {
    Crop { bbox: Bbox, target_image: u32 },
    QueryImage,
}

impl ToolCall {
    pub fn name(&self) -> &'static str {
        match self {
            ToolCall::Crop { .. } => CROP_TOOL_NAME,
            ToolCall::QueryImage => QUERY_TOOL_NAME,
        }
    }

    /// Edge ordering and a positive image index. Out-of-range coordinates are
    /// allowed here; clamping is the executor's job.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            ToolCall::Crop { bbox, target_image } => {
                if !bbox.is_ordered() {
                    return Err(ProtocolError::InvalidToolCall(format!(
                        "bbox edges out of order: {:?}",
                        bbox.as_array()
                    )));
                }
                if *target_image == 0 {
                    return Err(ProtocolError::InvalidToolCall(
                        "target_image must be >= 1".into(),
                    ));
                }
                Ok(())
            }
            ToolCall::QueryImage => Ok(()),
        }
    }
}

/// Terminal verdict emitted inside `<answer>…</answer>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub anomaly_present: bool,
    pub top_anomaly: String,
    pub visual_descriptions: Vec<String>,
}

impl FinalAnswer {
    pub fn normal() -> Self {
        Self {
            anomaly_present: false,
            top_anomaly: "none".to_string(),
            visual_descriptions: Vec::new(),
        }
    }

    pub fn anomalous(top: impl Into<String>, descriptions: Vec<String>) -> Self {
        Self {
            anomaly_present: true,
            top_anomaly: top.into(),
            visual_descriptions: descriptions,
        }
    }

    fn is_none_sentinel(s: &str) -> bool {
        s.trim().eq_ignore_ascii_case("none")
    }

    /// The normal-case field coupling: `false ⟹ "none" ⟹ empty list` and
    /// `true ⟹ top_anomaly ≠ "none"`.
    pub fn shape_ok(&self) -> bool {
        if self.anomaly_present {
            !Self::is_none_sentinel(&self.top_anomaly)
        } else {
            Self::is_none_sentinel(&self.top_anomaly) && self.visual_descriptions.is_empty()
        }
    }
}

/// One fully parsed assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub think_texts: Vec<String>,
    pub tool_calls: Vec<ToolCall>,
    pub answer: Option<FinalAnswer>,
    pub format_valid: bool,
    pub diagnostics: Vec<String>,
}

/// System + user prompt pair for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub mode: ToolMode,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid tool call: {0}")]
    InvalidToolCall(String),
    #[error("anomaly label list must be nonempty")]
    EmptyLabelList,
}

// ── tag extraction ────────────────────────────────────────────────────────────

/// Bodies of every `<tag>…</tag>` block, in order. Unterminated opens are
/// reported, not fatal.
fn extract_blocks(text: &str, tag: &str) -> (Vec<String>, Vec<String>) {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut bodies = Vec::new();
    let mut diagnostics = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(&open) {
        let start = cursor + rel + open.len();
        match text[start..].find(&close) {
            Some(rel_end) => {
                bodies.push(text[start..start + rel_end].to_string());
                cursor = start + rel_end + close.len();
            }
            None => {
                if tag == "answer" {
                    diagnostics.push("unterminated answer JSON".to_string());
                } else {
                    diagnostics.push(format!("unterminated <{tag}> block"));
                }
                break;
            }
        }
    }
    (bodies, diagnostics)
}

fn parse_bbox_value(v: &serde_json::Value) -> Result<Bbox, String> {
    let arr = v.as_array().ok_or("bbox_2d is not an array")?;
    if arr.len() != 4 {
        return Err(format!("bbox_2d has {} elements, want 4", arr.len()));
    }
    let mut coords = [0.0; 4];
    for (i, item) in arr.iter().enumerate() {
        coords[i] = item
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("bbox_2d[{i}] is not a finite number"))?;
    }
    Ok(Bbox::from(coords))
}

fn parse_tool_call_json(body: &str) -> Result<ToolCall, String> {
    let value: serde_json::Value =
        serde_json::from_str(body.trim()).map_err(|e| format!("tool call JSON: {e}"))?;
    let obj = value.as_object().ok_or("tool call is not a JSON object")?;
    let name = obj
        .get("name")
        .and_then(|n| n.as_str())
        .ok_or("tool call missing string \"name\"")?;
    let args = match obj.get("arguments") {
        Some(a) => a
            .as_object()
            .ok_or("\"arguments\" is not a JSON object")?
            .clone(),
        None => serde_json::Map::new(),
    };
    match name {
        CROP_TOOL_NAME => {
            let bbox = parse_bbox_value(args.get("bbox_2d").ok_or("crop call missing bbox_2d")?)?;
            let target = args
                .get("target_image")
                .ok_or("crop call missing target_image")?;
            let target_image = target
                .as_u64()
                .or_else(|| {
                    target
                        .as_f64()
                        .filter(|f| f.fract() == 0.0 && *f >= 0.0)
                        .map(|f| f as u64)
                })
                .ok_or("target_image is not a nonnegative integer")?;
            let target_image =
                u32::try_from(target_image).map_err(|_| "target_image out of range")?;
            let call = ToolCall::Crop { bbox, target_image };
            call.validate().map_err(|e| e.to_string())?;
            Ok(call)
        }
        QUERY_TOOL_NAME => {
            if !args.is_empty() {
                return Err("query_image takes no arguments".to_string());
            }
            Ok(ToolCall::QueryImage)
        }
        other => Err(format!("unknown tool \"{other}\"")),
    }
}

fn parse_answer_json(body: &str) -> Result<FinalAnswer, String> {
    let value: serde_json::Value =
        serde_json::from_str(body.trim()).map_err(|e| format!("answer JSON: {e}"))?;
    let obj = value.as_object().ok_or("answer is not a JSON object")?;
    let anomaly_present = obj
        .get("anomaly_present")
        .and_then(|v| v.as_bool())
        .ok_or("answer missing boolean \"anomaly_present\"")?;
    let top_anomaly = obj
        .get("top_anomaly")
        .and_then(|v| v.as_str())
        .ok_or("answer missing string \"top_anomaly\"")?
        .to_string();
    let descriptions = obj
        .get("visual_descriptions")
        .and_then(|v| v.as_array())
        .ok_or("answer missing array \"visual_descriptions\"")?;
    let mut visual_descriptions = Vec::with_capacity(descriptions.len());
    for (i, d) in descriptions.iter().enumerate() {
        visual_descriptions.push(
            d.as_str()
                .ok_or_else(|| format!("visual_descriptions[{i}] is not a string"))?
                .to_string(),
        );
    }
    let answer = FinalAnswer {
        anomaly_present,
        top_anomaly,
        visual_descriptions,
    };
    if !answer.shape_ok() {
        return Err(if answer.anomaly_present {
            "anomalous answer must name a defect type".to_string()
        } else {
            "normal answer must use top_anomaly \"none\" and no descriptions".to_string()
        });
    }
    Ok(answer)
}

// ── operations ────────────────────────────────────────────────────────────────

/// Parse raw model output into structured content. Never fails: malformed
/// input yields `format_valid = false` with best-effort partial content.
pub fn parse_assistant_turn(text: &str) -> ParsedTurn {
    let mut diagnostics = Vec::new();

    let (think_bodies, think_diags) = extract_blocks(text, "think");
    diagnostics.extend(think_diags);
    let think_texts: Vec<String> = think_bodies.iter().map(|b| b.trim().to_string()).collect();

    let (tool_bodies, tool_diags) = extract_blocks(text, "tool_call");
    let tool_tags_ok = tool_diags.is_empty();
    diagnostics.extend(tool_diags);

    let mut tool_calls = Vec::new();
    let mut tools_json_ok = true;
    for body in &tool_bodies {
        match parse_tool_call_json(body) {
            Ok(call) => tool_calls.push(call),
            Err(diag) => {
                tools_json_ok = false;
                diagnostics.push(diag);
            }
        }
    }
    if tool_calls.len() > 1 {
        diagnostics.push(format!("{} tool calls in one turn", tool_calls.len()));
    }

    let (answer_bodies, answer_diags) = extract_blocks(text, "answer");
    let answer_tags_ok = answer_diags.is_empty();
    diagnostics.extend(answer_diags);

    let mut answer = None;
    let mut answer_json_ok = true;
    if answer_bodies.len() > 1 {
        answer_json_ok = false;
        diagnostics.push(format!("{} answer blocks in one turn", answer_bodies.len()));
    }
    if let Some(body) = answer_bodies.first() {
        match parse_answer_json(body) {
            Ok(a) => answer = Some(a),
            Err(diag) => {
                answer_json_ok = false;
                diagnostics.push(diag);
            }
        }
    }

    let json_ok = tool_tags_ok && tools_json_ok && answer_tags_ok && answer_json_ok;
    let has_tools = !tool_calls.is_empty();
    let has_answer = answer.is_some() || !answer_bodies.is_empty() || !answer_tags_ok;
    let exclusive = has_tools != has_answer;
    if has_tools && has_answer {
        diagnostics.push("turn contains both a tool call and an answer".to_string());
    } else if !has_tools && !has_answer && json_ok {
        diagnostics.push("no tool call or answer found".to_string());
    }

    ParsedTurn {
        think_texts,
        tool_calls,
        answer,
        format_valid: json_ok && exclusive,
        diagnostics,
    }
}

#[derive(Serialize)]
struct CropWire {
    name: &'static str,
    arguments: CropArgs,
}

#[derive(Serialize)]
struct CropArgs {
    bbox_2d: [f64; 4],
    target_image: u32,
}

#[derive(Serialize)]
struct QueryWire {
    name: &'static str,
    arguments: EmptyArgs,
}

#[derive(Serialize)]
struct EmptyArgs {}

/// Emit the exact wire form. `parse_assistant_turn(render_tool_call(c))`
/// recovers `c`.
pub fn render_tool_call(call: &ToolCall) -> Result<String, ProtocolError> {
    call.validate()?;
    let body = match call {
        ToolCall::Crop { bbox, target_image } => serde_json::to_string(&CropWire {
            name: CROP_TOOL_NAME,
            arguments: CropArgs {
                bbox_2d: bbox.as_array(),
                target_image: *target_image,
            },
        }),
        ToolCall::QueryImage => serde_json::to_string(&QueryWire {
            name: QUERY_TOOL_NAME,
            arguments: EmptyArgs {},
        }),
    }
    .expect("wire structs serialize infallibly");
    Ok(format!("<tool_call>{body}</tool_call>"))
}

/// Render a terminal `<answer>` block.
pub fn render_answer(answer: &FinalAnswer) -> String {
    format!(
        "<answer>{}</answer>",
        serde_json::to_string(answer).expect("answer serializes infallibly")
    )
}

/// True iff the turn is a well-formed answer whose binary verdict matches the
/// ground truth. An invalid format fails regardless of polarity.
pub fn validate_answer(turn: &ParsedTurn, gt: &SampleRecord) -> bool {
    if !turn.format_valid {
        return false;
    }
    match &turn.answer {
        Some(answer) => answer.anomaly_present == (gt.y_gt == Label::Anomalous),
        None => false,
    }
}

/// Construct the system/user prompt pair for one sample class.
pub fn build_prompts(
    class_name: &str,
    anomaly_labels: &[String],
    mode: ToolMode,
) -> Result<PromptBundle, ProtocolError> {
    if anomaly_labels.is_empty() {
        return Err(ProtocolError::EmptyLabelList);
    }
    let system_text = match mode {
        ToolMode::PzOnly => templates::system_prompt(&[templates::CROP_TOOL_SIGNATURE]),
        ToolMode::PzCr => templates::system_prompt(&[
            templates::CROP_TOOL_SIGNATURE,
            templates::QUERY_TOOL_SIGNATURE,
        ]),
    };
    let user_template = match mode {
        ToolMode::PzOnly => templates::USER_PZ_ONLY,
        ToolMode::PzCr => templates::USER_PZ_CR,
    };
    let user_text = user_template
        .replace("{class_name}", class_name)
        .replace("{anomaly_list}", &anomaly_labels.join(", "));
    Ok(PromptBundle {
        system_text,
        user_text,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Dataset;
    use proptest::prelude::*;

    fn gt(label: Label) -> SampleRecord {
        SampleRecord {
            id: "t".into(),
            dataset: Dataset::Synthetic,
            class_name: "bottle".into(),
            image_path: "x.png".into(),
            y_gt: label,
            c_gt: (label == Label::Anomalous).then(|| "scratch".to_string()),
            mask_path: None,
            gt_bbox: (label == Label::Anomalous).then(|| Bbox::new(0.1, 0.1, 0.2, 0.2)),
        }
    }

    #[test]
    fn parses_think_and_crop_call() {
        let text = r#"<think>zoom</think><tool_call>{"name":"crop_image_normalized","arguments":{"bbox_2d":[0.2,0.3,0.6,0.7],"target_image":1}}</tool_call>"#;
        let turn = parse_assistant_turn(text);
        assert_eq!(turn.think_texts, vec!["zoom"]);
        assert_eq!(
            turn.tool_calls,
            vec![ToolCall::Crop {
                bbox: Bbox::new(0.2, 0.3, 0.6, 0.7),
                target_image: 1
            }]
        );
        assert!(turn.answer.is_none());
        assert!(turn.format_valid, "diags: {:?}", turn.diagnostics);
    }

    #[test]
    fn parses_normal_answer() {
        let text = r#"<think>ok</think><answer>{"anomaly_present": false, "top_anomaly": "none", "visual_descriptions": []}</answer>"#;
        let turn = parse_assistant_turn(text);
        assert_eq!(turn.answer, Some(FinalAnswer::normal()));
        assert!(turn.format_valid);
    }

    #[test]
    fn truncated_answer_is_flagged_not_fatal() {
        let turn = parse_assistant_turn(r#"<answer>{"anomaly_present": tru"#);
        assert!(!turn.format_valid);
        assert!(turn
            .diagnostics
            .iter()
            .any(|d| d.contains("unterminated answer JSON")));
    }

    #[test]
    fn whitespace_inside_json_is_insignificant() {
        let text = "<tool_call>\n{\"name\": \"crop_image_normalized\",\n \"arguments\": \n{\"bbox_2d\": [0.2, 0.3, 0.6, 0.7], \n\"target_image\": 1}}\n</tool_call>";
        let turn = parse_assistant_turn(text);
        assert!(turn.format_valid, "diags: {:?}", turn.diagnostics);
        assert_eq!(turn.tool_calls.len(), 1);
    }

    #[test]
    fn surrounding_prose_is_ignored() {
        let text = "Sure, let me inspect.\n<tool_call>{\"name\":\"query_image\",\"arguments\":{}}</tool_call>\nDone.";
        let turn = parse_assistant_turn(text);
        assert!(turn.format_valid);
        assert_eq!(turn.tool_calls, vec![ToolCall::QueryImage]);
    }

    #[test]
    fn both_tool_and_answer_is_invalid() {
        let text = r#"<tool_call>{"name":"query_image","arguments":{}}</tool_call><answer>{"anomaly_present": false, "top_anomaly": "none", "visual_descriptions": []}</answer>"#;
        let turn = parse_assistant_turn(text);
        assert!(!turn.format_valid);
        assert_eq!(turn.tool_calls.len(), 1);
        assert!(turn.answer.is_some());
    }

    #[test]
    fn multiple_tool_calls_parse_in_order_but_are_flagged() {
        let text = r#"<tool_call>{"name":"crop_image_normalized","arguments":{"bbox_2d":[0,0,1,1],"target_image":1}}</tool_call><tool_call>{"name":"query_image","arguments":{}}</tool_call>"#;
        let turn = parse_assistant_turn(text);
        assert!(turn.format_valid);
        assert_eq!(turn.tool_calls.len(), 2);
        assert!(turn.diagnostics.iter().any(|d| d.contains("2 tool calls")));
    }

    #[test]
    fn missing_answer_key_fails_format() {
        let text = r#"<answer>{"anomaly_present": false, "visual_descriptions": []}</answer>"#;
        let turn = parse_assistant_turn(text);
        assert!(!turn.format_valid);
        assert!(turn.answer.is_none());
    }

    #[test]
    fn extra_answer_keys_are_ignored() {
        let text = r#"<answer>{"anomaly_present": false, "top_anomaly": "none", "visual_descriptions": [], "confidence": 0.9}</answer>"#;
        let turn = parse_assistant_turn(text);
        assert!(turn.format_valid);
    }

    #[test]
    fn answer_shape_coupling_is_enforced() {
        let bad_normal = r#"<answer>{"anomaly_present": false, "top_anomaly": "scratch", "visual_descriptions": []}</answer>"#;
        assert!(!parse_assistant_turn(bad_normal).format_valid);
        let bad_anomalous = r#"<answer>{"anomaly_present": true, "top_anomaly": "none", "visual_descriptions": ["x"]}</answer>"#;
        assert!(!parse_assistant_turn(bad_anomalous).format_valid);
    }

    #[test]
    fn unordered_bbox_fails_parse_validation() {
        let text = r#"<tool_call>{"name":"crop_image_normalized","arguments":{"bbox_2d":[0.6,0.3,0.2,0.7],"target_image":1}}</tool_call>"#;
        let turn = parse_assistant_turn(text);
        assert!(!turn.format_valid);
        assert!(turn.tool_calls.is_empty());
    }

    #[test]
    fn render_matches_wire_format_exactly() {
        let crop = ToolCall::Crop {
            bbox: Bbox::new(0.0, 0.0, 1.0, 1.0),
            target_image: 1,
        };
        assert_eq!(
            render_tool_call(&crop).unwrap(),
            r#"<tool_call>{"name":"crop_image_normalized","arguments":{"bbox_2d":[0.0,0.0,1.0,1.0],"target_image":1}}</tool_call>"#
        );
        assert_eq!(
            render_tool_call(&ToolCall::QueryImage).unwrap(),
            r#"<tool_call>{"name":"query_image","arguments":{}}</tool_call>"#
        );
    }

    #[test]
    fn render_rejects_unordered_bbox() {
        let call = ToolCall::Crop {
            bbox: Bbox::new(0.9, 0.0, 0.1, 1.0),
            target_image: 1,
        };
        assert!(render_tool_call(&call).is_err());
    }

    #[test]
    fn validate_answer_gates_on_format_and_polarity() {
        let ok = parse_assistant_turn(
            r#"<answer>{"anomaly_present": true, "top_anomaly": "scratch", "visual_descriptions": ["mark"]}</answer>"#,
        );
        assert!(validate_answer(&ok, &gt(Label::Anomalous)));
        assert!(!validate_answer(&ok, &gt(Label::Normal)));

        let invalid = parse_assistant_turn(r#"<answer>{"anomaly_present": false, "visual_descriptions": []}</answer>"#);
        assert!(!validate_answer(&invalid, &gt(Label::Normal)));
    }

    #[test]
    fn prompt_modes_expose_the_right_tools() {
        let labels = vec!["broken_large".to_string(), "contamination".to_string()];
        let pz = build_prompts("bottle", &labels, ToolMode::PzOnly).unwrap();
        assert!(pz.system_text.contains(CROP_TOOL_NAME));
        assert!(!pz.system_text.contains(QUERY_TOOL_NAME));
        assert!(!pz.user_text.contains(QUERY_TOOL_NAME));
        assert!(pz.user_text.contains("the class bottle"));
        assert!(pz
            .user_text
            .contains("Candidate anomaly types:broken_large, contamination"));

        let cr = build_prompts("bottle", &labels, ToolMode::PzCr).unwrap();
        assert!(cr.system_text.contains(CROP_TOOL_NAME));
        assert!(cr.system_text.contains(QUERY_TOOL_NAME));
        assert!(cr
            .user_text
            .contains("to retrieve a normal reference image"));

        assert!(build_prompts("bottle", &[], ToolMode::PzOnly).is_err());
    }

    #[test]
    fn prompts_are_pure() {
        let labels = vec!["dent".to_string()];
        let a = build_prompts("cap", &labels, ToolMode::PzCr).unwrap();
        let b = build_prompts("cap", &labels, ToolMode::PzCr).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        // Round-trip identity over random valid calls.
        #[test]
        fn render_parse_round_trip(
            is_crop in proptest::bool::ANY,
            raw in proptest::array::uniform4(0.0f64..=1.0),
            target in 1u32..=8,
        ) {
            let call = if is_crop {
                let bbox = Bbox::new(
                    raw[0].min(raw[2]),
                    raw[1].min(raw[3]),
                    raw[0].max(raw[2]),
                    raw[1].max(raw[3]),
                );
                ToolCall::Crop { bbox, target_image: target }
            } else {
                ToolCall::QueryImage
            };
            let wire = render_tool_call(&call).unwrap();
            let turn = parse_assistant_turn(&wire);
            prop_assert!(turn.format_valid, "diags: {:?}", turn.diagnostics);
            prop_assert_eq!(turn.tool_calls, vec![call]);
        }

        // A valid turn never carries both tool calls and an answer.
        #[test]
        fn exclusivity_holds_on_arbitrary_text(text in ".{0,200}") {
            let turn = parse_assistant_turn(&text);
            if turn.format_valid {
                prop_assert!(turn.tool_calls.is_empty() != turn.answer.is_none());
            }
        }
    }
}
