//! Prompt templates for rollout and evaluation.
//!
//! The system prompt is assembled from a shared preamble, a mode-specific
//! tool-signature section, and the shared call-format instructions, so the
//! two modes differ only in the tools they expose.

pub(crate) const SYSTEM_PREAMBLE: &str = "\
You are a vision expert specialized in industrial anomaly detection.
You will evaluate whether the given object image is normal or abnormal. If abnormal, select the most fitting anomaly label from the candidate types provided by the user.
Output format:
<think>
Explain your visual reasoning.
</think>
<answer>
{\"anomaly_present\": true/false,
\"top_anomaly\": \"<label or 'none'>\",
\"visual_descriptions\": [\"...\"]}
</answer>
If normal \u{2192} anomaly_present=false, top_anomaly=\"none\", visual_descriptions=[].
If abnormal \u{2192} include concise visual phrases for visible cues.";

pub(crate) const CROP_TOOL_SIGNATURE: &str = "{\"type\": \"function\", \"function\": {\"name\": \"crop_image_normalized\", \"description\": \"Zoom in on the image based on the bounding box coordinates.\", \"parameters\": {\"type\": \"object\", \"properties\": {\"bbox_2d\": {\"type\": \"array\", \"description\": \"normalized coordinates for bounding box of the region you want to zoom in. Values should be within [0.0,1.0].\", \"items\": {\"type\": \"number\"}}, \"target_image\": {\"type\": \"number\", \"description\": \"The index of the image to crop. Index from 1 to the number of images. Choose 1 to operate on original image.\"}}, \"required\": [\"bbox_2d\", \"target_image\"]}}}";

pub(crate) const QUERY_TOOL_SIGNATURE: &str = "{\"type\": \"function\", \"function\": {\"name\": \"query_image\", \"description\": \"Retrieve a normal reference image of the same class for comparison. This function does not require any arguments.\", \"parameters\": {\"type\": \"object\", \"properties\": {}, \"required\": []}}}";

pub(crate) const CALL_FORMAT: &str = "\
For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{\"name\": <function-name>, \"arguments\": <args-json-object>}
</tool_call>";

pub(crate) const USER_PZ_ONLY: &str = "\
Evaluate the following image from the class {class_name}.
Candidate anomaly types:{anomaly_list}
Determine if the object is normal or abnormal. Follow the instruction and we can look closer by `crop_image_normalized`.
Reason with the visual information step by step, and output the final answer in the required XML format.";

pub(crate) const USER_PZ_CR: &str = "\
Evaluate the following image from the class {class_name}.
Candidate anomaly types:{anomaly_list}
Determine if the object is normal or abnormal. Follow the instruction and we can look closer by `crop_image_normalized`.
If, after inspecting the crop, the evidence is still insufficient, you may also call `query_image` to retrieve a normal reference image.

Reason with the visual information step by step, and output the final answer in the required XML format.";

/// Assemble the full system prompt for a tool section.
pub(crate) fn system_prompt(tool_signatures: &[&str]) -> String {
    let mut tools = String::new();
    for (i, sig) in tool_signatures.iter().enumerate() {
        if i > 0 {
            tools.push_str("\n\n");
        }
        tools.push_str(sig);
    }
    format!(
        "{SYSTEM_PREAMBLE}\n\n# Tools\nYou may call function to assist with the user query.\n\nYou are provided with function signatures within <tools></tools> XML tags:\n<tools>\n{tools}\n</tools>\n{CALL_FORMAT}"
    )
}
