//! Prompt templates for supervised trajectory construction.
//!
//! Placeholders: `{class_name}`, `{anomaly_type}`, `{bbox_coords}`, and
//! `{anomalies_str}`. Ground truth is injected on purpose — the endpoint
//! writes reasoning that must agree with it.

pub(crate) const ROI_PROPOSAL_USER: &str = "\
This is a normal {class_name} image without any defects.
However, I need you to identify ONE region in this image that you would focus on when verifying it is normal. Choose a region where defects are most likely to occur or that typically requires careful inspection.
Please output ONLY the normalized bounding box coordinates in the format:
[x_min, y_min, x_max, y_max]
All values must be between 0 and 1, representing proportions of the image dimensions:
- x_min: left edge (0 = left, 1 = right)
- y_min: top edge (0 = top, 1 = bottom)
- x_max: right edge
- y_max: bottom edge
Example: [0.2, 0.3, 0.6, 0.7]
Output ONLY the bbox coordinates, nothing else.";

pub(crate) const GLOBAL_REASONING_SYSTEM: &str = "\
You are a vision expert specialized in industrial anomaly detection.
You will evaluate whether the given object image is normal or abnormal. You have access to both the original image and a region-of-interest (ROI) image that highlights potential anomaly areas.
Explain why you need to examine this ROI region - what caught your attention in the original image that led you to focus on this area, but DO NOT mention the ROI image in your explanation.

ATTENTION: GT ANSWER IS PROVIDED IN THE QUESTION, YOU SHOULD FOLLOW IT.";

pub(crate) const GLOBAL_REASONING_USER_ABNORMAL: &str = "\
Ground Truth Information:
- Class: {class_name}
- Status: ABNORMAL (defective)
- Specific anomaly type: {anomaly_type}

IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be ABNORMAL with the specific anomaly type {anomaly_type}. Please identify and describe the visual evidence that explain why you need to examine this ROI region.

ROI normalized bbox: {bbox_coords}";

pub(crate) const GLOBAL_REASONING_USER_NORMAL: &str = "\
Ground Truth Information:
- Class: {class_name}
- Status: NORMAL (no defects)

IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be NORMAL with no defects. Please identify and describe the visual evidence that explain why you need to examine this ROI region.

ROI normalized bbox: {bbox_coords}";

pub(crate) const LOCAL_REASONING_SYSTEM: &str = "\
You are a vision expert specialized in industrial anomaly detection.

You will evaluate whether the given object image is normal or abnormal. You have access to both the original image and a region-of-interest (ROI) image that highlights potential anomaly areas. If abnormal, select the most fitting anomaly label from the candidate types provided by the user.

Output format:
<think>
Explain your visual reasoning, considering both the original image and the ROI information.
</think>
<answer>
{\"anomaly_present\": true/false,
\"top_anomaly\": \"<label or 'none'>\",
\"visual_descriptions\": [\"...\"]}
</answer>

Guidelines:
- In <think>: Provide detailed analysis of what you observe in both images.
- If normal \u{2192} anomaly_present=false, top_anomaly=\"none\", visual_descriptions=[].
- If abnormal \u{2192} include concise visual phrases for visible cues.

ATTENTION: GT ANSWER IS PROVIDED IN THE QUESTION, YOU SHOULD FOLLOW IT.";

pub(crate) const LOCAL_REASONING_USER_ABNORMAL: &str = "\
Ground Truth Information:
- Class: {class_name}
- Status: ABNORMAL (defective)
- Specific anomaly type: {anomaly_type}

IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be ABNORMAL with the specific anomaly type {anomaly_type}. Please identify and describe the visual evidence that supports this classification.

ROI normalized bbox: {bbox_coords}";

pub(crate) const LOCAL_REASONING_USER_NORMAL: &str = "\
Ground Truth Information:
- Class: {class_name}
- Status: NORMAL (no defects)

IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be NORMAL with no defects. Please confirm this by describing why the object appears normal and free from anomalies.

ROI normalized bbox: {bbox_coords}";

pub(crate) const COMPARATIVE_REASONING_SYSTEM: &str = "\
You are an industrial anomaly analysis expert.

You will review images of manufactured products and explain the visual evidence that supports the provided ground truth. Focus strictly on verifiable cues visible in the images. Describe contrasts between the target image (with ROI) and the normal reference.

Do not output any final classification or prediction\u{2014}only deliver the reasoning narrative.";

pub(crate) const COMPARATIVE_REASONING_USER_ABNORMAL: &str = "\
Class: {class_name}

You will receive three images in order:
(1) the full target image,
(2) the cropped ROI highlighting a potential anomaly,
(3) a normal reference image from the same class.

Candidate anomaly types:{anomalies_str}
Ground truth: the sample is ABNORMAL.
Anomaly type: {anomaly_type}
ROI normalized bbox: {bbox_coords}

Explain the concrete visual cues within the ROI that deviate from the normal reference and justify the provided anomaly type.

Describe only the reasoning process, using concise sentences or bullet points referencing observable evidence.";

pub(crate) const COMPARATIVE_REASONING_USER_NORMAL: &str = "\
Class: {class_name}

You will receive three images in order:
(1) the full target image,
(2) the cropped ROI highlighting a potential anomaly,
(3) a normal reference image from the same class.

Candidate anomaly types:{anomalies_str}
Ground truth: the sample is NORMAL.
Anomaly type: none
ROI normalized bbox: {bbox_coords}

Explain the concrete visual cues within the ROI that deviate from the normal reference and justify the provided anomaly type.

Describe only the reasoning process, using concise sentences or bullet points referencing observable evidence.";
