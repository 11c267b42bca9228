//! Prompt templates for the generation, try-on and framing backends.
//!
//! Templates are emitted verbatim with placeholders filled; output is
//! byte-stable for identical input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design_space::{dim, DesignSpace, DesignVector, DIMENSION_COUNT};
use crate::elicitation::{Gender, UserProfile};
use crate::error::{Error, Result};

pub const GARMENT_PREAMBLE: &str = "An image of a clear master piece of real garment without a model, with a white background. There shouldn't a person or more than one garment in the image.";

/// Trigger word appended to stage-one training prompts.
pub const TRIGGER_WORD: &str = "real garment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Framing,
    Informed,
}

/// Renders the garment template. `slots[d]` is the text for dimension `d`.
fn garment_body(slots: &[String; DIMENSION_COUNT]) -> String {
    format!(
        "{GARMENT_PREAMBLE}\n\
         The garment is a {} featuring {} sleeves and a {} collar.\n\
         It is worn in a {} style and has a {} pattern in a {} arrangement.\n\
         The garment comes in a {} color scheme, with specific colors including {}. The material is {}.",
        slots[dim::TYPE],
        slots[dim::SLEEVE_LENGTH],
        slots[dim::COLLAR_SHAPE],
        slots[dim::WEARING_STYLE],
        slots[dim::PATTERN_STYLE],
        slots[dim::PATTERN_ARRANGEMENT],
        slots[dim::COLOR_CATEGORY],
        slots[dim::SPECIFIC_COLORS],
        slots[dim::MATERIAL],
    )
}

fn detail_sentence(dimension: &str, detail: &str) -> String {
    format!("For {dimension} part, with detailed descriptions of {detail}.")
}

/// Garment prompt for a complete design.
///
/// `detail` maps dimension names to free text and is required (non-empty) for
/// the informed stage; sentences are appended in canonical dimension order.
pub fn render_prompt(
    v: &DesignVector,
    stage: PromptStage,
    detail: &BTreeMap<String, String>,
) -> Result<String> {
    let slots = v.names().map(str::to_string);
    let mut out = garment_body(&slots);
    if stage == PromptStage::Informed {
        if detail.is_empty() {
            return Err(Error::MissingDetail);
        }
        let space = DesignSpace::canonical();
        let mut by_dim: BTreeMap<usize, &str> = BTreeMap::new();
        for (name, text) in detail {
            let d = space
                .dimension_index(name)
                .ok_or_else(|| Error::UnknownDimension(name.clone()))?;
            by_dim.insert(d, text.as_str());
        }
        for (d, text) in by_dim {
            out.push('\n');
            out.push_str(&detail_sentence(&space.dimension(d).name, text));
        }
    }
    Ok(out)
}

/// Template for a partially assembled design; unfilled slots stay as
/// `[Dimension]` placeholders.
pub fn render_partial(selection: &[Option<usize>; DIMENSION_COUNT]) -> String {
    let space = DesignSpace::canonical();
    let slots: [String; DIMENSION_COUNT] = std::array::from_fn(|d| match selection[d] {
        Some(a) if a < space.attribute_count(d) => space.dimension(d).attributes[a].name.clone(),
        _ => format!("[{}]", space.dimension(d).name),
    });
    garment_body(&slots)
}

/// Stage-one training caption: the framing prompt followed by the trigger word.
pub fn training_caption(v: &DesignVector) -> String {
    let mut caption = garment_body(&v.names().map(str::to_string));
    caption.push(' ');
    caption.push_str(TRIGGER_WORD);
    caption
}

fn format_measure(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.1}")
    }
}

/// Mannequin prompt for the try-on backend.
pub fn render_avatar_prompt(profile: &UserProfile) -> String {
    let (article, subj, subj_cap, poss, poss_cap) = match profile.gender {
        Gender::F => ("A woman", "she", "She", "her", "Her"),
        // Unspecified profiles are resolved to M or F before rendering.
        Gender::M | Gender::Unspecified => ("A man", "he", "He", "his", "His"),
    };
    let height = format_measure(profile.height_cm);
    let weight = format_measure(profile.weight_kg);
    format!(
        "{article}, {subj} is {height} in height (cm) and {weight} in weight (kg). \
         {subj_cap} is standing gracefully in the center of the frame. \
         {poss_cap} upper body is fully visible, wearing a short sleeve t-shirt with elegant details.\n\
         {subj_cap} has a gentle smile on {poss} face. The focus is on {poss} upper body, \
         with only a slight glimpse of {poss} trousers visible at the bottom of the frame.\n\
         Photographic Details:\n\
         The image is taken with a Canon EOS camera, using a SIGMA Art Lens 35mm F1.4, set at ISO 200 \
         and a shutter speed of 1/2000. The image captures every detail in stunning clarity and realism, \
         with a high-quality, cinematic feel.\n\
         The image is taken from the front side. {poss_cap} body should face towards the front. \
         It remains unobstructed in front of the body."
    )
}

/// Prompt asking a language model to polish a scene into a try-on background description.
pub fn render_scene_prompt(scene: &str) -> String {
    format!(
        "You are an expert at polishing text prompts. Based on the following task description, \
         refine and enhance the text to make it suitable for high-quality background generation.\n\
         Task:\n\
         I want to generate a high quality background for virtual try-on. The background should be \
         suitable for {scene} scene. Please help me polish my text prompt to make it suitable for \
         background generation.\n\
         Polished Prompt Example:\n\
         A vibrant and inviting spring scene. The backdrop should evoke the essence of warm spring days \
         with elements like clear blue skies, lush greenery, and gently swaying trees.\n\
         Instructions:\n\
         - Preserve the intent of the original task while enhancing clarity, vividness, and visual richness.\n\
         - Make the scene description evocative and suitable for AI-based background generation tools.\n\
         - Keep the language natural, descriptive, and concise."
    )
}

/// Per-dimension attribute filtering prompt for a language-model framing backend.
pub fn render_filter_prompt(
    dimension: &str,
    keep: usize,
    scene: &str,
    garment_type: &str,
    principle: &str,
) -> String {
    format!(
        "You are an expert at designing garments and matching different scenes. Based on the following \
         task description, refine and execute the filtering process with scene-appropriate reasoning.\n\
         Task:\n\
         I have a list of words describing {dimension} of a garment. I want to know which of these words \
         are suitable to wear in a specific scene with detailed descriptions. Please help me keep {keep} \
         words remained, which are suitable for a {scene} scene, a {garment_type} type, and a {principle} \
         principle.\n\
         Sample Response:\n\
         Based on the criteria you provided for a frozen winter day scene, here are the two most suitable options:\n\
         1. Hoodie: This option fits perfectly, especially for a frozen winter day attire. It is suitable for \
         casual wear and comfortable in cold weather.\n\
         2. Sweater: Considering frozen winter scene, a woolen sweater with a high collar can match the \
         description. You can find warm sweater in various styles, including those that can be worn in cold \
         conditions if styled appropriately.\n\
         These two options should fit your specified scenario and condition.\n\
         Instructions:\n\
         - Evaluate each word in the given list according to the specified scene, type, and design principle.\n\
         - Select and retain only the most relevant options based on contextual fit.\n\
         - Provide detailed justification for each retained word.\n\
         - Maintain a descriptive, professional tone with a clear focus on fashion suitability and practicality."
    )
}
