use super::ModelCard;
use crate::profiler::{StructureProfile, LABELS};

pub const SYSTEM_PROMPT: &str = "You are A-IDE, an intelligent agent that chooses one of three specialized RED-CNN denoising models given their descriptions and a semantic probability distribution over anatomical structures. Reply only Model 0, Model 1, or Model 2.";

pub const REPLY_ONLY: &str = "Reply only Model 0, Model 1, or Model 2";

const PER_LINE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

/// Renders probabilities (4 decimals, canonical label order, five per line)
/// and card descriptions into the fixed instruction template.
pub fn build_prompt(profile: &StructureProfile, cards: &[ModelCard]) -> Prompt {
    let entries: Vec<String> = LABELS
        .iter()
        .zip(&profile.probs)
        .map(|(l, p)| format!("{l}: {p:.4}"))
        .collect();
    let lines: Vec<String> = entries.chunks(PER_LINE).map(|c| c.join(", ")).collect();
    let mut user = String::from("Probability for each structure:\n");
    user.push_str(&lines.join(",\n"));
    user.push_str("\n\nAmong three models, only choose a single model that best suits for analysis. Be sure to choose only one.\n\nModel Descriptions:\n");
    for c in cards {
        user.push_str(&format!("- Model {}: {}\n", c.model_index.get(), c.description));
    }
    user.push('\n');
    user.push_str(REPLY_ONLY);
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        user,
    }
}
