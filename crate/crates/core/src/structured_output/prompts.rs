//! Prompt templates for the two rollout passes.

use super::ParseMode;

/// Placeholder replaced by the query (first pass) or the description (second pass).
pub const QUESTION_SLOT: &str = "{Question}";

/// First pass: think, description, answer.
pub const FIRST_PASS_TEMPLATE: &str = "Please find \"{Question}\" with bboxs and points.\n\
Compare the difference between object(s) and find the most closely matched object(s).\n\
Output the thinking process in <think> </think>, the explicit referring description for object localization in <description> </description>, and final answer in <answer> </answer> tags.\n\
Output the bbox(es) and point(s) inside the interested object(s) in JSON format.\n\
i.e., <think> thinking process here </think>\n\
<description> referring description here </description>\n\
<answer>[{\"bbox_2d\": [10,100,200,210], \"point_2d\": [30,110]}, {\"bbox_2d\": [225,296,706,786], \"point_2d\": [302,410]}]</answer>";

/// Second pass: the description takes the question slot and no description
/// tag is requested.
pub const SECOND_PASS_TEMPLATE: &str = "Please find \"{Question}\" with bboxs and points.\n\
Compare the difference between object(s) and find the most closely matched object(s).\n\
Output the thinking process in <think> </think> and final answer in <answer> </answer> tags.\n\
Output the bbox(es) and point(s) inside the interested object(s) in JSON format.\n\
i.e., <think> thinking process here </think>\n\
<answer>[{\"bbox_2d\": [10,100,200,210], \"point_2d\": [30,110]}, {\"bbox_2d\": [225,296,706,786], \"point_2d\": [302,410]}]</answer>";

pub fn first_pass_prompt(query: &str) -> String {
    FIRST_PASS_TEMPLATE.replacen(QUESTION_SLOT, query, 1)
}

pub fn second_pass_prompt(description: &str) -> String {
    SECOND_PASS_TEMPLATE.replacen(QUESTION_SLOT, description, 1)
}

/// Recovers the pass and the question text from a prompt built by
/// [`first_pass_prompt`] or [`second_pass_prompt`].
pub fn parse_prompt(prompt: &str) -> Option<(ParseMode, &str)> {
    for (mode, template) in [
        (ParseMode::FirstPass, FIRST_PASS_TEMPLATE),
        (ParseMode::SecondPass, SECOND_PASS_TEMPLATE),
    ] {
        let (head, tail) = template.split_once(QUESTION_SLOT)?;
        if let Some(rest) = prompt.strip_prefix(head) {
            if let Some(question) = rest.strip_suffix(tail) {
                return Some((mode, question));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_roundtrip() {
        let p = first_pass_prompt("the thing you drink from that is red");
        assert!(p.starts_with("Please find \"the thing you drink from that is red\" with bboxs and points."));
        assert_eq!(parse_prompt(&p), Some((ParseMode::FirstPass, "the thing you drink from that is red")));
        let p = second_pass_prompt("red cup");
        assert!(!p.contains("<description>"));
        assert_eq!(parse_prompt(&p), Some((ParseMode::SecondPass, "red cup")));
        assert_eq!(parse_prompt("hello"), None);
    }
}
