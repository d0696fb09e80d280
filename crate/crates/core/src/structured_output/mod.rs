//! Tagged response format: `<think>`, optional `<description>`, `<answer>`.
//!
//! The answer payload is a JSON list of `{"bbox_2d": [x1, y1, x2, y2],
//! "point_2d": [x, y]}` objects in pixel coordinates.

mod prompts;
mod tokenizer;

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{Bbox, Point};

pub use prompts::{
    first_pass_prompt, parse_prompt, second_pass_prompt, FIRST_PASS_TEMPLATE, QUESTION_SLOT,
    SECOND_PASS_TEMPLATE,
};
pub use tokenizer::{count_tokens, split_sentences, Tokenizer, WhitespacePunctTokenizer};

/// Which pass produced the text; decides whether `<description>` is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    FirstPass,
    SecondPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    ThinkOpen,
    ThinkClose,
    DescriptionOpen,
    DescriptionClose,
    AnswerOpen,
    AnswerClose,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::ThinkOpen,
        Tag::ThinkClose,
        Tag::DescriptionOpen,
        Tag::DescriptionClose,
        Tag::AnswerOpen,
        Tag::AnswerClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::ThinkOpen => "<think>",
            Tag::ThinkClose => "</think>",
            Tag::DescriptionOpen => "<description>",
            Tag::DescriptionClose => "</description>",
            Tag::AnswerOpen => "<answer>",
            Tag::AnswerClose => "</answer>",
        }
    }

    fn sequence(mode: ParseMode) -> &'static [Tag] {
        match mode {
            ParseMode::FirstPass => &Tag::ALL,
            ParseMode::SecondPass => &[Tag::ThinkOpen, Tag::ThinkClose, Tag::AnswerOpen, Tag::AnswerClose],
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing tag {tag}")]
    MissingTag { tag: Tag },
    #[error("tag order violation: expected {expected} but found {found} at byte {offset}")]
    TagOrderViolation { expected: Tag, found: Tag, offset: usize },
    #[error("duplicated tag {tag} at byte {offset}")]
    DuplicateTag { tag: Tag, offset: usize },
    #[error("tag {tag} is not allowed in this pass (byte {offset})")]
    UnexpectedTag { tag: Tag, offset: usize },
    #[error("text outside tags at byte {offset}")]
    StrayText { offset: usize },
    #[error("malformed JSON answer: {message}")]
    MalformedJson { message: String },
    #[error("invalid box at answer index {index}: {reason}")]
    InvalidBox { index: usize, reason: String },
}

/// One object: bounding box plus a point on the object, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnswer {
    #[serde(rename = "bbox_2d")]
    pub bbox: Bbox,
    #[serde(rename = "point_2d")]
    pub point: Point,
}

impl ObjectAnswer {
    pub fn new(bbox: Bbox, point: Point) -> Self {
        Self { bbox, point }
    }
}

/// Byte ranges of each tag's content within the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub think: Range<usize>,
    pub description: Option<Range<usize>>,
    pub answer: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub think: String,
    pub description: Option<String>,
    pub answer_raw: String,
    pub answers: Vec<ObjectAnswer>,
    pub spans: Spans,
}

impl StructuredResponse {
    /// Equality on the parsed content, ignoring spans and raw JSON spacing.
    pub fn same_content(&self, other: &StructuredResponse) -> bool {
        self.think == other.think && self.description == other.description && self.answers == other.answers
    }
}

/// Optional validation context for [`parse_response_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// When set, every point must lie inside `[0, w] x [0, h]`.
    pub image_size: Option<(f64, f64)>,
}

pub fn parse_response(text: &str, mode: ParseMode) -> Result<StructuredResponse, ParseError> {
    parse_response_with(text, mode, &ParseOptions::default())
}

pub fn parse_response_with(
    text: &str,
    mode: ParseMode,
    options: &ParseOptions,
) -> Result<StructuredResponse, ParseError> {
    let sequence = Tag::sequence(mode);
    let mut found = Vec::with_capacity(sequence.len());
    let mut pos = 0;
    for (idx, &expected) in sequence.iter().enumerate() {
        let Some((at, tag)) = next_tag(text, pos) else {
            return Err(ParseError::MissingTag { tag: expected });
        };
        if tag != expected {
            return Err(misplaced(text, sequence, idx, at, tag));
        }
        found.push(at);
        pos = at + tag.as_str().len();
    }
    if let Some((at, tag)) = next_tag(text, pos) {
        return Err(if sequence.contains(&tag) {
            ParseError::DuplicateTag { tag, offset: at }
        } else {
            ParseError::UnexpectedTag { tag, offset: at }
        });
    }

    // Content ranges sit between each open/close pair; everything between
    // pairs must be whitespace.
    let mut ranges = Vec::with_capacity(sequence.len() / 2);
    let mut outside_from = 0;
    for pair in 0..sequence.len() / 2 {
        let open_at = found[2 * pair];
        let close_at = found[2 * pair + 1];
        check_whitespace(text, outside_from, open_at)?;
        ranges.push(open_at + sequence[2 * pair].as_str().len()..close_at);
        outside_from = close_at + sequence[2 * pair + 1].as_str().len();
    }
    check_whitespace(text, outside_from, text.len())?;

    let (think, description, answer) = match mode {
        ParseMode::FirstPass => (ranges[0].clone(), Some(ranges[1].clone()), ranges[2].clone()),
        ParseMode::SecondPass => (ranges[0].clone(), None, ranges[1].clone()),
    };
    let answer_raw = text[answer.clone()].to_string();
    let answers = parse_answers(&answer_raw, options)?;
    Ok(StructuredResponse {
        think: text[think.clone()].to_string(),
        description: description.as_ref().map(|r| text[r.clone()].to_string()),
        answer_raw,
        answers,
        spans: Spans {
            think,
            description,
            answer,
        },
    })
}

fn next_tag(text: &str, from: usize) -> Option<(usize, Tag)> {
    text[from..].match_indices('<').find_map(|(i, _)| {
        let at = from + i;
        Tag::ALL
            .iter()
            .find(|t| text[at..].starts_with(t.as_str()))
            .map(|&t| (at, t))
    })
}

fn misplaced(text: &str, sequence: &[Tag], idx: usize, at: usize, tag: Tag) -> ParseError {
    let expected = sequence[idx];
    if sequence[..idx].contains(&tag) {
        ParseError::DuplicateTag { tag, offset: at }
    } else if !sequence.contains(&tag) {
        ParseError::UnexpectedTag { tag, offset: at }
    } else if text[at..].contains(expected.as_str()) {
        ParseError::TagOrderViolation {
            expected,
            found: tag,
            offset: at,
        }
    } else {
        ParseError::MissingTag { tag: expected }
    }
}

fn check_whitespace(text: &str, from: usize, to: usize) -> Result<(), ParseError> {
    match text[from..to].char_indices().find(|(_, c)| !c.is_whitespace()) {
        Some((i, _)) => Err(ParseError::StrayText { offset: from + i }),
        None => Ok(()),
    }
}

/// Parses the JSON answer payload into validated objects.
pub fn parse_answers(raw: &str, options: &ParseOptions) -> Result<Vec<ObjectAnswer>, ParseError> {
    let malformed = |message: String| ParseError::MalformedJson { message };
    let value: Value = serde_json::from_str(raw.trim()).map_err(|e| malformed(e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(malformed("expected a JSON array".into()));
    };
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let obj = item
                .as_object()
                .ok_or_else(|| malformed(format!("element {index} is not an object")))?;
            let bbox = numbers::<4>(obj.get("bbox_2d"), "bbox_2d", index)?;
            let point = numbers::<2>(obj.get("point_2d"), "point_2d", index)?;
            validate_object(index, bbox, point, options)
        })
        .collect()
}

fn numbers<const N: usize>(value: Option<&Value>, key: &str, index: usize) -> Result<[f64; N], ParseError> {
    let malformed = |what: &str| ParseError::MalformedJson {
        message: format!("element {index}: {key} {what}"),
    };
    let arr = value.ok_or_else(|| malformed("is missing"))?;
    let arr = arr.as_array().ok_or_else(|| malformed("is not an array"))?;
    if arr.len() != N {
        return Err(malformed(&format!("must have {N} numbers")));
    }
    let mut out = [0.0; N];
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = v.as_f64().ok_or_else(|| malformed("contains a non-number"))?;
    }
    Ok(out)
}

fn validate_object(
    index: usize,
    bbox: [f64; 4],
    point: [f64; 2],
    options: &ParseOptions,
) -> Result<ObjectAnswer, ParseError> {
    let invalid = |reason: &str| ParseError::InvalidBox {
        index,
        reason: reason.to_string(),
    };
    if bbox.iter().chain(point.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite coordinate"));
    }
    if bbox.iter().chain(point.iter()).any(|&v| v < 0.0) {
        return Err(invalid("negative coordinate"));
    }
    let bbox = Bbox::new(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(|_| invalid("x1 >= x2 or y1 >= y2"))?;
    let point = Point::new(point[0], point[1]);
    if let Some((w, h)) = options.image_size {
        if point.x > w || point.y > h {
            return Err(invalid("point outside the image"));
        }
    }
    Ok(ObjectAnswer { bbox, point })
}

fn push_number(out: &mut String, v: f64) {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        let _ = write!(out, "{}", v as i64);
    } else {
        let _ = write!(out, "{v}");
    }
}

/// Renders answers in the compact JSON style of the prompt example.
pub fn render_answers(answers: &[ObjectAnswer]) -> String {
    let mut out = String::from("[");
    for (i, a) in answers.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str("{\"bbox_2d\": [");
        for (j, v) in a.bbox.coords().into_iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_number(&mut out, v);
        }
        out.push_str("], \"point_2d\": [");
        push_number(&mut out, a.point.x);
        out.push(',');
        push_number(&mut out, a.point.y);
        out.push_str("]}");
    }
    out.push(']');
    out
}

/// Renders a full tagged response.
pub fn render_response(think: &str, description: Option<&str>, answers: &[ObjectAnswer]) -> String {
    let mut out = format!("<think>{think}</think>");
    if let Some(d) = description {
        let _ = write!(out, "<description>{d}</description>");
    }
    let _ = write!(out, "<answer>{}</answer>", render_answers(answers));
    out
}

/// Re-renders a parsed response.
pub fn render(response: &StructuredResponse) -> String {
    render_response(&response.think, response.description.as_deref(), &response.answers)
}
