use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::query::{describe_unique, resolve};
use super::scene::{Scene, CLASSES};
use crate::geometry::{Bbox, Point};
use crate::rollout::{Decode, Generation, Policy, PolicyError, TokenRecord};
use crate::structured_output::{parse_prompt, render_response, ObjectAnswer, ParseMode, Tokenizer, WhitespacePunctTokenizer};

/// Think-text token counts of the first-pass length buckets.
pub const FIRST_PASS_LENGTHS: [usize; 4] = [15, 30, 60, 100];
/// Think-text token counts of the second-pass length buckets.
pub const SECOND_PASS_LENGTHS: [usize; 4] = [8, 15, 30, 60];
/// Fixed logit offset of the grounded answer per length bucket: some
/// reasoning helps, rambling hurts.
pub const GROUNDED_LENGTH_BIAS: [f64; 4] = [-0.5, 0.5, 0.0, -1.0];

const ACTIONS: usize = 4;
const LEN_OFFSET: usize = 0;
const DESC_OFFSET: usize = LEN_OFFSET + 3 * ACTIONS;
const ANSWER_OFFSET: usize = DESC_OFFSET + 2 * ACTIONS;
/// Answer rows: (easy, hard) x description kind, plus one referring row.
const ANSWER_ROWS: usize = 2 * ACTIONS + 1;
pub const NUM_PARAMS: usize = ANSWER_OFFSET + ANSWER_ROWS * ACTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    /// First pass on a query that is a bare class name.
    Easy,
    /// First pass on any other query.
    Hard,
    /// Second pass on a description.
    Referring,
}

impl Context {
    fn index(self) -> usize {
        self as usize
    }

    pub fn lengths(self) -> [usize; 4] {
        match self {
            Context::Referring => SECOND_PASS_LENGTHS,
            _ => FIRST_PASS_LENGTHS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescKind {
    /// Resolves to exactly the query targets.
    Precise,
    /// Names only the class of the targets.
    ClassOnly,
    /// Resolves to some other object.
    Distractor,
    Empty,
}

impl DescKind {
    pub const ALL: [DescKind; 4] = [DescKind::Precise, DescKind::ClassOnly, DescKind::Distractor, DescKind::Empty];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    /// Ground-truth boxes and points of the objects the description names.
    Grounded,
    /// Grounded boxes shifted by a quarter of their size; points off by a few
    /// pixels.
    NearMiss,
    /// Random boxes.
    Scattered,
    Empty,
}

impl AnswerKind {
    pub const ALL: [AnswerKind; 4] = [AnswerKind::Grounded, AnswerKind::NearMiss, AnswerKind::Scattered, AnswerKind::Empty];
}

/// One categorical choice: `softmax(theta[offset..offset + 4] + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub offset: usize,
    pub bias: [f64; 4],
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateChoice {
    pub context: Context,
    pub length: Decision,
    pub description: Option<Decision>,
    pub answer: Decision,
}

impl TemplateChoice {
    pub fn decisions(&self) -> impl Iterator<Item = &Decision> {
        std::iter::once(&self.length)
            .chain(self.description.as_ref())
            .chain(std::iter::once(&self.answer))
    }

    pub fn desc_kind(&self) -> Option<DescKind> {
        self.description.map(|d| DescKind::ALL[d.action])
    }

    pub fn answer_kind(&self) -> AnswerKind {
        AnswerKind::ALL[self.answer.action]
    }
}

/// Factored categorical policy rendering tagged text from templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePolicy {
    pub theta: Vec<f64>,
    pub grounded_length_bias: [f64; 4],
}

impl Default for TemplatePolicy {
    fn default() -> Self {
        Self::initial()
    }
}

fn softmax(logits: [f64; 4]) -> [f64; 4] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

fn entropy(p: &[f64; 4]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

impl TemplatePolicy {
    /// Untrained starting point: verbose, unsure which object to describe,
    /// indifferent between answer candidates.
    pub fn initial() -> Self {
        let mut theta = vec![0.0; NUM_PARAMS];
        let mut set = |offset: usize, v: [f64; 4]| theta[offset..offset + 4].copy_from_slice(&v);
        set(LEN_OFFSET, [-1.0, -0.25, 0.5, 1.0]);
        set(LEN_OFFSET + ACTIONS, [-1.0, -0.25, 0.5, 1.0]);
        set(LEN_OFFSET + 2 * ACTIONS, [2.0, 0.0, -1.0, -2.0]);
        set(DESC_OFFSET, [0.5, 0.5, -1.0, -1.0]);
        set(DESC_OFFSET + ACTIONS, [-0.5, 1.0, 0.0, -0.5]);
        set(ANSWER_OFFSET + 2 * ACTIONS * ACTIONS, [2.5, 0.0, -1.0, -1.0]);
        Self {
            theta,
            grounded_length_bias: GROUNDED_LENGTH_BIAS,
        }
    }

    /// First-pass answers are always empty: no rollout can earn accuracy.
    pub fn cold_start() -> Self {
        let mut p = Self::initial();
        for row in 0..2 * ACTIONS {
            let off = ANSWER_OFFSET + row * ACTIONS;
            for a in 0..3 {
                p.theta[off + a] = -1000.0;
            }
        }
        p
    }

    pub fn length_offset(ctx: Context) -> usize {
        LEN_OFFSET + ctx.index() * ACTIONS
    }

    pub fn desc_offset(ctx: Context) -> Option<usize> {
        (ctx != Context::Referring).then(|| DESC_OFFSET + ctx.index() * ACTIONS)
    }

    pub fn answer_offset(ctx: Context, desc: Option<DescKind>) -> usize {
        let row = match (ctx, desc) {
            (Context::Referring, _) | (_, None) => 2 * ACTIONS,
            (c, Some(d)) => c.index() * ACTIONS + d as usize,
        };
        ANSWER_OFFSET + row * ACTIONS
    }

    pub fn probs(&self, offset: usize, bias: [f64; 4]) -> [f64; 4] {
        let mut logits = [0.0; 4];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = self.theta[offset + j] + bias[j];
        }
        softmax(logits)
    }

    pub fn decision_logprob(&self, d: &Decision) -> f64 {
        self.probs(d.offset, d.bias)[d.action].ln()
    }

    pub fn decision_entropy(&self, d: &Decision) -> f64 {
        entropy(&self.probs(d.offset, d.bias))
    }

    /// Sum of the factor log-probabilities.
    pub fn log_prob(&self, choice: &TemplateChoice) -> f64 {
        choice.decisions().map(|d| self.decision_logprob(d)).sum()
    }

    /// Adds `coef * d/dtheta log pi(choice)` into `grad`.
    pub fn accumulate_score(&self, choice: &TemplateChoice, coef: f64, grad: &mut [f64]) {
        for d in choice.decisions() {
            self.accumulate_decision(d, coef, grad);
        }
    }

    pub fn accumulate_decision(&self, d: &Decision, coef: f64, grad: &mut [f64]) {
        let p = self.probs(d.offset, d.bias);
        for j in 0..ACTIONS {
            let indicator = if j == d.action { 1.0 } else { 0.0 };
            grad[d.offset + j] += coef * (indicator - p[j]);
        }
    }

    fn choose(&self, offset: usize, bias: [f64; 4], decode: Decode, rng: &mut dyn RngCore) -> Decision {
        let p = self.probs(offset, bias);
        let action = match decode {
            Decode::Greedy => (0..ACTIONS).fold(0, |best, j| if p[j] > p[best] { j } else { best }),
            Decode::Sample => {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut pick = None;
                for (j, &pj) in p.iter().enumerate() {
                    cum += pj;
                    if u < cum {
                        pick = Some(j);
                        break;
                    }
                }
                // Rounding can leave the cumulative sum just below u.
                pick.unwrap_or_else(|| (0..ACTIONS).rev().find(|&j| p[j] > 0.0).unwrap_or(0))
            }
        };
        Decision { offset, bias, action }
    }

    /// Every joint first-pass choice in a context, for exact enumeration.
    pub fn enumerate_choices(&self, ctx: Context) -> Vec<TemplateChoice> {
        let mut out = Vec::new();
        for l in 0..ACTIONS {
            let length = Decision {
                offset: Self::length_offset(ctx),
                bias: [0.0; 4],
                action: l,
            };
            let descs: Vec<Option<DescKind>> = match ctx {
                Context::Referring => vec![None],
                _ => DescKind::ALL.iter().map(|&d| Some(d)).collect(),
            };
            for d in descs {
                let description = d.map(|d| Decision {
                    offset: Self::desc_offset(ctx).expect("first-pass context"),
                    bias: [0.0; 4],
                    action: d as usize,
                });
                for a in 0..ACTIONS {
                    let answer = Decision {
                        offset: Self::answer_offset(ctx, d),
                        bias: self.answer_bias(l),
                        action: a,
                    };
                    out.push(TemplateChoice {
                        context: ctx,
                        length,
                        description,
                        answer,
                    });
                }
            }
        }
        out
    }

    fn answer_bias(&self, length_bucket: usize) -> [f64; 4] {
        [self.grounded_length_bias[length_bucket], 0.0, 0.0, 0.0]
    }

    /// Samples (or takes the argmax of) every factor in order.
    pub fn decide(&self, ctx: Context, decode: Decode, rng: &mut dyn RngCore) -> TemplateChoice {
        let length = self.choose(Self::length_offset(ctx), [0.0; 4], decode, rng);
        let description = Self::desc_offset(ctx).map(|off| self.choose(off, [0.0; 4], decode, rng));
        let desc_kind = description.map(|d| DescKind::ALL[d.action]);
        let answer = self.choose(
            Self::answer_offset(ctx, desc_kind),
            self.answer_bias(length.action),
            decode,
            rng,
        );
        TemplateChoice {
            context: ctx,
            length,
            description,
            answer,
        }
    }

    /// Renders a choice into text plus token records.
    pub fn render(
        &self,
        choice: &TemplateChoice,
        scene: &Scene,
        query: &str,
        rng: &mut dyn RngCore,
    ) -> Generation<TemplateChoice> {
        let n_think = choice.context.lengths()[choice.length.action];
        let verbose = choice.context != Context::Referring && choice.length.action == 3;
        let think = think_text(n_think, verbose);
        let description = choice.desc_kind().map(|k| description_text(scene, query, k));
        let phrase = description.as_deref().unwrap_or(query);
        let targets = resolve(scene, phrase).unwrap_or_default();
        let answers = answer_objects(scene, &targets, choice.answer_kind(), rng);
        let text = render_response(&think, description.as_deref(), &answers);
        let tokens = self.token_records(&text, choice);
        Generation {
            text,
            tokens,
            choice: choice.clone(),
        }
    }

    fn token_records(&self, text: &str, choice: &TemplateChoice) -> Vec<TokenRecord> {
        let desc_start = text.find("<description>");
        let answer_start = text.rfind("<answer>").expect("rendered answer tag");
        let answer_body = answer_start + "<answer>".len();
        let answer_end = text.rfind("</answer>").expect("rendered closing tag");
        let sections: Vec<(usize, &Decision)> = std::iter::once((0, &choice.length))
            .chain(desc_start.zip(choice.description.as_ref()))
            .chain(std::iter::once((answer_start, &choice.answer)))
            .collect();
        let stats: Vec<(f64, f64)> = sections
            .iter()
            .map(|(_, d)| (self.decision_logprob(d), self.decision_entropy(d)))
            .collect();
        let base = text.as_ptr() as usize;
        let mut section = 0;
        let mut first_in_section = true;
        WhitespacePunctTokenizer
            .tokenize(text)
            .into_iter()
            .map(|tok| {
                let offset = tok.as_ptr() as usize - base;
                while section + 1 < sections.len() && offset >= sections[section + 1].0 {
                    section += 1;
                    first_in_section = true;
                }
                let (logprob, entropy) = stats[section];
                let record = TokenRecord {
                    token: tok.to_string(),
                    logprob: if first_in_section { logprob } else { 0.0 },
                    entropy,
                    answer_span: offset >= answer_body && offset < answer_end,
                };
                first_in_section = false;
                record
            })
            .collect()
    }
}

impl Policy for TemplatePolicy {
    type Scene = Scene;
    type Choice = TemplateChoice;

    fn generate(
        &self,
        prompt: &str,
        scene: &Scene,
        decode: Decode,
        rng: &mut dyn RngCore,
    ) -> Result<Generation<TemplateChoice>, PolicyError> {
        let (mode, query) =
            parse_prompt(prompt).ok_or_else(|| PolicyError("prompt does not follow a known template".into()))?;
        let ctx = match mode {
            ParseMode::SecondPass => Context::Referring,
            ParseMode::FirstPass if CLASSES.contains(&query.trim()) => Context::Easy,
            ParseMode::FirstPass => Context::Hard,
        };
        let choice = self.decide(ctx, decode, rng);
        Ok(self.render(&choice, scene, query, rng))
    }

    fn snapshot(&self) -> Self {
        self.clone()
    }
}

const SENTENCES: [&str; 10] = [
    "The query points at one particular object.",
    "I first list every visible candidate region.",
    "Each candidate is compared with the clue.",
    "Color and position help separate similar items.",
    "Objects of another kind are ruled out.",
    "The remaining region matches the stated attribute.",
    "Its outline is traced with a box.",
    "A point is placed near its center.",
    "No other region fits the description better.",
    "The final answer lists the chosen region.",
];

const TAIL_WORDS: [&str; 6] = ["so", "this", "settles", "the", "target", "choice"];

/// Think text of exactly `n` tokens. Verbose text cycles through a few
/// sentences, the way long rambling chains repeat themselves.
fn think_text(n: usize, verbose: bool) -> String {
    let distinct = if verbose { 6 } else { SENTENCES.len() };
    let mut parts: Vec<String> = (0..n / 8).map(|i| SENTENCES[i % distinct].to_string()).collect();
    match n % 8 {
        0 => {}
        1 => parts.push(TAIL_WORDS[0].to_string()),
        r => parts.push(format!("{}.", TAIL_WORDS[..r - 1].join(" "))),
    }
    parts.join(" ")
}

fn description_text(scene: &Scene, query: &str, kind: DescKind) -> String {
    let targets = resolve(scene, query).unwrap_or_default();
    let class = targets.first().and_then(|&id| scene.object(id)).map(|o| o.class.clone());
    let precise = || -> String {
        let Some(class) = &class else {
            return query.to_string();
        };
        let all_of_class: Vec<usize> = scene.of_class(class).map(|o| o.id).collect();
        if all_of_class == targets {
            class.clone()
        } else if targets.len() == 1 {
            describe_unique(scene, targets[0]).unwrap_or_else(|| query.to_string())
        } else {
            query.to_string()
        }
    };
    match kind {
        DescKind::Precise => precise(),
        DescKind::ClassOnly => class.unwrap_or_else(|| query.to_string()),
        DescKind::Distractor => {
            // Prefer a same-class neighbour; otherwise any other object;
            // otherwise a class absent from the scene.
            let other = scene
                .objects
                .iter()
                .filter(|o| !targets.contains(&o.id))
                .min_by_key(|o| (Some(&o.class) != class.as_ref(), o.id));
            match other.and_then(|o| describe_unique(scene, o.id)) {
                Some(d) => d,
                None => CLASSES
                    .iter()
                    .find(|c| scene.of_class(c).next().is_none())
                    .map_or_else(|| "nothing".to_string(), |c| c.to_string()),
            }
        }
        DescKind::Empty => String::new(),
    }
}

fn answer_objects(scene: &Scene, targets: &[usize], kind: AnswerKind, rng: &mut dyn RngCore) -> Vec<ObjectAnswer> {
    let (w, h) = (scene.image_w, scene.image_h);
    match kind {
        AnswerKind::Grounded => scene.answers(targets),
        AnswerKind::NearMiss => scene
            .answers(targets)
            .into_iter()
            .map(|a| near_miss(&a, w, h))
            .collect(),
        AnswerKind::Scattered => (0..targets.len().max(1))
            .map(|_| {
                let bw = rng.gen_range(30.0..120.0f64).round();
                let bh = rng.gen_range(30.0..120.0f64).round();
                let x1 = rng.gen_range(0.0..w - bw).round();
                let y1 = rng.gen_range(0.0..h - bh).round();
                let b = Bbox::new(x1, y1, x1 + bw, y1 + bh).expect("inside the image");
                ObjectAnswer::new(b, Point::new((x1 + bw / 2.0).round(), (y1 + bh / 2.0).round()))
            })
            .collect(),
        AnswerKind::Empty => Vec::new(),
    }
}

/// Shifts the box by a quarter of its size (IoU about 0.39, box L1 half the
/// perimeter) and the point by (5, 5), so only the point credit survives.
fn near_miss(a: &ObjectAnswer, w: f64, h: f64) -> ObjectAnswer {
    let b = a.bbox;
    let dx = (b.width() / 4.0).round();
    let dy = (b.height() / 4.0).round();
    let dx = if b.x2 + dx <= w { dx } else { -dx };
    let dy = if b.y2 + dy <= h { dy } else { -dy };
    let moved = Bbox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy).expect("shift stays inside the image");
    let px = if a.point.x + 5.0 <= w { a.point.x + 5.0 } else { a.point.x - 5.0 };
    let py = if a.point.y + 5.0 <= h { a.point.y + 5.0 } else { a.point.y - 5.0 };
    ObjectAnswer::new(moved, Point::new(px, py))
}
