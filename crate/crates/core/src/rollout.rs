//! Two-pass rollout over a pluggable policy, group assembly and traces.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::BinaryMask;
use crate::grpo::{group_advantages, GroupAdvantages, GroupRewards, GrpoConfig, GrpoError};
use crate::rewards::{score_group, GroupTruth, RewardBreakdown, RewardConfig, RewardError, SampleText, ScoredSample};
use crate::structured_output::{
    first_pass_prompt, parse_response_with, second_pass_prompt, ObjectAnswer, ParseError, ParseMode, ParseOptions,
    StructuredResponse, Tokenizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: String,
    /// Log-probability of the token given its prefix; 0 for tokens fully
    /// determined by earlier choices.
    pub logprob: f64,
    /// Entropy in nats of the distribution the token was drawn from.
    pub entropy: f64,
    pub answer_span: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<C> {
    pub text: String,
    pub tokens: Vec<TokenRecord>,
    /// Policy-specific record of the sampled actions.
    pub choice: C,
}

impl<C> Generation<C> {
    pub fn logprob(&self) -> f64 {
        self.tokens.iter().map(|t| t.logprob).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("policy failure: {0}")]
pub struct PolicyError(pub String);

/// A text generator over some scene representation.
pub trait Policy: Sync {
    type Scene: Sync;
    type Choice: Clone + Send + Sync + std::fmt::Debug;

    fn generate(
        &self,
        prompt: &str,
        scene: &Self::Scene,
        decode: Decode,
        rng: &mut dyn RngCore,
    ) -> Result<Generation<Self::Choice>, PolicyError>;

    /// Frozen copy used as the reference policy.
    fn snapshot(&self) -> Self
    where
        Self: Sized;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassSample<C> {
    pub prompt: String,
    pub outcome: Result<Generation<C>, PolicyError>,
    /// `None` when generation itself failed.
    pub parsed: Option<Result<StructuredResponse, ParseError>>,
}

impl<C> PassSample<C> {
    fn new(prompt: String, outcome: Result<Generation<C>, PolicyError>, mode: ParseMode, options: &ParseOptions) -> Self {
        let parsed = outcome
            .as_ref()
            .ok()
            .map(|g| parse_response_with(&g.text, mode, options));
        Self { prompt, outcome, parsed }
    }

    pub fn text(&self) -> Option<&str> {
        self.outcome.as_ref().ok().map(|g| g.text.as_str())
    }

    pub fn response(&self) -> Option<&StructuredResponse> {
        self.parsed.as_ref().and_then(|p| p.as_ref().ok())
    }

    pub fn generation(&self) -> Option<&Generation<C>> {
        self.outcome.as_ref().ok()
    }

    /// Human-readable failure, if any.
    pub fn error(&self) -> Option<String> {
        match (&self.outcome, &self.parsed) {
            (Err(e), _) => Some(e.to_string()),
            (Ok(_), Some(Err(e))) => Some(e.to_string()),
            _ => None,
        }
    }
}

/// K independent sampled first-pass generations.
///
/// One seed per sample is drawn from `rng` up front so the group is
/// identical under sequential and parallel execution.
pub fn run_first_pass<P: Policy>(
    policy: &P,
    scene: &P::Scene,
    query: &str,
    k: usize,
    rng: &mut dyn RngCore,
    options: &ParseOptions,
    exec: Execution,
) -> Vec<PassSample<P::Choice>> {
    let prompt = first_pass_prompt(query);
    let seeds: Vec<u64> = (0..k).map(|_| rng.next_u64()).collect();
    exec.map(&seeds, |&seed| {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
        let outcome = policy.generate(&prompt, scene, Decode::Sample, &mut sample_rng);
        PassSample::new(prompt.clone(), outcome, ParseMode::FirstPass, options)
    })
}

/// Greedy second pass on a description; `None` (skipped) when it is empty.
pub fn run_second_pass<P: Policy>(
    policy: &P,
    scene: &P::Scene,
    description: &str,
    options: &ParseOptions,
) -> Option<PassSample<P::Choice>> {
    if description.trim().is_empty() {
        return None;
    }
    let prompt = second_pass_prompt(description);
    // Greedy decoding ignores the rng; a fixed one keeps the interface uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outcome = policy.generate(&prompt, scene, Decode::Greedy, &mut rng);
    Some(PassSample::new(prompt, outcome, ParseMode::SecondPass, options))
}

/// Second passes for every first-pass sample; failed first passes and empty
/// descriptions are skipped.
pub fn run_second_passes<P: Policy>(
    policy: &P,
    scene: &P::Scene,
    first: &[PassSample<P::Choice>],
    options: &ParseOptions,
    exec: Execution,
) -> Vec<Option<PassSample<P::Choice>>> {
    exec.map(first, |s| {
        let description = s.response().and_then(|r| r.description.as_deref())?;
        run_second_pass(policy, scene, description, options)
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("group has no samples")]
    EmptyGroup,
    #[error("{first} first-pass samples but {second} second-pass slots")]
    PassMismatch { first: usize, second: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// Produces the mask of a parsed response, for mask reward mode.
pub type MaskSource<'a> = &'a (dyn Fn(&StructuredResponse) -> BinaryMask + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup<C> {
    pub scene_id: String,
    pub query: String,
    pub first_pass: Vec<PassSample<C>>,
    pub second_pass: Vec<Option<PassSample<C>>>,
    pub scored: Vec<ScoredSample>,
    pub advantages: GroupAdvantages,
    /// Per sample (first, second) masks; empty unless in mask mode.
    pub masks: Vec<(Option<BinaryMask>, Option<BinaryMask>)>,
    pub gt_answers: Vec<ObjectAnswer>,
    pub gt_mask: Option<BinaryMask>,
    pub image_size: Option<(f64, f64)>,
    pub reward_config: RewardConfig,
}

impl<C> RolloutGroup<C> {
    pub fn breakdowns(&self) -> impl Iterator<Item = &RewardBreakdown> {
        self.scored.iter().map(|s| &s.breakdown)
    }

    pub fn k(&self) -> usize {
        self.first_pass.len()
    }
}

/// Scores both passes, applies the length gate over the group and computes
/// advantages over total rewards. A single-sample group gets advantage 0.
#[allow(clippy::too_many_arguments)]
pub fn assemble_group<C: Clone>(
    scene_id: impl Into<String>,
    query: impl Into<String>,
    first: Vec<PassSample<C>>,
    second: Vec<Option<PassSample<C>>>,
    truth: &GroupTruth<'_>,
    masks: Option<MaskSource<'_>>,
    reward_cfg: &RewardConfig,
    grpo_cfg: &GrpoConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<RolloutGroup<C>, RolloutError> {
    if first.is_empty() {
        return Err(RolloutError::EmptyGroup);
    }
    if first.len() != second.len() {
        return Err(RolloutError::PassMismatch {
            first: first.len(),
            second: second.len(),
        });
    }
    let mask_pairs: Vec<(Option<BinaryMask>, Option<BinaryMask>)> = match masks {
        Some(source) => first
            .iter()
            .zip(&second)
            .map(|(f, s)| {
                (
                    f.response().map(source),
                    s.as_ref().and_then(|s| s.response()).map(source),
                )
            })
            .collect(),
        None => Vec::new(),
    };
    let texts: Vec<SampleText<'_>> = first
        .iter()
        .zip(&second)
        .enumerate()
        .map(|(i, (f, s))| SampleText {
            first_pass: f.text().unwrap_or(""),
            second_pass: s.as_ref().and_then(|s| s.text()),
            first_mask: mask_pairs.get(i).and_then(|m| m.0.as_ref()),
            second_mask: mask_pairs.get(i).and_then(|m| m.1.as_ref()),
        })
        .collect();
    let scored = score_group(&texts, truth, reward_cfg, tokenizer)?;
    let totals: Vec<f64> = scored.iter().map(|s| s.breakdown.total).collect();
    let advantages = if totals.len() < 2 {
        GroupAdvantages {
            values: vec![0.0; totals.len()],
            normalized: grpo_cfg.normalize_by_std,
            epsilon: grpo_cfg.epsilon,
        }
    } else {
        group_advantages(&GroupRewards::new(totals)?, grpo_cfg)?
    };
    Ok(RolloutGroup {
        scene_id: scene_id.into(),
        query: query.into(),
        first_pass: first,
        second_pass: second,
        scored,
        advantages,
        masks: mask_pairs,
        gt_answers: truth.answers.to_vec(),
        gt_mask: truth.mask.cloned(),
        image_size: truth.image_size,
        reward_config: *reward_cfg,
    })
}

/// Mean per-token entropy over answer-span tokens; 0 without any.
pub fn answer_entropy(tokens: &[TokenRecord]) -> f64 {
    let (sum, n) = tokens
        .iter()
        .filter(|t| t.answer_span)
        .fold((0.0, 0usize), |(s, n), t| (s + t.entropy, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One rollout inside a [`GroupTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub first_pass_raw: Option<String>,
    pub second_pass_raw: Option<String>,
    pub n1: usize,
    pub n2: Option<usize>,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_mask: Option<String>,
}

/// Self-contained JSON record of one group, enough to recompute every reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub scene_id: String,
    pub query: String,
    pub gt_answers: Vec<ObjectAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    pub image_w: Option<f64>,
    pub image_h: Option<f64>,
    pub reward_config: RewardConfig,
    pub advantages_normalized: bool,
    pub samples: Vec<SampleTrace>,
}

impl<C> From<&RolloutGroup<C>> for GroupTrace {
    fn from(g: &RolloutGroup<C>) -> Self {
        let samples = g
            .first_pass
            .iter()
            .zip(&g.second_pass)
            .zip(&g.scored)
            .zip(&g.advantages.values)
            .enumerate()
            .map(|(i, (((f, s), sc), &adv))| SampleTrace {
                first_pass_raw: f.text().map(str::to_owned),
                second_pass_raw: s.as_ref().and_then(|s| s.text()).map(str::to_owned),
                n1: sc.n1,
                n2: sc.n2,
                breakdown: sc.breakdown,
                advantage: adv,
                error: f.error(),
                first_mask: g.masks.get(i).and_then(|m| m.0.as_ref()).map(BinaryMask::to_base64),
                second_mask: g.masks.get(i).and_then(|m| m.1.as_ref()).map(BinaryMask::to_base64),
            })
            .collect();
        GroupTrace {
            scene_id: g.scene_id.clone(),
            query: g.query.clone(),
            gt_answers: g.gt_answers.clone(),
            gt_mask: g.gt_mask.as_ref().map(BinaryMask::to_base64),
            image_w: g.image_size.map(|s| s.0),
            image_h: g.image_size.map(|s| s.1),
            reward_config: g.reward_config,
            advantages_normalized: g.advantages.normalized,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("malformed mask in trace: {0}")]
    Mask(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// Recomputed rewards and advantages of a trace, for comparison against the
/// stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub breakdowns: Vec<RewardBreakdown>,
    pub n1: Vec<usize>,
    pub n2: Vec<Option<usize>>,
    pub advantages: Vec<f64>,
}

impl GroupTrace {
    pub fn replay(&self, tokenizer: &dyn Tokenizer, grpo_cfg: &GrpoConfig) -> Result<Replay, ReplayError> {
        let decode = |m: &Option<String>| m.as_deref().map(BinaryMask::from_base64).transpose();
        let gt_mask = decode(&self.gt_mask)?;
        let masks = self
            .samples
            .iter()
            .map(|s| Ok((decode(&s.first_mask)?, decode(&s.second_mask)?)))
            .collect::<Result<Vec<_>, ReplayError>>()?;
        let texts: Vec<SampleText<'_>> = self
            .samples
            .iter()
            .zip(&masks)
            .map(|(s, m)| SampleText {
                first_pass: s.first_pass_raw.as_deref().unwrap_or(""),
                second_pass: s.second_pass_raw.as_deref(),
                first_mask: m.0.as_ref(),
                second_mask: m.1.as_ref(),
            })
            .collect();
        let truth = GroupTruth {
            answers: &self.gt_answers,
            mask: gt_mask.as_ref(),
            image_size: self.image_w.zip(self.image_h),
        };
        let scored = score_group(&texts, &truth, &self.reward_config, tokenizer)?;
        let totals: Vec<f64> = scored.iter().map(|s| s.breakdown.total).collect();
        let cfg = GrpoConfig {
            normalize_by_std: self.advantages_normalized,
            ..*grpo_cfg
        };
        let advantages = if totals.len() < 2 {
            vec![0.0; totals.len()]
        } else {
            group_advantages(&GroupRewards::new(totals)?, &cfg)?.values
        };
        Ok(Replay {
            breakdowns: scored.iter().map(|s| s.breakdown).collect(),
            n1: scored.iter().map(|s| s.n1).collect(),
            n2: scored.iter().map(|s| s.n2).collect(),
            advantages,
        })
    }
}
