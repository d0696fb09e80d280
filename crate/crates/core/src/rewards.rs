//! Reward functions for one rollout and their composition over a group.
//!
//! Per sample:
//!
//! ```text
//! base  = format + non_repeat + acc_total
//! total = (base + desc) * len_conditional
//! ```
//!
//! where `desc` is the accuracy of the second-pass answer and
//! `len_conditional` is the length reward, forced to 1 across the whole group
//! when no rollout in it earned any accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_l1, iou, mask_iou, point_l1, BinaryMask, GeometryError};
use crate::matching::{iou_matrix, max_weight_matching_refined};
use crate::structured_output::{
    parse_response_with, split_sentences, ObjectAnswer, ParseError, ParseMode, ParseOptions, StructuredResponse,
    Tokenizer,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("length mismatch: {0} accuracy values vs {1} length values")]
    LengthMismatch(usize, usize),
    #[error("mask reward mode needs a predicted mask for sample {index} ({pass})")]
    MissingMask { index: usize, pass: &'static str },
    #[error("mask reward mode needs a ground-truth mask")]
    MissingGroundTruthMask,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthConfig {
    /// Reasoning-token anchor above which the first pass is penalized.
    pub anchor_n0: f64,
    /// Penalty per token above the anchor.
    pub gamma: f64,
}

impl Default for LengthConfig {
    fn default() -> Self {
        Self {
            anchor_n0: 45.0,
            gamma: 0.05,
        }
    }
}

/// How the four box-coordinate differences are aggregated before the box L1
/// threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyThresholds {
    /// A matched pair earns IoU credit when IoU is strictly above this.
    pub iou: f64,
    /// Box L1 credit when the distance is strictly below this.
    pub box_l1: f64,
    /// Point L1 credit when the distance is strictly below this.
    pub point_l1: f64,
    pub box_l1_mode: L1Aggregation,
}

impl Default for AccuracyThresholds {
    fn default() -> Self {
        Self {
            iou: 0.5,
            box_l1: 10.0,
            point_l1: 30.0,
            box_l1_mode: L1Aggregation::Sum,
        }
    }
}

/// Which accuracy signal feeds `acc_total` and `desc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Box IoU, box L1 and point L1 credits over the optimal matching.
    #[default]
    BoxPoint,
    /// IoU between the merged predicted mask and the ground-truth mask.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub length: LengthConfig,
    pub thresholds: AccuracyThresholds,
    pub enable_desc: bool,
    pub enable_len: bool,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            length: LengthConfig::default(),
            thresholds: AccuracyThresholds::default(),
            enable_desc: true,
            enable_len: true,
            mode: RewardMode::BoxPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyReward {
    pub iou: f64,
    pub box_l1: f64,
    pub point_l1: f64,
    pub total: f64,
}

impl AccuracyReward {
    fn from_parts(iou: f64, box_l1: f64, point_l1: f64) -> Self {
        Self {
            iou,
            box_l1,
            point_l1,
            total: iou + box_l1 + point_l1,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Inputs to [`total_reward`] for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub format: f64,
    pub non_repeat: f64,
    pub acc: AccuracyReward,
    pub desc: f64,
    pub len_raw: f64,
    pub len_conditional: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub non_repeat: f64,
    pub acc_iou: f64,
    pub acc_box_l1: f64,
    pub acc_point_l1: f64,
    pub acc_total: f64,
    pub desc: f64,
    pub len_raw: f64,
    pub len_conditional: f64,
    pub base: f64,
    pub total: f64,
}

/// 1 when the text parses in the given pass, else 0.
pub fn format_reward(text: &str, mode: ParseMode) -> f64 {
    match crate::structured_output::parse_response(text, mode) {
        Ok(_) => 1.0,
        Err(_) => 0.0,
    }
}

/// Fraction of distinct sentences in the reasoning text; 1 for empty text.
pub fn non_repeat_reward(reasoning: &str) -> f64 {
    let sentences = split_sentences(reasoning);
    if sentences.is_empty() {
        return 1.0;
    }
    let distinct: std::collections::HashSet<&str> = sentences.iter().map(String::as_str).collect();
    distinct.len() as f64 / sentences.len() as f64
}

/// Box IoU, box L1 and point L1 credits over one optimal IoU matching.
///
/// Each matched pair passing a threshold adds `1 / max(N, K)` to that
/// component. One empty side scores 0; both empty score full marks.
pub fn accuracy_reward(pred: &[ObjectAnswer], gt: &[ObjectAnswer], th: &AccuracyThresholds) -> AccuracyReward {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return AccuracyReward::from_parts(1.0, 1.0, 1.0),
        (true, false) | (false, true) => return AccuracyReward::zero(),
        _ => {}
    }
    let n = pred.len().max(gt.len());
    let quantum = 1.0 / n as f64;
    let credits: Vec<Vec<[bool; 3]>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| pair_credits(g, p, th)).collect())
        .collect();
    // Among IoU-optimal matchings prefer more credits, then more IoU, then
    // more box credits, so tied pairings cannot change the reward.
    let base = n as u32 + 1;
    let key: Vec<Vec<u32>> = credits
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| {
                    let total = c.iter().filter(|&&x| x).count() as u32;
                    (total * base + u32::from(c[0])) * base + u32::from(c[1])
                })
                .collect()
        })
        .collect();
    let matching = max_weight_matching_refined(&iou_matrix(gt, pred), &key, gt.len(), pred.len());
    let (mut n_iou, mut n_box, mut n_point) = (0usize, 0usize, 0usize);
    for &(g, p) in &matching.pairs {
        let [a, b, c] = credits[g][p];
        n_iou += usize::from(a);
        n_box += usize::from(b);
        n_point += usize::from(c);
    }
    // Counting then scaling keeps each component an exact multiple of the quantum.
    AccuracyReward::from_parts(
        n_iou as f64 * quantum,
        n_box as f64 * quantum,
        n_point as f64 * quantum,
    )
}

fn pair_credits(g: &ObjectAnswer, p: &ObjectAnswer, th: &AccuracyThresholds) -> [bool; 3] {
    let l1 = match th.box_l1_mode {
        L1Aggregation::Sum => box_l1(&g.bbox, &p.bbox),
        L1Aggregation::Mean => box_l1(&g.bbox, &p.bbox) / 4.0,
    };
    [
        iou(&g.bbox, &p.bbox) > th.iou,
        l1 < th.box_l1,
        point_l1(&g.point, &p.point) < th.point_l1,
    ]
}

/// Accuracy of the second-pass answer; 0 when the second pass failed to
/// parse or was skipped.
pub fn description_reward(second_pass: Option<&[ObjectAnswer]>, gt: &[ObjectAnswer], th: &AccuracyThresholds) -> f64 {
    second_pass.map_or(0.0, |answers| accuracy_reward(answers, gt, th).total)
}

/// `clip(1[n2 < n1] - gamma * max(0, n1 - n0), 0, 1)`.
pub fn length_reward(n1: usize, n2: usize, cfg: &LengthConfig) -> f64 {
    let indicator = if n2 < n1 { 1.0 } else { 0.0 };
    let excess = (n1 as f64 - cfg.anchor_n0).max(0.0);
    (indicator - cfg.gamma * excess).clamp(0.0, 1.0)
}

/// Gates the length reward on group accuracy: unchanged when any rollout has
/// positive accuracy, all ones otherwise.
pub fn conditional_length(group_acc_totals: &[f64], per_sample_len: &[f64]) -> Result<Vec<f64>, RewardError> {
    if group_acc_totals.len() != per_sample_len.len() {
        return Err(RewardError::LengthMismatch(group_acc_totals.len(), per_sample_len.len()));
    }
    if group_acc_totals.iter().any(|&a| a > 0.0) {
        Ok(per_sample_len.to_vec())
    } else {
        Ok(vec![1.0; per_sample_len.len()])
    }
}

/// Composes the breakdown. A zero format reward zeroes every
/// content-dependent component.
pub fn total_reward(c: RewardComponents) -> RewardBreakdown {
    let (non_repeat, acc, desc) = if c.format > 0.0 {
        (c.non_repeat, c.acc, c.desc)
    } else {
        (0.0, AccuracyReward::zero(), 0.0)
    };
    let base = c.format + non_repeat + acc.total;
    RewardBreakdown {
        format: c.format,
        non_repeat,
        acc_iou: acc.iou,
        acc_box_l1: acc.box_l1,
        acc_point_l1: acc.point_l1,
        acc_total: acc.total,
        desc,
        len_raw: c.len_raw,
        len_conditional: c.len_conditional,
        base,
        total: (base + desc) * c.len_conditional,
    }
}

/// Mask IoU between the merged prediction and the ground truth.
pub fn sam3_style_reward(merged: &BinaryMask, gt: &BinaryMask) -> Result<f64, GeometryError> {
    mask_iou(merged, gt)
}

/// Raw text (and, in mask mode, predicted masks) of one rollout.
#[derive(Debug, Clone, Copy)]
pub struct SampleText<'a> {
    pub first_pass: &'a str,
    /// `None` when the second pass was skipped.
    pub second_pass: Option<&'a str>,
    pub first_mask: Option<&'a BinaryMask>,
    pub second_mask: Option<&'a BinaryMask>,
}

impl<'a> SampleText<'a> {
    pub fn new(first_pass: &'a str, second_pass: Option<&'a str>) -> Self {
        Self {
            first_pass,
            second_pass,
            first_mask: None,
            second_mask: None,
        }
    }
}

/// Ground truth for one group.
#[derive(Debug, Clone, Copy)]
pub struct GroupTruth<'a> {
    pub answers: &'a [ObjectAnswer],
    pub mask: Option<&'a BinaryMask>,
    pub image_size: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub breakdown: RewardBreakdown,
    pub n1: usize,
    pub n2: Option<usize>,
    pub first: Result<StructuredResponse, ParseError>,
    pub second: Option<Result<StructuredResponse, ParseError>>,
}

/// Scores every rollout of one group, including the group-level length gate.
pub fn score_group(
    samples: &[SampleText<'_>],
    truth: &GroupTruth<'_>,
    cfg: &RewardConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<ScoredSample>, RewardError> {
    let options = ParseOptions {
        image_size: truth.image_size,
    };
    let gt_mask = match cfg.mode {
        RewardMode::Mask => Some(truth.mask.ok_or(RewardError::MissingGroundTruthMask)?),
        RewardMode::BoxPoint => None,
    };
    let accuracy = |answers: &[ObjectAnswer], mask: Option<&BinaryMask>, index, pass| -> Result<AccuracyReward, RewardError> {
        match gt_mask {
            None => Ok(accuracy_reward(answers, truth.answers, &cfg.thresholds)),
            Some(gt) => {
                let pred = mask.ok_or(RewardError::MissingMask { index, pass })?;
                Ok(AccuracyReward::from_parts(sam3_style_reward(pred, gt)?, 0.0, 0.0))
            }
        }
    };

    let mut partial = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let first = parse_response_with(s.first_pass, ParseMode::FirstPass, &options);
        let second = s
            .second_pass
            .map(|text| parse_response_with(text, ParseMode::SecondPass, &options));
        let mut comp = RewardComponents::default();
        let n1 = first.as_ref().map_or(0, |r| tokenizer.count(&r.think));
        let n2 = match &second {
            Some(Ok(r)) => Some(tokenizer.count(&r.think)),
            _ => None,
        };
        if let Ok(resp) = &first {
            comp.format = 1.0;
            comp.non_repeat = non_repeat_reward(&resp.think);
            comp.acc = accuracy(&resp.answers, s.first_mask, index, "first pass")?;
            if cfg.enable_desc {
                comp.desc = match &second {
                    Some(Ok(r)) => accuracy(&r.answers, s.second_mask, index, "second pass")?.total,
                    _ => 0.0,
                };
            }
        }
        comp.len_raw = match (cfg.enable_len, &first, n2) {
            (false, _, _) => 1.0,
            // No verified second pass: the comparison term cannot hold.
            (true, Ok(_), None) => length_reward(n1, usize::MAX, &cfg.length),
            (true, Ok(_), Some(n2)) => length_reward(n1, n2, &cfg.length),
            (true, Err(_), _) => 0.0,
        };
        partial.push((comp, n1, n2, first, second));
    }

    let acc: Vec<f64> = partial.iter().map(|p| p.0.acc.total).collect();
    let len: Vec<f64> = partial.iter().map(|p| p.0.len_raw).collect();
    let gated = if cfg.enable_len {
        conditional_length(&acc, &len)?
    } else {
        vec![1.0; len.len()]
    };
    Ok(partial
        .into_iter()
        .zip(gated)
        .map(|((mut comp, n1, n2, first, second), g)| {
            comp.len_conditional = g;
            ScoredSample {
                breakdown: total_reward(comp),
                n1,
                n2,
                first,
                second,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Bbox, Point};
    use crate::structured_output::{render_response, WhitespacePunctTokenizer};
    use proptest::prelude::*;

    fn obj(c: [f64; 4], p: [f64; 2]) -> ObjectAnswer {
        ObjectAnswer::new(Bbox::new(c[0], c[1], c[2], c[3]).unwrap(), Point::new(p[0], p[1]))
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn format_examples() {
        let ok = render_response("t", Some("d"), &[]);
        assert_eq!(format_reward(&ok, ParseMode::FirstPass), 1.0);
        assert_eq!(
            format_reward("<think>t</think><description>d</description><answer>[]", ParseMode::FirstPass),
            0.0
        );
        let no_desc = render_response("t", None, &[]);
        assert_eq!(format_reward(&no_desc, ParseMode::FirstPass), 0.0);
    }

    #[test]
    fn non_repeat_examples() {
        assert_eq!(non_repeat_reward("A. B. C."), 1.0);
        assert_eq!(non_repeat_reward("A. A. A. A."), 0.25);
        assert_eq!(non_repeat_reward(""), 1.0);
        assert_eq!(non_repeat_reward("A  b. A b."), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let th = AccuracyThresholds::default();
        let gt = vec![obj([0., 0., 100., 100.], [50., 50.]), obj([200., 200., 300., 300.], [250., 250.])];
        let a = accuracy_reward(&gt, &gt, &th);
        assert_eq!((a.iou, a.box_l1, a.point_l1, a.total), (1.0, 1.0, 1.0, 3.0));

        // N=1, K=2; matched pred has IoU 0.9, box L1 4, point L1 12.
        let g = vec![obj([0., 0., 100., 100.], [50., 50.])];
        // [0,0,100,90]: IoU 0.9, L1 10 -> too big; use [0,0,98,98]: IoU 0.9604, L1 4
        let near = obj([0., 0., 98., 98.], [56., 56.]);
        let far = obj([400., 400., 450., 450.], [420., 420.]);
        assert!(iou(&g[0].bbox, &near.bbox) > 0.9);
        let a = accuracy_reward(&[near, far], &g, &th);
        assert!((a.iou - 0.5).abs() < EPS && (a.box_l1 - 0.5).abs() < EPS && (a.point_l1 - 0.5).abs() < EPS);
        assert!((a.total - 1.5).abs() < EPS);

        // IoU exactly 0.5 earns nothing: [0,0,100,100] vs [0,0,100,50].
        let half = obj([0., 0., 100., 50.], [50., 25.]);
        assert_eq!(iou(&g[0].bbox, &half.bbox), 0.5);
        assert_eq!(accuracy_reward(&[half], &g, &th).iou, 0.0);

        assert_eq!(accuracy_reward(&[], &[], &th).total, 3.0);
        assert_eq!(accuracy_reward(&[], &g, &th).total, 0.0);
        assert_eq!(accuracy_reward(&g, &[], &th).total, 0.0);
    }

    #[test]
    fn strict_thresholds() {
        let th = AccuracyThresholds::default();
        let g = vec![obj([0., 0., 100., 100.], [50., 50.])];
        // box L1 exactly 10 and point L1 exactly 30 earn nothing
        let p = obj([5., 5., 100., 100.], [80., 50.]);
        let a = accuracy_reward(&[p], &g, &th);
        assert_eq!((a.box_l1, a.point_l1), (0.0, 0.0));
        let p = obj([4.5, 5., 100., 100.], [79.5, 50.]);
        let a = accuracy_reward(&[p], &g, &th);
        assert_eq!((a.box_l1, a.point_l1), (1.0, 1.0));
        // mean aggregation divides by four
        let mean = AccuracyThresholds {
            box_l1_mode: L1Aggregation::Mean,
            ..th
        };
        let p = obj([8., 8., 108., 108.], [50., 50.]);
        assert_eq!(accuracy_reward(&[p], &g, &th).box_l1, 0.0);
        assert_eq!(accuracy_reward(&[p], &g, &mean).box_l1, 1.0);
    }

    #[test]
    fn description_examples() {
        let th = AccuracyThresholds::default();
        let g = vec![obj([0., 0., 100., 100.], [50., 50.])];
        assert_eq!(description_reward(Some(&g), &g, &th), 3.0);
        assert_eq!(description_reward(None, &g, &th), 0.0);
        // IoU 0.4 with the point still close: only point credit
        let low_iou = obj([0., 0., 100., 40.], [50., 35.]);
        let a = accuracy_reward(&[low_iou], &g, &th);
        assert_eq!(a.iou, 0.0);
        assert_eq!(a.point_l1, 1.0);
    }

    #[test]
    fn length_examples() {
        let cfg = LengthConfig::default();
        assert!((length_reward(50, 30, &cfg) - 0.75).abs() < EPS);
        assert_eq!(length_reward(40, 30, &cfg), 1.0);
        assert_eq!(length_reward(80, 90, &cfg), 0.0);
        assert_eq!(length_reward(30, 30, &cfg), 0.0);
    }

    #[test]
    fn conditional_length_examples() {
        let len = [0.2, 0.5, 0.0, 1.0];
        assert_eq!(conditional_length(&[0., 0., 0., 0.], &len).unwrap(), vec![1.0; 4]);
        assert_eq!(conditional_length(&[0., 1.5, 0., 0.], &len).unwrap(), len.to_vec());
        assert_eq!(conditional_length(&[0.5], &[0.3]).unwrap(), vec![0.3]);
        assert_eq!(conditional_length(&[0.5], &[0.3, 0.1]), Err(RewardError::LengthMismatch(1, 2)));
    }

    #[test]
    fn total_examples() {
        let full = RewardComponents {
            format: 1.0,
            non_repeat: 1.0,
            acc: AccuracyReward::from_parts(1.0, 1.0, 1.0),
            desc: 3.0,
            len_raw: 1.0,
            len_conditional: 1.0,
        };
        assert_eq!(total_reward(full).total, 8.0);
        let failed = RewardComponents { format: 0.0, ..full };
        let b = total_reward(failed);
        assert_eq!((b.acc_total, b.desc, b.non_repeat, b.total), (0.0, 0.0, 0.0, 0.0));
        let mid = RewardComponents {
            format: 1.0,
            non_repeat: 1.0,
            acc: AccuracyReward::from_parts(1.0, 1.0, 0.0),
            desc: 2.0,
            len_raw: 0.5,
            len_conditional: 0.5,
        };
        let b = total_reward(mid);
        assert_eq!((b.base, b.total), (4.0, 3.0));
    }

    #[test]
    fn sam3_examples() {
        let mut gt = BinaryMask::empty(4, 4);
        for x in 0..4 {
            gt.set(x, 0, true);
        }
        assert_eq!(sam3_style_reward(&gt, &gt).unwrap(), 1.0);
        let mut other = BinaryMask::empty(4, 4);
        other.set(0, 3, true);
        assert_eq!(sam3_style_reward(&other, &gt).unwrap(), 0.0);
        // half overlap: gt row 0 (4 px), pred covers x=2..5 of a wider band
        let mut half = BinaryMask::empty(4, 4);
        for x in 2..4 {
            half.set(x, 0, true);
            half.set(x, 1, true);
        }
        // |∧| = 2, |∨| = 4 + 4 - 2 = 6
        assert!((sam3_style_reward(&half, &gt).unwrap() - 1.0 / 3.0).abs() < EPS);
        assert!(sam3_style_reward(&half, &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn score_group_gates_and_fails_closed() {
        let tok = WhitespacePunctTokenizer;
        let gt = vec![obj([0., 0., 100., 100.], [50., 50.])];
        let truth = GroupTruth {
            answers: &gt,
            mask: None,
            image_size: Some((640., 480.)),
        };
        let good = render_response("a b c d e f.", Some("cup"), &gt);
        let second = render_response("a.", None, &gt);
        let bad = "<think>x</think>";
        let cfg = RewardConfig::default();
        let scored = score_group(
            &[SampleText::new(&good, Some(&second)), SampleText::new(bad, None)],
            &truth,
            &cfg,
            &tok,
        )
        .unwrap();
        let b = scored[0].breakdown;
        assert_eq!((scored[0].n1, scored[0].n2), (7, Some(2)));
        assert_eq!((b.format, b.acc_total, b.desc, b.len_conditional, b.total), (1.0, 3.0, 3.0, 1.0, 8.0));
        let b = scored[1].breakdown;
        assert_eq!((b.format, b.total, b.len_raw, b.len_conditional), (0.0, 0.0, 0.0, 0.0));

        // all-zero accuracy closes the gate
        let wrong = vec![obj([300., 300., 400., 400.], [350., 350.])];
        let w1 = render_response(&"word ".repeat(80), Some("dog"), &wrong);
        let scored = score_group(&[SampleText::new(&w1, Some(&second))], &truth, &cfg, &tok).unwrap();
        assert_eq!(scored[0].breakdown.len_raw, 0.0);
        assert_eq!(scored[0].breakdown.len_conditional, 1.0);
    }

    proptest! {
        #[test]
        fn length_reward_bounded_and_monotone(n1 in 0usize..300, n2 in 0usize..300, gamma in 0.0..1.0f64, n0 in 0.0..100.0f64) {
            let cfg = LengthConfig { anchor_n0: n0, gamma };
            let r = length_reward(n1, n2, &cfg);
            prop_assert!((0.0..=1.0).contains(&r));
            if n1 as f64 > n0 {
                prop_assert!(length_reward(n1 + 1, n2, &cfg) <= r);
            }
            // crossing n2 = n1 from below never increases the reward
            prop_assert!(length_reward(n1, n1, &cfg) <= length_reward(n1, n1.saturating_sub(1), &cfg) || n1 == 0);
        }

        #[test]
        fn conditional_length_idempotent(acc in proptest::collection::vec(prop_oneof![Just(0.0), 0.0..3.0f64], 1..9), seed in 0u64..1000) {
            let len: Vec<f64> = acc.iter().enumerate().map(|(i, _)| ((i as u64 * 31 + seed) % 11) as f64 / 10.0).collect();
            let once = conditional_length(&acc, &len).unwrap();
            prop_assert_eq!(conditional_length(&acc, &once).unwrap(), once);
        }

        #[test]
        fn accuracy_permutation_invariant_and_quantized(
            boxes in proptest::collection::vec((0.0..300.0f64, 0.0..300.0f64, 5.0..100.0f64, 5.0..100.0f64), 1..5),
            shift in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 1..5),
            rot in 0usize..5,
        ) {
            let gt: Vec<_> = boxes.iter().map(|&(x, y, w, h)| obj([x, y, x + w, y + h], [x + w / 2.0, y + h / 2.0])).collect();
            let pred: Vec<_> = boxes.iter().zip(shift.iter().cycle()).map(|(&(x, y, w, h), &(dx, dy))| {
                let (x, y) = ((x + dx).max(0.0), (y + dy).max(0.0));
                obj([x, y, x + w, y + h], [x + w / 2.0, y + h / 2.0])
            }).collect();
            let th = AccuracyThresholds::default();
            let a = accuracy_reward(&pred, &gt, &th);
            let k = rot % gt.len();
            let mut g2 = gt.clone();
            g2.rotate_left(k);
            let mut p2 = pred.clone();
            p2.rotate_left(k);
            let b = accuracy_reward(&p2, &g2, &th);
            prop_assert!((a.total - b.total).abs() < 1e-12);
            let q = gt.len().max(pred.len()) as f64;
            for c in [a.iou, a.box_l1, a.point_l1] {
                prop_assert!((0.0..=1.0).contains(&c));
                prop_assert!((c * q - (c * q).round()).abs() < 1e-9);
            }
        }
    }
}
