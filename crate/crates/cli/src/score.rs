//! Batch scoring of raw two-pass outputs, and exact replay of group traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use segreward::geometry::BinaryMask;
use segreward::grpo::{group_advantages, GroupRewards, GrpoConfig};
use segreward::rewards::{score_group, GroupTruth, RewardBreakdown, RewardConfig, SampleText};
use segreward::rollout::GroupTrace;
use segreward::structured_output::{ObjectAnswer, WhitespacePunctTokenizer};

use crate::{Classify, Failure};

/// One line of batch scoring input.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub raw_first_pass: String,
    #[serde(default)]
    pub raw_second_pass: Option<String>,
    pub gt_answers: Vec<ObjectAnswer>,
    #[serde(default)]
    pub image_w: Option<f64>,
    #[serde(default)]
    pub image_h: Option<f64>,
    /// Consecutive records sharing a group id are scored as one group.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub gt_mask: Option<String>,
    #[serde(default)]
    pub first_mask: Option<String>,
    #[serde(default)]
    pub second_mask: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredLine {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub n1: usize,
    pub n2: Option<usize>,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
    /// For trace input: whether the stored values were reproduced exactly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matches_trace: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub records: usize,
    pub groups: usize,
    pub mean: BTreeMap<String, f64>,
    pub trace_mismatches: usize,
}

enum Item {
    Record(usize, ScoreRecord),
    Trace(usize, Box<GroupTrace>),
}

fn read_items(path: &Path) -> Result<Vec<Item>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).input()?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{n}: not JSON", path.display()))
            .input()?;
        let item = if value.get("samples").is_some() {
            serde_json::from_value(value).map(|t| Item::Trace(n, Box::new(t)))
        } else {
            serde_json::from_value(value).map(|r| Item::Record(n, r))
        };
        items.push(
            item.with_context(|| format!("{}:{n}: schema violation", path.display()))
                .input()?,
        );
    }
    Ok(items)
}

fn decode(mask: &Option<String>, line: usize) -> Result<Option<BinaryMask>, Failure> {
    mask.as_deref()
        .map(BinaryMask::from_base64)
        .transpose()
        .with_context(|| format!("line {line}: bad mask"))
        .input()
}

fn advantages(totals: Vec<f64>, grpo: &GrpoConfig) -> Result<Vec<f64>, Failure> {
    if totals.len() < 2 {
        return Ok(vec![0.0; totals.len()]);
    }
    let rewards = GroupRewards::new(totals).invariant()?;
    Ok(group_advantages(&rewards, grpo).invariant()?.values)
}

fn score_records(
    group: &[(usize, ScoreRecord)],
    cfg: &RewardConfig,
    grpo: &GrpoConfig,
    out: &mut Vec<ScoredLine>,
) -> Result<(), Failure> {
    let (first_line, head) = &group[0];
    for (n, r) in &group[1..] {
        if r.gt_answers != head.gt_answers || r.gt_mask != head.gt_mask || (r.image_w, r.image_h) != (head.image_w, head.image_h) {
            return Err(Failure::Input(anyhow!(
                "line {n}: ground truth differs from line {first_line} in the same group"
            )));
        }
    }
    let gt_mask = decode(&head.gt_mask, *first_line)?;
    let masks = group
        .iter()
        .map(|(n, r)| Ok((decode(&r.first_mask, *n)?, decode(&r.second_mask, *n)?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    let texts: Vec<SampleText<'_>> = group
        .iter()
        .zip(&masks)
        .map(|((_, r), m)| SampleText {
            first_pass: &r.raw_first_pass,
            second_pass: r.raw_second_pass.as_deref(),
            first_mask: m.0.as_ref(),
            second_mask: m.1.as_ref(),
        })
        .collect();
    let truth = GroupTruth {
        answers: &head.gt_answers,
        mask: gt_mask.as_ref(),
        image_size: head.image_w.zip(head.image_h),
    };
    let scored = score_group(&texts, &truth, cfg, &WhitespacePunctTokenizer)
        .with_context(|| format!("line {first_line}"))
        .input()?;
    let adv = advantages(scored.iter().map(|s| s.breakdown.total).collect(), grpo)?;
    for (((n, r), s), a) in group.iter().zip(&scored).zip(adv) {
        if let Err(e) = &s.first {
            log::warn!("line {n}: first pass unparseable, scored as zero: {e}");
        }
        out.push(ScoredLine {
            line: *n,
            sample: None,
            group: r.group.clone(),
            n1: s.n1,
            n2: s.n2,
            breakdown: s.breakdown,
            advantage: a,
            matches_trace: None,
        });
    }
    Ok(())
}

fn score_trace(line: usize, trace: &GroupTrace, grpo: &GrpoConfig, out: &mut Vec<ScoredLine>) -> Result<usize, Failure> {
    let replay = trace
        .replay(&WhitespacePunctTokenizer, grpo)
        .with_context(|| format!("line {line}: replaying trace"))
        .input()?;
    let mut mismatches = 0;
    for (i, s) in trace.samples.iter().enumerate() {
        let same = replay.breakdowns[i] == s.breakdown
            && replay.n1[i] == s.n1
            && replay.n2[i] == s.n2
            && replay.advantages[i].to_bits() == s.advantage.to_bits();
        if !same {
            mismatches += 1;
            log::error!("line {line} sample {i}: recomputed rewards differ from the trace");
        }
        out.push(ScoredLine {
            line,
            sample: Some(i),
            group: Some(trace.scene_id.clone()),
            n1: replay.n1[i],
            n2: replay.n2[i],
            breakdown: replay.breakdowns[i],
            advantage: replay.advantages[i],
            matches_trace: Some(same),
        });
    }
    Ok(mismatches)
}

/// Scores every record of a JSONL file. Trace lines carry their own reward
/// config; plain records use `cfg`.
pub fn score_file(
    path: &Path,
    cfg: &RewardConfig,
    grpo: &GrpoConfig,
) -> Result<(Vec<ScoredLine>, ScoreSummary), Failure> {
    let items = read_items(path)?;
    let mut lines = Vec::new();
    let mut groups = 0;
    let mut mismatches = 0;
    let mut pending: Vec<(usize, ScoreRecord)> = Vec::new();
    let flush = |pending: &mut Vec<(usize, ScoreRecord)>, lines: &mut Vec<ScoredLine>| -> Result<usize, Failure> {
        if pending.is_empty() {
            return Ok(0);
        }
        score_records(pending, cfg, grpo, lines)?;
        pending.clear();
        Ok(1)
    };
    for item in items {
        match item {
            Item::Record(n, r) => {
                let joins = match (pending.last(), &r.group) {
                    (Some((_, prev)), Some(g)) => prev.group.as_ref() == Some(g),
                    _ => false,
                };
                if !joins {
                    groups += flush(&mut pending, &mut lines)?;
                }
                pending.push((n, r));
            }
            Item::Trace(n, t) => {
                groups += flush(&mut pending, &mut lines)?;
                mismatches += score_trace(n, &t, grpo, &mut lines)?;
                groups += 1;
            }
        }
    }
    groups += flush(&mut pending, &mut lines)?;
    let summary = summarize(&lines, groups, mismatches);
    Ok((lines, summary))
}

fn summarize(lines: &[ScoredLine], groups: usize, trace_mismatches: usize) -> ScoreSummary {
    let mut mean = BTreeMap::new();
    for l in lines {
        if let Ok(Value::Object(fields)) = serde_json::to_value(l.breakdown) {
            for (k, v) in fields {
                *mean.entry(k).or_insert(0.0) += v.as_f64().unwrap_or(0.0);
            }
        }
    }
    if lines.is_empty() {
        if let Ok(Value::Object(fields)) = serde_json::to_value(RewardBreakdown::default()) {
            mean.extend(fields.keys().map(|k| (k.clone(), 0.0)));
        }
    } else {
        mean.values_mut().for_each(|v| *v /= lines.len() as f64);
    }
    ScoreSummary {
        records: lines.len(),
        groups,
        mean,
        trace_mismatches,
    }
}
