//! gIoU / cIoU / token report over aligned prediction and ground-truth masks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use segreward::geometry::{mask_intersection_union, seg_metrics, BinaryMask};
use segreward::structured_output::{count_tokens, parse_response, ParseMode, WhitespacePunctTokenizer};

use crate::{Classify, Failure};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
    pub mask: BinaryMask,
    /// Reasoning token count; counted from `raw_first_pass` when absent.
    #[serde(default)]
    pub tokens: Option<f64>,
    #[serde(default)]
    pub raw_first_pass: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRow {
    pub split: String,
    pub images: usize,
    /// Mean reasoning tokens; absent when no prediction reports them.
    pub tokens: Option<f64>,
    pub giou: f64,
    pub ciou: f64,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).input()?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}: schema violation", path.display(), i + 1))
                .input()
        })
        .collect()
}

fn tokens_of(p: &PredRecord) -> Option<f64> {
    p.tokens.or_else(|| {
        let raw = p.raw_first_pass.as_deref()?;
        let r = parse_response(raw, ParseMode::FirstPass).ok()?;
        Some(count_tokens(&r.think, &WhitespacePunctTokenizer) as f64)
    })
}

pub fn eval_files(pred_path: &Path, gt_path: &Path) -> Result<Vec<SplitRow>, Failure> {
    let preds: Vec<PredRecord> = read_jsonl(pred_path)?;
    let gts: Vec<GtRecord> = read_jsonl(gt_path)?;
    if preds.len() != gts.len() {
        return Err(Failure::Input(anyhow!(
            "{} predictions but {} ground-truth records",
            preds.len(),
            gts.len()
        )));
    }
    // Splits in order of first appearance: name, per-image (I, U), token counts.
    type Split = (String, Vec<(u64, u64)>, Vec<f64>);
    let mut rows: Vec<Split> = Vec::new();
    for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
        if let (Some(a), Some(b)) = (&p.id, &g.id) {
            if a != b {
                return Err(Failure::Input(anyhow!("record {}: prediction id {a:?} vs gt id {b:?}", i + 1)));
            }
        }
        let split = g.split.clone().or_else(|| p.split.clone()).unwrap_or_else(|| "all".into());
        let iu = mask_intersection_union(&p.mask, &g.mask)
            .with_context(|| format!("record {}", i + 1))
            .input()?;
        let idx = match rows.iter().position(|r| r.0 == split) {
            Some(idx) => idx,
            None => {
                rows.push((split, Vec::new(), Vec::new()));
                rows.len() - 1
            }
        };
        rows[idx].1.push(iu);
        rows[idx].2.extend(tokens_of(p));
    }
    rows.into_iter()
        .map(|(split, ius, tokens)| {
            let m = seg_metrics(&ius).invariant()?;
            Ok(SplitRow {
                split,
                images: ius.len(),
                tokens: (!tokens.is_empty()).then(|| tokens.iter().sum::<f64>() / tokens.len() as f64),
                giou: m.giou,
                ciou: m.ciou,
            })
        })
        .collect()
}

pub fn render(rows: &[SplitRow]) -> String {
    let mut out = String::from("| Split | Images | Tokens | gIoU | cIoU |\n|---|---|---|---|---|\n");
    for r in rows {
        let tokens = r.tokens.map_or_else(|| "-".to_string(), |t| format!("{t:.1}"));
        let _ = writeln!(
            out,
            "| {} | {} | {tokens} | {:.1} | {:.1} |",
            r.split,
            r.images,
            100.0 * r.giou,
            100.0 * r.ciou
        );
    }
    out
}
