use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{train, StepMetrics, TrainReport};
use super::HarnessError;

pub const ANCHOR_GRID: [f64; 4] = [25.0, 35.0, 45.0, 55.0];
pub const GAMMA_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Mean reasoning tokens on the held-out cases after training.
    pub tokens: f64,
    pub giou: f64,
    pub ciou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Anchor varied, gamma held at the base config.
    pub anchor: Vec<SweepRow>,
    /// Gamma varied, anchor held at the base config.
    pub gamma: Vec<SweepRow>,
}

fn row(value: f64, cfg: &TrainConfig) -> Result<SweepRow, HarnessError> {
    let r = train(cfg)?;
    Ok(SweepRow {
        value,
        tokens: r.final_eval.mean_n1,
        giou: r.final_eval.giou,
        ciou: r.final_eval.ciou,
    })
}

/// One-at-a-time sweeps over the length anchor and the penalty slope.
pub fn sweep(base: &TrainConfig) -> Result<SweepReport, HarnessError> {
    let anchor = ANCHOR_GRID
        .iter()
        .map(|&n0| row(n0, &TrainConfig { anchor_n0: n0, ..base.clone() }))
        .collect::<Result<_, _>>()?;
    let gamma = GAMMA_GRID
        .iter()
        .map(|&g| row(g, &TrainConfig { gamma: g, ..base.clone() }))
        .collect::<Result<_, _>>()?;
    Ok(SweepReport { anchor, gamma })
}

fn table(out: &mut String, header: &str, rows: &[SweepRow]) {
    let _ = writeln!(out, "| {header} | Tokens | gIoU | cIoU |");
    let _ = writeln!(out, "|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.1} | {:.1} | {:.1} |",
            r.value,
            r.tokens,
            100.0 * r.giou,
            100.0 * r.ciou
        );
    }
}

/// Markdown tables, one per swept parameter.
pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = String::new();
    table(&mut out, "N0", &report.anchor);
    out.push('\n');
    table(&mut out, "gamma", &report.gamma);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub enable_desc: bool,
    pub enable_len: bool,
    pub acc_rate: f64,
    pub tokens: f64,
    pub giou: f64,
    pub ciou: f64,
    /// Mean over the last tenth of training steps (at least one).
    pub train_acc_rate: f64,
    pub train_n1: f64,
}

/// The three reward configurations compared by [`ablation`]:
/// `(name, enable_desc, enable_len)`.
pub const ABLATION_ROWS: [(&str, bool, bool); 3] =
    [("base", false, false), ("+desc", true, false), ("+desc+len", true, true)];

/// Summarizes one finished run as an ablation row.
pub fn ablation_row(name: &str, report: &TrainReport) -> AblationRow {
    let t = &report.timeline;
    let tail = (t.len() / 10).max(1).min(t.len());
    let last = &t[t.len() - tail..];
    let avg = |f: fn(&StepMetrics) -> f64| {
        if last.is_empty() {
            0.0
        } else {
            last.iter().map(f).sum::<f64>() / last.len() as f64
        }
    };
    AblationRow {
        name: name.to_string(),
        enable_desc: report.config.enable_desc,
        enable_len: report.config.enable_len,
        acc_rate: report.final_eval.acc_rate,
        tokens: report.final_eval.mean_n1,
        giou: report.final_eval.giou,
        ciou: report.final_eval.ciou,
        train_acc_rate: avg(|m| m.acc_rate),
        train_n1: avg(|m| m.mean_n1),
    }
}

/// Base rewards, then the description reward, then the length reward.
pub fn ablation(base: &TrainConfig) -> Result<Vec<AblationRow>, HarnessError> {
    ABLATION_ROWS
        .into_iter()
        .map(|(name, desc, len)| {
            let cfg = TrainConfig {
                enable_desc: desc,
                enable_len: len,
                ..base.clone()
            };
            Ok(ablation_row(name, &train(&cfg)?))
        })
        .collect()
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| Rewards | R_desc | R_len | Acc rate | Tokens | gIoU | cIoU |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    let mark = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.3} | {:.1} | {:.1} | {:.1} |",
            r.name,
            mark(r.enable_desc),
            mark(r.enable_len),
            r.acc_rate,
            r.tokens,
            100.0 * r.giou,
            100.0 * r.ciou
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sweep_renders_both_tables() {
        let base = TrainConfig {
            steps: 1,
            batch_size: 2,
            group_size: 2,
            suite_size: 4,
            eval_size: 4,
            ..TrainConfig::default()
        };
        let report = sweep(&base).unwrap();
        assert_eq!(report.anchor.len(), 4);
        assert_eq!(report.gamma.len(), 4);
        let text = render_sweep(&report);
        assert!(text.contains("| N0 | Tokens | gIoU | cIoU |"));
        assert!(text.contains("| 0.2 |"));
        let rows = ablation(&base).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(render_ablation(&rows).contains("+desc+len"));
    }
}
