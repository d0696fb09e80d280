//! Independent reference checks for the numerical core.
//!
//! Each suite compares a fast implementation with a slow, obviously correct
//! one on seeded random instances and reports the worst discrepancy.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{derive_seed, Execution};
use crate::geometry::{mask_iou, BinaryMask, Bbox, Point};
use crate::grpo::{group_advantages, grpo_objective, k3, GroupRewards, GrpoConfig};
use crate::harness::{policy_gradient, surrogate_objective, Context, GradientSample, TemplatePolicy, NUM_PARAMS};
use crate::matching::{brute_force_match, match_objects, Matching};
use crate::rollout::Decode;
use crate::structured_output::{parse_response, render, render_response, ObjectAnswer, ParseMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Matching,
    Grpo,
    Gradient,
    MaskIou,
    Kl,
    Parser,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Matching,
        Suite::Grpo,
        Suite::Gradient,
        Suite::MaskIou,
        Suite::Kl,
        Suite::Parser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Matching => "matching",
            Suite::Grpo => "grpo",
            Suite::Gradient => "gradient",
            Suite::MaskIou => "mask_iou",
            Suite::Kl => "kl",
            Suite::Parser => "parser",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Instance count used when none is given.
    pub fn default_count(self) -> usize {
        match self {
            Suite::Matching => 1000,
            Suite::Grpo => 1000,
            Suite::Gradient => 100,
            Suite::MaskIou => 1000,
            Suite::Kl => 20,
            Suite::Parser => 100_000,
        }
    }

    pub fn run(self, count: usize, seed: u64) -> OracleReport {
        match self {
            Suite::Matching => matching_suite(count, seed),
            Suite::Grpo => grpo_suite(count, seed),
            Suite::Gradient => gradient_suite(count, seed),
            Suite::MaskIou => mask_iou_suite(count, seed),
            Suite::Kl => kl_suite(count, KL_SAMPLES, seed),
            Suite::Parser => parser_suite(count, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst discrepancy in the suite's own metric.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub first_failures: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn new(suite: Suite, tolerance: f64) -> Self {
        Self {
            suite: suite.name().to_string(),
            cases: 0,
            failures: 0,
            max_error: 0.0,
            tolerance,
            detail: String::new(),
            first_failures: Vec::new(),
        }
    }

    fn record(&mut self, error: f64, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_nan() || error > self.max_error {
            self.max_error = error;
        }
        if !ok {
            self.failures += 1;
            if self.first_failures.len() < 5 {
                self.first_failures.push(describe());
            }
        }
    }
}

fn random_object(rng: &mut ChaCha8Rng) -> ObjectAnswer {
    let x1 = rng.gen_range(0.0..400.0f64).round();
    let y1 = rng.gen_range(0.0..300.0f64).round();
    let w = rng.gen_range(10.0..200.0f64).round();
    let h = rng.gen_range(10.0..200.0f64).round();
    let b = Bbox::new(x1, y1, x1 + w, y1 + h).expect("positive size");
    ObjectAnswer::new(b, Point::new(x1 + w / 2.0, y1 + h / 2.0))
}

/// Hungarian vs exhaustive matching on random box sets with N, K <= 6.
/// Some instances reuse boxes to force exact ties.
pub fn matching_suite(count: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::Matching, 1e-9);
    let mut tie_free = 0;
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let n = rng.gen_range(0..=6);
        let k = rng.gen_range(0..=6);
        let gt: Vec<ObjectAnswer> = (0..n).map(|_| random_object(&mut rng)).collect();
        let mut pred: Vec<ObjectAnswer> = (0..k).map(|_| random_object(&mut rng)).collect();
        if n > 0 && k > 1 && rng.gen_bool(0.2) {
            let j = rng.gen_range(0..k);
            pred[j] = gt[rng.gen_range(0..n)];
            pred[(j + 1) % k] = pred[j];
        }
        let fast = match_objects(&gt, &pred);
        let slow = brute_force_match(&gt, &pred).expect("within brute-force size");
        let w = crate::matching::iou_matrix(&gt, &pred);
        let err = (fast.total(&w) - slow.total(&w)).abs();
        let unique = optimum_is_unique(&w, n, k, &slow);
        if unique {
            tie_free += 1;
        }
        let ok = err <= 1e-9 && (!unique || fast.pairs == slow.pairs);
        report.record(err, ok, || format!("instance {i}: fast {:?} vs brute {:?}", fast.pairs, slow.pairs));
    }
    report.detail = format!("{tie_free} tie-free instances compared pairing by pairing");
    report
}

/// True when no other full assignment reaches the optimum within 1e-9.
fn optimum_is_unique(w: &[Vec<f64>], n: usize, k: usize, best: &Matching) -> bool {
    let (rows, cols) = (n.min(k), n.max(k));
    let total = best.total(w);
    let mut near = 0;
    let mut perm: Vec<usize> = Vec::new();
    let mut used = vec![false; cols];
    fn go(
        r: usize,
        rows: usize,
        cols: usize,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if r == rows {
            visit(perm);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                perm.push(c);
                go(r + 1, rows, cols, perm, used, visit);
                perm.pop();
                used[c] = false;
            }
        }
    }
    go(0, rows, cols, &mut perm, &mut used, &mut |p| {
        let t: f64 = p
            .iter()
            .enumerate()
            .map(|(r, &c)| if n <= k { w[r][c] } else { w[c][r] })
            .sum();
        if (t - total).abs() <= 1e-9 {
            near += 1;
        }
    });
    near <= 1
}

/// Zero-sum, shift invariance, and scale behaviour of group advantages.
pub fn grpo_suite(count: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::Grpo, 1e-9);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let k = rng.gen_range(2..=16);
        let r: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..8.0) })
            .collect();
        let shift = rng.gen_range(-50.0..50.0);
        let scale = rng.gen_range(0.1..10.0);
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for normalize in [false, true] {
            let cfg = GrpoConfig {
                normalize_by_std: normalize,
                ..GrpoConfig::default()
            };
            let adv = |v: &[f64]| group_advantages(&GroupRewards::new(v.to_vec()).expect("finite"), &cfg).expect("K >= 2").values;
            let a = adv(&r);
            let sum = a.iter().sum::<f64>().abs();
            ok &= sum <= 1e-9;
            worst = worst.max(sum);
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let b = adv(&shifted);
            // Shifting perturbs the mean by rounding only.
            let d_shift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let mean = r.iter().sum::<f64>() / k as f64;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
            // Rounding in the shifted mean is amplified by 1/std when normalizing.
            let shift_tol = 1e-12 * (1.0 + shift.abs()) * if normalize { 1.0 / (std + cfg.epsilon) } else { 1.0 };
            ok &= d_shift <= shift_tol.max(1e-9);
            let logp: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..10.0)).collect();
            let o1 = grpo_objective(&a, &logp).expect("equal lengths");
            let o2 = grpo_objective(&b, &logp).expect("equal lengths");
            ok &= (o1 - o2).abs() <= shift_tol.max(1e-9) * 10.0;
            let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
            let c = adv(&scaled);
            let spread = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if spread > 0.0 {
                let d_scale = a
                    .iter()
                    .zip(&c)
                    .map(|(x, y)| {
                        let expect = if normalize { *x } else { x * scale };
                        (y - expect).abs() / (1.0 + expect.abs())
                    })
                    .fold(0.0, f64::max);
                // Normalized advantages differ by epsilon effects only.
                ok &= d_scale <= if normalize { 1e-6 } else { 1e-9 };
            }
        }
        report.record(worst, ok, || format!("group {i}: rewards {r:?}"));
    }
    report.detail = "zero-sum, shift invariance, scale behaviour in both normalization modes".into();
    report
}

/// Analytic policy gradient vs central finite differences.
pub fn gradient_suite(count: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::Gradient, 1e-4);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let mut policy = TemplatePolicy::initial();
        policy.theta.iter_mut().for_each(|t| *t += rng.gen_range(-1.5..1.5));
        let mut reference = policy.clone();
        reference.theta.iter_mut().for_each(|t| *t += rng.gen_range(-0.5..0.5));
        let beta = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..2.0) };
        let n_groups = rng.gen_range(1..=4);
        let groups: Vec<Vec<GradientSample>> = (0..n_groups)
            .map(|_| {
                let k = rng.gen_range(2..=8);
                let ctx = [Context::Easy, Context::Hard, Context::Referring][rng.gen_range(0..3)];
                (0..k)
                    .map(|_| GradientSample {
                        choice: policy.decide(ctx, Decode::Sample, &mut rng),
                        advantage: rng.gen_range(-2.0..2.0),
                        n_tokens: rng.gen_range(10..150),
                    })
                    .collect()
            })
            .collect();
        let analytic = policy_gradient(&policy, &reference, &groups, beta, Execution::Sequential);
        let h = 1e-5;
        let numeric: Vec<f64> = (0..NUM_PARAMS)
            .map(|j| {
                let mut plus = policy.clone();
                plus.theta[j] += h;
                let mut minus = policy.clone();
                minus.theta[j] -= h;
                (surrogate_objective(&plus, &reference, &groups, beta)
                    - surrogate_objective(&minus, &reference, &groups, beta))
                    / (2.0 * h)
            })
            .collect();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        let rel = diff / scale;
        report.record(rel, rel < 1e-4, || format!("instance {i}: relative error {rel:e}"));
    }
    report.detail = "relative L2 error of the full gradient vector, step 1e-5".into();
    report
}

/// Bit-packed mask IoU vs per-pixel counting on random masks.
pub fn mask_iou_suite(count: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::MaskIou, 1e-12);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let w = rng.gen_range(1..40);
        let h = rng.gen_range(1..40);
        let pa = rng.gen_range(0.0..1.0);
        let pb = rng.gen_range(0.0..1.0);
        let a: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(pa)).collect();
        let b: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(pb)).collect();
        let (mut inter, mut union) = (0u64, 0u64);
        for (x, y) in a.iter().zip(&b) {
            inter += u64::from(*x && *y);
            union += u64::from(*x || *y);
        }
        let expect = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let ma = BinaryMask::from_bits(w, h, a).expect("sized");
        let mb = BinaryMask::from_bits(w, h, b).expect("sized");
        // Round trip through the wire format too.
        let ma = BinaryMask::from_base64(&ma.to_base64()).expect("codec");
        let got = mask_iou(&ma, &mb).expect("same size");
        let err = (got - expect).abs();
        report.record(err, err <= 1e-12, || format!("instance {i}: {got} vs {expect}"));
    }
    report.detail = "pixel-counting oracle, masks round-tripped through base64".into();
    report
}

pub const KL_SAMPLES: usize = 10_000;

/// Closed-form KL(theta || ref) over the joint first-pass action space.
pub fn closed_form_kl(policy: &TemplatePolicy, reference: &TemplatePolicy, ctx: Context) -> f64 {
    policy
        .enumerate_choices(ctx)
        .iter()
        .map(|c| {
            let lp = policy.log_prob(c);
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - reference.log_prob(c))
            }
        })
        .sum()
}

/// Monte Carlo mean of the non-negative estimator on whole generations vs
/// the closed form; passes within three standard errors.
pub fn kl_suite(pairs: usize, samples: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::Kl, 3.0);
    for i in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let mut policy = TemplatePolicy::initial();
        policy.theta.iter_mut().for_each(|t| *t += rng.gen_range(-1.0..1.0));
        let mut reference = policy.clone();
        reference.theta.iter_mut().for_each(|t| *t += rng.gen_range(-0.7..0.7));
        let ctx = if i % 2 == 0 { Context::Hard } else { Context::Easy };
        let exact = closed_form_kl(&policy, &reference, ctx);
        let draws: Vec<f64> = (0..samples)
            .map(|_| {
                let c = policy.decide(ctx, Decode::Sample, &mut rng);
                k3(reference.log_prob(&c) - policy.log_prob(&c))
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let z = if se > 0.0 { (mean - exact).abs() / se } else { 0.0 };
        report.record(z, z <= 3.0, || format!("pair {i}: estimate {mean} exact {exact} z {z:.2}"));
    }
    report.detail = format!("{samples} samples per pair; error column is |z|");
    report
}

const FRAGMENTS: [&str; 16] = [
    "<think>",
    "</think>",
    "<description>",
    "</description>",
    "<answer>",
    "</answer>",
    "[",
    "]",
    "{",
    "}",
    "\"bbox_2d\": [1,2,30,40]",
    "\"point_2d\": [5,6]",
    ", ",
    "red cup",
    "-3",
    "1e400",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..12);
    let mut s = String::new();
    for _ in 0..n {
        match rng.gen_range(0..3) {
            0 => s.push_str(FRAGMENTS[rng.gen_range(0..FRAGMENTS.len())]),
            1 => s.push(char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('?')),
            _ => s.push(rng.gen_range(b' '..=b'~') as char),
        }
    }
    s
}

fn valid_response(rng: &mut ChaCha8Rng, mode: ParseMode) -> String {
    let answers: Vec<ObjectAnswer> = (0..rng.gen_range(0..4)).map(|_| random_object(rng)).collect();
    let think = random_text(rng).replace(['<', '>'], " ");
    let desc = (mode == ParseMode::FirstPass).then(|| "the red cup".to_string());
    render_response(&think, desc.as_deref(), &answers)
}

fn mutate(rng: &mut ChaCha8Rng, mut s: String) -> String {
    for _ in 0..rng.gen_range(0..4) {
        let mut cut = rng.gen_range(0..=s.len());
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        match rng.gen_range(0..3) {
            0 => s.insert_str(cut, FRAGMENTS[rng.gen_range(0..FRAGMENTS.len())]),
            1 => s.truncate(cut),
            _ => {
                let mut end = (cut + rng.gen_range(0..8)).min(s.len());
                while !s.is_char_boundary(end) {
                    end -= 1;
                }
                s.replace_range(cut..end, "");
            }
        }
    }
    s
}

/// Fuzzes the parser: no panics on any input, and every parseable input
/// re-renders to text that parses to the same content.
pub fn parser_suite(count: usize, seed: u64) -> OracleReport {
    let mut report = OracleReport::new(Suite::Parser, 0.0);
    let mut parsed_ok = 0usize;
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let mode = if rng.gen_bool(0.5) {
            ParseMode::FirstPass
        } else {
            ParseMode::SecondPass
        };
        let text = match rng.gen_range(0..3) {
            0 => valid_response(&mut rng, mode),
            1 => {
                let v = valid_response(&mut rng, mode);
                mutate(&mut rng, v)
            }
            _ => random_text(&mut rng),
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            parse_response(&text, mode).map(|r| {
                let again = parse_response(&render(&r), mode);
                matches!(again, Ok(ref b) if b.same_content(&r))
            })
        }));
        let ok = match outcome {
            Err(_) => false,
            Ok(Err(_)) => true,
            Ok(Ok(roundtrip)) => {
                parsed_ok += 1;
                roundtrip
            }
        };
        report.record(if ok { 0.0 } else { 1.0 }, ok, || format!("case {i}: {text:?}"));
    }
    report.detail = format!("{parsed_ok} parseable cases round-tripped");
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        for suite in Suite::ALL {
            let count = match suite {
                Suite::Kl => 2,
                Suite::Parser => 2000,
                _ => 30,
            };
            let r = suite.run(count, 1);
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.cases, count);
        }
    }

    #[test]
    fn closed_form_kl_is_zero_for_identical_policies() {
        let p = TemplatePolicy::initial();
        assert!(closed_form_kl(&p, &p, Context::Hard).abs() < 1e-15);
    }

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("nope"), None);
    }
}
