use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{PolicyPreset, TrainConfig};
use super::oracle::MaskOracle;
use super::policy::{TemplateChoice, TemplatePolicy, NUM_PARAMS};
use super::query::{generate_query, Difficulty, QueryCase};
use super::scene::{generate_scene, Scene};
use super::HarnessError;
use crate::exec::{derive_seed, Execution};
use crate::geometry::{mask_intersection_union, seg_metrics};
use crate::grpo::{grpo_objective, kl_estimate, regularized_objective, GrpoConfig};
use crate::rewards::{accuracy_reward, RewardBreakdown, RewardMode, GroupTruth};
use crate::rollout::{
    answer_entropy, assemble_group, run_first_pass, run_second_passes, Decode, Generation, GroupTrace, Policy,
    PolicyError, RolloutGroup,
};
use crate::structured_output::{ParseOptions, StructuredResponse, WhitespacePunctTokenizer};

const SUITE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const EVAL_SCENE_STREAM: u64 = 3;
const EVAL_SAMPLE_STREAM: u64 = 4;

/// One sampled generation as seen by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub choice: TemplateChoice,
    pub advantage: f64,
    /// Token count of the generation; the KL estimate averages over it.
    pub n_tokens: usize,
}

fn decision_logprobs(policy: &TemplatePolicy, s: &GradientSample) -> Vec<f64> {
    let mut v: Vec<f64> = s.choice.decisions().map(|d| policy.decision_logprob(d)).collect();
    // Tokens after the first of each section are fully determined.
    v.resize(s.n_tokens.max(v.len()), 0.0);
    v
}

/// Batch objective: mean over groups of the GRPO objective, minus beta times
/// the mean per-sample KL estimate against `reference`.
pub fn surrogate_objective(
    policy: &TemplatePolicy,
    reference: &TemplatePolicy,
    groups: &[Vec<GradientSample>],
    beta: f64,
) -> f64 {
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut n = 0usize;
    let used: Vec<&Vec<GradientSample>> = groups.iter().filter(|g| !g.is_empty()).collect();
    for g in &used {
        let adv: Vec<f64> = g.iter().map(|s| s.advantage).collect();
        let logp: Vec<f64> = g.iter().map(|s| policy.log_prob(&s.choice)).collect();
        objective += grpo_objective(&adv, &logp).expect("equal lengths");
        for s in g.iter() {
            kl += kl_estimate(&decision_logprobs(policy, s), &decision_logprobs(reference, s)).expect("equal lengths");
            n += 1;
        }
    }
    if used.is_empty() {
        return 0.0;
    }
    regularized_objective(objective / used.len() as f64, kl / n as f64, beta)
}

/// Analytic gradient of [`surrogate_objective`] with respect to `theta`.
///
/// Per-group gradients are computed independently and summed in group
/// order, so the result does not depend on the execution mode.
pub fn policy_gradient(
    policy: &TemplatePolicy,
    reference: &TemplatePolicy,
    groups: &[Vec<GradientSample>],
    beta: f64,
    exec: Execution,
) -> Vec<f64> {
    let used: Vec<&Vec<GradientSample>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let n_groups = used.len() as f64;
    let n_samples: usize = used.iter().map(|g| g.len()).sum();
    let partials = exec.map(&used, |g| {
        let mut grad = vec![0.0; NUM_PARAMS];
        let k = g.len() as f64;
        for s in g.iter() {
            policy.accumulate_score(&s.choice, s.advantage / (k * n_groups), &mut grad);
            if beta != 0.0 {
                // d/dtheta k3(ref - theta) = (1 - exp(ref - theta)) * dlogpi/dtheta
                let t = s.n_tokens.max(s.choice.decisions().count()) as f64;
                for d in s.choice.decisions() {
                    let ratio = reference.decision_logprob(d) - policy.decision_logprob(d);
                    let dk = -ratio.exp_m1();
                    policy.accumulate_decision(d, -beta * dk / (t * n_samples as f64), &mut grad);
                }
            }
        }
        grad
    });
    let mut grad = vec![0.0; NUM_PARAMS];
    for p in partials {
        for (g, v) in grad.iter_mut().zip(p) {
            *g += v;
        }
    }
    grad
}

fn gradient_samples(group: &RolloutGroup<TemplateChoice>) -> Vec<GradientSample> {
    group
        .first_pass
        .iter()
        .zip(&group.advantages.values)
        .filter_map(|(s, &advantage)| {
            let g = s.generation()?;
            Some(GradientSample {
                choice: g.choice.clone(),
                advantage,
                n_tokens: g.tokens.len(),
            })
        })
        .collect()
}

/// One gradient-ascent step on the batch; returns the gradient norm.
pub fn policy_update(
    policy: &mut TemplatePolicy,
    reference: &TemplatePolicy,
    batch: &[RolloutGroup<TemplateChoice>],
    cfg: &GrpoConfig,
    exec: Execution,
) -> Result<f64, HarnessError> {
    let groups: Vec<Vec<GradientSample>> = batch.iter().map(gradient_samples).collect();
    let grad = policy_gradient(policy, reference, &groups, cfg.kl_beta, exec);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(HarnessError::NonFiniteGradient(i));
    }
    for (t, g) in policy.theta.iter_mut().zip(&grad) {
        *t += cfg.learning_rate * g;
    }
    Ok(grad.iter().map(|g| g * g).sum::<f64>().sqrt())
}

/// Per-step means over every first-pass rollout of the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_total: f64,
    pub mean_acc: f64,
    pub mean_desc: f64,
    pub mean_len: f64,
    pub mean_n1: f64,
    pub mean_n2: f64,
    pub answer_entropy: f64,
    /// Share of rollouts that localized every target.
    pub acc_rate: f64,
    /// Share of groups whose length gate was closed.
    pub gate_closed: f64,
}

fn is_accurate(b: &RewardBreakdown, mode: RewardMode) -> bool {
    match mode {
        RewardMode::BoxPoint => b.acc_iou >= 1.0 - 1e-9,
        RewardMode::Mask => b.acc_iou > 0.5,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn step_metrics(step: usize, batch: &[RolloutGroup<TemplateChoice>], mode: RewardMode) -> StepMetrics {
    let scored = || batch.iter().flat_map(|g| g.scored.iter());
    let entropies = batch
        .iter()
        .flat_map(|g| g.first_pass.iter())
        .filter_map(|s| s.generation().map(|g| answer_entropy(&g.tokens)));
    StepMetrics {
        step,
        mean_total: mean(scored().map(|s| s.breakdown.total)),
        mean_acc: mean(scored().map(|s| s.breakdown.acc_total)),
        mean_desc: mean(scored().map(|s| s.breakdown.desc)),
        mean_len: mean(scored().map(|s| s.breakdown.len_conditional)),
        mean_n1: mean(scored().map(|s| s.n1 as f64)),
        mean_n2: mean(scored().filter_map(|s| s.n2.map(|n| n as f64))),
        answer_entropy: mean(entropies),
        acc_rate: mean(scored().map(|s| if is_accurate(&s.breakdown, mode) { 1.0 } else { 0.0 })),
        gate_closed: mean(batch.iter().map(|g| {
            let closed = g.breakdowns().all(|b| b.acc_total <= 0.0);
            if closed {
                1.0
            } else {
                0.0
            }
        })),
    }
}

/// A held-out query on its own scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub scene: Scene,
    pub query: QueryCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    /// Policy calls made; one per case.
    pub passes: usize,
    pub acc_rate: f64,
    pub mean_acc: f64,
    pub mean_n1: f64,
    pub answer_entropy: f64,
    pub giou: f64,
    pub ciou: f64,
}

/// Counts policy calls to check that evaluation runs a single pass.
struct Counting<'a> {
    inner: &'a TemplatePolicy,
    passes: AtomicUsize,
}

impl Policy for Counting<'_> {
    type Scene = Scene;
    type Choice = TemplateChoice;

    fn generate(
        &self,
        prompt: &str,
        scene: &Scene,
        decode: Decode,
        rng: &mut dyn RngCore,
    ) -> Result<Generation<TemplateChoice>, PolicyError> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(prompt, scene, decode, rng)
    }

    fn snapshot(&self) -> Self {
        Counting {
            inner: self.inner,
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

fn query_for(scene: &Scene, hard: bool, seed: u64) -> Result<QueryCase, HarnessError> {
    if hard {
        if let Ok(q) = generate_query(scene, Difficulty::Hard, seed) {
            return Ok(q);
        }
    }
    generate_query(scene, Difficulty::Easy, seed)
}

fn eval_cases(cfg: &TrainConfig) -> Result<Vec<EvalCase>, HarnessError> {
    cfg.execution
        .map_range(cfg.eval_size, |i| {
            let seed = derive_seed(cfg.seed, &[EVAL_SCENE_STREAM, i as u64]);
            let scene = generate_scene(seed, &cfg.scene)?;
            let query = query_for(&scene, i % 2 == 1, seed)?;
            Ok(EvalCase { scene, query })
        })
        .into_iter()
        .collect()
}

fn response_mask(oracle: &MaskOracle, scene: &Scene, r: &StructuredResponse) -> crate::geometry::BinaryMask {
    let boxes: Vec<_> = r.answers.iter().map(|a| a.bbox).collect();
    oracle.mask_from(scene, &boxes, r.description.as_deref().unwrap_or(""))
}

/// Inference-mode evaluation: one sampled first pass per case.
pub fn evaluate(
    policy: &TemplatePolicy,
    cases: &[EvalCase],
    cfg: &TrainConfig,
) -> Result<EvalReport, HarnessError> {
    let counting = Counting {
        inner: policy,
        passes: AtomicUsize::new(0),
    };
    let oracle = MaskOracle::new(cfg.mask_noise, cfg.seed);
    let reward_cfg = cfg.reward_config();
    let tok = WhitespacePunctTokenizer;
    let per_case = cfg.execution.map_range(cases.len(), |i| {
        let case = &cases[i];
        let options = ParseOptions {
            image_size: Some((case.scene.image_w, case.scene.image_h)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[EVAL_SAMPLE_STREAM, i as u64]));
        let sample = run_first_pass(&counting, &case.scene, &case.query.query, 1, &mut rng, &options, Execution::Sequential)
            .pop()
            .expect("one sample");
        let gt = case.scene.answers(&case.query.targets);
        let gt_mask = case.scene.union_mask(&case.query.targets);
        let entropy = sample.generation().map_or(0.0, |g| answer_entropy(&g.tokens));
        match sample.response() {
            Some(r) => {
                let acc = accuracy_reward(&r.answers, &gt, &reward_cfg.thresholds);
                let mask = response_mask(&oracle, &case.scene, r);
                let iu = mask_intersection_union(&mask, &gt_mask)?;
                let n1 = crate::structured_output::Tokenizer::count(&tok, &r.think);
                Ok((acc.iou >= 1.0 - 1e-9, acc.total, n1, entropy, iu))
            }
            None => Ok((false, 0.0, 0, entropy, (0, gt_mask.count()))),
        }
    });
    let per_case: Vec<(bool, f64, usize, f64, (u64, u64))> =
        per_case.into_iter().collect::<Result<_, HarnessError>>()?;
    let iu: Vec<(u64, u64)> = per_case.iter().map(|c| c.4).collect();
    let seg = seg_metrics(&iu)?;
    Ok(EvalReport {
        cases: cases.len(),
        passes: counting.passes.load(Ordering::Relaxed),
        acc_rate: mean(per_case.iter().map(|c| if c.0 { 1.0 } else { 0.0 })),
        mean_acc: mean(per_case.iter().map(|c| c.1)),
        mean_n1: mean(per_case.iter().map(|c| c.2 as f64)),
        answer_entropy: mean(per_case.iter().map(|c| c.3)),
        giou: seg.giou,
        ciou: seg.ciou,
    })
}

/// Live training state, exposed for step-by-step drivers.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: TemplatePolicy,
    pub reference: TemplatePolicy,
    pub suite: Vec<Scene>,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let policy = match config.policy_preset {
            PolicyPreset::Default => TemplatePolicy::initial(),
            PolicyPreset::ColdStart => TemplatePolicy::cold_start(),
        };
        let suite = config
            .execution
            .map_range(config.suite_size, |i| {
                generate_scene(derive_seed(config.seed, &[SUITE_STREAM, i as u64]), &config.scene)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            reference: policy.snapshot(),
            policy,
            suite,
            step: 0,
            config,
        })
    }

    /// Rolls out one batch of groups with the current policy.
    pub fn rollout(&self) -> Result<Vec<RolloutGroup<TemplateChoice>>, HarnessError> {
        let cfg = &self.config;
        let reward_cfg = cfg.reward_config();
        let grpo_cfg = cfg.grpo_config();
        let oracle = MaskOracle::new(cfg.mask_noise, cfg.seed);
        let tok = WhitespacePunctTokenizer;
        cfg.execution
            .map_range(cfg.batch_size, |g| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STEP_STREAM, self.step as u64, g as u64]));
                let scene_index = rng.gen_range(0..self.suite.len());
                let scene = &self.suite[scene_index];
                let hard = rng.gen_bool(cfg.hard_fraction);
                let case = query_for(scene, hard, rng.next_u64())?;
                let options = ParseOptions {
                    image_size: Some((scene.image_w, scene.image_h)),
                };
                let first = run_first_pass(
                    &self.policy,
                    scene,
                    &case.query,
                    cfg.group_size,
                    &mut rng,
                    &options,
                    Execution::Sequential,
                );
                let second = run_second_passes(&self.policy, scene, &first, &options, Execution::Sequential);
                let gt = scene.answers(&case.targets);
                let gt_mask = scene.union_mask(&case.targets);
                let mask_mode = reward_cfg.mode == RewardMode::Mask;
                let truth = GroupTruth {
                    answers: &gt,
                    mask: mask_mode.then_some(&gt_mask),
                    image_size: Some((scene.image_w, scene.image_h)),
                };
                let source = |r: &StructuredResponse| response_mask(&oracle, scene, r);
                let group = assemble_group(
                    format!("suite-{scene_index}"),
                    case.query.clone(),
                    first,
                    second,
                    &truth,
                    mask_mode.then_some(&source as &(dyn Fn(&StructuredResponse) -> _ + Sync)),
                    &reward_cfg,
                    &grpo_cfg,
                    &tok,
                )?;
                Ok(group)
            })
            .into_iter()
            .collect()
    }

    /// Rollout, metrics, update.
    pub fn step(&mut self, sink: &mut dyn FnMut(&GroupTrace)) -> Result<StepMetrics, HarnessError> {
        let batch = self.rollout()?;
        let metrics = step_metrics(self.step, &batch, self.config.reward_mode);
        for g in &batch {
            sink(&GroupTrace::from(g));
        }
        policy_update(
            &mut self.policy,
            &self.reference,
            &batch,
            &self.config.grpo_config(),
            self.config.execution,
        )?;
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub timeline: Vec<StepMetrics>,
    pub initial: EvalReport,
    pub final_eval: EvalReport,
    pub policy: TemplatePolicy,
}

pub fn train(config: &TrainConfig) -> Result<TrainReport, HarnessError> {
    train_with(config, &mut |_| {})
}

/// Runs the configured number of steps, streaming every group trace to `sink`.
pub fn train_with(config: &TrainConfig, sink: &mut dyn FnMut(&GroupTrace)) -> Result<TrainReport, HarnessError> {
    let mut state = TrainState::new(config.clone())?;
    let cases = eval_cases(config)?;
    let initial = evaluate(&state.policy, &cases, config)?;
    let mut timeline = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let m = state.step(sink)?;
        log::debug!(
            "step {} total {:.3} acc_rate {:.3} n1 {:.1}",
            m.step,
            m.mean_total,
            m.acc_rate,
            m.mean_n1
        );
        timeline.push(m);
    }
    let final_eval = evaluate(&state.policy, &cases, config)?;
    Ok(TrainReport {
        config: config.clone(),
        timeline,
        initial,
        final_eval,
        policy: state.policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::policy::Context;

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            group_size: 4,
            suite_size: 16,
            eval_size: 8,
            ..TrainConfig::default()
        }
    }

    fn random_groups(seed: u64, policy: &TemplatePolicy) -> Vec<Vec<GradientSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let ctx = if rng.gen_bool(0.5) { Context::Easy } else { Context::Hard };
                        GradientSample {
                            choice: policy.decide(ctx, Decode::Sample, &mut rng),
                            advantage: rng.gen_range(-2.0..2.0),
                            n_tokens: rng.gen_range(20..120),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let p = TemplatePolicy::initial();
        let mut groups = random_groups(1, &p);
        groups.iter_mut().flatten().for_each(|s| s.advantage = 0.0);
        let g = policy_gradient(&p, &p, &groups, 0.0, Execution::Sequential);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positive_advantage_raises_its_logit() {
        let p = TemplatePolicy::initial();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = p.decide(Context::Hard, Decode::Sample, &mut rng);
        let mut b = a.clone();
        a.length.action = 0;
        b.length.action = 1;
        let groups = vec![vec![
            GradientSample {
                choice: a,
                advantage: 1.0,
                n_tokens: 10,
            },
            GradientSample {
                choice: b,
                advantage: -1.0,
                n_tokens: 10,
            },
        ]];
        let g = policy_gradient(&p, &p, &groups, 0.0, Execution::Sequential);
        let off = TemplatePolicy::length_offset(Context::Hard);
        assert!(g[off] > 0.0 && g[off + 1] < 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let mut p = TemplatePolicy::initial();
            p.theta.iter_mut().for_each(|t| *t += rng.gen_range(-1.0..1.0));
            let mut reference = p.clone();
            reference.theta.iter_mut().for_each(|t| *t += rng.gen_range(-0.5..0.5));
            let groups = random_groups(trial, &p);
            let beta = if trial % 2 == 0 { 0.0 } else { 0.7 };
            let g = policy_gradient(&p, &reference, &groups, beta, Execution::Parallel);
            let h = 1e-5;
            let fd: Vec<f64> = (0..NUM_PARAMS)
                .map(|j| {
                    let mut plus = p.clone();
                    plus.theta[j] += h;
                    let mut minus = p.clone();
                    minus.theta[j] -= h;
                    (surrogate_objective(&plus, &reference, &groups, beta)
                        - surrogate_objective(&minus, &reference, &groups, beta))
                        / (2.0 * h)
                })
                .collect();
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-4, "trial {trial}: {}", diff / scale);
        }
    }

    #[test]
    fn zero_steps_give_initial_metrics_only() {
        let r = train(&small(0)).unwrap();
        assert!(r.timeline.is_empty());
        assert_eq!(r.initial, r.final_eval);
        assert_eq!(r.initial.passes, r.initial.cases);
    }

    #[test]
    fn runs_are_bit_identical_across_execution_modes() {
        let a = train(&small(3)).unwrap();
        let b = train(&TrainConfig {
            execution: Execution::Sequential,
            ..small(3)
        })
        .unwrap();
        assert_eq!(a.timeline, b.timeline);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.final_eval, b.final_eval);
    }

    #[test]
    fn cold_start_keeps_the_gate_closed() {
        let cfg = TrainConfig {
            policy_preset: PolicyPreset::ColdStart,
            ..small(2)
        };
        let mut gated = Vec::new();
        train_with(&cfg, &mut |t| {
            gated.extend(t.samples.iter().map(|s| s.breakdown.len_conditional));
        })
        .unwrap();
        assert_eq!(gated.len(), 2 * 4 * 4);
        assert!(gated.iter().all(|&l| l == 1.0));
    }

    #[test]
    fn mask_mode_runs() {
        let cfg = TrainConfig {
            reward_mode: RewardMode::Mask,
            mask_noise: 0.02,
            ..small(2)
        };
        let mut traces = Vec::new();
        let r = train_with(&cfg, &mut |t| traces.push(t.clone())).unwrap();
        assert_eq!(r.timeline.len(), 2);
        let tok = WhitespacePunctTokenizer;
        for t in &traces {
            assert!(t.gt_mask.is_some());
            let replay = t.replay(&tok, &cfg.grpo_config()).unwrap();
            let stored: Vec<_> = t.samples.iter().map(|s| s.breakdown).collect();
            assert_eq!(replay.breakdowns, stored);
        }
    }
}
