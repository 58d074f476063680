//! Optimizer, mini-batch iterative preference training with reference
//! switching, and the N-stage outer loop with base re-inference.
//!
//! The preference dataset is shuffled and split evenly into T shards; before
//! each shard the reference model is replaced by a frozen snapshot of the
//! current policy, which resets the gradient scale s to 0.5 and keeps the
//! gradient magnitude from vanishing across the run. The outer loop rebuilds
//! the judged portion of the data from the current policy every stage, so
//! the preference set tracks the model as it moves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{build_preference_pairs, compute_tau, expand_datasets, Judge, PreferenceDataset};
use crate::losses::{batch_loss_and_grad, LossConfig, LossKind, PreferencePair};
use crate::matrix::{
    build_instruction_datasets, InstructionDataset, MixtureSpec, ModelMatrix, PromptSet,
    RejectedRule,
};
use crate::rng::{self, derive_seed, derived_stream};
use crate::seq::{PolicyGradient, TabularPolicy};

/// Training hyperparameters. The optimizer settings default to the standard
/// recipe (Adam 0.9/0.95, decoupled weight decay 0.05, global norm clip 1,
/// cosine schedule with warmup decaying to zero); the learning rate defaults
/// to the production-scale 1e-6 and is scaled up by desk-scale run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub epochs_per_minibatch: usize,
    /// T: number of mini-batches per training run.
    pub minibatches: usize,
    /// N: number of outer iterations.
    pub outer_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Dpo,
            loss: LossConfig::default(),
            lr: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            warmup_frac: 0.03,
            batch_size: 256,
            epochs_per_minibatch: 2,
            minibatches: 3,
            outer_iters: 3,
            seed: 43,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Input("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Input("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Input("adam eps must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Input("weight decay must be >= 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Input("grad clip must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Input("warmup fraction must lie in [0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if self.epochs_per_minibatch < 1 {
            return Err(Error::Input("epochs_per_minibatch must be >= 1".into()));
        }
        if self.minibatches < 1 {
            return Err(Error::Input("minibatch count T must be >= 1".into()));
        }
        if self.outer_iters < 1 {
            return Err(Error::Input("outer iteration count N must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moment tables plus the step counter and schedule horizon.
#[derive(Debug, Clone)]
pub struct TrainState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    total_steps: usize,
}

impl TrainState {
    pub fn new(num_params: usize, total_steps: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            total_steps,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// Cosine learning rate with linear warmup, reaching exactly zero at the
/// final scheduled step.
pub fn schedule_lr(base_lr: f64, step: usize, total_steps: usize, warmup_frac: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total == warmup {
        return base_lr;
    }
    let progress = (step - warmup + 1) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// One bias-corrected Adam update with decoupled weight decay and global
/// gradient-norm clipping applied before the moment update. Returns the
/// learning rate used.
pub fn adam_step(
    policy: &mut TabularPolicy,
    state: &mut TrainState,
    grad: &PolicyGradient,
    cfg: &TrainConfig,
) -> Result<f64> {
    let g = grad.values();
    if g.len() != policy.num_params() || state.m.len() != g.len() {
        return Err(Error::Input("gradient/state shape mismatch".into()));
    }
    if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient entry {} at parameter {bad}; step aborted",
            g[bad]
        )));
    }
    let norm = grad.l2_norm();
    let clip_scale = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let lr = schedule_lr(cfg.lr, state.step, state.total_steps, cfg.warmup_frac);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let params = policy.logits_mut();
    for i in 0..params.len() {
        let gi = g[i] * clip_scale;
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * gi;
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = m_hat / (v_hat.sqrt() + cfg.adam_eps);
        params[i] -= lr * (update + cfg.weight_decay * params[i]);
    }
    state.step += 1;
    Ok(lr)
}

/// One row of training telemetry; the quantities a reward-curve or
/// gradient-scale plot needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRecord {
    pub step: u64,
    pub iter: u32,
    pub minibatch: u32,
    pub loss: f64,
    pub reward_w: f64,
    pub reward_l: f64,
    pub s: f64,
    pub lr: f64,
}

/// Receives telemetry rows in step order.
pub trait TelemetrySink {
    fn record(&mut self, record: TelemetryRecord);
}

impl TelemetrySink for Vec<TelemetryRecord> {
    fn record(&mut self, record: TelemetryRecord) {
        self.push(record);
    }
}

/// Discards telemetry.
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn record(&mut self, _record: TelemetryRecord) {}
}

/// Seeded shuffle followed by a contiguous split into T shards whose sizes
/// differ by at most one, remainder assigned to the earliest shards.
pub fn partition_minibatches(
    dataset: &PreferenceDataset,
    t_count: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Vec<PreferencePair>>> {
    let n = dataset.len();
    if t_count < 1 {
        return Err(Error::Input("minibatch count T must be >= 1".into()));
    }
    if t_count > n {
        return Err(Error::Input(format!(
            "cannot split {n} pairs into {t_count} mini-batches"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, rng);
    let base = n / t_count;
    let remainder = n % t_count;
    let mut shards = Vec::with_capacity(t_count);
    let mut cursor = 0;
    for t in 0..t_count {
        let size = base + usize::from(t < remainder);
        let shard = indices[cursor..cursor + size]
            .iter()
            .map(|&i| dataset.pairs[i].clone())
            .collect();
        shards.push(shard);
        cursor += size;
    }
    Ok(shards)
}

fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn steps_for_shard(shard_len: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs_per_minibatch * shard_len.div_ceil(cfg.batch_size)
}

#[allow(clippy::too_many_arguments)]
fn train_shard(
    policy: &mut TabularPolicy,
    reference: &TabularPolicy,
    shard: &[PreferencePair],
    cfg: &TrainConfig,
    state: &mut TrainState,
    sink: &mut dyn TelemetrySink,
    outer_iter: u32,
    minibatch: u32,
    global_step: &mut u64,
) -> Result<()> {
    if shard.is_empty() {
        return Err(Error::Input("empty mini-batch shard".into()));
    }
    for epoch in 0..cfg.epochs_per_minibatch {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut rng = derived_stream(
            cfg.seed,
            &[
                rng::stream::EPOCH_SHUFFLE,
                outer_iter as u64,
                minibatch as u64,
                epoch as u64,
            ],
        );
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferencePair> =
                chunk.iter().map(|&i| shard[i].clone()).collect();
            let eval = batch_loss_and_grad(policy, reference, &batch, cfg.loss_kind, &cfg.loss)?;
            let lr = adam_step(policy, state, &eval.grad, cfg)?;
            sink.record(TelemetryRecord {
                step: *global_step,
                iter: outer_iter,
                minibatch,
                loss: eval.mean_loss,
                reward_w: eval.mean_reward_w(),
                reward_l: eval.mean_reward_l(),
                s: eval.mean_s(),
                lr,
            });
            *global_step += 1;
        }
    }
    Ok(())
}

/// Train on a single shard against a frozen reference snapshot:
/// `epochs_per_minibatch` passes of seeded-shuffled batches, one telemetry
/// record per optimizer step.
pub fn train_on_minibatch(
    policy: TabularPolicy,
    reference: &TabularPolicy,
    shard: &[PreferencePair],
    cfg: &TrainConfig,
    sink: &mut dyn TelemetrySink,
) -> Result<TabularPolicy> {
    cfg.validate()?;
    let mut policy = policy;
    let mut state = TrainState::new(policy.num_params(), steps_for_shard(shard.len(), cfg));
    let mut global_step = 0;
    train_shard(
        &mut policy,
        reference,
        shard,
        cfg,
        &mut state,
        sink,
        1,
        1,
        &mut global_step,
    )?;
    Ok(policy)
}

fn run_iterative(
    policy: &mut TabularPolicy,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
    sink: &mut dyn TelemetrySink,
    outer_iter: u32,
    global_step: &mut u64,
) -> Result<()> {
    let mut rng = derived_stream(
        cfg.seed,
        &[rng::stream::PARTITION, outer_iter as u64],
    );
    let shards = partition_minibatches(dataset, cfg.minibatches, &mut rng)?;
    let total: usize = shards.iter().map(|s| steps_for_shard(s.len(), cfg)).sum();
    let mut state = TrainState::new(policy.num_params(), total);
    for (t, shard) in shards.iter().enumerate() {
        // reference switch: freeze a snapshot of the current policy
        let reference = policy.clone();
        train_shard(
            policy,
            &reference,
            shard,
            cfg,
            &mut state,
            sink,
            outer_iter,
            t as u32 + 1,
            global_step,
        )?;
    }
    Ok(())
}

/// Mini-batch iterative preference training: split the dataset into T
/// shards and re-snapshot the reference model before each one. With T = 1
/// this is plain single-reference training.
pub fn mini_batch_iterative_dpo(
    policy: TabularPolicy,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
    sink: &mut dyn TelemetrySink,
) -> Result<TabularPolicy> {
    cfg.validate()?;
    let mut policy = policy;
    let mut global_step = 0;
    run_iterative(&mut policy, dataset, cfg, sink, 1, &mut global_step)?;
    Ok(policy)
}

/// How each outer stage rebuilds its preference data.
#[derive(Debug, Clone)]
pub struct StageDataConfig {
    pub w_spec: MixtureSpec,
    pub l_spec: MixtureSpec,
    pub rejected_rule: RejectedRule,
    /// Matrix-side instruction draws per prompt per side.
    pub n_per_prompt: usize,
    /// Judged base-model draws per prompt feeding the threshold.
    pub judge_samples_per_prompt: usize,
    pub max_pairs_per_prompt: usize,
    /// Reuse the matrix-sourced records verbatim across stages (the judged
    /// base-sourced records regenerate every stage either way).
    pub reuse_matrix_records: bool,
}

// stage-scoped seed labels
const STAGE_DATA: u64 = 0x10;
const STAGE_TAU: u64 = 0x11;
const STAGE_PAIR: u64 = 0x12;

fn stage_err(stage: usize, source: Error) -> Error {
    Error::Stage {
        stage,
        source: Box::new(source),
    }
}

/// The matrix-sourced instruction datasets for one stage.
pub fn build_matrix_datasets(
    matrix: &ModelMatrix,
    prompts: &PromptSet,
    stage_cfg: &StageDataConfig,
    master_seed: u64,
    stage: usize,
) -> Result<(InstructionDataset, InstructionDataset)> {
    build_instruction_datasets(
        matrix,
        prompts,
        &stage_cfg.w_spec,
        &stage_cfg.l_spec,
        &stage_cfg.rejected_rule,
        stage_cfg.n_per_prompt,
        derive_seed(master_seed, &[STAGE_DATA, stage as u64]),
    )
}

/// One stage's preference dataset: re-infer the prompt set with `policy`,
/// score against the mean threshold, expand the matrix datasets, and pair.
/// `max_pairs_scale` multiplies the per-prompt pairing cap (used to hand a
/// single-shot baseline the same total pair budget as a multi-stage run).
/// With `judge_samples_per_prompt` = 0 the evaluation-correction expansion
/// is disabled and the matrix datasets pair directly.
pub fn build_stage_pairs(
    matrix_data: &(InstructionDataset, InstructionDataset),
    policy: &TabularPolicy,
    prompts: &PromptSet,
    judge: &dyn Judge,
    stage_cfg: &StageDataConfig,
    master_seed: u64,
    stage: usize,
    max_pairs_scale: usize,
) -> Result<PreferenceDataset> {
    let cap = stage_cfg.max_pairs_per_prompt * max_pairs_scale.max(1);
    let pair_seed = derive_seed(master_seed, &[STAGE_PAIR, stage as u64]);
    if stage_cfg.judge_samples_per_prompt == 0 {
        return build_preference_pairs(&matrix_data.0, &matrix_data.1, cap, pair_seed);
    }
    let (tau, scored) = compute_tau(
        policy,
        prompts,
        judge,
        stage_cfg.judge_samples_per_prompt,
        derive_seed(master_seed, &[STAGE_TAU, stage as u64]),
    )?;
    let (expanded_w, expanded_l) = expand_datasets(&matrix_data.0, &matrix_data.1, &scored, tau);
    build_preference_pairs(&expanded_w, &expanded_l, cap, pair_seed)
}

/// The N-stage outer loop. Each stage re-infers the prompt set with the
/// current base policy, rescores it to rebuild the expanded datasets,
/// rebuilds the preference pairs, trains, and installs the updated policy as
/// the matrix's base entry. Returns the per-stage policies.
pub fn tso_outer_loop(
    matrix: &mut ModelMatrix,
    prompts: &PromptSet,
    judge: &dyn Judge,
    cfg: &TrainConfig,
    stage_cfg: &StageDataConfig,
    sink: &mut dyn TelemetrySink,
) -> Result<Vec<TabularPolicy>> {
    cfg.validate()?;
    let mut policy = matrix.base().clone();
    let mut stages = Vec::with_capacity(cfg.outer_iters);
    let mut global_step = 0u64;
    let mut matrix_data: Option<(InstructionDataset, InstructionDataset)> = None;
    for n in 1..=cfg.outer_iters {
        if matrix_data.is_none() || !stage_cfg.reuse_matrix_records {
            let built = build_matrix_datasets(matrix, prompts, stage_cfg, cfg.seed, n)
                .map_err(|e| stage_err(n, e))?;
            matrix_data = Some(built);
        }
        // base re-inference plus scoring happen inside the stage build
        let d_pre = build_stage_pairs(
            matrix_data.as_ref().unwrap(),
            &policy,
            prompts,
            judge,
            stage_cfg,
            cfg.seed,
            n,
            1,
        )
        .map_err(|e| stage_err(n, e))?;

        run_iterative(&mut policy, &d_pre, cfg, sink, n as u32, &mut global_step)
            .map_err(|e| stage_err(n, e))?;

        matrix.set_base(policy.clone());
        stages.push(policy.clone());
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{OracleJudge, ScoreRange};
    use crate::matrix::{chosen_set, make_quality_matrix, rejected_set, ModelId, SourceTag};
    use crate::rng::stream_from;
    use crate::seq::{Prompt, SeqSpec, Vocabulary};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn toy_pairs(n: usize, seed: u64) -> PreferenceDataset {
        let vocab = Vocabulary::new(4, 3).unwrap();
        let spec = SeqSpec::new(3).unwrap();
        let mut rng = stream_from(seed);
        let sampler = TabularPolicy::random(vocab, spec, 1, 1.0, &mut rng);
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let x = Prompt::new(vec![rng.gen_range(0..4)]);
            let chosen = sampler.sample_response(&x, &mut rng).unwrap();
            let rejected = sampler.sample_response(&x, &mut rng).unwrap();
            if chosen == rejected {
                continue;
            }
            pairs.push(PreferencePair {
                prompt: x,
                chosen,
                rejected,
                src_w: SourceTag::Human,
                src_l: SourceTag::Base,
            });
        }
        PreferenceDataset { pairs }
    }

    fn desk_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn partition_splits_evenly() {
        let d = toy_pairs(30_000, 1);
        let mut rng = stream_from(2);
        let shards = partition_minibatches(&d, 3, &mut rng).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![10_000, 10_000, 10_000]);
    }

    #[test]
    fn partition_sends_remainder_to_front() {
        let d = toy_pairs(10, 3);
        let mut rng = stream_from(4);
        let shards = partition_minibatches(&d, 3, &mut rng).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        // disjoint union equals the dataset
        let mut all: Vec<&PreferencePair> = shards.iter().flatten().collect();
        let mut original: Vec<&PreferencePair> = d.pairs.iter().collect();
        all.sort_by_key(|p| format!("{p:?}"));
        original.sort_by_key(|p| format!("{p:?}"));
        assert_eq!(all, original);
    }

    #[test]
    fn partition_single_shard_is_the_whole_dataset() {
        let d = toy_pairs(7, 5);
        let mut rng = stream_from(6);
        let shards = partition_minibatches(&d, 1, &mut rng).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 7);
        let mut shard = shards[0].clone();
        let mut original = d.pairs.clone();
        shard.sort_by_key(|p| format!("{p:?}"));
        original.sort_by_key(|p| format!("{p:?}"));
        assert_eq!(shard, original);
    }

    #[test]
    fn partition_rejects_more_shards_than_pairs() {
        let d = toy_pairs(2, 7);
        let mut rng = stream_from(8);
        assert!(matches!(
            partition_minibatches(&d, 3, &mut rng),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            partition_minibatches(&d, 0, &mut rng),
            Err(Error::Input(_))
        ));
    }

    fn toy_policy(seed: u64) -> TabularPolicy {
        let vocab = Vocabulary::new(4, 3).unwrap();
        let spec = SeqSpec::new(3).unwrap();
        TabularPolicy::random(vocab, spec, 1, 2.0, &mut stream_from(seed))
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_unchanged() {
        let mut policy = toy_policy(9);
        let before = policy.logits().to_vec();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..desk_cfg(1)
        };
        let mut state = TrainState::new(policy.num_params(), 10);
        let grad = PolicyGradient::zeros_like(&policy);
        adam_step(&mut policy, &mut state, &grad, &cfg).unwrap();
        assert_eq!(policy.logits(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_signed_learning_rate() {
        let mut policy = toy_policy(10);
        let before = policy.logits().to_vec();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            adam_eps: 1e-15,
            warmup_frac: 0.0,
            grad_clip: 1e12,
            lr: 0.05,
            ..desk_cfg(1)
        };
        // schedule at step 0 of a long horizon is ~lr; use the exact value
        let lr0 = schedule_lr(cfg.lr, 0, 1000, 0.0);
        let mut state = TrainState::new(policy.num_params(), 1000);
        let mut grad = PolicyGradient::zeros_like(&policy);
        for (i, g) in grad.values_mut().iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.3 } else { -0.7 };
        }
        adam_step(&mut policy, &mut state, &grad, &cfg).unwrap();
        for (i, (after, before)) in policy.logits().iter().zip(&before).enumerate() {
            let expected = before - lr0 * grad.values()[i].signum();
            assert!(
                (after - expected).abs() < 1e-9,
                "param {i}: {after} vs {expected}"
            );
        }
    }

    #[test]
    fn schedule_hits_zero_at_final_step() {
        let total = 137;
        let lr = 0.05;
        assert_eq!(schedule_lr(lr, total - 1, total, 0.03), 0.0);
        // warmup ramps up
        let w0 = schedule_lr(lr, 0, total, 0.1);
        let w1 = schedule_lr(lr, 5, total, 0.1);
        assert!(w0 < w1 && w1 <= lr);
        // decay is monotone after warmup
        let mut last = f64::INFINITY;
        for step in 14..total {
            let v = schedule_lr(lr, step, total, 0.1);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn nonfinite_gradient_aborts_the_step() {
        let mut policy = toy_policy(11);
        let cfg = desk_cfg(1);
        let mut state = TrainState::new(policy.num_params(), 10);
        let mut grad = PolicyGradient::zeros_like(&policy);
        grad.values_mut()[3] = f64::NAN;
        let before = policy.logits().to_vec();
        assert!(matches!(
            adam_step(&mut policy, &mut state, &grad, &cfg),
            Err(Error::Numerical(_))
        ));
        assert_eq!(policy.logits(), &before[..]);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn minibatch_telemetry_count_is_epochs_times_batches() {
        let d = toy_pairs(100, 12);
        let policy = toy_policy(13);
        let reference = policy.clone();
        let cfg = TrainConfig {
            batch_size: 25,
            ..desk_cfg(7)
        };
        let mut telemetry: Vec<TelemetryRecord> = Vec::new();
        train_on_minibatch(policy, &reference, &d.pairs, &cfg, &mut telemetry).unwrap();
        assert_eq!(telemetry.len(), 8);
    }

    #[test]
    fn fresh_snapshot_starts_at_exact_half_scale() {
        let d = toy_pairs(64, 14);
        let policy = toy_policy(15);
        let reference = policy.clone();
        let cfg = desk_cfg(3);
        let mut telemetry: Vec<TelemetryRecord> = Vec::new();
        train_on_minibatch(policy, &reference, &d.pairs, &cfg, &mut telemetry).unwrap();
        assert_eq!(telemetry[0].s, 0.5);
        assert_eq!(telemetry[0].reward_w, 0.0);
        assert_eq!(telemetry[0].reward_l, 0.0);
    }

    #[test]
    fn training_replays_bitwise() {
        let d = toy_pairs(60, 16);
        let cfg = desk_cfg(21);
        let run = || {
            let mut telemetry: Vec<TelemetryRecord> = Vec::new();
            let policy =
                mini_batch_iterative_dpo(toy_policy(17), &d, &cfg, &mut telemetry).unwrap();
            (policy, telemetry)
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(p1.logits(), p2.logits());
        assert_eq!(t1, t2);
    }

    #[test]
    fn scale_resets_at_every_reference_switch() {
        let d = toy_pairs(90, 18);
        let cfg = desk_cfg(5);
        let mut telemetry: Vec<TelemetryRecord> = Vec::new();
        mini_batch_iterative_dpo(toy_policy(19), &d, &cfg, &mut telemetry).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for rec in &telemetry {
            if seen.insert(rec.minibatch) {
                assert!(
                    (rec.s - 0.5).abs() <= 1e-12,
                    "minibatch {} first step s = {}",
                    rec.minibatch,
                    rec.s
                );
                assert_eq!(rec.reward_w, 0.0);
                assert_eq!(rec.reward_l, 0.0);
            }
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn shard_count_changes_the_final_policy() {
        let d = toy_pairs(90, 20);
        let base = toy_policy(22);
        let t3 = mini_batch_iterative_dpo(base.clone(), &d, &desk_cfg(9), &mut NullSink).unwrap();
        let t1_cfg = TrainConfig {
            minibatches: 1,
            ..desk_cfg(9)
        };
        let t1 = mini_batch_iterative_dpo(base, &d, &t1_cfg, &mut NullSink).unwrap();
        assert_ne!(t3.logits(), t1.logits());
    }

    fn stage_fixture(seed: u64) -> (ModelMatrix, PromptSet, OracleJudge, StageDataConfig) {
        let vocab = Vocabulary::new(6, 5).unwrap();
        let spec = SeqSpec::new(3).unwrap();
        let truth = TabularPolicy::random(vocab, spec, 1, 3.0, &mut stream_from(seed));
        let mut grid = BTreeMap::new();
        grid.insert(ModelId::new(1, 1).unwrap(), 0.2);
        grid.insert(ModelId::new(1, 2).unwrap(), 0.4);
        grid.insert(ModelId::new(2, 1).unwrap(), 0.3);
        grid.insert(ModelId::new(2, 2).unwrap(), 0.6);
        let matrix = make_quality_matrix(&truth, &grid, ModelId::new(2, 2).unwrap()).unwrap();
        let prompts =
            PromptSet::uniform((0..8).map(|i| Prompt::new(vec![i % 5])).collect()).unwrap();
        let judge = OracleJudge::new(truth, ScoreRange::default()).unwrap();
        let w_spec = MixtureSpec::uniform_over(&chosen_set(&matrix).unwrap()).unwrap();
        let l_spec = MixtureSpec::uniform_over(
            &rejected_set(&matrix, &RejectedRule::WeakerOr).unwrap(),
        )
        .unwrap();
        let stage_cfg = StageDataConfig {
            w_spec,
            l_spec,
            rejected_rule: RejectedRule::WeakerOr,
            n_per_prompt: 4,
            judge_samples_per_prompt: 4,
            max_pairs_per_prompt: 8,
            reuse_matrix_records: true,
        };
        (matrix, prompts, judge, stage_cfg)
    }

    #[test]
    fn outer_loop_produces_one_policy_and_t_switches_per_stage() {
        let (mut matrix, prompts, judge, stage_cfg) = stage_fixture(30);
        let cfg = TrainConfig {
            batch_size: 16,
            ..desk_cfg(31)
        };
        let mut telemetry: Vec<TelemetryRecord> = Vec::new();
        let stages =
            tso_outer_loop(&mut matrix, &prompts, &judge, &cfg, &stage_cfg, &mut telemetry)
                .unwrap();
        assert_eq!(stages.len(), 3);
        // 3 stages x 3 mini-batches, each opening with a fresh snapshot
        let mut groups = std::collections::BTreeSet::new();
        for rec in &telemetry {
            if groups.insert((rec.iter, rec.minibatch)) {
                assert!((rec.s - 0.5).abs() <= 1e-12);
            }
        }
        assert_eq!(groups.len(), 9);
        // the matrix base entry tracked the final stage
        assert_eq!(matrix.base().logits(), stages[2].logits());
        // steps are globally ordered
        for (i, rec) in telemetry.iter().enumerate() {
            assert_eq!(rec.step, i as u64);
        }
    }

    #[test]
    fn outer_loop_is_deterministic() {
        let run = || {
            let (mut matrix, prompts, judge, stage_cfg) = stage_fixture(32);
            let cfg = desk_cfg(33);
            let mut telemetry: Vec<TelemetryRecord> = Vec::new();
            let stages =
                tso_outer_loop(&mut matrix, &prompts, &judge, &cfg, &stage_cfg, &mut telemetry)
                    .unwrap();
            (stages, telemetry)
        };
        let (s1, t1) = run();
        let (s2, t2) = run();
        assert_eq!(t1, t2);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.logits(), b.logits());
        }
    }

    #[test]
    fn single_stage_single_shard_reduces_to_plain_training() {
        let (mut matrix, prompts, judge, stage_cfg) = stage_fixture(34);
        let cfg = TrainConfig {
            minibatches: 1,
            outer_iters: 1,
            ..desk_cfg(35)
        };
        let mut telemetry: Vec<TelemetryRecord> = Vec::new();
        let stages =
            tso_outer_loop(&mut matrix, &prompts, &judge, &cfg, &stage_cfg, &mut telemetry)
                .unwrap();
        assert_eq!(stages.len(), 1);
        assert!(telemetry.iter().all(|r| r.iter == 1 && r.minibatch == 1));
    }

    #[test]
    fn pair_starvation_surfaces_as_a_stage_error() {
        let (mut matrix, prompts, judge, mut stage_cfg) = stage_fixture(36);
        // a judge threshold plus a single record per side can still pair, so
        // starve pairing by zeroing the matrix draws and judged draws via an
        // impossible pairing cap instead
        stage_cfg.max_pairs_per_prompt = 0;
        let cfg = desk_cfg(37);
        let err = tso_outer_loop(
            &mut matrix,
            &prompts,
            &judge,
            &cfg,
            &stage_cfg,
            &mut NullSink,
        );
        match err {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, 1),
            other => panic!("expected stage error, got {other:?}"),
        }
    }
}
