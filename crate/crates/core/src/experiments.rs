//! Reusable experiment runners: the full multi-stage study, fixed-data
//! training arms, and the negative-source sweep. The command-line harness
//! and the acceptance suite both drive these, so a run means the same thing
//! everywhere.

use std::collections::BTreeSet;

use crate::analytics::alignment_proxy;
use crate::error::Result;
use crate::judge::{Judge, PreferenceDataset};
use crate::matrix::{MixtureSource, MixtureSpec, ModelId, RejectedRule};
use crate::seq::TabularPolicy;
use crate::trainer::{
    build_matrix_datasets, build_stage_pairs, mini_batch_iterative_dpo, tso_outer_loop,
    StageDataConfig, TelemetryRecord, TrainConfig,
};
use crate::world::World;

/// Outcome of a full multi-stage run.
#[derive(Debug, Clone)]
pub struct TsoRun {
    pub base_proxy: f64,
    pub stage_proxies: Vec<f64>,
    pub stages: Vec<TabularPolicy>,
    pub telemetry: Vec<TelemetryRecord>,
}

/// Run the N-stage outer loop on a world.
pub fn run_tso(
    world: &World,
    judge: &dyn Judge,
    cfg: &TrainConfig,
    stage_cfg: &StageDataConfig,
) -> Result<TsoRun> {
    let mut matrix = world.matrix.clone();
    let base_proxy = alignment_proxy(matrix.base(), &world.truth, &world.prompts)?;
    let mut telemetry: Vec<TelemetryRecord> = Vec::new();
    let stages = tso_outer_loop(
        &mut matrix,
        &world.prompts,
        judge,
        cfg,
        stage_cfg,
        &mut telemetry,
    )?;
    let stage_proxies = stages
        .iter()
        .map(|p| alignment_proxy(p, &world.truth, &world.prompts))
        .collect::<Result<Vec<f64>>>()?;
    Ok(TsoRun {
        base_proxy,
        stage_proxies,
        stages,
        telemetry,
    })
}

/// Stage-1 preference data for a world, with the per-prompt pairing cap
/// scaled by `budget_scale` (a single-shot baseline gets the multi-stage
/// budget by passing N).
pub fn stage_one_dataset(
    world: &World,
    judge: &dyn Judge,
    cfg: &TrainConfig,
    stage_cfg: &StageDataConfig,
    budget_scale: usize,
) -> Result<PreferenceDataset> {
    let matrix_data = build_matrix_datasets(&world.matrix, &world.prompts, stage_cfg, cfg.seed, 1)?;
    build_stage_pairs(
        &matrix_data,
        world.matrix.base(),
        &world.prompts,
        judge,
        stage_cfg,
        cfg.seed,
        1,
        budget_scale,
    )
}

/// Outcome of one fixed-data training arm.
#[derive(Debug, Clone)]
pub struct FixedDataRun {
    pub final_policy: TabularPolicy,
    pub final_proxy: f64,
    pub telemetry: Vec<TelemetryRecord>,
}

/// Train the world's base policy on an already-built dataset.
pub fn train_on_dataset(
    world: &World,
    dataset: &PreferenceDataset,
    cfg: &TrainConfig,
) -> Result<FixedDataRun> {
    let mut telemetry: Vec<TelemetryRecord> = Vec::new();
    let final_policy = mini_batch_iterative_dpo(
        world.matrix.base().clone(),
        dataset,
        cfg,
        &mut telemetry,
    )?;
    let final_proxy = alignment_proxy(&final_policy, &world.truth, &world.prompts)?;
    Ok(FixedDataRun {
        final_policy,
        final_proxy,
        telemetry,
    })
}

/// One arm of the negative-source sweep: all negatives drawn from a single
/// grid entry (the base itself reproduces the reverse-alignment probe).
pub fn negsrc_stage_config(
    base_cfg: &StageDataConfig,
    world: &World,
    source: ModelId,
) -> Result<StageDataConfig> {
    let mut stage_cfg = base_cfg.clone();
    stage_cfg.rejected_rule = if source == world.matrix.base_id() {
        RejectedRule::SelfOnly
    } else {
        RejectedRule::Explicit([source].into_iter().collect())
    };
    stage_cfg.l_spec = MixtureSpec::new(vec![(MixtureSource::Model(source), 1.0)])?;
    Ok(stage_cfg)
}

/// Final proxy per negative source under a single training round.
pub fn run_negsrc_sweep(
    world: &World,
    judge: &dyn Judge,
    cfg: &TrainConfig,
    base_stage_cfg: &StageDataConfig,
    sources: &BTreeSet<ModelId>,
) -> Result<Vec<(ModelId, f64)>> {
    let mut out = Vec::with_capacity(sources.len());
    for &source in sources {
        let stage_cfg = negsrc_stage_config(base_stage_cfg, world, source)?;
        let single_round = TrainConfig {
            outer_iters: 1,
            ..cfg.clone()
        };
        let run = run_tso(world, judge, &single_round, &stage_cfg)?;
        out.push((source, run.stage_proxies[0]));
    }
    Ok(out)
}
