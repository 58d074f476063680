//! Command implementations. Every command materializes a run directory
//! containing the effective config snapshot, the seeds, its artifacts, and
//! a `report.json`, which together replay the run exactly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use tso_core::analytics::{
    alignment_proxy, export_prompt_stats_csv, export_telemetry_csv, score_stats,
};
use tso_core::error::{Error, Result};
use tso_core::experiments::{run_negsrc_sweep, run_tso, stage_one_dataset, train_on_dataset};
use tso_core::gradcheck::{gradcheck_all, GradCheckDims};
use tso_core::judge::Judge;
use tso_core::losses::LossKind;
use tso_core::rng::derived_stream;
use tso_core::trainer::{build_matrix_datasets, build_stage_pairs, TrainConfig};
use tso_core::world::{build_world, World};

use crate::config::RunConfig;
use crate::report::{ArmReport, RunReport, TelemetrySummary};
use crate::svg;

/// The experiment commands the harness understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Synth,
    Train,
    AblateNegsrc,
    AblateMinibatch,
    AblateLoss,
    Stats,
    Gradcheck,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Synth => "synth",
            CommandKind::Train => "train",
            CommandKind::AblateNegsrc => "ablate-negsrc",
            CommandKind::AblateMinibatch => "ablate-minibatch",
            CommandKind::AblateLoss => "ablate-loss",
            CommandKind::Stats => "stats",
            CommandKind::Gradcheck => "gradcheck",
        }
    }
}

fn prepare_run_dir(cfg: &RunConfig, kind: CommandKind) -> Result<PathBuf> {
    let dir = cfg.output_root().join(kind.name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snapshot = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
    std::fs::write(dir.join("config_snapshot.toml"), snapshot)
        .map_err(|e| Error::io(dir.join("config_snapshot.toml"), e))?;
    std::fs::write(
        dir.join("seed.txt"),
        format!("train_seed={}\nworld_seed={}\n", cfg.train.seed, cfg.world.seed),
    )
    .map_err(|e| Error::io(dir.join("seed.txt"), e))?;
    Ok(dir)
}

fn write_telemetry(
    dir: &Path,
    name: &str,
    records: &[tso_core::trainer::TelemetryRecord],
    emit_svg: bool,
) -> Result<()> {
    export_telemetry_csv(records, &dir.join(name))?;
    if emit_svg {
        let svg_name = name.replace(".csv", ".svg");
        std::fs::write(dir.join(&svg_name), svg::telemetry_chart(records))
            .map_err(|e| Error::io(dir.join(svg_name), e))?;
    }
    Ok(())
}

fn new_report(cfg: &RunConfig, kind: CommandKind) -> RunReport {
    RunReport::new(kind.name(), cfg.train.seed, cfg.world.seed)
}

/// Run one command under a validated config; the report is both written to
/// the run directory and returned.
pub fn run_command(cfg: &RunConfig, kind: CommandKind) -> Result<RunReport> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg, kind)?;
    let report = match kind {
        CommandKind::Synth => synth(cfg, &dir)?,
        CommandKind::Train => train(cfg, &dir)?,
        CommandKind::AblateNegsrc => ablate_negsrc(cfg, &dir)?,
        CommandKind::AblateMinibatch => ablate_minibatch(cfg, &dir)?,
        CommandKind::AblateLoss => ablate_loss(cfg, &dir)?,
        CommandKind::Stats => stats(cfg, &dir)?,
        CommandKind::Gradcheck => gradcheck(cfg, &dir)?,
    };
    report.save(&dir.join("report.json"))?;
    Ok(report)
}

fn build(cfg: &RunConfig) -> Result<(World, Box<dyn Judge>)> {
    let world = build_world(&cfg.world)?;
    let judge = cfg.build_judge(&world)?;
    Ok((world, judge))
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    world.truth.save(&dir.join("truth.policy"))?;
    world.matrix.human().save(&dir.join("human.policy"))?;
    for (id, policy) in world.matrix.entries() {
        policy.save(&dir.join(format!("{id}.policy")))?;
    }
    let prompt_lines: Vec<String> = world
        .prompts
        .prompts()
        .iter()
        .map(|p| {
            p.tokens()
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    std::fs::write(dir.join("prompts.txt"), prompt_lines.join("\n") + "\n")
        .map_err(|e| Error::io(dir.join("prompts.txt"), e))?;

    let stage_cfg = cfg.stage_config(&world.matrix)?;
    let matrix_data =
        build_matrix_datasets(&world.matrix, &world.prompts, &stage_cfg, cfg.train.seed, 1)?;
    matrix_data.0.save(&dir.join("instructions_chosen.txt"))?;
    matrix_data.1.save(&dir.join("instructions_rejected.txt"))?;
    let pairs = build_stage_pairs(
        &matrix_data,
        world.matrix.base(),
        &world.prompts,
        judge.as_ref(),
        &stage_cfg,
        cfg.train.seed,
        1,
        1,
    )?;
    pairs.save(&dir.join("preference_pairs.txt"))?;

    let mut report = new_report(cfg, CommandKind::Synth);
    report.base_proxy = Some(alignment_proxy(
        world.matrix.base(),
        &world.truth,
        &world.prompts,
    )?);
    let counts_match = matrix_data.0.len() == world.prompts.len() * stage_cfg.n_per_prompt
        && matrix_data.1.len() == world.prompts.len() * stage_cfg.n_per_prompt;
    report.flag("synth_instruction_counts_match", counts_match);
    report.flag(
        "criterion_11_pairs_share_prompt_with_distinct_responses",
        pairs
            .pairs
            .iter()
            .all(|p| p.chosen != p.rejected),
    );
    report
        .metrics
        .insert("preference_pairs".into(), pairs.len() as f64);
    Ok(report)
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    let stage_cfg = cfg.stage_config(&world.matrix)?;
    let run = run_tso(&world, judge.as_ref(), &cfg.train, &stage_cfg)?;
    write_telemetry(dir, "telemetry.csv", &run.telemetry, cfg.emit_svg)?;
    for (i, policy) in run.stages.iter().enumerate() {
        policy.save(&dir.join(format!("stage_{}.policy", i + 1)))?;
    }
    let mut report = new_report(cfg, CommandKind::Train);
    report.base_proxy = Some(run.base_proxy);
    report.stage_proxies = run.stage_proxies.clone();
    report.telemetry = TelemetrySummary::from_records(&run.telemetry);
    report.flag(
        "criterion_07_stage_proxies_strictly_increase",
        run.stage_proxies.windows(2).all(|w| w[1] > w[0]),
    );
    report.flag(
        "stage_count_matches_outer_iters",
        run.stage_proxies.len() == cfg.train.outer_iters,
    );
    Ok(report)
}

fn ablate_negsrc(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    let stage_cfg = cfg.stage_config(&world.matrix)?;
    let base_proxy = alignment_proxy(world.matrix.base(), &world.truth, &world.prompts)?;
    let sources: BTreeSet<_> = world.matrix.entries().keys().copied().collect();
    let results = run_negsrc_sweep(&world, judge.as_ref(), &cfg.train, &stage_cfg, &sources)?;

    let mut csv = String::from("source,lambda,final_proxy\n");
    for (source, proxy) in &results {
        csv.push_str(&format!(
            "{source},{},{proxy}\n",
            world.config.lambda_grid[source]
        ));
    }
    std::fs::write(dir.join("negsrc_proxies.csv"), csv)
        .map_err(|e| Error::io(dir.join("negsrc_proxies.csv"), e))?;

    let mut report = new_report(cfg, CommandKind::AblateNegsrc);
    report.base_proxy = Some(base_proxy);
    for (source, proxy) in &results {
        report.arms.push(ArmReport {
            name: source.to_string(),
            final_proxy: *proxy,
            telemetry: None,
        });
    }
    let base_id = world.matrix.base_id();
    let self_proxy = results.iter().find(|(s, _)| *s == base_id).map(|(_, p)| *p);
    report.flag(
        "criterion_08_self_negatives_fall_below_base",
        self_proxy.is_some_and(|p| p < base_proxy),
    );
    // the closest grid entry below the base in quality
    let below_id = world
        .config
        .lambda_grid
        .iter()
        .filter(|(id, &lam)| **id != base_id && lam < world.base_lambda())
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(id, _)| *id);
    let below_proxy = below_id
        .and_then(|id| results.iter().find(|(s, _)| *s == id).map(|(_, p)| *p));
    report.flag(
        "criterion_08_slightly_weaker_source_improves_on_base",
        below_proxy.is_some_and(|p| p > base_proxy),
    );
    Ok(report)
}

fn ablate_minibatch(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    let stage_cfg = cfg.stage_config(&world.matrix)?;
    let data = stage_one_dataset(&world, judge.as_ref(), &cfg.train, &stage_cfg, 1)?;
    let multi = train_on_dataset(&world, &data, &cfg.train)?;
    let single_cfg = TrainConfig {
        minibatches: 1,
        outer_iters: 1,
        ..cfg.train.clone()
    };
    let single = train_on_dataset(&world, &data, &single_cfg)?;
    write_telemetry(dir, "telemetry_multi.csv", &multi.telemetry, cfg.emit_svg)?;
    write_telemetry(dir, "telemetry_single.csv", &single.telemetry, cfg.emit_svg)?;

    let mut report = new_report(cfg, CommandKind::AblateMinibatch);
    report.base_proxy = Some(alignment_proxy(
        world.matrix.base(),
        &world.truth,
        &world.prompts,
    )?);
    report.arms.push(ArmReport {
        name: format!("T{}", cfg.train.minibatches),
        final_proxy: multi.final_proxy,
        telemetry: TelemetrySummary::from_records(&multi.telemetry),
    });
    report.arms.push(ArmReport {
        name: "T1".to_string(),
        final_proxy: single.final_proxy,
        telemetry: TelemetrySummary::from_records(&single.telemetry),
    });
    report.flag(
        "criterion_09_multi_shard_at_least_single_shard",
        multi.final_proxy >= single.final_proxy,
    );
    report.metrics.insert("pairs".into(), data.len() as f64);
    Ok(report)
}

fn ablate_loss(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    let stage_cfg = cfg.stage_config(&world.matrix)?;
    let data = stage_one_dataset(&world, judge.as_ref(), &cfg.train, &stage_cfg, 1)?;
    let mut report = new_report(cfg, CommandKind::AblateLoss);
    report.base_proxy = Some(alignment_proxy(
        world.matrix.base(),
        &world.truth,
        &world.prompts,
    )?);
    let mut dpo_final_reward_w = None;
    let mut clip_final_reward_w = None;
    let mut dpo_summary: Option<TelemetrySummary> = None;
    for kind in LossKind::ALL {
        let arm_cfg = TrainConfig {
            loss_kind: kind,
            ..cfg.train.clone()
        };
        let run = train_on_dataset(&world, &data, &arm_cfg)?;
        write_telemetry(
            dir,
            &format!("telemetry_{}.csv", kind.name()),
            &run.telemetry,
            cfg.emit_svg,
        )?;
        let summary = TelemetrySummary::from_records(&run.telemetry);
        if kind == LossKind::Dpo {
            dpo_final_reward_w = summary.as_ref().map(|s| s.final_reward_w);
            dpo_summary = summary.clone();
        }
        if kind == LossKind::DualClip {
            clip_final_reward_w = summary.as_ref().map(|s| s.final_reward_w);
        }
        report.arms.push(ArmReport {
            name: kind.name().to_string(),
            final_proxy: run.final_proxy,
            telemetry: summary,
        });
    }
    if let (Some(dpo_w), Some(clip_w)) = (dpo_final_reward_w, clip_final_reward_w) {
        report.flag("criterion_06_dpo_final_chosen_reward_negative", dpo_w < 0.0);
        report.flag(
            "criterion_06_clip_final_chosen_reward_above_dpo",
            clip_w > dpo_w,
        );
    }
    if let Some(summary) = dpo_summary {
        report.flag(
            "criterion_04_s_decays_below_first_decile",
            summary.mean_s_last_decile < summary.mean_s_first_decile,
        );
    }
    report.metrics.insert("pairs".into(), data.len() as f64);
    Ok(report)
}

fn stats(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let (world, judge) = build(cfg)?;
    let base = world.matrix.base();
    let mut rows = Vec::new();
    let mut skews = Vec::new();
    let mut kurts = Vec::new();
    let mut degenerate = 0usize;
    for (i, prompt) in world.prompts.prompts().iter().enumerate() {
        let mut rng = derived_stream(cfg.train.seed, &[0x57A7, i as u64]);
        let mut scores = Vec::with_capacity(cfg.data.stats_samples_per_prompt);
        for _ in 0..cfg.data.stats_samples_per_prompt {
            let response = base.sample_response(prompt, &mut rng)?;
            scores.push(judge.score(prompt, &response)?);
        }
        match score_stats(&scores) {
            Ok(stats) => {
                skews.push(stats.skewness);
                kurts.push(stats.excess_kurtosis);
                rows.push((i, stats));
            }
            Err(Error::Input(_)) => degenerate += 1,
            Err(other) => return Err(other),
        }
    }
    export_prompt_stats_csv(&rows, &dir.join("prompt_stats.csv"))?;

    let mut report = new_report(cfg, CommandKind::Stats);
    let reference = score_stats(&[1.0, 2.0, 3.0, 4.0, 5.0])?;
    report.flag(
        "criterion_13_reference_moments_exact",
        reference.skewness == 0.0 && reference.excess_kurtosis == -1.3,
    );
    report.flag("stats_some_prompts_scored", !rows.is_empty());
    if !rows.is_empty() {
        report.metrics.insert(
            "mean_skewness".into(),
            skews.iter().sum::<f64>() / skews.len() as f64,
        );
        report.metrics.insert(
            "mean_excess_kurtosis".into(),
            kurts.iter().sum::<f64>() / kurts.len() as f64,
        );
    }
    report
        .metrics
        .insert("degenerate_prompts".into(), degenerate as f64);
    Ok(report)
}

fn gradcheck(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let reports = gradcheck_all(
        &cfg.train.loss,
        GradCheckDims::default(),
        cfg.gradcheck_instances,
        cfg.train.seed,
    )?;
    let mut report = new_report(cfg, CommandKind::Gradcheck);
    let mut all_ok = true;
    let mut lines = String::new();
    for r in &reports {
        report
            .gradcheck_max_rel_err
            .insert(r.kind.name().to_string(), r.max_rel_err);
        all_ok &= r.max_rel_err <= 1e-5;
        lines.push_str(&format!(
            "{}: instances={} max_rel_err={:e}\n",
            r.kind.name(),
            r.instances,
            r.max_rel_err
        ));
    }
    std::fs::write(dir.join("gradcheck.txt"), lines)
        .map_err(|e| Error::io(dir.join("gradcheck.txt"), e))?;
    report.flag("criterion_01_max_rel_err_at_most_1e-5", all_ok);
    Ok(report)
}
