//! Run configuration: a TOML document plus `--key value` overrides.
//!
//! Every key is validated before any work starts; unknown keys are rejected
//! by name. Short override aliases cover the common sweep knobs (`--T 1`,
//! `--lr 0.01`), and any other field is reachable by its dotted path
//! (`--train.loss.gamma_l 1.0`).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use tso_core::error::{Error, Result};
use tso_core::judge::{seeded_prompt_subset, BiasedJudge, Judge, OracleJudge, ScoreRange};
use tso_core::matrix::{
    chosen_set, rejected_set, MixtureSource, MixtureSpec, ModelMatrix, RejectedRule,
};
use tso_core::trainer::{StageDataConfig, TrainConfig};
use tso_core::world::{World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Affine map of the truth log-probability onto the score range.
    Oracle,
    /// Oracle inverted about the range midpoint on a seeded OOD prompt
    /// subset; models an uncorrected evaluator.
    Biased,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub score_min: f64,
    pub score_max: f64,
    /// Fraction of the prompt set treated as out-of-distribution by the
    /// biased judge.
    pub ood_fraction: f64,
    /// Additive shift applied after the biased judge's inversion.
    pub bias_offset: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            kind: JudgeKind::Oracle,
            score_min: 2.0,
            score_max: 10.0,
            ood_fraction: 0.25,
            bias_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedRuleConfig {
    WeakerOr,
    StrictAnd,
    SelfOnly,
}

impl RejectedRuleConfig {
    pub fn to_rule(self) -> RejectedRule {
        match self {
            RejectedRuleConfig::WeakerOr => RejectedRule::WeakerOr,
            RejectedRuleConfig::StrictAnd => RejectedRule::StrictAnd,
            RejectedRuleConfig::SelfOnly => RejectedRule::SelfOnly,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Weight on the human policy inside the chosen mixture; the remainder
    /// goes to the newest-largest grid entry.
    pub human_weight: f64,
    pub rejected_rule: RejectedRuleConfig,
    /// Matrix-side instruction draws per prompt per side.
    pub n_per_prompt: usize,
    /// Judged base draws per prompt; 0 disables evaluation correction.
    pub judge_samples_per_prompt: usize,
    pub max_pairs_per_prompt: usize,
    pub reuse_matrix_records: bool,
    /// Base draws per prompt for the score-distribution study.
    pub stats_samples_per_prompt: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            human_weight: 0.5,
            rejected_rule: RejectedRuleConfig::WeakerOr,
            n_per_prompt: 16,
            judge_samples_per_prompt: 12,
            max_pairs_per_prompt: 94,
            reuse_matrix_records: true,
            stats_samples_per_prompt: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub judge: JudgeConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Also render telemetry as an SVG line chart.
    pub emit_svg: bool,
    /// Randomized instances per loss kind in the gradient-check sweep.
    pub gradcheck_instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            judge: JudgeConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs"),
            emit_svg: false,
            gradcheck_instances: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.data.human_weight) {
            return Err(Error::Config("data.human_weight must lie in [0, 1]".into()));
        }
        if self.judge.score_min >= self.judge.score_max {
            return Err(Error::Config(
                "judge.score_min must be below judge.score_max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.judge.ood_fraction) {
            return Err(Error::Config("judge.ood_fraction must lie in [0, 1]".into()));
        }
        if self.data.max_pairs_per_prompt == 0 {
            return Err(Error::Config("data.max_pairs_per_prompt must be >= 1".into()));
        }
        if self.data.n_per_prompt == 0 {
            return Err(Error::Config("data.n_per_prompt must be >= 1".into()));
        }
        if self.gradcheck_instances == 0 {
            return Err(Error::Config("gradcheck_instances must be >= 1".into()));
        }
        Ok(())
    }

    pub fn score_range(&self) -> ScoreRange {
        ScoreRange {
            min: self.judge.score_min,
            max: self.judge.score_max,
        }
    }

    /// The stage-data settings implied by this config for a given matrix.
    pub fn stage_config(&self, matrix: &ModelMatrix) -> Result<StageDataConfig> {
        let chosen = chosen_set(matrix)?;
        let top = chosen
            .iter()
            .find_map(|s| match s {
                MixtureSource::Model(id) => Some(*id),
                MixtureSource::Human => None,
            })
            .expect("chosen set always holds the maximal entry");
        let w_spec = MixtureSpec::new(vec![
            (MixtureSource::Human, self.data.human_weight),
            (MixtureSource::Model(top), 1.0 - self.data.human_weight),
        ])?;
        let rejected_rule = self.data.rejected_rule.to_rule();
        let l_spec = MixtureSpec::uniform_over(&rejected_set(matrix, &rejected_rule)?)?;
        Ok(StageDataConfig {
            w_spec,
            l_spec,
            rejected_rule,
            n_per_prompt: self.data.n_per_prompt,
            judge_samples_per_prompt: self.data.judge_samples_per_prompt,
            max_pairs_per_prompt: self.data.max_pairs_per_prompt,
            reuse_matrix_records: self.data.reuse_matrix_records,
        })
    }

    /// The configured judge over a built world.
    pub fn build_judge(&self, world: &World) -> Result<Box<dyn Judge>> {
        let oracle =
            OracleJudge::with_prompt_cache(world.truth.clone(), self.score_range(), &world.prompts)?;
        match self.judge.kind {
            JudgeKind::Oracle => Ok(Box::new(oracle)),
            JudgeKind::Biased => {
                let ood =
                    seeded_prompt_subset(&world.prompts, self.judge.ood_fraction, self.world.seed);
                Ok(Box::new(BiasedJudge::new(
                    oracle,
                    ood,
                    self.judge.bias_offset,
                )?))
            }
        }
    }

    /// Effective output root: the environment override wins when set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os("TSO_LAB_OUT") {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.out_dir.clone(),
        }
    }
}

/// Short aliases for common override keys.
fn alias(key: &str) -> Option<&'static str> {
    Some(match key {
        "T" => "train.minibatches",
        "N" => "train.outer_iters",
        "lr" => "train.lr",
        "seed" => "train.seed",
        "batch_size" => "train.batch_size",
        "epochs" => "train.epochs_per_minibatch",
        "loss" => "train.loss_kind",
        "beta" => "train.loss.beta",
        "gamma_w" => "train.loss.gamma_w",
        "gamma_l" => "train.loss.gamma_l",
        "epsilon" => "train.loss.epsilon",
        "tau_ipo" => "train.loss.tau_ipo",
        "world_seed" => "world.seed",
        "out" => "out_dir",
        _ => return None,
    })
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key '{path}' does not address a table")))?;
        if i + 1 == segments.len() {
            table.insert(segment.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("path segments are never empty")
}

/// Parse `--key value` (or `--key=value`) pairs into (path, raw value).
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got '{arg}'")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = iter
                    .next()
                    .ok_or_else(|| Error::Config(format!("missing value for key '{key}'")))?;
                (key.to_string(), value.clone())
            }
        };
        out.push((key, value));
    }
    Ok(out)
}

/// Load a config file and apply overrides: file values first, then each
/// `--key value` in order, then full validation.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !doc.is_table() {
        return Err(Error::Config(format!(
            "{}: top level must be a table",
            path.display()
        )));
    }
    for (key, raw) in overrides {
        let path_key = match alias(key) {
            Some(resolved) => resolved.to_string(),
            None if key.contains('.') => key.clone(),
            None => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' (no alias and not a dotted path)"
                )))
            }
        };
        set_path(&mut doc, &path_key, parse_override_value(raw))?;
    }
    let cfg: RunConfig = doc
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
