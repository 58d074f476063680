//! Preference losses, implicit rewards, and batched loss-plus-gradient
//! evaluation.
//!
//! All four losses are functions of the pair log-ratios
//! `delta_w = log pi(y_w|x) - log pi_ref(y_w|x)` and
//! `delta_l = log pi(y_l|x) - log pi_ref(y_l|x)`. The sigmoid-family losses
//! depend on them only through the scaled margin `h = beta*(delta_w -
//! delta_l)`; the dual clip loss hinges each side independently, which is
//! what decouples the optimization of chosen and rejected responses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_slice;
use crate::seq::{PolicyGradient, TabularPolicy};

/// Loss hyperparameters with their standard defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Reward temperature on the log-ratios.
    pub beta: f64,
    /// Clip margin on the chosen-response reward.
    pub gamma_w: f64,
    /// Clip margin on the rejected-response reward.
    pub gamma_l: f64,
    /// Label-noise rate for the conservative DPO variant.
    pub epsilon: f64,
    /// Regularization temperature for the squared-margin variant.
    pub tau_ipo: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma_w: 20.0,
            gamma_l: 10.0,
            epsilon: 0.3,
            tau_ipo: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Input("beta must be > 0".into()));
        }
        if !(self.gamma_w > 0.0) || !(self.gamma_l > 0.0) {
            return Err(Error::Input("clip margins must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::Input("epsilon must lie in [0, 0.5)".into()));
        }
        if !(self.tau_ipo > 0.0) {
            return Err(Error::Input("tau_ipo must be > 0".into()));
        }
        Ok(())
    }
}

/// Policy-vs-reference log-ratios for one preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogRatios {
    pub delta_w: f64,
    pub delta_l: f64,
}

impl PairLogRatios {
    pub fn margin(&self, beta: f64) -> f64 {
        beta * (self.delta_w - self.delta_l)
    }
}

/// Which preference loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    DualClip,
    Ipo,
    Cdpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Dpo,
        LossKind::DualClip,
        LossKind::Ipo,
        LossKind::Cdpo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::DualClip => "dual_clip",
            LossKind::Ipo => "ipo",
            LossKind::Cdpo => "cdpo",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(LossKind::Dpo),
            "dual_clip" => Ok(LossKind::DualClip),
            "ipo" => Ok(LossKind::Ipo),
            "cdpo" => Ok(LossKind::Cdpo),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// `log(1 + exp(z))` without overflow for large |z|.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic sigmoid, branch-stabilized.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Implicit reward of one response: `beta * (log pi - log pi_ref)`.
pub fn implicit_reward(delta: f64, beta: f64) -> f64 {
    beta * delta
}

/// Minimized sigmoid preference loss: `softplus(-h)` with
/// `h = beta*(delta_w - delta_l)`.
pub fn dpo_loss(r: PairLogRatios, beta: f64) -> f64 {
    softplus(-r.margin(beta))
}

/// Decoupled hinge loss
/// `max(0, gamma_w - beta*delta_w) + max(0, gamma_l + beta*delta_l)`.
pub fn dual_clip_loss(r: PairLogRatios, cfg: &LossConfig) -> f64 {
    let chosen = (cfg.gamma_w - cfg.beta * r.delta_w).max(0.0);
    let rejected = (cfg.gamma_l + cfg.beta * r.delta_l).max(0.0);
    chosen + rejected
}

/// Squared-margin loss `(h - 1/(2*tau))^2`.
pub fn ipo_loss(r: PairLogRatios, beta: f64, tau_ipo: f64) -> f64 {
    let target = 1.0 / (2.0 * tau_ipo);
    let d = r.margin(beta) - target;
    d * d
}

/// Label-noise-aware sigmoid loss
/// `(1-eps)*softplus(-h) + eps*softplus(h)`; reduces to `dpo_loss` at eps=0.
pub fn cdpo_loss(r: PairLogRatios, beta: f64, epsilon: f64) -> f64 {
    let h = r.margin(beta);
    (1.0 - epsilon) * softplus(-h) + epsilon * softplus(h)
}

/// The sigmoid multiplier on the minimized DPO gradient:
/// `sigma(beta*delta_l - beta*delta_w)`. Decays toward zero as the margin
/// grows and equals 0.5 exactly when the policy matches the reference on the
/// pair.
pub fn grad_scale_s(r: PairLogRatios, beta: f64) -> f64 {
    sigmoid(-r.margin(beta))
}

/// Loss value for the given kind.
pub fn loss_value(kind: LossKind, r: PairLogRatios, cfg: &LossConfig) -> f64 {
    match kind {
        LossKind::Dpo => dpo_loss(r, cfg.beta),
        LossKind::DualClip => dual_clip_loss(r, cfg),
        LossKind::Ipo => ipo_loss(r, cfg.beta, cfg.tau_ipo),
        LossKind::Cdpo => cdpo_loss(r, cfg.beta, cfg.epsilon),
    }
}

/// Partial derivatives of the per-pair loss with respect to
/// (delta_w, delta_l). Hinge subgradients are 0 exactly at the kink.
pub fn loss_partials(kind: LossKind, r: PairLogRatios, cfg: &LossConfig) -> (f64, f64) {
    match kind {
        LossKind::Dpo => {
            let s = grad_scale_s(r, cfg.beta);
            (-cfg.beta * s, cfg.beta * s)
        }
        LossKind::DualClip => {
            let d_w = if cfg.beta * r.delta_w < cfg.gamma_w {
                -cfg.beta
            } else {
                0.0
            };
            let d_l = if cfg.beta * r.delta_l > -cfg.gamma_l {
                cfg.beta
            } else {
                0.0
            };
            (d_w, d_l)
        }
        LossKind::Ipo => {
            let target = 1.0 / (2.0 * cfg.tau_ipo);
            let d_h = 2.0 * (r.margin(cfg.beta) - target);
            (cfg.beta * d_h, -cfg.beta * d_h)
        }
        LossKind::Cdpo => {
            let h = r.margin(cfg.beta);
            let d_h = -(1.0 - cfg.epsilon) * sigmoid(-h) + cfg.epsilon * sigmoid(h);
            (cfg.beta * d_h, -cfg.beta * d_h)
        }
    }
}

/// One preference comparison: two responses to the same prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub prompt: crate::seq::Prompt,
    pub chosen: crate::seq::Response,
    pub rejected: crate::seq::Response,
    pub src_w: crate::matrix::SourceTag,
    pub src_l: crate::matrix::SourceTag,
}

/// Per-pair quantities recorded during batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub loss: f64,
    pub reward_w: f64,
    pub reward_l: f64,
    pub s: f64,
}

/// Result of evaluating a batch: mean loss, mean parameter gradient, and
/// per-pair telemetry in input order.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub mean_loss: f64,
    pub grad: PolicyGradient,
    pub pairs: Vec<PairStats>,
}

impl BatchEval {
    pub fn mean_reward_w(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.reward_w))
    }

    pub fn mean_reward_l(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.reward_l))
    }

    pub fn mean_s(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.s))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

struct PairEval {
    stats: PairStats,
    grad: Vec<f64>,
}

fn eval_pair(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<PairEval> {
    let delta_w = policy.log_prob(&pair.prompt, &pair.chosen)?
        - reference.log_prob(&pair.prompt, &pair.chosen)?;
    let delta_l = policy.log_prob(&pair.prompt, &pair.rejected)?
        - reference.log_prob(&pair.prompt, &pair.rejected)?;
    let r = PairLogRatios { delta_w, delta_l };
    let (d_w, d_l) = loss_partials(kind, r, cfg);
    let mut grad = vec![0.0; policy.num_params()];
    if d_w != 0.0 {
        policy.accumulate_log_prob_grad(&pair.prompt, &pair.chosen, d_w, &mut grad)?;
    }
    if d_l != 0.0 {
        policy.accumulate_log_prob_grad(&pair.prompt, &pair.rejected, d_l, &mut grad)?;
    }
    Ok(PairEval {
        stats: PairStats {
            loss: loss_value(kind, r, cfg),
            reward_w: implicit_reward(delta_w, cfg.beta),
            reward_l: implicit_reward(delta_l, cfg.beta),
            s: grad_scale_s(r, cfg.beta),
        },
        grad,
    })
}

fn reduce_batch(policy: &TabularPolicy, evals: Vec<Result<PairEval>>) -> Result<BatchEval> {
    let n = evals.len();
    let mut grad = PolicyGradient::zeros_like(policy);
    let mut pairs = Vec::with_capacity(n);
    let mut loss_sum = 0.0;
    // fixed pair-index reduction order keeps the result bitwise identical
    // between the parallel and sequential paths
    for eval in evals {
        let eval = eval?;
        loss_sum += eval.stats.loss;
        pairs.push(eval.stats);
        for (acc, g) in grad.values_mut().iter_mut().zip(&eval.grad) {
            *acc += g;
        }
    }
    grad.scale(1.0 / n as f64);
    Ok(BatchEval {
        mean_loss: loss_sum / n as f64,
        grad,
        pairs,
    })
}

/// Mean loss and its exact parameter gradient over a batch of pairs.
///
/// Per-pair evaluation fans out in parallel when the `parallel` feature is
/// on; the reduction always runs in pair order.
pub fn batch_loss_and_grad(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[PreferencePair],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let evals = map_slice(batch, |pair| eval_pair(policy, reference, pair, kind, cfg));
    reduce_batch(policy, evals)
}

/// Sequential reference path for `batch_loss_and_grad`; bitwise identical to
/// the parallel path and kept public for the benchmark suite.
pub fn batch_loss_and_grad_serial(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[PreferencePair],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let evals = batch
        .iter()
        .map(|pair| eval_pair(policy, reference, pair, kind, cfg))
        .collect();
    reduce_batch(policy, evals)
}

/// Mean loss only, shared by the finite-difference oracle.
pub fn batch_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[PreferencePair],
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut sum = 0.0;
    for pair in batch {
        let delta_w = policy.log_prob(&pair.prompt, &pair.chosen)?
            - reference.log_prob(&pair.prompt, &pair.chosen)?;
        let delta_l = policy.log_prob(&pair.prompt, &pair.rejected)?
            - reference.log_prob(&pair.prompt, &pair.rejected)?;
        sum += loss_value(kind, PairLogRatios { delta_w, delta_l }, cfg);
    }
    Ok(sum / batch.len() as f64)
}
