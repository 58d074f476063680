//! Finite-difference verification of the analytic batch gradients.
//!
//! The numeric side only ever calls the scalar loss evaluation, so it stays
//! independent of the analytic gradient path it checks. Errors are reported
//! as `|analytic - numeric| / max(1, |analytic|, |numeric|)`: relative where
//! the gradient has size, absolute where it is tiny and central differences
//! are dominated by cancellation noise.

use rand::Rng;

use crate::error::Result;
use crate::losses::{batch_loss, batch_loss_and_grad, LossConfig, LossKind, PreferencePair};
use crate::matrix::SourceTag;
use crate::rng::derived_stream;
use crate::seq::{Prompt, SeqSpec, TabularPolicy, Vocabulary};

/// Dimensions of the randomized check instances.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckDims {
    pub vocab_size: usize,
    pub max_len: usize,
    pub order: usize,
    pub pairs_per_instance: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            max_len: 3,
            order: 1,
            pairs_per_instance: 16,
        }
    }
}

/// Outcome of one loss kind's randomized sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Central-difference gradient of `f` at `policy` over every logit.
pub fn fd_gradient(
    policy: &TabularPolicy,
    step: f64,
    mut f: impl FnMut(&TabularPolicy) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = policy.clone();
    let mut grad = vec![0.0; policy.num_params()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.logits()[i];
        probe.logits_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.logits_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.logits_mut()[i] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Scale-aware error: relative for large entries, absolute for small ones.
pub fn mixed_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn random_instance(
    dims: GradCheckDims,
    seed: u64,
    instance: u64,
) -> Result<(TabularPolicy, TabularPolicy, Vec<PreferencePair>)> {
    let vocab = Vocabulary::new(dims.vocab_size, dims.vocab_size - 1)?;
    let spec = SeqSpec::new(dims.max_len)?;
    let mut rng = derived_stream(seed, &[0xFD, instance]);
    let policy = TabularPolicy::random(vocab, spec, dims.order, 2.0, &mut rng);
    let reference = TabularPolicy::random(vocab, spec, dims.order, 2.0, &mut rng);
    let sampler = TabularPolicy::random(vocab, spec, dims.order, 1.0, &mut rng);
    let mut pairs = Vec::with_capacity(dims.pairs_per_instance);
    while pairs.len() < dims.pairs_per_instance {
        let x = Prompt::new(vec![rng.gen_range(0..dims.vocab_size)]);
        let chosen = sampler.sample_response(&x, &mut rng)?;
        let rejected = sampler.sample_response(&x, &mut rng)?;
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
    Ok((policy, reference, pairs))
}

/// Run `instances` randomized batch-gradient checks for one loss kind and
/// report the worst error seen.
pub fn gradcheck_loss(
    kind: LossKind,
    cfg: &LossConfig,
    dims: GradCheckDims,
    instances: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut max_rel = 0.0f64;
    for instance in 0..instances {
        let (policy, reference, pairs) = random_instance(dims, seed, instance as u64)?;
        let eval = batch_loss_and_grad(&policy, &reference, &pairs, kind, cfg)?;
        let numeric = fd_gradient(&policy, step, |p| {
            batch_loss(p, &reference, &pairs, kind, cfg)
        })?;
        for (a, n) in eval.grad.values().iter().zip(&numeric) {
            max_rel = max_rel.max(mixed_rel_err(*a, *n));
        }
    }
    Ok(GradCheckReport {
        kind,
        instances,
        max_rel_err: max_rel,
    })
}

/// The full sweep: every loss kind at the default dimensions.
pub fn gradcheck_all(
    cfg: &LossConfig,
    dims: GradCheckDims,
    instances: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    LossKind::ALL
        .iter()
        .map(|kind| gradcheck_loss(*kind, cfg, dims, instances, 1e-5, seed))
        .collect()
}
