//! Score-distribution moment statistics, the brute-force alignment proxy,
//! and telemetry CSV export.
//!
//! The alignment proxy replaces benchmark scores at desk scale: the negated
//! mean KL divergence from a designated truth policy, computed exactly over
//! the enumerated response space. It is 0 for the truth itself and negative
//! for everything else, so "higher is better" reads the same way a
//! benchmark score does.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::PromptSet;
use crate::parallel::map_range;
use crate::seq::{enumerate_responses, TabularPolicy};
use crate::trainer::TelemetryRecord;

/// Population central-moment summary of a score sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStats {
    pub n: usize,
    pub mean: f64,
    /// Population variance (second central moment).
    pub variance: f64,
    /// Skewness g1 = m3 / m2^(3/2).
    pub skewness: f64,
    /// Excess kurtosis g2 = m4 / m2^2 - 3 (0 for a normal distribution).
    pub excess_kurtosis: f64,
}

/// Population moments of a score list; requires at least four samples and a
/// non-degenerate spread.
pub fn score_stats(scores: &[f64]) -> Result<ScoreStats> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::Input(format!(
            "need at least 4 scores for moment statistics, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in scores {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 == 0.0 {
        return Err(Error::Input(
            "degenerate score distribution: zero variance".into(),
        ));
    }
    Ok(ScoreStats {
        n,
        mean,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

/// Per-policy alignment report: the proxy value per evaluated policy name.
#[derive(Debug, Clone, Default)]
pub struct AlignmentReport {
    pub entries: Vec<(String, f64)>,
}

fn kl_to_truth(
    policy: &TabularPolicy,
    truth: &TabularPolicy,
    prompts: &PromptSet,
    parallel: bool,
) -> Result<f64> {
    let responses = enumerate_responses(truth.spec(), truth.vocab())?;
    let per_prompt: Vec<Result<f64>> = if parallel {
        map_range(prompts.len(), |i| {
            let x = &prompts.prompts()[i];
            let mut kl = 0.0;
            for y in &responses {
                let lp_truth = truth.log_prob(x, y)?;
                let lp_policy = policy.log_prob(x, y)?;
                kl += lp_truth.exp() * (lp_truth - lp_policy);
            }
            Ok(kl)
        })
    } else {
        (0..prompts.len())
            .map(|i| {
                let x = &prompts.prompts()[i];
                let mut kl = 0.0;
                for y in &responses {
                    let lp_truth = truth.log_prob(x, y)?;
                    let lp_policy = policy.log_prob(x, y)?;
                    kl += lp_truth.exp() * (lp_truth - lp_policy);
                }
                Ok(kl)
            })
            .collect()
    };
    let mut total = 0.0;
    for kl in per_prompt {
        total += kl?;
    }
    Ok(total / prompts.len() as f64)
}

/// Negated mean exact KL(truth || policy) over the prompt set; 0 iff the
/// policy matches the truth on the enumerated space.
pub fn alignment_proxy(
    policy: &TabularPolicy,
    truth: &TabularPolicy,
    prompts: &PromptSet,
) -> Result<f64> {
    Ok(-kl_to_truth(policy, truth, prompts, true)?)
}

/// Sequential reference path for `alignment_proxy`; kept public for the
/// benchmark suite.
pub fn alignment_proxy_serial(
    policy: &TabularPolicy,
    truth: &TabularPolicy,
    prompts: &PromptSet,
) -> Result<f64> {
    Ok(-kl_to_truth(policy, truth, prompts, false)?)
}

pub const TELEMETRY_HEADER: &str = "step,iter,minibatch,loss,reward_w,reward_l,s,lr";

/// Render telemetry as CSV. Floats use the shortest representation that
/// parses back to the identical double, so a write/parse cycle is lossless.
pub fn telemetry_to_csv(records: &[TelemetryRecord]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.iter, r.minibatch, r.loss, r.reward_w, r.reward_l, r.s, r.lr
        ));
    }
    out
}

/// Write telemetry CSV to `path` (header plus one row per record).
pub fn export_telemetry_csv(records: &[TelemetryRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(telemetry_to_csv(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parse telemetry CSV produced by `export_telemetry_csv`.
pub fn parse_telemetry_csv(text: &str) -> Result<Vec<TelemetryRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TELEMETRY_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "bad telemetry header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse(format!("bad telemetry row '{line}'")));
        }
        let parse_u = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad integer '{s}'")))
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad float '{s}'")))
        };
        records.push(TelemetryRecord {
            step: parse_u(fields[0])?,
            iter: parse_u(fields[1])? as u32,
            minibatch: parse_u(fields[2])? as u32,
            loss: parse_f(fields[3])?,
            reward_w: parse_f(fields[4])?,
            reward_l: parse_f(fields[5])?,
            s: parse_f(fields[6])?,
            lr: parse_f(fields[7])?,
        });
    }
    Ok(records)
}

pub const PROMPT_STATS_HEADER: &str = "prompt_id,n,mean,var,skew,kurt";

/// Write per-prompt score statistics as CSV.
pub fn export_prompt_stats_csv(stats: &[(usize, ScoreStats)], path: &Path) -> Result<()> {
    let mut out = String::from(PROMPT_STATS_HEADER);
    out.push('\n');
    for (prompt_id, s) in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            prompt_id, s.n, s.mean, s.variance, s.skewness, s.excess_kurtosis
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
