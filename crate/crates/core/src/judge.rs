//! Judges, transcript parsing, the mean-score threshold, dataset expansion,
//! and preference-pair construction.
//!
//! The oracle judge maps a response's log-probability under the designated
//! truth policy affinely onto the score range, so a higher truth-likelihood
//! always means a higher score. The biased judge mimics an uncalibrated
//! evaluator: on a designated out-of-distribution prompt set it inverts the
//! oracle's score about the range midpoint, the failure mode that evaluation
//! correction exists to fix.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::PreferencePair;
use crate::matrix::{InstructionDataset, InstructionRecord, PromptSet, SourceTag};
use crate::parallel::map_range;
use crate::rng::{self, derived_stream};
use crate::seq::{enumerate_responses, tokens_to_field, Prompt, Response, TabularPolicy};

/// Inclusive score interval; the default matches a 2-to-10 rubric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ScoreRange {
    fn default() -> Self {
        Self { min: 2.0, max: 10.0 }
    }
}

impl ScoreRange {
    pub fn clamp(&self, score: f64) -> f64 {
        score.clamp(self.min, self.max)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Anything that can score a (prompt, response) sample.
pub trait Judge: Sync {
    fn score(&self, x: &Prompt, y: &Response) -> Result<f64>;

    fn range(&self) -> ScoreRange;
}

/// A judged sample, kept alongside its provenance for dataset expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub prompt: Prompt,
    pub response: Response,
    pub score: f64,
    pub source: SourceTag,
}

/// The mean-score acceptance threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub tau: f64,
}

/// Scores by affine map of the truth log-probability onto the range: the
/// least likely enumerated response maps to `min`, the most likely to `max`.
pub struct OracleJudge {
    truth: TabularPolicy,
    range: ScoreRange,
    responses: Vec<Response>,
    bounds_cache: BTreeMap<Prompt, (f64, f64)>,
}

impl OracleJudge {
    pub fn new(truth: TabularPolicy, range: ScoreRange) -> Result<Self> {
        let responses = enumerate_responses(truth.spec(), truth.vocab())?;
        Ok(Self {
            truth,
            range,
            responses,
            bounds_cache: BTreeMap::new(),
        })
    }

    /// Precompute the per-prompt log-probability bounds for a known prompt
    /// set; scoring those prompts then skips the enumeration sweep.
    pub fn with_prompt_cache(
        truth: TabularPolicy,
        range: ScoreRange,
        prompts: &PromptSet,
    ) -> Result<Self> {
        let mut judge = Self::new(truth, range)?;
        for prompt in prompts.prompts() {
            let bounds = judge.log_prob_bounds(prompt)?;
            judge.bounds_cache.insert(prompt.clone(), bounds);
        }
        Ok(judge)
    }

    pub fn truth(&self) -> &TabularPolicy {
        &self.truth
    }

    fn log_prob_bounds(&self, x: &Prompt) -> Result<(f64, f64)> {
        if let Some(&bounds) = self.bounds_cache.get(x) {
            return Ok(bounds);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for y in &self.responses {
            let lp = self.truth.log_prob(x, y)?;
            lo = lo.min(lp);
            hi = hi.max(lp);
        }
        Ok((lo, hi))
    }
}

impl Judge for OracleJudge {
    fn score(&self, x: &Prompt, y: &Response) -> Result<f64> {
        let (lo, hi) = self.log_prob_bounds(x)?;
        let lp = self.truth.log_prob(x, y)?;
        if hi - lo < 1e-300 {
            // all responses equally likely under the truth
            return Ok(self.range.midpoint());
        }
        let t = (lp - lo) / (hi - lo);
        Ok(self
            .range
            .clamp(self.range.min + t * (self.range.max - self.range.min)))
    }

    fn range(&self) -> ScoreRange {
        self.range
    }
}

/// Wraps a judge and inverts its score about the range midpoint on a
/// designated out-of-distribution prompt set, then shifts by `offset`.
pub struct BiasedJudge<J: Judge> {
    inner: J,
    ood_prompts: BTreeSet<Prompt>,
    offset: f64,
}

impl<J: Judge> BiasedJudge<J> {
    pub fn new(inner: J, ood_prompts: BTreeSet<Prompt>, offset: f64) -> Result<Self> {
        if !offset.is_finite() {
            return Err(Error::Input("bias offset must be finite".into()));
        }
        Ok(Self {
            inner,
            ood_prompts,
            offset,
        })
    }
}

impl<J: Judge> Judge for BiasedJudge<J> {
    fn score(&self, x: &Prompt, y: &Response) -> Result<f64> {
        let base = self.inner.score(x, y)?;
        if !self.ood_prompts.contains(x) {
            return Ok(base);
        }
        let range = self.inner.range();
        Ok(range.clamp(range.min + range.max - base + self.offset))
    }

    fn range(&self) -> ScoreRange {
        self.inner.range()
    }
}

/// A seeded prompt subset of the given fraction, for marking prompts as
/// out-of-distribution.
pub fn seeded_prompt_subset(
    prompts: &PromptSet,
    fraction: f64,
    seed: u64,
) -> BTreeSet<Prompt> {
    let n = (fraction.clamp(0.0, 1.0) * prompts.len() as f64).round() as usize;
    let mut indices: Vec<usize> = (0..prompts.len()).collect();
    let mut rng = derived_stream(seed, &[0x0D]);
    for i in 0..n.min(indices.len().saturating_sub(1)) {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices
        .into_iter()
        .take(n)
        .map(|i| prompts.prompts()[i].clone())
        .collect()
}

/// Produces rubric-dimension transcripts for a sample; one string per
/// dimension.
pub trait TranscriptProvider: Sync {
    fn transcripts(&self, x: &Prompt, y: &Response) -> Vec<String>;
}

impl<F> TranscriptProvider for F
where
    F: Fn(&Prompt, &Response) -> Vec<String> + Sync,
{
    fn transcripts(&self, x: &Prompt, y: &Response) -> Vec<String> {
        self(x, y)
    }
}

/// Scores by parsing judge transcripts; multiple transcripts (one per rubric
/// dimension) average into a single scalar.
pub struct TranscriptJudge<P> {
    provider: P,
    range: ScoreRange,
}

impl<P: TranscriptProvider> TranscriptJudge<P> {
    pub fn new(provider: P, range: ScoreRange) -> Self {
        Self { provider, range }
    }
}

impl<P: TranscriptProvider> Judge for TranscriptJudge<P> {
    fn score(&self, x: &Prompt, y: &Response) -> Result<f64> {
        let transcripts = self.provider.transcripts(x, y);
        if transcripts.is_empty() {
            return Err(Error::Parse("judge produced no transcripts".into()));
        }
        let mut sum = 0.0;
        for t in &transcripts {
            sum += parse_judge_score(t)?;
        }
        Ok(self.range.clamp(sum / transcripts.len() as f64))
    }

    fn range(&self) -> ScoreRange {
        self.range
    }
}

/// Extract the score from a judge transcript: take the last `Score:` marker
/// (rubric bodies contain earlier `Score N:` lines, which the mandatory
/// colon-after-`Score` form skips) and parse the first decimal numeral after
/// it, ignoring trailing annotations.
pub fn parse_judge_score(text: &str) -> Result<f64> {
    let marker = "Score:";
    let idx = text
        .rfind(marker)
        .ok_or_else(|| Error::Parse("no 'Score:' marker in transcript".into()))?;
    let tail = &text[idx + marker.len()..];
    let bytes = tail.as_bytes();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate() {
        if b.is_ascii_digit() {
            start = Some(i);
            break;
        }
    }
    let start = start.ok_or_else(|| Error::Parse("no numeral after 'Score:'".into()))?;
    let mut end = start;
    let mut seen_dot = false;
    while end < bytes.len() {
        let b = bytes[end];
        if b.is_ascii_digit() {
            end += 1;
        } else if b == b'.' && !seen_dot && end + 1 < bytes.len() && bytes[end + 1].is_ascii_digit()
        {
            seen_dot = true;
            end += 1;
        } else {
            break;
        }
    }
    tail[start..end]
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("unparseable score '{}'", &tail[start..end])))
}

/// Sample `n_per_prompt` base responses per prompt, score them all, and
/// return the mean score as the threshold together with the scored samples.
pub fn compute_tau(
    base: &TabularPolicy,
    prompts: &PromptSet,
    judge: &dyn Judge,
    n_per_prompt: usize,
    master_seed: u64,
) -> Result<(Threshold, Vec<ScoredSample>)> {
    if prompts.is_empty() {
        return Err(Error::Input("empty prompt set".into()));
    }
    if n_per_prompt == 0 {
        return Err(Error::Input("n_per_prompt must be >= 1".into()));
    }
    let per_prompt: Vec<Result<Vec<ScoredSample>>> = map_range(prompts.len(), |i| {
        let prompt = &prompts.prompts()[i];
        let mut rng = derived_stream(master_seed, &[rng::stream::TAU_SAMPLES, i as u64]);
        (0..n_per_prompt)
            .map(|_| {
                let response = base.sample_response(prompt, &mut rng)?;
                let score = judge.score(prompt, &response)?;
                Ok(ScoredSample {
                    prompt: prompt.clone(),
                    response,
                    score,
                    source: SourceTag::Base,
                })
            })
            .collect()
    });
    let mut samples = Vec::with_capacity(prompts.len() * n_per_prompt);
    for entry in per_prompt {
        samples.extend(entry?);
    }
    let tau = samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64;
    Ok((Threshold { tau }, samples))
}

/// Expand the instruction datasets with judged base samples: strictly above
/// the threshold joins the chosen side, at or below joins the rejected side.
/// Original records are preserved verbatim.
pub fn expand_datasets(
    d_w: &InstructionDataset,
    d_l: &InstructionDataset,
    scored: &[ScoredSample],
    threshold: Threshold,
) -> (InstructionDataset, InstructionDataset) {
    let mut expanded_w = d_w.clone();
    let mut expanded_l = d_l.clone();
    for sample in scored {
        let record = InstructionRecord {
            prompt: sample.prompt.clone(),
            response: sample.response.clone(),
            source: sample.source,
        };
        if sample.score > threshold.tau {
            expanded_w.records.push(record);
        } else {
            expanded_l.records.push(record);
        }
    }
    (expanded_w, expanded_l)
}

/// The training set: preference pairs grouped into one flat list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Line-delimited form:
    /// `prompt=<...> chosen=<...> rejected=<...> src_w=<tag> src_l=<tag>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&format!(
                "prompt={} chosen={} rejected={} src_w={} src_l={}\n",
                tokens_to_field(p.prompt.tokens()),
                tokens_to_field(p.chosen.tokens()),
                tokens_to_field(p.rejected.tokens()),
                p.src_w,
                p.src_l
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Pair chosen-side and rejected-side records that share a prompt: per
/// prompt, up to `max_pairs_per_prompt` distinct cross pairings drawn
/// uniformly without replacement; pairings with identical responses are
/// skipped. Prompts missing either side contribute nothing.
pub fn build_preference_pairs(
    d_w: &InstructionDataset,
    d_l: &InstructionDataset,
    max_pairs_per_prompt: usize,
    master_seed: u64,
) -> Result<PreferenceDataset> {
    if d_w.is_empty() || d_l.is_empty() {
        return Err(Error::EmptyDataset(
            "both instruction datasets must be nonempty".into(),
        ));
    }
    if max_pairs_per_prompt == 0 {
        return Err(Error::Input("max_pairs_per_prompt must be >= 1".into()));
    }

    // group record indices by prompt, in first-appearance order on the
    // chosen side so the build is deterministic
    let mut order: Vec<&Prompt> = Vec::new();
    let mut by_prompt: BTreeMap<&Prompt, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, r) in d_w.records.iter().enumerate() {
        let slot = by_prompt.entry(&r.prompt).or_insert_with(|| {
            order.push(&r.prompt);
            (Vec::new(), Vec::new())
        });
        slot.0.push(i);
    }
    for (j, r) in d_l.records.iter().enumerate() {
        if let Some(slot) = by_prompt.get_mut(&r.prompt) {
            slot.1.push(j);
        }
    }

    let mut pairs = Vec::new();
    for (prompt_idx, prompt) in order.iter().enumerate() {
        let (w_ids, l_ids) = &by_prompt[*prompt];
        if w_ids.is_empty() || l_ids.is_empty() {
            continue;
        }
        let mut combos: Vec<(usize, usize)> = Vec::with_capacity(w_ids.len() * l_ids.len());
        for &i in w_ids {
            for &j in l_ids {
                if d_w.records[i].response != d_l.records[j].response {
                    combos.push((i, j));
                }
            }
        }
        let mut rng =
            derived_stream(master_seed, &[rng::stream::PAIRING, prompt_idx as u64]);
        partial_shuffle(&mut combos, max_pairs_per_prompt, &mut rng);
        for &(i, j) in combos.iter().take(max_pairs_per_prompt) {
            let w = &d_w.records[i];
            let l = &d_l.records[j];
            pairs.push(PreferencePair {
                prompt: w.prompt.clone(),
                chosen: w.response.clone(),
                rejected: l.response.clone(),
                src_w: w.source,
                src_l: l.source,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(
            "no prompt had distinct responses on both sides".into(),
        ));
    }
    Ok(PreferenceDataset { pairs })
}

/// Fisher-Yates over the first `k` slots: a uniform sample without
/// replacement when only the prefix is consumed.
fn partial_shuffle<T>(items: &mut [T], k: usize, rng: &mut impl Rng) {
    let n = items.len();
    let limit = k.min(n.saturating_sub(1));
    for i in 0..limit {
        let j = rng.gen_range(i..n);
        items.swap(i, j);
    }
}
