//! The model matrix: a grid of policies indexed by (version, size), the
//! chosen/rejected source-set rules, weighted mixture sampling, and
//! instruction-dataset construction.
//!
//! Chosen responses come from the newest-largest grid entry plus the human
//! policy; rejected responses come from entries weaker than the designated
//! base. A synthetic quality-graded matrix generator stands in for real
//! checkpoints: entry (v, s) interpolates log-linearly between the uniform
//! policy (lambda = 0) and a designated truth policy (lambda = 1).

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::parallel::map_range;
use crate::rng::{self, derived_stream};
use crate::seq::{tokens_from_field, tokens_to_field, Prompt, Response, TabularPolicy};

/// Grid coordinates of one policy: version and size ordinals, both >= 1.
/// Serializes as the string `v<version>s<size>` so it can key config maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelId {
    pub version: u32,
    pub size: u32,
}

impl ModelId {
    pub fn new(version: u32, size: u32) -> Result<Self> {
        if version < 1 || size < 1 {
            return Err(Error::Input("model ordinals must be >= 1".into()));
        }
        Ok(Self { version, size })
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}s{}", self.version, self.size)
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let tag: SourceTag = text.parse().map_err(serde::de::Error::custom)?;
        match tag {
            SourceTag::Model(id) => Ok(id),
            _ => Err(serde::de::Error::custom(format!(
                "expected v<version>s<size>, got '{text}'"
            ))),
        }
    }
}

/// Where a record's response came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceTag {
    Model(ModelId),
    Human,
    Base,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Model(id) => write!(f, "{id}"),
            SourceTag::Human => write!(f, "human"),
            SourceTag::Base => write!(f, "base"),
        }
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(SourceTag::Human),
            "base" => Ok(SourceTag::Base),
            other => {
                let rest = other
                    .strip_prefix('v')
                    .ok_or_else(|| Error::Parse(format!("bad source tag '{other}'")))?;
                let (v, s) = rest
                    .split_once('s')
                    .ok_or_else(|| Error::Parse(format!("bad source tag '{other}'")))?;
                let version = v
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad source tag '{other}'")))?;
                let size = s
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad source tag '{other}'")))?;
                Ok(SourceTag::Model(ModelId { version, size }))
            }
        }
    }
}

/// A sampling source: one grid entry or the human policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MixtureSource {
    Model(ModelId),
    Human,
}

impl MixtureSource {
    pub fn tag(&self) -> SourceTag {
        match self {
            MixtureSource::Model(id) => SourceTag::Model(*id),
            MixtureSource::Human => SourceTag::Human,
        }
    }
}

/// Grid of policies plus the human policy and the base coordinates.
#[derive(Debug, Clone)]
pub struct ModelMatrix {
    entries: BTreeMap<ModelId, TabularPolicy>,
    human: TabularPolicy,
    base_id: ModelId,
}

impl ModelMatrix {
    pub fn new(
        entries: BTreeMap<ModelId, TabularPolicy>,
        human: TabularPolicy,
        base_id: ModelId,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("model matrix has no entries".into()));
        }
        if !entries.contains_key(&base_id) {
            return Err(Error::Config(format!("base entry {base_id} missing from grid")));
        }
        let vocab = *human.vocab();
        let spec = *human.spec();
        for (id, policy) in &entries {
            if *policy.vocab() != vocab || *policy.spec() != spec {
                return Err(Error::Config(format!(
                    "entry {id} disagrees with the shared vocabulary or length cap"
                )));
            }
        }
        Ok(Self {
            entries,
            human,
            base_id,
        })
    }

    pub fn entries(&self) -> &BTreeMap<ModelId, TabularPolicy> {
        &self.entries
    }

    pub fn human(&self) -> &TabularPolicy {
        &self.human
    }

    pub fn base_id(&self) -> ModelId {
        self.base_id
    }

    pub fn base(&self) -> &TabularPolicy {
        &self.entries[&self.base_id]
    }

    /// Replace the base entry with an updated policy.
    pub fn set_base(&mut self, policy: TabularPolicy) {
        self.entries.insert(self.base_id, policy);
    }

    pub fn get(&self, id: ModelId) -> Option<&TabularPolicy> {
        self.entries.get(&id)
    }

    fn resolve(&self, source: MixtureSource) -> Result<&TabularPolicy> {
        match source {
            MixtureSource::Human => Ok(&self.human),
            MixtureSource::Model(id) => self
                .entries
                .get(&id)
                .ok_or_else(|| Error::Config(format!("no matrix entry at {id}"))),
        }
    }
}

/// Rule selecting which grid entries supply rejected responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectedRule {
    /// Strictly older and strictly smaller than the base.
    StrictAnd,
    /// Older or smaller than the base (default reading).
    WeakerOr,
    /// The base entry itself: the reverse-alignment probe.
    SelfOnly,
    /// An explicit subset of grid entries.
    Explicit(BTreeSet<ModelId>),
}

/// The chosen-response source set: the newest-largest entry plus the human
/// policy.
pub fn chosen_set(matrix: &ModelMatrix) -> Result<BTreeSet<MixtureSource>> {
    let v_max = matrix.entries.keys().map(|id| id.version).max().unwrap();
    let s_max = matrix.entries.keys().map(|id| id.size).max().unwrap();
    let top = ModelId {
        version: v_max,
        size: s_max,
    };
    if !matrix.entries.contains_key(&top) {
        return Err(Error::Config(format!(
            "ragged grid: no entry at maximal coordinates {top}"
        )));
    }
    Ok([MixtureSource::Model(top), MixtureSource::Human]
        .into_iter()
        .collect())
}

/// The rejected-response source set under the given rule.
pub fn rejected_set(matrix: &ModelMatrix, rule: &RejectedRule) -> Result<BTreeSet<MixtureSource>> {
    let base = matrix.base_id;
    let ids: Vec<ModelId> = matrix.entries.keys().copied().collect();
    let selected: BTreeSet<MixtureSource> = match rule {
        RejectedRule::StrictAnd => ids
            .iter()
            .filter(|id| id.version < base.version && id.size < base.size)
            .map(|id| MixtureSource::Model(*id))
            .collect(),
        RejectedRule::WeakerOr => ids
            .iter()
            .filter(|id| (id.version < base.version || id.size < base.size) && **id != base)
            .map(|id| MixtureSource::Model(*id))
            .collect(),
        RejectedRule::SelfOnly => [MixtureSource::Model(base)].into_iter().collect(),
        RejectedRule::Explicit(subset) => {
            for id in subset {
                if !matrix.entries.contains_key(id) {
                    return Err(Error::Config(format!("explicit source {id} not in grid")));
                }
            }
            subset.iter().map(|id| MixtureSource::Model(*id)).collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::Config(
            "rejected-source rule selected no entries".into(),
        ));
    }
    Ok(selected)
}

/// Weighted mixture over sampling sources; weights must sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<(MixtureSource, f64)>,
}

impl MixtureSpec {
    pub fn new(components: Vec<(MixtureSource, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        if components.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::Input("mixture weights must be >= 0".into()));
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// Equal weight on every source in the set.
    pub fn uniform_over(sources: &BTreeSet<MixtureSource>) -> Result<Self> {
        let n = sources.len();
        if n == 0 {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        let w = 1.0 / n as f64;
        // nudge the final weight so the total is exactly 1
        let mut components: Vec<(MixtureSource, f64)> =
            sources.iter().map(|s| (*s, w)).collect();
        let partial: f64 = components[..n - 1].iter().map(|(_, w)| w).sum();
        components[n - 1].1 = 1.0 - partial;
        Self::new(components)
    }

    pub fn components(&self) -> &[(MixtureSource, f64)] {
        &self.components
    }

    pub fn sources(&self) -> BTreeSet<MixtureSource> {
        self.components.iter().map(|(s, _)| *s).collect()
    }
}

/// Draw one response: pick a component by weight, then sample from it.
pub fn mixture_sample(
    matrix: &ModelMatrix,
    spec: &MixtureSpec,
    x: &Prompt,
    rng: &mut impl Rng,
) -> Result<(Response, SourceTag)> {
    let total: f64 = spec.components.iter().map(|(_, w)| w).sum();
    let mut r = rng.gen::<f64>() * total;
    let mut choice = spec.components.len() - 1;
    for (i, (_, w)) in spec.components.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            choice = i;
            break;
        }
    }
    let (source, _) = spec.components[choice];
    let policy = matrix.resolve(source)?;
    let response = policy.sample_response(x, rng)?;
    Ok((response, source.tag()))
}

/// Prompt list with sampling weights (uniform by default).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    weights: Vec<f64>,
}

impl PromptSet {
    pub fn uniform(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("prompt set is empty".into()));
        }
        let w = 1.0 / prompts.len() as f64;
        let weights = vec![w; prompts.len()];
        Ok(Self { prompts, weights })
    }

    pub fn weighted(prompts: Vec<Prompt>, weights: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("prompt set is empty".into()));
        }
        if prompts.len() != weights.len() {
            return Err(Error::Input("one weight per prompt required".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!(
                "prompt weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { prompts, weights })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// One sampled (prompt, response, source) record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRecord {
    pub prompt: Prompt,
    pub response: Response,
    pub source: SourceTag,
}

/// A bag of instruction records for one side (chosen or rejected).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstructionDataset {
    pub records: Vec<InstructionRecord>,
}

impl InstructionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Line-delimited form: `prompt=<t,...> response=<t,...> source=<tag>`,
    /// record order preserved.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "prompt={} response={} source={}\n",
                tokens_to_field(r.prompt.tokens()),
                tokens_to_field(r.response.tokens()),
                r.source
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let mut prompt = None;
            let mut response = None;
            let mut source = None;
            for field in line.split_whitespace() {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("bad record field '{field}'")))?;
                match key {
                    "prompt" => prompt = Some(Prompt::new(tokens_from_field(value)?)),
                    "response" => {
                        response = Some(crate::seq::Response::from_sampled(tokens_from_field(
                            value,
                        )?))
                    }
                    "source" => source = Some(value.parse()?),
                    _ => return Err(Error::Parse(format!("unknown record key '{key}'"))),
                }
            }
            match (prompt, response, source) {
                (Some(prompt), Some(response), Some(source)) => records.push(InstructionRecord {
                    prompt,
                    response,
                    source,
                }),
                _ => return Err(Error::Parse(format!("incomplete record '{line}'"))),
            }
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Build the chosen- and rejected-side instruction datasets: for every
/// prompt, `n_per_prompt` mixture draws into each side, with per-prompt
/// streams derived from the master seed so generation parallelizes without
/// changing the result.
pub fn build_instruction_datasets(
    matrix: &ModelMatrix,
    prompts: &PromptSet,
    w_spec: &MixtureSpec,
    l_spec: &MixtureSpec,
    rejected_rule: &RejectedRule,
    n_per_prompt: usize,
    master_seed: u64,
) -> Result<(InstructionDataset, InstructionDataset)> {
    if n_per_prompt == 0 {
        return Err(Error::Input("n_per_prompt must be >= 1".into()));
    }
    let allowed_w = chosen_set(matrix)?;
    if !w_spec.sources().is_subset(&allowed_w) {
        return Err(Error::Config(
            "chosen mixture uses sources outside the chosen set".into(),
        ));
    }
    let allowed_l = rejected_set(matrix, rejected_rule)?;
    if !l_spec.sources().is_subset(&allowed_l) {
        return Err(Error::Config(
            "rejected mixture uses sources outside the rejected set".into(),
        ));
    }

    let draw_side = |prompt_idx: usize, label: u64, spec: &MixtureSpec| -> Result<Vec<InstructionRecord>> {
        let prompt = &prompts.prompts()[prompt_idx];
        let mut rng = derived_stream(master_seed, &[label, prompt_idx as u64]);
        (0..n_per_prompt)
            .map(|_| {
                let (response, source) = mixture_sample(matrix, spec, prompt, &mut rng)?;
                Ok(InstructionRecord {
                    prompt: prompt.clone(),
                    response,
                    source,
                })
            })
            .collect()
    };

    let per_prompt: Vec<Result<(Vec<InstructionRecord>, Vec<InstructionRecord>)>> =
        map_range(prompts.len(), |i| {
            Ok((
                draw_side(i, rng::stream::CHOSEN_DATASET, w_spec)?,
                draw_side(i, rng::stream::REJECTED_DATASET, l_spec)?,
            ))
        });

    let mut d_w = InstructionDataset::default();
    let mut d_l = InstructionDataset::default();
    for entry in per_prompt {
        let (w_records, l_records) = entry?;
        d_w.records.extend(w_records);
        d_l.records.extend(l_records);
    }
    Ok((d_w, d_l))
}

/// Synthetic quality-graded matrix: entry (v, s) has logits
/// `lambda[(v, s)] * truth`, the human policy is the truth itself, and
/// quality is strictly ordered by lambda.
pub fn make_quality_matrix(
    truth: &TabularPolicy,
    grid: &BTreeMap<ModelId, f64>,
    base_id: ModelId,
) -> Result<ModelMatrix> {
    let mut entries = BTreeMap::new();
    for (id, &lambda) in grid {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Input(format!(
                "lambda {lambda} for {id} outside [0, 1]"
            )));
        }
        entries.insert(*id, truth.scaled(lambda));
    }
    ModelMatrix::new(entries, truth.clone(), base_id)
}
