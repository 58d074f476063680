//! Token sequences and small tabular language policies.
//!
//! A policy is an order-k conditional table: every k-symbol context maps to
//! a logit vector over the vocabulary. Responses either stop at the first
//! end-of-sequence token or run to the maximum length without one, which
//! makes the response space finite and exactly normalizable. That exactness
//! is what the rest of the crate leans on: log-probabilities, analytic
//! parameter gradients, and a brute-force enumeration oracle all agree to
//! double precision.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Hard ceiling on brute-force enumeration of the response space.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

/// Token alphabet with a reserved end-of-sequence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos_id: usize,
}

impl Vocabulary {
    pub fn new(size: usize, eos_id: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Input(format!("vocabulary size {size} < 2")));
        }
        if eos_id >= size {
            return Err(Error::Input(format!(
                "eos id {eos_id} outside vocabulary of size {size}"
            )));
        }
        Ok(Self { size, eos_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    /// Index of the start-padding symbol used in contexts (one past the
    /// largest token index; never emitted).
    pub fn pad_symbol(&self) -> usize {
        self.size
    }
}

/// Maximum response length in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqSpec {
    max_len: usize,
}

impl SeqSpec {
    pub fn new(max_len: usize) -> Result<Self> {
        if max_len < 1 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        Ok(Self { max_len })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Conditioning context for a response; may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prompt {
    tokens: Vec<usize>,
}

impl Prompt {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for &t in &self.tokens {
            if t >= vocab.size() {
                return Err(Error::Input(format!(
                    "prompt token {t} outside vocabulary of size {}",
                    vocab.size()
                )));
            }
        }
        Ok(())
    }
}

/// A complete response: token sequence including the terminal eos when one
/// occurred. Either the final token is the only eos, or there is no eos and
/// the length is exactly `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Response {
    tokens: Vec<usize>,
}

impl Response {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary, spec: &SeqSpec) -> Result<Self> {
        let r = Self { tokens };
        r.validate(vocab, spec)?;
        Ok(r)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Number of generation steps (equals the token count; the eos, when
    /// present, is itself a step).
    pub fn num_steps(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn from_sampled(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    fn validate(&self, vocab: &Vocabulary, spec: &SeqSpec) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Input(
                "response has no steps; immediate termination is the single-token [eos] sequence"
                    .into(),
            ));
        }
        if self.tokens.len() > spec.max_len() {
            return Err(Error::Input(format!(
                "response of {} tokens exceeds max_len {}",
                self.tokens.len(),
                spec.max_len()
            )));
        }
        for &t in &self.tokens {
            if t >= vocab.size() {
                return Err(Error::Input(format!(
                    "response token {t} outside vocabulary of size {}",
                    vocab.size()
                )));
            }
        }
        let eos_positions: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == vocab.eos_id())
            .map(|(i, _)| i)
            .collect();
        match eos_positions.as_slice() {
            [] => {
                if self.tokens.len() != spec.max_len() {
                    return Err(Error::Input(format!(
                        "response without eos must have length exactly {}, got {}",
                        spec.max_len(),
                        self.tokens.len()
                    )));
                }
            }
            [pos] => {
                if *pos != self.tokens.len() - 1 {
                    return Err(Error::Input("eos before the final position".into()));
                }
            }
            _ => return Err(Error::Input("multiple eos tokens".into())),
        }
        Ok(())
    }
}

/// Rolling order-k context window, left-padded with the start symbol.
struct ContextWindow {
    buf: Vec<usize>,
    radix: usize,
}

impl ContextWindow {
    fn new(order: usize, vocab: &Vocabulary, prompt: &Prompt) -> Self {
        let mut w = Self {
            buf: vec![vocab.pad_symbol(); order],
            radix: vocab.pad_symbol() + 1,
        };
        for &t in prompt.tokens() {
            w.push(t);
        }
        w
    }

    fn push(&mut self, token: usize) {
        if self.buf.is_empty() {
            return;
        }
        self.buf.rotate_left(1);
        let last = self.buf.len() - 1;
        self.buf[last] = token;
    }

    /// Big-endian mixed-radix index: the oldest symbol is most significant,
    /// so ascending index order is lexicographic order over context tuples.
    fn index(&self) -> usize {
        self.buf.iter().fold(0, |acc, &s| acc * self.radix + s)
    }
}

/// Decode a context index back into its symbol tuple.
fn decode_context(index: usize, order: usize, radix: usize) -> Vec<usize> {
    let mut symbols = vec![0; order];
    let mut rest = index;
    for slot in symbols.iter_mut().rev() {
        *slot = rest % radix;
        rest /= radix;
    }
    symbols
}

/// Order-k tabular policy: logits indexed by (context, token).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocabulary,
    spec: SeqSpec,
    order: usize,
    logits: Vec<f64>,
}

/// Gradient with respect to a policy's logit table; shape-identical to the
/// policy it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    order: usize,
    vocab_size: usize,
    values: Vec<f64>,
}

impl PolicyGradient {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        Self {
            order: policy.order,
            vocab_size: policy.vocab.size(),
            values: vec![0.0; policy.logits.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entry(&self, ctx_index: usize, token: usize) -> f64 {
        self.values[ctx_index * self.vocab_size + token]
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &PolicyGradient) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

impl TabularPolicy {
    /// Policy with all logits zero (uniform next-token distribution).
    pub fn uniform(vocab: Vocabulary, spec: SeqSpec, order: usize) -> Self {
        let n = Self::num_contexts(&vocab, order) * vocab.size();
        Self {
            vocab,
            spec,
            order,
            logits: vec![0.0; n],
        }
    }

    pub fn from_logits(
        vocab: Vocabulary,
        spec: SeqSpec,
        order: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::num_contexts(&vocab, order) * vocab.size();
        if logits.len() != expected {
            return Err(Error::Input(format!(
                "logit table has {} entries, expected {expected}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("logit table contains non-finite entries".into()));
        }
        Ok(Self {
            vocab,
            spec,
            order,
            logits,
        })
    }

    /// Policy with logits drawn uniformly from `(-scale, scale)`.
    pub fn random(
        vocab: Vocabulary,
        spec: SeqSpec,
        order: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = Self::num_contexts(&vocab, order) * vocab.size();
        let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            vocab,
            spec,
            order,
            logits,
        }
    }

    fn num_contexts(vocab: &Vocabulary, order: usize) -> usize {
        (vocab.pad_symbol() + 1).pow(order as u32)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn spec(&self) -> &SeqSpec {
        &self.spec
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access to the parameter table. Entries must stay finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Same table with every logit multiplied by `factor` (log-linear
    /// interpolation between this policy at 1 and the uniform policy at 0).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.logits {
            *v *= factor;
        }
        out
    }

    fn row(&self, ctx_index: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[ctx_index * v..(ctx_index + 1) * v]
    }

    /// Log-softmax of one context row, stabilized via log-sum-exp.
    fn log_softmax_row(&self, ctx_index: usize) -> Vec<f64> {
        let row = self.row(ctx_index);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row.iter().map(|l| l - lse).collect()
    }

    fn softmax_row(&self, ctx_index: usize) -> Vec<f64> {
        self.log_softmax_row(ctx_index)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    /// Exact log-probability of `y` given `x`, including the eos step when
    /// the response is eos-terminated.
    pub fn log_prob(&self, x: &Prompt, y: &Response) -> Result<f64> {
        x.validate(&self.vocab)?;
        y.validate(&self.vocab, &self.spec)?;
        let mut window = ContextWindow::new(self.order, &self.vocab, x);
        let mut total = 0.0;
        for &t in y.tokens() {
            total += self.log_softmax_row(window.index())[t];
            window.push(t);
        }
        Ok(total)
    }

    /// Gradient of `log_prob(x, y)` with respect to the logit table:
    /// at each visited context c emitting token t, `1[v = t] - softmax(c)[v]`.
    pub fn log_prob_grad(&self, x: &Prompt, y: &Response) -> Result<PolicyGradient> {
        let mut grad = PolicyGradient::zeros_like(self);
        self.accumulate_log_prob_grad(x, y, 1.0, grad.values_mut())?;
        Ok(grad)
    }

    /// Add `coeff * d(log_prob)/d(logits)` into `acc` (flat table layout).
    pub fn accumulate_log_prob_grad(
        &self,
        x: &Prompt,
        y: &Response,
        coeff: f64,
        acc: &mut [f64],
    ) -> Result<()> {
        if acc.len() != self.logits.len() {
            return Err(Error::Input("gradient accumulator shape mismatch".into()));
        }
        x.validate(&self.vocab)?;
        y.validate(&self.vocab, &self.spec)?;
        let v = self.vocab.size();
        let mut window = ContextWindow::new(self.order, &self.vocab, x);
        for &t in y.tokens() {
            let ctx = window.index();
            let probs = self.softmax_row(ctx);
            let base = ctx * v;
            for (tok, &p) in probs.iter().enumerate() {
                let indicator = if tok == t { 1.0 } else { 0.0 };
                acc[base + tok] += coeff * (indicator - p);
            }
            window.push(t);
        }
        Ok(())
    }

    /// Autoregressive categorical sampling until eos or the length cap.
    pub fn sample_response(&self, x: &Prompt, rng: &mut impl Rng) -> Result<Response> {
        x.validate(&self.vocab)?;
        let mut window = ContextWindow::new(self.order, &self.vocab, x);
        let mut tokens = Vec::new();
        let mut content = 0usize;
        while content < self.spec.max_len() {
            let probs = self.softmax_row(window.index());
            let token = sample_categorical(&probs, rng);
            tokens.push(token);
            if token == self.vocab.eos_id() {
                break;
            }
            window.push(token);
            content += 1;
        }
        Ok(Response::from_sampled(tokens))
    }

    /// Exact sequence distribution over the enumerated response space.
    pub fn response_distribution(&self, x: &Prompt) -> Result<Vec<(Response, f64)>> {
        let responses = enumerate_responses(&self.spec, &self.vocab)?;
        responses
            .into_iter()
            .map(|y| {
                let lp = self.log_prob(x, &y)?;
                Ok((y, lp.exp()))
            })
            .collect()
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    // Draw against the actual sum so softmax rounding cannot push the draw
    // past the final bucket.
    let total: f64 = probs.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        r -= p;
        if r <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Number of valid responses for the given alphabet and length cap.
pub fn response_space_size(spec: &SeqSpec, vocab: &Vocabulary) -> u128 {
    let content = (vocab.size() - 1) as u128;
    let l = spec.max_len() as u32;
    let mut count: u128 = 0;
    // eos-terminated sequences with 0..L-1 content tokens
    let mut pow: u128 = 1;
    for _ in 0..l {
        count = count.saturating_add(pow);
        pow = pow.saturating_mul(content);
    }
    // full-length sequences without eos
    count.saturating_add(pow)
}

/// Every valid response exactly once, in lexicographic token order.
pub fn enumerate_responses(spec: &SeqSpec, vocab: &Vocabulary) -> Result<Vec<Response>> {
    let size = response_space_size(spec, vocab);
    if size > ENUMERATION_GUARD {
        return Err(Error::Capacity(format!(
            "response space of {size} sequences exceeds the {ENUMERATION_GUARD} guard"
        )));
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut prefix = Vec::new();
    enumerate_into(spec, vocab, &mut prefix, &mut out);
    Ok(out)
}

fn enumerate_into(
    spec: &SeqSpec,
    vocab: &Vocabulary,
    prefix: &mut Vec<usize>,
    out: &mut Vec<Response>,
) {
    if prefix.len() == spec.max_len() {
        out.push(Response::from_sampled(prefix.clone()));
        return;
    }
    for token in 0..vocab.size() {
        prefix.push(token);
        if token == vocab.eos_id() {
            out.push(Response::from_sampled(prefix.clone()));
        } else {
            enumerate_into(spec, vocab, prefix, out);
        }
        prefix.pop();
    }
}

fn join_indices(tokens: &[usize]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{t}");
    }
    s
}

fn parse_indices(field: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad token index '{p}'")))
        })
        .collect()
}

pub(crate) fn tokens_to_field(tokens: &[usize]) -> String {
    join_indices(tokens)
}

pub(crate) fn tokens_from_field(field: &str) -> Result<Vec<usize>> {
    parse_indices(field)
}

impl TabularPolicy {
    /// Render the table in the plain-text policy format:
    /// a `vocab=<V> order=<k> eos=<id>` header, then one
    /// `ctx=<t1,...,tk> logits=<v1,...,vV>` line per context in ascending
    /// context order. The start-padding symbol prints as index V. Logits use
    /// the shortest representation that parses back to the same double.
    pub fn to_text(&self) -> String {
        let v = self.vocab.size();
        let radix = self.vocab.pad_symbol() + 1;
        let mut s = format!(
            "vocab={} order={} eos={}\n",
            v,
            self.order,
            self.vocab.eos_id()
        );
        for ctx in 0..Self::num_contexts(&self.vocab, self.order) {
            let symbols = decode_context(ctx, self.order, radix);
            let logits: Vec<String> = self.row(ctx).iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(
                s,
                "ctx={} logits={}",
                join_indices(&symbols),
                logits.join(",")
            );
        }
        s
    }

    /// Parse the plain-text policy format. The length cap is not part of the
    /// format and must be supplied.
    pub fn from_text(text: &str, spec: SeqSpec) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty policy file".into()))?;
        let mut vocab_size = None;
        let mut order = None;
        let mut eos = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field '{field}'")))?;
            let parsed: usize = value
                .parse()
                .map_err(|_| Error::Parse(format!("bad header value '{value}'")))?;
            match key {
                "vocab" => vocab_size = Some(parsed),
                "order" => order = Some(parsed),
                "eos" => eos = Some(parsed),
                _ => return Err(Error::Parse(format!("unknown header key '{key}'"))),
            }
        }
        let (vocab_size, order, eos) = match (vocab_size, order, eos) {
            (Some(v), Some(k), Some(e)) => (v, k, e),
            _ => return Err(Error::Parse("header must set vocab, order and eos".into())),
        };
        let vocab = Vocabulary::new(vocab_size, eos)?;
        let n_contexts = Self::num_contexts(&vocab, order);
        let radix = vocab.pad_symbol() + 1;
        let mut logits = vec![0.0; n_contexts * vocab_size];
        let mut seen = vec![false; n_contexts];
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (ctx_part, logits_part) = line
                .split_once(" logits=")
                .ok_or_else(|| Error::Parse(format!("bad policy line '{line}'")))?;
            let ctx_field = ctx_part
                .strip_prefix("ctx=")
                .ok_or_else(|| Error::Parse(format!("bad policy line '{line}'")))?;
            let symbols = parse_indices(ctx_field)?;
            if symbols.len() != order {
                return Err(Error::Parse(format!(
                    "context '{ctx_field}' has {} symbols, expected {order}",
                    symbols.len()
                )));
            }
            if symbols.iter().any(|&s| s >= radix) {
                return Err(Error::Parse(format!("context symbol out of range in '{line}'")));
            }
            let ctx = symbols.iter().fold(0, |acc, &s| acc * radix + s);
            let row: Vec<f64> = logits_part
                .split(',')
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad logit '{p}'")))
                })
                .collect::<Result<_>>()?;
            if row.len() != vocab_size {
                return Err(Error::Parse(format!(
                    "row for context '{ctx_field}' has {} logits, expected {vocab_size}",
                    row.len()
                )));
            }
            logits[ctx * vocab_size..(ctx + 1) * vocab_size].copy_from_slice(&row);
            seen[ctx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!(
                "missing row for context index {missing}"
            )));
        }
        Self::from_logits(vocab, spec, order, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, spec: SeqSpec) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, spec)
    }
}
