//! Frozen foundation-model backends.
//!
//! The reference backend is deliberately small: a seeded-hash bag-of-words
//! encoder, a per-class token log-probability table fit once on public data,
//! and a bigram language model for next-word tasks. It is frozen after
//! fitting; demonstrations influence predictions only through the prompt
//! interface, never through weight updates. A scripted mock backs tests that
//! need exact control over scores and generations.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::domain::{LabelSchema, ModelSpec, TaggedExample, Visibility};
use crate::stats::{argmax, cosine, softmax};
use crate::{Error, Result};

// --------------------------------------------------------------------------
// Prompt-facing structures
// --------------------------------------------------------------------------

/// One worked example shown in a prompt.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub input: String,
    pub label: String,
}

/// Structured prompt content, before rendering into a token stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptParts {
    pub description: String,
    pub demos: Vec<Demonstration>,
}

impl PromptParts {
    pub fn zero_shot(description: impl Into<String>) -> Self {
        PromptParts { description: description.into(), demos: Vec::new() }
    }
}

/// Capability surface every backend exposes. Backends are frozen: no method
/// takes `&mut self`.
pub trait FoundationModel {
    fn spec(&self) -> &ModelSpec;

    /// Fixed-dimension text embedding, L2-normalized for nonempty text.
    fn encode(&self, text: &str) -> Vec<f64>;

    /// Distribution over the requested classes given the prompt content.
    fn class_scores(
        &self,
        parts: &PromptParts,
        input: &str,
        schema: &LabelSchema,
    ) -> Result<Vec<f64>>;

    /// Free-text answer to a classification prompt; callers map it back onto
    /// the label space.
    fn respond(&self, parts: &PromptParts, input: &str, schema: &LabelSchema) -> Result<String>;

    /// Distribution over `vocab()` for the token following `prefix`.
    fn next_token_dist(&self, prefix: &[String]) -> Result<Vec<f64>>;

    /// Vocabulary the next-token distribution ranges over.
    fn vocab(&self) -> &[String];
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

// --------------------------------------------------------------------------
// Hashed bag-of-words encoder
// --------------------------------------------------------------------------

/// Seeded feature-hashing encoder. Stable across platforms: buckets come
/// from FNV-1a mixed with the seed, not from the process hasher.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    seed: u64,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("embedding dimension must be positive".into()));
        }
        Ok(TextEncoder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in token.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.dim as u64) as usize
    }

    /// Feature index a token hashes to, for callers that project external
    /// per-token tables into this encoder's space.
    pub fn bucket_of(&self, token: &str) -> usize {
        self.bucket(token)
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

// --------------------------------------------------------------------------
// Frozen per-class token scorer
// --------------------------------------------------------------------------

/// Class-conditional token model with additive smoothing, fit once on a
/// public pool and never updated. Tokens outside the fit vocabulary carry no
/// evidence for any class.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenScorer {
    classes: Vec<String>,
    vocab: BTreeMap<String, usize>,
    /// log p(token | class), indexed [class][token].
    log_token_probs: Vec<Vec<f64>>,
    /// Smoothed log prior over classes.
    log_prior: Vec<f64>,
    /// log of the smoothed floor probability per class, for tokens seen in
    /// the vocabulary but absent from a class.
    smoothing: f64,
}

/// Fit the scorer on public examples. Refuses private-tagged data, empty
/// pools, and labels outside the schema.
pub fn fit_frozen_scorer(
    pool: &[TaggedExample],
    schema: &LabelSchema,
    smoothing: f64,
) -> Result<FrozenScorer> {
    if pool.is_empty() {
        return Err(Error::NoProgress("cannot fit a scorer on an empty pool".into()));
    }
    if !(smoothing > 0.0) {
        return Err(Error::DegenerateCalibration("smoothing must be positive".into()));
    }
    for ex in pool {
        if ex.visibility == Visibility::Private {
            return Err(Error::PrivateDataInFit(format!(
                "example labeled {:?} is tagged private",
                ex.example.label
            )));
        }
    }
    let classes = schema.classes.clone();
    let class_index: BTreeMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
    for ex in pool {
        for tok in ex.example.input.tokens() {
            let next = vocab.len();
            vocab.entry(tok).or_insert(next);
        }
    }
    let v = vocab.len();

    let mut token_counts = vec![vec![0u64; v]; classes.len()];
    let mut doc_counts = vec![0u64; classes.len()];
    for ex in pool {
        let ci = *class_index.get(ex.example.label.as_str()).ok_or_else(|| {
            Error::SchemaViolation(format!("pool label {:?} not in schema", ex.example.label))
        })?;
        doc_counts[ci] += 1;
        for tok in ex.example.input.tokens() {
            token_counts[ci][vocab[&tok]] += 1;
        }
    }

    let total_docs: u64 = doc_counts.iter().sum();
    let log_prior: Vec<f64> = doc_counts
        .iter()
        .map(|&d| (((d + 1) as f64) / ((total_docs as usize + classes.len()) as f64)).ln())
        .collect();

    let log_token_probs: Vec<Vec<f64>> = token_counts
        .iter()
        .map(|counts| {
            let total: u64 = counts.iter().sum();
            let denom = total as f64 + smoothing * v as f64;
            counts.iter().map(|&c| ((c as f64 + smoothing) / denom).ln()).collect()
        })
        .collect();

    Ok(FrozenScorer { classes, vocab, log_token_probs, log_prior, smoothing })
}

impl FrozenScorer {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Fit vocabulary (sorted), per-class token log-probabilities in that
    /// token order, and the class log prior.
    pub fn export_table(&self) -> (Vec<String>, &[Vec<f64>], &[f64]) {
        let mut vocab: Vec<(usize, String)> =
            self.vocab.iter().map(|(t, &i)| (i, t.clone())).collect();
        vocab.sort_by_key(|(i, _)| *i);
        (
            vocab.into_iter().map(|(_, t)| t).collect(),
            &self.log_token_probs,
            &self.log_prior,
        )
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    fn class_position(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Sum of log token probabilities under one class; unknown tokens are
    /// skipped so they shift no class relative to another.
    fn log_likelihood(&self, class: usize, tokens: &[String]) -> f64 {
        tokens
            .iter()
            .filter_map(|t| self.vocab.get(t))
            .map(|&ti| self.log_token_probs[class][ti])
            .sum()
    }

    /// Per-class log evidence that a token sequence exposes about each class:
    /// token log-likelihood differences, without prior or class-text terms.
    pub fn token_evidence(&self, tokens: &[String]) -> Vec<(String, f64)> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), self.log_likelihood(i, tokens)))
            .collect()
    }

    /// Posterior over the requested classes for `input`, with each class
    /// additionally scored on its own identity text (class name plus task
    /// description), then renormalized over the requested set.
    pub fn prior_scores(
        &self,
        requested: &[String],
        input_tokens: &[String],
        description: &str,
    ) -> Result<Vec<f64>> {
        let desc_tokens = tokenize(description);
        let mut logits = Vec::with_capacity(requested.len());
        for name in requested {
            let ci = self.class_position(name)?;
            let mut identity = tokenize(name);
            identity.extend(desc_tokens.iter().cloned());
            let logit = self.log_prior[ci]
                + self.log_likelihood(ci, input_tokens)
                + self.log_likelihood(ci, &identity);
            logits.push(logit);
        }
        Ok(softmax(&logits))
    }
}

// --------------------------------------------------------------------------
// Bigram language model
// --------------------------------------------------------------------------

/// Add-one-smoothed bigram model with unigram backoff for prefixes that were
/// never observed as a transition source.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramLm {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    bigram_counts: Vec<Vec<u64>>,
    unigram_counts: Vec<u64>,
    total_tokens: u64,
}

impl BigramLm {
    pub fn fit(sentences: &[Vec<String>]) -> Result<BigramLm> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                let next = index.len();
                index.entry(t.to_lowercase()).or_insert(next);
            }
        }
        if index.is_empty() {
            return Err(Error::NoProgress("cannot fit a bigram model on no tokens".into()));
        }
        // Reindex so vocabulary order is lexicographic, independent of
        // sentence order.
        let vocab: Vec<String> = index.keys().cloned().collect();
        let index: BTreeMap<String, usize> =
            vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();

        let v = vocab.len();
        let mut bigram_counts = vec![vec![0u64; v]; v];
        let mut unigram_counts = vec![0u64; v];
        let mut total = 0u64;
        for s in sentences {
            let toks: Vec<usize> = s.iter().map(|t| index[&t.to_lowercase()]).collect();
            for &t in &toks {
                unigram_counts[t] += 1;
                total += 1;
            }
            for w in toks.windows(2) {
                bigram_counts[w[0]][w[1]] += 1;
            }
        }
        Ok(BigramLm { vocab, index, bigram_counts, unigram_counts, total_tokens: total })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn unigram_dist(&self) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        let denom = self.total_tokens as f64 + v;
        self.unigram_counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect()
    }

    /// Distribution over the vocabulary for the token after `prefix`. The
    /// conditional depends on the final prefix token; an empty prefix or an
    /// unseen transition source backs off to the smoothed unigram.
    pub fn next_token_dist(&self, prefix: &[String]) -> Vec<f64> {
        let last = match prefix.last() {
            Some(t) => t.to_lowercase(),
            None => return self.unigram_dist(),
        };
        let Some(&pi) = self.index.get(&last) else {
            return self.unigram_dist();
        };
        let row = &self.bigram_counts[pi];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return self.unigram_dist();
        }
        let v = self.vocab.len() as f64;
        row.iter().map(|&c| (c as f64 + 1.0) / (total as f64 + v)).collect()
    }
}

// --------------------------------------------------------------------------
// Reference backend
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBackendConfig {
    pub spec: ModelSpec,
    pub embed_dim: usize,
    pub embed_seed: u64,
    /// Weight on the frozen prior when demonstrations are present.
    pub lambda: f64,
    pub smoothing: f64,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        SimBackendConfig {
            spec: ModelSpec { params: 10_000_000_000, bytes_per_param: 4, max_input_len: 1024 },
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: 0,
            lambda: 0.5,
            smoothing: 1.0,
        }
    }
}

/// The simulator's stand-in for a large frozen model: frozen token scorer
/// for classification, bigram model for next-word, hashed embeddings for
/// similarity. Demonstrations shift classification scores through a
/// similarity term mixed in with weight (1 - lambda).
pub struct SimFm {
    spec: ModelSpec,
    encoder: TextEncoder,
    scorer: Option<FrozenScorer>,
    lm: Option<BigramLm>,
    lambda: f64,
}

impl SimFm {
    /// Fit whatever capabilities the public pool supports: a scorer when the
    /// schema is a classification space, a bigram model when sentences are
    /// provided. All fitting happens here; the result is frozen.
    pub fn fit(
        config: &SimBackendConfig,
        schema: &LabelSchema,
        classification_pool: Option<&[TaggedExample]>,
        sentence_pool: Option<&[Vec<String>]>,
    ) -> Result<SimFm> {
        if !(0.0..=1.0).contains(&config.lambda) {
            return Err(Error::DegenerateCalibration(format!(
                "lambda {} outside [0, 1]",
                config.lambda
            )));
        }
        let scorer = match classification_pool {
            Some(pool) => Some(fit_frozen_scorer(pool, schema, config.smoothing)?),
            None => None,
        };
        let lm = match sentence_pool {
            Some(sentences) => Some(BigramLm::fit(sentences)?),
            None => None,
        };
        Ok(SimFm {
            spec: config.spec,
            encoder: TextEncoder::new(config.embed_dim, config.embed_seed)?,
            scorer,
            lm,
            lambda: config.lambda,
        })
    }

    pub fn scorer(&self) -> Option<&FrozenScorer> {
        self.scorer.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    fn scorer_ref(&self) -> Result<&FrozenScorer> {
        self.scorer
            .as_ref()
            .ok_or_else(|| Error::NoProgress("backend has no classification scorer".into()))
    }

    /// Softmax over per-class best cosine similarity between the input and
    /// that class's demonstrations. Classes without demonstrations sit at
    /// similarity -1, below any attainable cosine.
    fn demo_scores(&self, demos: &[Demonstration], input: &str, requested: &[String]) -> Vec<f64> {
        let iv = self.encoder.encode(input);
        let sims: Vec<f64> = requested
            .iter()
            .map(|class| {
                demos
                    .iter()
                    .filter(|d| &d.label == class)
                    .map(|d| cosine(&iv, &self.encoder.encode(&d.input)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .map(|s| if s.is_finite() { s } else { -1.0 })
            .collect();
        softmax(&sims)
    }
}

fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let z: f64 = p.iter().sum();
    if z > 0.0 {
        for x in &mut p {
            *x /= z;
        }
    }
    p
}

impl FoundationModel for SimFm {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.encoder.encode(text)
    }

    fn class_scores(
        &self,
        parts: &PromptParts,
        input: &str,
        schema: &LabelSchema,
    ) -> Result<Vec<f64>> {
        let scorer = self.scorer_ref()?;
        let prior = scorer.prior_scores(&schema.classes, &tokenize(input), &parts.description)?;
        if parts.demos.is_empty() {
            return Ok(renormalize(prior));
        }
        let demo = self.demo_scores(&parts.demos, input, &schema.classes);
        let mixed: Vec<f64> = prior
            .iter()
            .zip(&demo)
            .map(|(p, d)| self.lambda * p + (1.0 - self.lambda) * d)
            .collect();
        Ok(renormalize(mixed))
    }

    fn respond(&self, parts: &PromptParts, input: &str, schema: &LabelSchema) -> Result<String> {
        let scores = self.class_scores(parts, input, schema)?;
        let i = argmax(&scores)
            .ok_or_else(|| Error::SchemaViolation("empty class list".into()))?;
        Ok(schema.classes[i].clone())
    }

    fn next_token_dist(&self, prefix: &[String]) -> Result<Vec<f64>> {
        let lm = self
            .lm
            .as_ref()
            .ok_or_else(|| Error::NoProgress("backend has no language model".into()))?;
        Ok(lm.next_token_dist(prefix))
    }

    fn vocab(&self) -> &[String] {
        self.lm.as_ref().map(|lm| lm.vocab()).unwrap_or(&[])
    }
}

// --------------------------------------------------------------------------
// Scripted mock
// --------------------------------------------------------------------------

/// Test double with exact, scripted behavior and a call counter.
///
/// Scores come from, in order of precedence: an input-keyed script, a fixed
/// per-class strength table restricted and renormalized to the requested
/// classes, or a uniform distribution.
pub struct MockFm {
    spec: ModelSpec,
    encoder: TextEncoder,
    score_script: BTreeMap<String, Vec<f64>>,
    respond_script: BTreeMap<String, String>,
    strengths: Option<BTreeMap<String, f64>>,
    score_calls: AtomicU64,
    vocab: Vec<String>,
}

impl Default for MockFm {
    fn default() -> Self {
        MockFm::new()
    }
}

impl MockFm {
    pub fn new() -> Self {
        MockFm {
            spec: ModelSpec { params: 1, bytes_per_param: 4, max_input_len: 1024 },
            encoder: TextEncoder::new(16, 0).unwrap(),
            score_script: BTreeMap::new(),
            respond_script: BTreeMap::new(),
            strengths: None,
            score_calls: AtomicU64::new(0),
            vocab: Vec::new(),
        }
    }

    pub fn with_spec(mut self, spec: ModelSpec) -> Self {
        self.spec = spec;
        self
    }

    /// Fixed score vector for one exact input string, aligned with the schema
    /// the caller will pass.
    pub fn script_scores(mut self, input: impl Into<String>, scores: Vec<f64>) -> Self {
        self.score_script.insert(input.into(), scores);
        self
    }

    pub fn script_response(mut self, input: impl Into<String>, text: impl Into<String>) -> Self {
        self.respond_script.insert(input.into(), text.into());
        self
    }

    /// Global per-class strengths. Scores over any requested subset are these
    /// strengths renormalized, so subset argmaxes agree with the full-space
    /// argmax by construction.
    pub fn with_strengths(mut self, strengths: BTreeMap<String, f64>) -> Self {
        self.strengths = Some(strengths);
        self
    }

    pub fn score_call_count(&self) -> u64 {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.score_calls.store(0, Ordering::SeqCst);
    }
}

impl FoundationModel for MockFm {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.encoder.encode(text)
    }

    fn class_scores(
        &self,
        _parts: &PromptParts,
        input: &str,
        schema: &LabelSchema,
    ) -> Result<Vec<f64>> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(scores) = self.score_script.get(input) {
            if scores.len() != schema.classes.len() {
                return Err(Error::ShapeMismatch(format!(
                    "scripted scores have {} entries for {} classes",
                    scores.len(),
                    schema.classes.len()
                )));
            }
            return Ok(scores.clone());
        }
        if let Some(strengths) = &self.strengths {
            let mut raw = Vec::with_capacity(schema.classes.len());
            for c in &schema.classes {
                let s = strengths.get(c).ok_or_else(|| Error::UnknownClass(c.clone()))?;
                raw.push(*s);
            }
            return Ok(renormalize(raw));
        }
        let n = schema.classes.len();
        Ok(vec![1.0 / n as f64; n])
    }

    fn respond(&self, parts: &PromptParts, input: &str, schema: &LabelSchema) -> Result<String> {
        if let Some(text) = self.respond_script.get(input) {
            return Ok(text.clone());
        }
        let scores = self.class_scores(parts, input, schema)?;
        let i = argmax(&scores)
            .ok_or_else(|| Error::SchemaViolation("empty class list".into()))?;
        Ok(schema.classes[i].clone())
    }

    fn next_token_dist(&self, _prefix: &[String]) -> Result<Vec<f64>> {
        if self.vocab.is_empty() {
            return Err(Error::NoProgress("mock has no vocabulary".into()));
        }
        Ok(vec![1.0 / self.vocab.len() as f64; self.vocab.len()])
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }
}
