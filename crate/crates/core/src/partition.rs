//! Dataset partitioning across client silos and the synthetic corpora used
//! by the bundled experiments.
//!
//! Partitions are always pairwise disjoint and exhaustive: every example
//! lands in exactly one shard. All randomness is seeded.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{LabelSchema, LabeledExample, TaggedExample};
use crate::rng::rng_for;
use crate::{Error, Result};

// --------------------------------------------------------------------------
// Partition settings
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    /// Label-skewed: each client's class mix is drawn from a symmetric
    /// Dirichlet. Small alpha concentrates clients on few classes.
    Dirichlet { alpha: f64 },
}

/// How client shard sizes are chosen under the IID mode. Dirichlet mode
/// derives sizes from the drawn class mixes instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    /// As even as possible; shard sizes differ by at most one.
    Even,
    /// Heavy-tailed sizes: relative weights exp(N(location, sigma)),
    /// rescaled so the shards still cover the whole dataset.
    LogNormal { location: f64, sigma: f64 },
}

impl Default for SizeDist {
    fn default() -> Self {
        SizeDist::Even
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    #[serde(flatten)]
    pub mode: PartitionMode,
    #[serde(default)]
    pub size_dist: SizeDist,
    pub seed: u64,
}

// --------------------------------------------------------------------------
// Apportionment
// --------------------------------------------------------------------------

/// Largest-remainder allocation of `total` indivisible items proportional to
/// `weights`. Deterministic: remainder ties resolve toward lower indices.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

fn draw_size_weights<R: Rng>(rng: &mut R, dist: &SizeDist, k: usize) -> Result<Vec<f64>> {
    match dist {
        SizeDist::Even => Ok(vec![1.0; k]),
        SizeDist::LogNormal { location, sigma } => {
            let ln = LogNormal::new(*location, *sigma).map_err(|e| {
                Error::InfeasiblePartition(format!("bad log-normal parameters: {e}"))
            })?;
            Ok((0..k).map(|_| ln.sample(rng)).collect())
        }
    }
}

// --------------------------------------------------------------------------
// Partitioners
// --------------------------------------------------------------------------

/// Split the dataset into `spec.num_clients` shards. Returns one vector of
/// examples per client, in client order.
pub fn partition(
    dataset: &[LabeledExample],
    schema: &LabelSchema,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<LabeledExample>>> {
    if spec.num_clients == 0 {
        return Err(Error::InfeasiblePartition("zero clients requested".into()));
    }
    if spec.num_clients > dataset.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{} clients for {} examples",
            spec.num_clients,
            dataset.len()
        )));
    }
    match spec.mode {
        PartitionMode::Iid => partition_iid(dataset, spec),
        PartitionMode::Dirichlet { alpha } => partition_dirichlet(dataset, schema, spec, alpha),
    }
}

fn partition_iid(dataset: &[LabeledExample], spec: &PartitionSpec) -> Result<Vec<Vec<LabeledExample>>> {
    let mut rng = rng_for(spec.seed, &[0x11d]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let weights = draw_size_weights(&mut rng, &spec.size_dist, spec.num_clients)?;
    let sizes = apportion(dataset.len(), &weights);
    let mut shards = Vec::with_capacity(spec.num_clients);
    let mut cursor = 0;
    for size in sizes {
        let shard: Vec<LabeledExample> =
            order[cursor..cursor + size].iter().map(|&i| dataset[i].clone()).collect();
        cursor += size;
        shards.push(shard);
    }
    Ok(shards)
}

fn partition_dirichlet(
    dataset: &[LabeledExample],
    schema: &LabelSchema,
    spec: &PartitionSpec,
    alpha: f64,
) -> Result<Vec<Vec<LabeledExample>>> {
    if !(alpha > 0.0) {
        return Err(Error::InfeasiblePartition(format!("alpha {alpha} must be positive")));
    }
    let num_classes = schema.classes.len();
    if num_classes < 2 {
        return Err(Error::InfeasiblePartition(
            "label-skew partitioning needs at least two classes".into(),
        ));
    }

    // Bucket example indices by class; every class must be populated.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in dataset.iter().enumerate() {
        let ci = schema.class_index(&ex.label).ok_or_else(|| {
            Error::SchemaViolation(format!("label {:?} not in schema", ex.label))
        })?;
        by_class[ci].push(i);
    }
    if let Some(ci) = by_class.iter().position(|b| b.is_empty()) {
        return Err(Error::InfeasiblePartition(format!(
            "class {:?} has no examples",
            schema.classes[ci]
        )));
    }

    let mut rng = rng_for(spec.seed, &[0xd1e]);
    // Symmetric Dirichlet draws via normalized Gamma(alpha, 1) samples, one
    // class mix per client.
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InfeasiblePartition(format!("bad dirichlet parameters: {e}")))?;
    let mixes: Vec<Vec<f64>> = (0..spec.num_clients)
        .map(|_| {
            let raw: Vec<f64> = (0..num_classes).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|g| g / z).collect()
        })
        .collect();

    let mut shards: Vec<Vec<LabeledExample>> = vec![Vec::new(); spec.num_clients];
    for (ci, bucket) in by_class.iter().enumerate() {
        let mut bucket = bucket.clone();
        bucket.shuffle(&mut rng);
        let weights: Vec<f64> = mixes.iter().map(|m| m[ci]).collect();
        let counts = apportion(bucket.len(), &weights);
        let mut cursor = 0;
        for (client, count) in counts.into_iter().enumerate() {
            for &idx in &bucket[cursor..cursor + count] {
                shards[client].push(dataset[idx].clone());
            }
            cursor += count;
        }
    }
    Ok(shards)
}

// --------------------------------------------------------------------------
// Synthetic classification corpus
// --------------------------------------------------------------------------

/// Topic-style classification generator. Each class owns a token vocabulary;
/// documents mix class tokens with a shared background vocabulary. Adjacent
/// class pairs can be made confusable by sharing part of their vocabularies,
/// which models a fine-grained label space over a coarse one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClassSpec {
    pub num_classes: usize,
    pub vocab_per_class: usize,
    pub shared_vocab: usize,
    /// Documents generated per class, for each of the two pools.
    pub docs_per_class: usize,
    pub doc_len: usize,
    /// Probability that a token is drawn from the class vocabulary rather
    /// than the shared background.
    pub class_purity: f64,
    /// Fraction of each class pair's vocabulary that the pair shares.
    #[serde(default)]
    pub class_overlap: f64,
}

impl SynthClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InfeasiblePartition("need at least two classes".into()));
        }
        if self.vocab_per_class == 0 || self.doc_len == 0 || self.docs_per_class == 0 {
            return Err(Error::InfeasiblePartition(
                "vocab_per_class, doc_len, docs_per_class must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_purity) || !(0.0..=1.0).contains(&self.class_overlap) {
            return Err(Error::InfeasiblePartition(
                "class_purity and class_overlap must lie in [0, 1]".into(),
            ));
        }
        if self.class_purity < 1.0 && self.shared_vocab == 0 {
            return Err(Error::InfeasiblePartition(
                "impure documents need a shared vocabulary".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClassCorpus {
    pub class_names: Vec<String>,
    /// Pretraining pool; safe to fit backends on.
    pub public: Vec<TaggedExample>,
    /// User data to be partitioned into silos. Never fit on this.
    pub private: Vec<LabeledExample>,
}

/// Token vocabulary for one class, honoring pair overlap. Classes 2i and
/// 2i+1 share the first `overlap * vocab_per_class` tokens of their pair.
fn class_vocab(spec: &SynthClassSpec, class: usize) -> Vec<String> {
    let shared_count = (spec.class_overlap * spec.vocab_per_class as f64).floor() as usize;
    let pair = class / 2;
    let mut vocab = Vec::with_capacity(spec.vocab_per_class);
    for j in 0..shared_count {
        vocab.push(format!("p{pair}w{j}"));
    }
    for j in shared_count..spec.vocab_per_class {
        vocab.push(format!("c{class}w{j}"));
    }
    vocab
}

pub fn synth_classification_corpus(spec: &SynthClassSpec, seed: u64) -> Result<SynthClassCorpus> {
    spec.validate()?;
    let class_names: Vec<String> = (0..spec.num_classes).map(|c| format!("c{c}")).collect();
    let vocabs: Vec<Vec<String>> = (0..spec.num_classes).map(|c| class_vocab(spec, c)).collect();
    let shared: Vec<String> = (0..spec.shared_vocab).map(|j| format!("sw{j}")).collect();

    let sample_doc = |rng: &mut rand_chacha::ChaCha8Rng, class: usize| -> String {
        let mut toks = Vec::with_capacity(spec.doc_len);
        for _ in 0..spec.doc_len {
            let from_class = rng.random::<f64>() < spec.class_purity;
            let pool = if from_class { &vocabs[class] } else { &shared };
            toks.push(pool[rng.random_range(0..pool.len())].clone());
        }
        toks.join(" ")
    };

    let mut public_rng = rng_for(seed, &[0x9ab, 0]);
    let mut public = Vec::new();
    for c in 0..spec.num_classes {
        for _ in 0..spec.docs_per_class {
            let doc = sample_doc(&mut public_rng, c);
            public.push(TaggedExample::public(LabeledExample::text(doc, class_names[c].clone())));
        }
    }

    let mut private_rng = rng_for(seed, &[0x9ab, 1]);
    let mut private = Vec::new();
    for c in 0..spec.num_classes {
        for _ in 0..spec.docs_per_class {
            let doc = sample_doc(&mut private_rng, c);
            private.push(LabeledExample::text(doc, class_names[c].clone()));
        }
    }

    Ok(SynthClassCorpus { class_names, public, private })
}

// --------------------------------------------------------------------------
// Synthetic next-word corpus
// --------------------------------------------------------------------------

/// Per-user next-word generator. A global bigram table is blended with a
/// per-user table; `style_skew` = 0 makes every user draw from the identical
/// global distribution, 1 gives fully idiosyncratic users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthNextWordSpec {
    pub vocab_size: usize,
    pub num_users: usize,
    pub sentences_per_user: usize,
    pub sentence_len: usize,
    pub style_skew: f64,
    /// Sentences sampled from the global table for backend pretraining.
    pub public_sentences: usize,
}

impl SynthNextWordSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::InfeasiblePartition("vocabulary must have at least 10 tokens".into()));
        }
        if self.num_users == 0 || self.sentences_per_user == 0 || self.public_sentences == 0 {
            return Err(Error::InfeasiblePartition(
                "num_users, sentences_per_user, public_sentences must be positive".into(),
            ));
        }
        if self.sentence_len < 2 {
            return Err(Error::InfeasiblePartition("sentences need at least two tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.style_skew) {
            return Err(Error::InfeasiblePartition("style_skew must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthNextWordCorpus {
    pub vocab: Vec<String>,
    /// Sentences for fitting the backend language model.
    pub public_sentences: Vec<Vec<String>>,
    /// Per-user private sentences, index-aligned with users.
    pub user_sentences: Vec<Vec<Vec<String>>>,
}

impl SynthNextWordCorpus {
    /// Turn a sentence into a next-word example: the prefix is the input,
    /// the final token is the gold label.
    pub fn sentence_to_example(sentence: &[String]) -> LabeledExample {
        let (last, prefix) = sentence.split_last().expect("sentences have >= 2 tokens");
        LabeledExample::text(prefix.join(" "), last.clone())
    }
}

fn random_stochastic_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() + 1e-9).collect();
            let z: f64 = row.iter().sum();
            for x in &mut row {
                *x /= z;
            }
            row
        })
        .collect()
}

fn sample_categorical<R: Rng>(rng: &mut R, dist: &[f64]) -> usize {
    let mut u = rng.random::<f64>();
    for (i, p) in dist.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

pub fn synth_next_word_corpus(spec: &SynthNextWordSpec, seed: u64) -> Result<SynthNextWordCorpus> {
    spec.validate()?;
    let v = spec.vocab_size;
    let vocab: Vec<String> = (0..v).map(|j| format!("w{j}")).collect();

    let mut table_rng = rng_for(seed, &[0xb19, 0]);
    let global_rows = random_stochastic_rows(&mut table_rng, v, v);
    let global_start = random_stochastic_rows(&mut table_rng, 1, v).remove(0);

    let sample_sentence = |rng: &mut rand_chacha::ChaCha8Rng,
                               start: &[f64],
                               rows: &[Vec<f64>]|
     -> Vec<String> {
        let mut toks = Vec::with_capacity(spec.sentence_len);
        let mut cur = sample_categorical(rng, start);
        toks.push(vocab[cur].clone());
        for _ in 1..spec.sentence_len {
            cur = sample_categorical(rng, &rows[cur]);
            toks.push(vocab[cur].clone());
        }
        toks
    };

    let mut public_rng = rng_for(seed, &[0xb19, 1]);
    let public_sentences: Vec<Vec<String>> = (0..spec.public_sentences)
        .map(|_| sample_sentence(&mut public_rng, &global_start, &global_rows))
        .collect();

    let mut user_sentences = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let mut style_rng = rng_for(seed, &[0xb19, 2, u as u64]);
        let user_rows = random_stochastic_rows(&mut style_rng, v, v);
        let user_start = random_stochastic_rows(&mut style_rng, 1, v).remove(0);
        let s = spec.style_skew;
        let blend_rows: Vec<Vec<f64>> = global_rows
            .iter()
            .zip(&user_rows)
            .map(|(g, us)| g.iter().zip(us).map(|(a, b)| (1.0 - s) * a + s * b).collect())
            .collect();
        let blend_start: Vec<f64> = global_start
            .iter()
            .zip(&user_start)
            .map(|(a, b)| (1.0 - s) * a + s * b)
            .collect();
        let mut sent_rng = rng_for(seed, &[0xb19, 3, u as u64]);
        let sentences: Vec<Vec<String>> = (0..spec.sentences_per_user)
            .map(|_| sample_sentence(&mut sent_rng, &blend_start, &blend_rows))
            .collect();
        user_sentences.push(sentences);
    }

    Ok(SynthNextWordCorpus { vocab, public_sentences, user_sentences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::label_entropy;
    use std::collections::BTreeSet;

    fn toy_dataset(per_class: usize) -> (Vec<LabeledExample>, LabelSchema) {
        let schema =
            LabelSchema::classification(vec!["a".into(), "b".into(), "c".into(), "d".into()])
                .unwrap();
        let mut data = Vec::new();
        for (ci, class) in schema.classes.iter().enumerate() {
            for j in 0..per_class {
                data.push(LabeledExample::text(format!("doc{ci}x{j}"), class.clone()));
            }
        }
        (data, schema)
    }

    fn shard_fingerprint(shards: &[Vec<LabeledExample>]) -> Vec<Vec<String>> {
        shards
            .iter()
            .map(|s| s.iter().map(|e| format!("{:?}|{}", e.input, e.label)).collect())
            .collect()
    }

    #[test]
    fn iid_partition_is_disjoint_and_exhaustive() {
        let (data, schema) = toy_dataset(25);
        let spec = PartitionSpec {
            num_clients: 7,
            mode: PartitionMode::Iid,
            size_dist: SizeDist::Even,
            seed: 5,
        };
        let shards = partition(&data, &schema, &spec).unwrap();
        assert_eq!(shards.len(), 7);
        let total: usize = shards.iter().map(Vec::len).sum();
        assert_eq!(total, data.len());
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for shard in &shards {
            for ex in shard {
                assert!(seen.insert(format!("{:?}|{}", ex.input, ex.label)));
            }
        }
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(max - min <= 1);
    }

    #[test]
    fn partition_is_deterministic_per_seed() {
        let (data, schema) = toy_dataset(10);
        let spec = PartitionSpec {
            num_clients: 4,
            mode: PartitionMode::Dirichlet { alpha: 0.3 },
            size_dist: SizeDist::Even,
            seed: 11,
        };
        let a = partition(&data, &schema, &spec).unwrap();
        let b = partition(&data, &schema, &spec).unwrap();
        assert_eq!(shard_fingerprint(&a), shard_fingerprint(&b));
        let other = PartitionSpec { seed: 12, ..spec };
        let c = partition(&data, &schema, &other).unwrap();
        assert_ne!(shard_fingerprint(&a), shard_fingerprint(&c));
    }

    #[test]
    fn more_clients_than_examples_is_infeasible() {
        let (data, schema) = toy_dataset(1);
        let spec = PartitionSpec {
            num_clients: 100,
            mode: PartitionMode::Iid,
            size_dist: SizeDist::Even,
            seed: 0,
        };
        assert!(matches!(
            partition(&data, &schema, &spec),
            Err(Error::InfeasiblePartition(_))
        ));
    }

    #[test]
    fn dirichlet_requires_every_class_populated() {
        let (mut data, schema) = toy_dataset(5);
        data.retain(|e| e.label != "d");
        let spec = PartitionSpec {
            num_clients: 3,
            mode: PartitionMode::Dirichlet { alpha: 1.0 },
            size_dist: SizeDist::Even,
            seed: 0,
        };
        assert!(matches!(
            partition(&data, &schema, &spec),
            Err(Error::InfeasiblePartition(_))
        ));
    }

    /// Mean per-client label entropy must fall as alpha shrinks: near-IID at
    /// alpha 1e6, moderate skew at 1, near single-class at 0.05. Checked
    /// across five seeds.
    #[test]
    fn dirichlet_entropy_decreases_with_alpha() {
        let (data, schema) = toy_dataset(60);
        let mean_entropy = |alpha: f64, seed: u64| -> f64 {
            let spec = PartitionSpec {
                num_clients: 8,
                mode: PartitionMode::Dirichlet { alpha },
                size_dist: SizeDist::Even,
                seed,
            };
            let shards = partition(&data, &schema, &spec).unwrap();
            let (mut sum, mut n) = (0.0, 0);
            for shard in &shards {
                if !shard.is_empty() {
                    sum += label_entropy(shard, &schema).unwrap();
                    n += 1;
                }
            }
            sum / n as f64
        };
        for seed in 0..5 {
            let near_iid = mean_entropy(1e6, seed);
            let moderate = mean_entropy(1.0, seed);
            let extreme = mean_entropy(0.05, seed);
            assert!(
                near_iid > moderate && moderate > extreme,
                "entropy not monotone for seed {seed}: {near_iid} {moderate} {extreme}"
            );
            assert!(near_iid > 1.9, "alpha 1e6 should look IID, got {near_iid}");
            assert!(extreme < 1.0, "alpha 0.05 should be near single-class, got {extreme}");
        }
    }

    #[test]
    fn lognormal_sizes_still_cover_dataset() {
        let (data, schema) = toy_dataset(50);
        let spec = PartitionSpec {
            num_clients: 10,
            mode: PartitionMode::Iid,
            size_dist: SizeDist::LogNormal { location: 0.0, sigma: 1.0 },
            seed: 3,
        };
        let shards = partition(&data, &schema, &spec).unwrap();
        let total: usize = shards.iter().map(Vec::len).sum();
        assert_eq!(total, data.len());
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() > sizes.iter().min().unwrap());
    }

    #[test]
    fn apportion_conserves_total() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 10);
        assert_eq!(apportion(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        assert_eq!(apportion(5, &[0.0, 0.0]), vec![3, 2]);
    }

    #[test]
    fn synth_classification_pools_are_disjoint_and_labeled() {
        let spec = SynthClassSpec {
            num_classes: 4,
            vocab_per_class: 10,
            shared_vocab: 20,
            docs_per_class: 15,
            doc_len: 12,
            class_purity: 0.7,
            class_overlap: 0.0,
        };
        let corpus = synth_classification_corpus(&spec, 9).unwrap();
        assert_eq!(corpus.public.len(), 60);
        assert_eq!(corpus.private.len(), 60);
        for ex in &corpus.public {
            assert!(corpus.class_names.contains(&ex.example.label));
        }
        let again = synth_classification_corpus(&spec, 9).unwrap();
        assert_eq!(corpus, again);
    }

    #[test]
    fn class_overlap_shares_pair_vocabulary() {
        let spec = SynthClassSpec {
            num_classes: 4,
            vocab_per_class: 10,
            shared_vocab: 5,
            docs_per_class: 1,
            doc_len: 5,
            class_purity: 1.0,
            class_overlap: 0.8,
        };
        let v0 = class_vocab(&spec, 0);
        let v1 = class_vocab(&spec, 1);
        let v2 = class_vocab(&spec, 2);
        let shared01: Vec<_> = v0.iter().filter(|t| v1.contains(t)).collect();
        assert_eq!(shared01.len(), 8);
        assert!(v0.iter().all(|t| !v2.contains(t)));
    }

    #[test]
    fn next_word_corpus_shapes_and_determinism() {
        let spec = SynthNextWordSpec {
            vocab_size: 12,
            num_users: 3,
            sentences_per_user: 4,
            sentence_len: 6,
            style_skew: 0.5,
            public_sentences: 10,
        };
        let corpus = synth_next_word_corpus(&spec, 1).unwrap();
        assert_eq!(corpus.user_sentences.len(), 3);
        assert_eq!(corpus.public_sentences.len(), 10);
        assert!(corpus.user_sentences.iter().all(|u| u.len() == 4));
        assert!(corpus.public_sentences.iter().all(|s| s.len() == 6));
        let again = synth_next_word_corpus(&spec, 1).unwrap();
        assert_eq!(corpus, again);

        let ex = SynthNextWordCorpus::sentence_to_example(&corpus.public_sentences[0]);
        assert_eq!(ex.input.tokens().len(), 5);
    }

    /// With style_skew = 0 every user samples from the same global tables, so
    /// user corpora are exchangeable. Permutation test: reassigning sentences
    /// to users at random should produce divergence statistics like the
    /// observed one (p > 0.01).
    #[test]
    fn zero_style_skew_users_are_exchangeable() {
        let spec = SynthNextWordSpec {
            vocab_size: 15,
            num_users: 6,
            sentences_per_user: 30,
            sentence_len: 8,
            style_skew: 0.0,
            public_sentences: 5,
        };
        let corpus = synth_next_word_corpus(&spec, 21).unwrap();

        let token_freq = |sentences: &[Vec<String>]| -> Vec<f64> {
            let mut counts = vec![0.0; spec.vocab_size];
            for s in sentences {
                for t in s {
                    let i: usize = t[1..].parse().unwrap();
                    counts[i] += 1.0;
                }
            }
            let z: f64 = counts.iter().sum();
            counts.iter().map(|c| c / z).collect()
        };
        let divergence = |groups: &[Vec<Vec<String>>]| -> f64 {
            let all: Vec<Vec<String>> = groups.iter().flatten().cloned().collect();
            let global = token_freq(&all);
            groups
                .iter()
                .map(|g| {
                    token_freq(g)
                        .iter()
                        .zip(&global)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .sum()
        };

        let observed = divergence(&corpus.user_sentences);
        let mut pool: Vec<Vec<String>> =
            corpus.user_sentences.iter().flatten().cloned().collect();
        let mut rng = rng_for(77, &[0xfe]);
        let mut at_least = 0;
        let trials = 199;
        for _ in 0..trials {
            pool.shuffle(&mut rng);
            let groups: Vec<Vec<Vec<String>>> = pool
                .chunks(spec.sentences_per_user)
                .map(|c| c.to_vec())
                .collect();
            if divergence(&groups) >= observed {
                at_least += 1;
            }
        }
        let p = (at_least as f64 + 1.0) / (trials as f64 + 1.0);
        assert!(p > 0.01, "exchangeability rejected: p = {p}");
    }
}
