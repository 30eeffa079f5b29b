//! Core vocabulary of the simulator: examples, tasks, label schemas, client
//! silos, model descriptors, and the JSONL dataset format.
//!
//! A silo owns a user's private data. Nothing here copies silo contents
//! anywhere; engines that move data across a silo boundary must record the
//! movement in the flow ledger.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// --------------------------------------------------------------------------
// Examples and tags
// --------------------------------------------------------------------------

/// Model input: raw text (classification, next-word) or a numeric feature
/// vector (synthetic regression-style tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Input {
    Text(String),
    Numeric(Vec<f64>),
}

impl Input {
    /// Lowercased whitespace tokens; numeric inputs have no tokens.
    pub fn tokens(&self) -> Vec<String> {
        match self {
            Input::Text(s) => s.split_whitespace().map(|t| t.to_lowercase()).collect(),
            Input::Numeric(_) => Vec::new(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Input::Text(s) => Some(s),
            Input::Numeric(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Input,
    pub label: String,
}

impl LabeledExample {
    pub fn text(input: impl Into<String>, label: impl Into<String>) -> Self {
        LabeledExample { input: Input::Text(input.into()), label: label.into() }
    }
}

/// Whether an example may ever leave a trust boundary. Frozen backends fit
/// only on public material; the fit path checks these tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedExample {
    pub example: LabeledExample,
    pub visibility: Visibility,
}

impl TaggedExample {
    pub fn public(example: LabeledExample) -> Self {
        TaggedExample { example, visibility: Visibility::Public }
    }

    pub fn private(example: LabeledExample) -> Self {
        TaggedExample { example, visibility: Visibility::Private }
    }
}

// --------------------------------------------------------------------------
// Tasks and schemas
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    NextWord,
}

/// Label space for a task. Classification lists the class names; next-word
/// tasks leave `classes` empty and use the backend vocabulary instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub kind: TaskKind,
    pub classes: Vec<String>,
}

impl LabelSchema {
    pub fn classification(classes: Vec<String>) -> Result<Self> {
        let schema = LabelSchema { kind: TaskKind::Classification, classes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn next_word() -> Self {
        LabelSchema { kind: TaskKind::NextWord, classes: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Classification => {
                if self.classes.len() < 2 {
                    return Err(Error::SchemaViolation(
                        "classification needs at least two classes".into(),
                    ));
                }
                let mut seen = std::collections::BTreeSet::new();
                for c in &self.classes {
                    if !seen.insert(c) {
                        return Err(Error::SchemaViolation(format!(
                            "duplicate class name {c:?}"
                        )));
                    }
                }
            }
            TaskKind::NextWord => {}
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Schema restricted to a subset of classes, keeping the given order.
    pub fn restrict(&self, subset: &[String]) -> Result<LabelSchema> {
        for c in subset {
            if self.class_index(c).is_none() {
                return Err(Error::SchemaViolation(format!(
                    "class {c:?} not in schema"
                )));
            }
        }
        Ok(LabelSchema { kind: self.kind, classes: subset.to_vec() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub kind: TaskKind,
    /// Natural-language task description; may be empty.
    #[serde(default)]
    pub description: String,
    pub schema: LabelSchema,
    /// Which context template to render prompts with.
    #[serde(default = "default_template_id")]
    pub template_id: String,
}

fn default_template_id() -> String {
    "default".into()
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.kind != self.schema.kind {
            return Err(Error::SchemaViolation(format!(
                "task {} kind disagrees with its schema",
                self.id
            )));
        }
        self.schema.validate()
    }
}

// --------------------------------------------------------------------------
// Client silos
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
struct SplitData {
    train: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
}

/// One user's private store: per-task train and test examples. Contents are
/// reachable only through these accessors; engines that ship anything derived
/// from them across the silo boundary must log a flow event.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSilo {
    client_id: String,
    data: BTreeMap<String, SplitData>,
}

impl ClientSilo {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientSilo { client_id: client_id.into(), data: BTreeMap::new() }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn push(&mut self, task: &str, split: Split, example: LabeledExample) {
        let entry = self.data.entry(task.to_string()).or_default();
        match split {
            Split::Train => entry.train.push(example),
            Split::Test => entry.test.push(example),
        }
    }

    pub fn train(&self, task: &str) -> &[LabeledExample] {
        self.data.get(task).map(|d| d.train.as_slice()).unwrap_or(&[])
    }

    pub fn test(&self, task: &str) -> &[LabeledExample] {
        self.data.get(task).map(|d| d.test.as_slice()).unwrap_or(&[])
    }

    /// Number of training examples for a task (the silo's n_i).
    pub fn n_train(&self, task: &str) -> usize {
        self.train(task).len()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.data.keys().map(|s| s.as_str())
    }

    /// Private-tagged view of the train split, for asserting that frozen
    /// backends refuse to fit on silo contents.
    pub fn tagged_train(&self, task: &str) -> Vec<TaggedExample> {
        self.train(task).iter().cloned().map(TaggedExample::private).collect()
    }

    /// Keep at most `cap` training examples for a task, dropping the rest.
    pub fn truncate_train(&mut self, task: &str, cap: usize) {
        if let Some(d) = self.data.get_mut(task) {
            d.train.truncate(cap);
        }
    }
}

// --------------------------------------------------------------------------
// Model descriptors
// --------------------------------------------------------------------------

/// Static description of a model for cost accounting: parameter count,
/// bytes per parameter, and the longest input it accepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub params: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    #[serde(default = "default_max_input_len")]
    pub max_input_len: u32,
}

fn default_bytes_per_param() -> u64 {
    4
}

fn default_max_input_len() -> u32 {
    1024
}

impl ModelSpec {
    pub fn new(params: u64, bytes_per_param: u64, max_input_len: u32) -> Result<Self> {
        let spec = ModelSpec { params, bytes_per_param, max_input_len };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params == 0 {
            return Err(Error::SchemaViolation("model has zero parameters".into()));
        }
        if self.bytes_per_param == 0 || self.max_input_len == 0 {
            return Err(Error::SchemaViolation(
                "bytes_per_param and max_input_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Size of one full copy of the parameters, in bytes.
    pub fn param_bytes(&self) -> u64 {
        self.params * self.bytes_per_param
    }
}

// --------------------------------------------------------------------------
// Label statistics
// --------------------------------------------------------------------------

/// Per-class counts in schema order. Unknown labels are schema violations.
pub fn label_histogram(examples: &[LabeledExample], schema: &LabelSchema) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; schema.classes.len()];
    for ex in examples {
        match schema.class_index(&ex.label) {
            Some(i) => counts[i] += 1,
            None => {
                return Err(Error::SchemaViolation(format!(
                    "label {:?} not in schema",
                    ex.label
                )))
            }
        }
    }
    Ok(counts)
}

/// Shannon entropy of the empirical label distribution, in bits.
pub fn label_entropy(examples: &[LabeledExample], schema: &LabelSchema) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedStatistic(
            "label entropy of an empty dataset".into(),
        ));
    }
    let counts = label_histogram(examples, schema)?;
    let n: u64 = counts.iter().sum();
    let mut h = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * p.log2();
        }
    }
    Ok(h)
}

// --------------------------------------------------------------------------
// JSONL dataset format
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub client_id: String,
    pub task: String,
    pub split: Split,
    pub input: Input,
    pub label: String,
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Group records into silos, keyed and ordered by client id.
pub fn build_silos(records: &[DatasetRecord]) -> BTreeMap<String, ClientSilo> {
    let mut silos: BTreeMap<String, ClientSilo> = BTreeMap::new();
    for r in records {
        silos
            .entry(r.client_id.clone())
            .or_insert_with(|| ClientSilo::new(r.client_id.clone()))
            .push(&r.task, r.split, LabeledExample { input: r.input.clone(), label: r.label.clone() });
    }
    silos
}
