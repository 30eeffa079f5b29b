//! In-context classification on the device: context templates, demonstration
//! selection policies, the prompt-to-label decoding rule, and the per-client
//! evaluation loop.
//!
//! Demonstration selection is where data can cross silo boundaries, so the
//! pooled policy takes the flow ledger and records every cross-silo read.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::domain::{ClientSilo, LabelSchema, LabeledExample, Task, TaskKind};
use crate::fm::{Demonstration, FoundationModel, PromptParts, TextEncoder};
use crate::ledger::{FlowEvent, FlowLedger, Party, PayloadKind};
use crate::rng::{derive_seed, rng_for};
use crate::stats::{argmax, cosine};
use crate::{Error, Result};

const TAG_DEMO: u64 = 0x1c1;

// --------------------------------------------------------------------------
// Context templates
// --------------------------------------------------------------------------

pub const DESCRIPTION_SLOT: &str = "{description}";
pub const DEMOS_SLOT: &str = "{demonstrations}";
pub const INPUT_SLOT: &str = "{input}";

/// Literal context layout with three slots, each appearing exactly once.
/// Substitution is textual: no trimming, no escaping.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextTemplate {
    text: String,
}

impl Default for ContextTemplate {
    fn default() -> Self {
        ContextTemplate {
            text: "{description}\n{demonstrations}Input: {input}\nLabel:".to_string(),
        }
    }
}

impl TryFrom<String> for ContextTemplate {
    type Error = Error;
    fn try_from(text: String) -> Result<Self> {
        ContextTemplate::new(text)
    }
}

impl From<ContextTemplate> for String {
    fn from(t: ContextTemplate) -> String {
        t.text
    }
}

impl ContextTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for slot in [DESCRIPTION_SLOT, DEMOS_SLOT, INPUT_SLOT] {
            match text.matches(slot).count() {
                1 => {}
                0 => {
                    return Err(Error::SchemaViolation(format!(
                        "template is missing the {slot} slot"
                    )))
                }
                n => {
                    return Err(Error::SchemaViolation(format!(
                        "template repeats the {slot} slot {n} times"
                    )))
                }
            }
        }
        Ok(ContextTemplate { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, parts: &PromptParts, input: &str) -> String {
        let demos: String = parts
            .demos
            .iter()
            .map(|d| format!("Input: {}\nLabel: {}\n", d.input, d.label))
            .collect();
        self.text
            .replacen(DESCRIPTION_SLOT, &parts.description, 1)
            .replacen(DEMOS_SLOT, &demos, 1)
            .replacen(INPUT_SLOT, input, 1)
    }
}

/// A rendered context plus the structure it came from, kept for token
/// accounting and report artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledContext {
    pub text: String,
    pub parts: PromptParts,
    pub input: String,
}

impl AssembledContext {
    pub fn assemble(template: &ContextTemplate, parts: &PromptParts, input: &str) -> Self {
        AssembledContext {
            text: template.render(parts, input),
            parts: parts.clone(),
            input: input.to_string(),
        }
    }

    pub fn token_count(&self) -> u64 {
        self.text.split_whitespace().count() as u64
    }
}

// --------------------------------------------------------------------------
// Demonstration policies
// --------------------------------------------------------------------------

/// Where a user's k demonstrations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoPolicy {
    /// Sample from the user's own silo. Nothing leaves any silo.
    UserPrivacy,
    /// Sample from the pooled train sets of every silo. Each draw that
    /// originates in another silo is a cross-silo read and is ledgered.
    NoUserPrivacy,
    /// A fixed shared list, identical for every user.
    Public,
}

impl DemoPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            DemoPolicy::UserPrivacy => "user_privacy",
            DemoPolicy::NoUserPrivacy => "no_user_privacy",
            DemoPolicy::Public => "public",
        }
    }
}

fn demo_of(ex: &LabeledExample) -> Demonstration {
    let input = match ex.input.as_text() {
        Some(s) => s.to_string(),
        None => ex
            .input
            .tokens()
            .join(" "),
    };
    Demonstration { input, label: ex.label.clone() }
}

fn demo_bytes(d: &Demonstration) -> u64 {
    (d.input.len() + d.label.len()) as u64
}

/// Every silo's train examples for a task, tagged with the contributing
/// client, in ascending client-id order.
pub fn aggregate_pool(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
) -> Vec<(String, Demonstration)> {
    silos
        .values()
        .flat_map(|silo| {
            silo.train(&task.id)
                .iter()
                .map(|ex| (silo.client_id().to_string(), demo_of(ex)))
        })
        .collect()
}

/// Pick a user's demonstrations under a policy. Selection is seeded and
/// without replacement; every policy returns an empty list at k = 0.
#[allow(clippy::too_many_arguments)]
pub fn select_demonstrations(
    policy: DemoPolicy,
    k: usize,
    seed: u64,
    client_id: &str,
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
    public_demos: &[Demonstration],
    ledger: &mut FlowLedger,
) -> Result<Vec<Demonstration>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    match policy {
        DemoPolicy::UserPrivacy => {
            let silo = silos
                .get(client_id)
                .ok_or_else(|| Error::PolicyUnsatisfiable(format!("unknown client {client_id}")))?;
            let own = silo.train(&task.id);
            let take = k.min(own.len());
            let mut rng = rng_for(seed, &[TAG_DEMO]);
            let idx = sample(&mut rng, own.len(), take);
            Ok(idx.iter().map(|i| demo_of(&own[i])).collect())
        }
        DemoPolicy::NoUserPrivacy => {
            let pool = aggregate_pool(silos, task);
            if pool.is_empty() {
                return Ok(Vec::new());
            }
            let take = k.min(pool.len());
            let mut rng = rng_for(seed, &[TAG_DEMO]);
            let idx = sample(&mut rng, pool.len(), take);
            let mut out = Vec::with_capacity(take);
            for i in idx.iter() {
                let (origin, demo) = &pool[i];
                if origin != client_id {
                    ledger.append(FlowEvent::new(
                        0,
                        Party::silo(origin),
                        Party::silo(client_id),
                        PayloadKind::DemoRead,
                        demo_bytes(demo),
                        true,
                        true,
                        Some(task.id.clone()),
                    )?);
                }
                out.push(demo.clone());
            }
            Ok(out)
        }
        DemoPolicy::Public => Ok(public_demos.iter().take(k).cloned().collect()),
    }
}

// --------------------------------------------------------------------------
// Decoding
// --------------------------------------------------------------------------

/// What the decoder made of a backend response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Class(String),
    /// The response matched no class name. Scored as incorrect.
    Abstain,
}

/// Map a free-text response onto the label space: the longest class name
/// that is a case-insensitive prefix of the response wins.
pub fn decode_response(response: &str, schema: &LabelSchema) -> Prediction {
    let lower = response.to_lowercase();
    let mut best: Option<&str> = None;
    for class in &schema.classes {
        if lower.starts_with(&class.to_lowercase())
            && best.is_none_or(|b| class.len() > b.len())
        {
            best = Some(class);
        }
    }
    match best {
        Some(c) => Prediction::Class(c.to_string()),
        None => Prediction::Abstain,
    }
}

/// Assemble a context, query the backend, and decode the answer.
pub fn prompt_classify(
    fm: &dyn FoundationModel,
    template: &ContextTemplate,
    parts: &PromptParts,
    input: &str,
    schema: &LabelSchema,
) -> Result<(Prediction, AssembledContext)> {
    let ctx = AssembledContext::assemble(template, parts, input);
    let response = fm.respond(parts, input, schema)?;
    Ok((decode_response(&response, schema), ctx))
}

/// Training-free baseline: nearest class by cosine between the input
/// embedding and each class's name-plus-description embedding. An input
/// with a zero embedding matches nothing.
pub fn similarity_classify(
    encoder: &TextEncoder,
    description: &str,
    input: &str,
    schema: &LabelSchema,
) -> Prediction {
    let x = encoder.encode(input);
    if x.iter().all(|v| *v == 0.0) {
        return Prediction::Abstain;
    }
    let sims: Vec<f64> = schema
        .classes
        .iter()
        .map(|c| {
            let text = if description.is_empty() {
                c.clone()
            } else {
                format!("{c} {description}")
            };
            cosine(&x, &encoder.encode(&text))
        })
        .collect();
    match argmax(&sims) {
        Some(i) => Prediction::Class(schema.classes[i].clone()),
        None => Prediction::Abstain,
    }
}

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct UserEval {
    pub client_id: String,
    pub n_train: usize,
    pub n_test: usize,
    pub correct: usize,
    /// Fraction correct on this user's test split; absent with no test data.
    pub accuracy: Option<f64>,
    pub demo_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct ClassStats {
    pub support: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub per_user: Vec<UserEval>,
    pub per_class: BTreeMap<String, ClassStats>,
    /// Unweighted mean of per-user accuracies (users with test data).
    pub macro_accuracy: f64,
    /// Pooled fraction correct over every test example.
    pub micro_accuracy: f64,
    pub total_test: usize,
    /// Whitespace tokens across every assembled context.
    pub context_tokens: u64,
    /// Number of classifier invocations (one per test example here;
    /// decomposed pipelines report their own higher counts).
    pub classify_calls: u64,
}

pub(crate) fn finish_report(
    per_user: Vec<UserEval>,
    per_class: BTreeMap<String, ClassStats>,
    context_tokens: u64,
    classify_calls: u64,
) -> Result<EvalReport> {
    let scored: Vec<&UserEval> = per_user.iter().filter(|u| u.n_test > 0).collect();
    if scored.is_empty() {
        return Err(Error::UndefinedStatistic("accuracy with no test examples".into()));
    }
    let macro_accuracy =
        scored.iter().map(|u| u.accuracy.unwrap()).sum::<f64>() / scored.len() as f64;
    let total_test: usize = per_user.iter().map(|u| u.n_test).sum();
    let total_correct: usize = per_user.iter().map(|u| u.correct).sum();
    Ok(EvalReport {
        per_user,
        per_class,
        macro_accuracy,
        micro_accuracy: total_correct as f64 / total_test as f64,
        total_test,
        context_tokens,
        classify_calls,
    })
}

/// Evaluation knobs shared by every in-context method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub template: ContextTemplate,
    pub policy: DemoPolicy,
    pub k: usize,
    pub seed: u64,
    /// Redraw demonstrations for every test example instead of once per user.
    pub resample_per_example: bool,
    pub public_demos: Vec<Demonstration>,
}

impl EvalSetup {
    pub fn zero_shot(seed: u64) -> Self {
        EvalSetup {
            template: ContextTemplate::default(),
            policy: DemoPolicy::UserPrivacy,
            k: 0,
            seed,
            resample_per_example: false,
            public_demos: Vec::new(),
        }
    }
}

/// Walk every silo's test split, building each user's context per the policy
/// and scoring `classify` against the true labels. The closure sees the
/// prompt structure and the raw input; rendering for token accounting uses
/// the setup's template.
pub fn evaluate_classification<F>(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
    setup: &EvalSetup,
    ledger: &mut FlowLedger,
    mut classify: F,
) -> Result<EvalReport>
where
    F: FnMut(&PromptParts, &str) -> Result<(Prediction, u64)>,
{
    if task.kind != TaskKind::Classification {
        return Err(Error::NoProgress("classification evaluation needs a classification task".into()));
    }
    let mut per_user = Vec::new();
    let mut per_class: BTreeMap<String, ClassStats> = task
        .schema
        .classes
        .iter()
        .map(|c| (c.clone(), ClassStats::default()))
        .collect();
    let mut context_tokens = 0u64;
    let mut classify_calls = 0u64;

    for (ui, (client_id, silo)) in silos.iter().enumerate() {
        let user_seed = derive_seed(setup.seed, &[TAG_DEMO, ui as u64]);
        let base_demos = if setup.resample_per_example {
            Vec::new()
        } else {
            select_demonstrations(
                setup.policy,
                setup.k,
                user_seed,
                client_id,
                silos,
                task,
                &setup.public_demos,
                ledger,
            )?
        };
        let mut demo_count = base_demos.len();
        let mut correct = 0usize;
        let tests = silo.test(&task.id);
        for (ei, ex) in tests.iter().enumerate() {
            let demos = if setup.resample_per_example {
                let ex_seed = derive_seed(user_seed, &[ei as u64]);
                let d = select_demonstrations(
                    setup.policy,
                    setup.k,
                    ex_seed,
                    client_id,
                    silos,
                    task,
                    &setup.public_demos,
                    ledger,
                )?;
                demo_count = d.len();
                d
            } else {
                base_demos.clone()
            };
            let parts = PromptParts { description: task.description.clone(), demos };
            let input = ex.input.as_text().unwrap_or_default();
            context_tokens +=
                AssembledContext::assemble(&setup.template, &parts, input).token_count();
            let (pred, calls) = classify(&parts, input)?;
            classify_calls += calls;
            let stats = per_class
                .get_mut(&ex.label)
                .ok_or_else(|| Error::UnknownClass(ex.label.clone()))?;
            stats.support += 1;
            if pred == Prediction::Class(ex.label.clone()) {
                stats.correct += 1;
                correct += 1;
            }
        }
        per_user.push(UserEval {
            client_id: client_id.clone(),
            n_train: silo.n_train(&task.id),
            n_test: tests.len(),
            correct,
            accuracy: if tests.is_empty() { None } else { Some(correct as f64 / tests.len() as f64) },
            demo_count,
        });
    }
    finish_report(per_user, per_class, context_tokens, classify_calls)
}

/// Top-1 next-word accuracy: each test example holds a prefix as input and
/// the following word as label; the backend's argmax token must match.
pub fn evaluate_next_word(
    fm: &dyn FoundationModel,
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
) -> Result<EvalReport> {
    if task.kind != TaskKind::NextWord {
        return Err(Error::NoProgress("next-word evaluation needs a next-word task".into()));
    }
    let mut per_user = Vec::new();
    let mut per_class: BTreeMap<String, ClassStats> = BTreeMap::new();
    let mut calls = 0u64;
    let mut context_tokens = 0u64;
    for (client_id, silo) in silos {
        let tests = silo.test(&task.id);
        let mut correct = 0usize;
        for ex in tests {
            let prefix = ex.input.tokens();
            context_tokens += prefix.len() as u64;
            let dist = fm.next_token_dist(&prefix)?;
            calls += 1;
            let predicted = argmax(&dist).map(|i| fm.vocab()[i].clone());
            let stats = per_class.entry(ex.label.clone()).or_default();
            stats.support += 1;
            if predicted.as_deref() == Some(ex.label.as_str()) {
                stats.correct += 1;
                correct += 1;
            }
        }
        per_user.push(UserEval {
            client_id: client_id.clone(),
            n_train: silo.n_train(&task.id),
            n_test: tests.len(),
            correct,
            accuracy: if tests.is_empty() { None } else { Some(correct as f64 / tests.len() as f64) },
            demo_count: 0,
        });
    }
    finish_report(per_user, per_class, context_tokens, calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Split;
    use crate::fm::{MockFm, SimBackendConfig, SimFm};
    use crate::domain::TaggedExample;
    use rand::Rng;

    fn schema(names: &[&str]) -> LabelSchema {
        LabelSchema::classification(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn task(names: &[&str]) -> Task {
        Task {
            id: "t".into(),
            kind: TaskKind::Classification,
            description: String::new(),
            schema: schema(names),
            template_id: "default".into(),
        }
    }

    fn silo_with(id: &str, train: &[(&str, &str)], test: &[(&str, &str)]) -> ClientSilo {
        let mut s = ClientSilo::new(id);
        for (x, y) in train {
            s.push("t", Split::Train, LabeledExample::text(*x, *y));
        }
        for (x, y) in test {
            s.push("t", Split::Test, LabeledExample::text(*x, *y));
        }
        s
    }

    // --- templates ---

    #[test]
    fn default_template_renders_demos_between_description_and_query() {
        let t = ContextTemplate::default();
        let parts = PromptParts {
            description: "D".into(),
            demos: vec![Demonstration { input: "x1".into(), label: "y1".into() }],
        };
        assert_eq!(t.render(&parts, "q"), "D\nInput: x1\nLabel: y1\nInput: q\nLabel:");
    }

    #[test]
    fn zero_demo_render_collapses_the_demo_block() {
        let t = ContextTemplate::default();
        assert_eq!(t.render(&PromptParts::zero_shot("D"), "q"), "D\nInput: q\nLabel:");
    }

    #[test]
    fn template_requires_each_slot_exactly_once() {
        assert!(ContextTemplate::new("{description}{demonstrations}").is_err());
        assert!(ContextTemplate::new("{description}{demonstrations}{input}{input}").is_err());
        assert!(ContextTemplate::new("{description} {demonstrations} {input}").is_ok());
    }

    // --- decoding ---

    #[test]
    fn decode_takes_longest_matching_class_prefix() {
        let s = schema(&["good", "good service", "bad"]);
        assert_eq!(
            decode_response("Good service today", &s),
            Prediction::Class("good service".into())
        );
        assert_eq!(decode_response("BAD", &s), Prediction::Class("bad".into()));
        assert_eq!(decode_response("mediocre", &s), Prediction::Abstain);
    }

    #[test]
    fn abstain_scores_as_incorrect() {
        let tk = task(&["a", "b"]);
        let mut silos = BTreeMap::new();
        silos.insert("u0".to_string(), silo_with("u0", &[], &[("q", "a")]));
        let mut ledger = FlowLedger::new();
        let report = evaluate_classification(
            &silos,
            &tk,
            &EvalSetup::zero_shot(1),
            &mut ledger,
            |_, _| Ok((Prediction::Abstain, 1)),
        )
        .unwrap();
        assert_eq!(report.micro_accuracy, 0.0);
        assert_eq!(report.per_class["a"].support, 1);
        assert_eq!(report.per_class["a"].correct, 0);
    }

    // --- similarity baseline ---

    #[test]
    fn similarity_matches_brute_force_argmax() {
        let enc = TextEncoder::new(64, 3).unwrap();
        let s = schema(&["red fruit", "green vegetable", "yellow grain"]);
        let mut rng = rng_for(11, &[0x51f]);
        let words = ["red", "green", "yellow", "fruit", "grain", "stone", "leaf"];
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let input: Vec<&str> =
                (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
            let input = input.join(" ");
            let got = similarity_classify(&enc, "", &input, &s);
            let x = enc.encode(&input);
            let sims: Vec<f64> =
                s.classes.iter().map(|c| cosine(&x, &enc.encode(c))).collect();
            let want = Prediction::Class(s.classes[argmax(&sims).unwrap()].clone());
            assert_eq!(got, want, "input {input:?}");
        }
    }

    #[test]
    fn similarity_abstains_on_empty_input() {
        let enc = TextEncoder::new(32, 0).unwrap();
        assert_eq!(similarity_classify(&enc, "", "", &schema(&["a", "b"])), Prediction::Abstain);
    }

    // Classes whose names are their own single evidence token, a balanced
    // one-document-per-class fit, and no description: both the zero-demo
    // prompt path and the cosine baseline reduce to counting class tokens,
    // with ties broken toward the first class.
    #[test]
    fn zero_demo_prompting_agrees_with_similarity_on_degenerate_corpus() {
        let s = schema(&["alpha", "beta"]);
        let pool = vec![
            TaggedExample::public(LabeledExample::text("alpha", "alpha")),
            TaggedExample::public(LabeledExample::text("beta", "beta")),
        ];
        let cfg = SimBackendConfig::default();
        let fm = SimFm::fit(&cfg, &s, Some(&pool), None).unwrap();
        let enc = TextEncoder::new(cfg.embed_dim, cfg.embed_seed).unwrap();
        assert_ne!(enc.bucket_of("alpha"), enc.bucket_of("beta"));

        let template = ContextTemplate::default();
        let parts = PromptParts::zero_shot("");
        let mut rng = rng_for(17, &[0xdeb]);
        for _ in 0..200 {
            let n = rng.random_range(1..=10);
            let toks: Vec<&str> =
                (0..n).map(|_| if rng.random::<f64>() < 0.5 { "alpha" } else { "beta" }).collect();
            let input = toks.join(" ");
            let (prompted, _) = prompt_classify(&fm, &template, &parts, &input, &s).unwrap();
            let similar = similarity_classify(&enc, "", &input, &s);
            assert_eq!(prompted, similar, "input {input:?}");
        }
    }

    // --- policies ---

    fn three_silos() -> BTreeMap<String, ClientSilo> {
        let mut m = BTreeMap::new();
        m.insert("u0".to_string(), silo_with("u0", &[("a0", "a"), ("a1", "a")], &[]));
        m.insert("u1".to_string(), silo_with("u1", &[("b0", "b")], &[]));
        m.insert("u2".to_string(), silo_with("u2", &[], &[]));
        m
    }

    #[test]
    fn own_silo_policy_caps_at_local_count_and_stays_local() {
        let silos = three_silos();
        let tk = task(&["a", "b"]);
        let mut ledger = FlowLedger::new();
        let demos = select_demonstrations(
            DemoPolicy::UserPrivacy, 5, 9, "u0", &silos, &tk, &[], &mut ledger,
        )
        .unwrap();
        assert_eq!(demos.len(), 2);
        assert!(demos.iter().all(|d| d.label == "a"));
        assert!(ledger.is_empty());
    }

    #[test]
    fn zero_k_returns_no_demos_under_every_policy() {
        let silos = three_silos();
        let tk = task(&["a", "b"]);
        let fixed = vec![Demonstration { input: "p".into(), label: "a".into() }];
        let mut ledger = FlowLedger::new();
        for policy in [DemoPolicy::UserPrivacy, DemoPolicy::NoUserPrivacy, DemoPolicy::Public] {
            let demos = select_demonstrations(
                policy, 0, 9, "u0", &silos, &tk, &fixed, &mut ledger,
            )
            .unwrap();
            assert!(demos.is_empty(), "{policy:?}");
        }
        assert!(ledger.is_empty());
    }

    #[test]
    fn pooled_policy_ledgers_each_cross_silo_read() {
        let silos = three_silos();
        let tk = task(&["a", "b"]);
        let mut ledger = FlowLedger::new();
        let demos = select_demonstrations(
            DemoPolicy::NoUserPrivacy, 3, 9, "u1", &silos, &tk, &[], &mut ledger,
        )
        .unwrap();
        assert_eq!(demos.len(), 3);
        // u1 contributes one of the three pooled examples, so exactly two
        // draws cross a silo boundary.
        assert_eq!(ledger.len(), 2);
        for e in ledger.events() {
            assert_eq!(e.kind, PayloadKind::DemoRead);
            assert_eq!(e.sink, Party::silo("u1"));
            assert_ne!(e.source, Party::silo("u1"));
            assert!(e.derived_from_private);
            assert!(e.task_revealing);
        }
    }

    #[test]
    fn public_policy_takes_the_list_head_identically_for_all_users() {
        let silos = three_silos();
        let tk = task(&["a", "b"]);
        let fixed: Vec<Demonstration> = (0..4)
            .map(|i| Demonstration { input: format!("p{i}"), label: "a".into() })
            .collect();
        let mut ledger = FlowLedger::new();
        let d0 = select_demonstrations(
            DemoPolicy::Public, 2, 1, "u0", &silos, &tk, &fixed, &mut ledger,
        )
        .unwrap();
        let d1 = select_demonstrations(
            DemoPolicy::Public, 2, 77, "u1", &silos, &tk, &fixed, &mut ledger,
        )
        .unwrap();
        assert_eq!(d0, d1);
        assert_eq!(d0, fixed[..2].to_vec());
        assert!(ledger.is_empty());
    }

    // --- evaluation ---

    #[test]
    fn report_recounts_match_per_class_totals() {
        let tk = task(&["a", "b"]);
        let mut silos = BTreeMap::new();
        silos.insert(
            "u0".to_string(),
            silo_with("u0", &[], &[("x", "a"), ("y", "b"), ("z", "a")]),
        );
        silos.insert("u1".to_string(), silo_with("u1", &[], &[("w", "b")]));
        let mut ledger = FlowLedger::new();
        let report = evaluate_classification(
            &silos,
            &tk,
            &EvalSetup::zero_shot(1),
            &mut ledger,
            |_, _| Ok((Prediction::Class("a".into()), 1)),
        )
        .unwrap();
        let class_correct: usize = report.per_class.values().map(|c| c.correct).sum();
        let user_correct: usize = report.per_user.iter().map(|u| u.correct).sum();
        assert_eq!(class_correct, user_correct);
        assert_eq!(report.total_test, 4);
        assert_eq!(report.micro_accuracy, 0.5);
        assert_eq!(report.macro_accuracy, (2.0 / 3.0 + 0.0) / 2.0);
        assert_eq!(report.classify_calls, 4);
    }

    #[test]
    fn evaluation_uses_backend_answers_end_to_end() {
        let tk = task(&["spam", "ham"]);
        let fm = MockFm::new()
            .script_response("offer now", "spam")
            .script_response("see you", "ham");
        let mut silos = BTreeMap::new();
        silos.insert(
            "u0".to_string(),
            silo_with("u0", &[], &[("offer now", "spam"), ("see you", "spam")]),
        );
        let template = ContextTemplate::default();
        let mut ledger = FlowLedger::new();
        let report = evaluate_classification(
            &silos,
            &tk,
            &EvalSetup::zero_shot(1),
            &mut ledger,
            |parts, input| {
                prompt_classify(&fm, &template, parts, input, &tk.schema)
                    .map(|(p, _)| (p, 1))
            },
        )
        .unwrap();
        assert_eq!(report.micro_accuracy, 0.5);
        assert!(report.context_tokens > 0);
    }

    #[test]
    fn next_word_eval_scores_argmax_token() {
        let sentences = vec![
            vec!["a".to_string(), "b".to_string()],
            vec!["a".to_string(), "b".to_string()],
            vec!["a".to_string(), "c".to_string()],
        ];
        let cfg = SimBackendConfig::default();
        let nw = Task {
            id: "t".into(),
            kind: TaskKind::NextWord,
            description: String::new(),
            schema: LabelSchema::next_word(),
            template_id: "default".into(),
        };
        let fm = SimFm::fit(&cfg, &nw.schema, None, Some(&sentences)).unwrap();
        let mut silos = BTreeMap::new();
        let mut s = ClientSilo::new("u0");
        s.push("t", Split::Test, LabeledExample::text("a", "b"));
        s.push("t", Split::Test, LabeledExample::text("a", "c"));
        silos.insert("u0".to_string(), s);
        let report = evaluate_next_word(&fm, &silos, &nw).unwrap();
        assert_eq!(report.micro_accuracy, 0.5);
    }
}
