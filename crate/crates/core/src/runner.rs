//! Scenario execution and report emission. One run takes a configuration,
//! materializes data and a frozen backend per seed, executes every scenario,
//! and writes a fixed set of artifacts.
//!
//! Every artifact except `meta.json` is byte-identical across re-runs of the
//! same configuration; `meta.json` alone carries the wall-clock timestamp.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DataConfig, Method, RunConfig, Scenario};
use crate::cost::{
    icl_download_bytes, inference_flops, training_flops, CostKind, CostTally,
};
use crate::domain::{
    label_entropy, read_jsonl, build_silos, ClientSilo, LabelSchema, LabeledExample, Split, TaggedExample,
    Task, TaskKind,
};
use crate::fl::{
    run_federated, train_local_only, Featurizer, FlConfig, GlobalModel, ModelKind, RoundStats,
};
use crate::fm::{FoundationModel, PromptParts, SimFm, TextEncoder};
use crate::icl::{
    evaluate_classification, evaluate_next_word, finish_report, prompt_classify,
    select_demonstrations, ClassStats, ContextTemplate, DemoPolicy, EvalReport, EvalSetup,
    Prediction, UserEval,
};
use crate::ledger::{
    perfect_secrecy, task_privacy_exposure, FlowEvent, FlowLedger, Party, PayloadKind,
    SecrecyVerdict, TaskExposure,
};
use crate::promptopt::{
    build_calibrator, decomposed_classify, estimate_content_free, partition_label_groups,
};
use crate::rng::{derive_seed, rng_for};
use crate::stats::{argmax, spearman};
use crate::{Error, Result};

const TAG_CORPUS: u64 = 0xd10;
const TAG_PART: u64 = 0xd11;
const TAG_SPLIT: u64 = 0xd12;
const TAG_FL: u64 = 0xd13;
const TAG_GROUPING: u64 = 0xd14;
const TAG_EVAL: u64 = 0xd15;
const TAG_DEMO_NW: u64 = 0xd16;

/// Users need at least this many training examples to enter the
/// entropy-versus-accuracy analysis.
pub const MIN_TRAIN_FOR_ENTROPY: usize = 4;
/// Minimum qualifying users before a rank correlation is reported.
pub const MIN_USERS_FOR_CORRELATION: usize = 5;

// --------------------------------------------------------------------------
// Data materialization
// --------------------------------------------------------------------------

/// Everything one seed's scenarios share: the client silos, the task, the
/// frozen backend, and per-client label entropies.
pub struct SeedData {
    pub silos: BTreeMap<String, ClientSilo>,
    pub task: Task,
    pub fm: SimFm,
    /// Train-split label entropy in bits per client; absent for clients
    /// without training data and for next-word tasks.
    pub entropy_bits: BTreeMap<String, Option<f64>>,
}

fn client_name(i: usize, n: usize) -> String {
    let width = (n.saturating_sub(1)).to_string().len().max(2);
    format!("u{i:0width$}")
}

/// Seeded train/test split. The split leans toward training by `fraction`
/// but always leaves one test example when a client has two or more.
fn split_examples(
    mut examples: Vec<LabeledExample>,
    fraction: f64,
    cap: Option<usize>,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, &[]);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let mut n_train = ((n as f64) * fraction).floor() as usize;
    if n_train == n && n >= 2 {
        n_train = n - 1;
    }
    let test = examples.split_off(n_train);
    if let Some(cap) = cap {
        examples.truncate(cap);
    }
    (examples, test)
}

fn entropy_map(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
) -> BTreeMap<String, Option<f64>> {
    silos
        .iter()
        .map(|(id, silo)| {
            let e = if task.kind == TaskKind::Classification {
                label_entropy(silo.train(&task.id), &task.schema).ok()
            } else {
                None
            };
            (id.clone(), e)
        })
        .collect()
}

/// Build the silos and fit the frozen backend for one seed.
pub fn materialize(cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    match &cfg.data {
        DataConfig::SyntheticClassification { spec, partition, task, train_fraction, train_cap } => {
            let corpus =
                crate::partition::synth_classification_corpus(spec, derive_seed(seed, &[TAG_CORPUS]))?;
            let schema = LabelSchema::classification(corpus.class_names.clone())?;
            let task = Task {
                id: task.id.clone(),
                kind: TaskKind::Classification,
                description: task.description.clone(),
                schema,
                template_id: "default".into(),
            };
            task.validate()?;
            let mut pspec = *partition;
            pspec.seed = derive_seed(seed, &[TAG_PART, partition.seed]);
            let shards = crate::partition::partition(&corpus.private, &task.schema, &pspec)?;
            let mut silos = BTreeMap::new();
            for (i, shard) in shards.into_iter().enumerate() {
                let id = client_name(i, pspec.num_clients);
                let (train, test) = split_examples(
                    shard,
                    *train_fraction,
                    *train_cap,
                    derive_seed(seed, &[TAG_SPLIT, i as u64]),
                );
                let mut silo = ClientSilo::new(id.clone());
                for ex in train {
                    silo.push(&task.id, Split::Train, ex);
                }
                for ex in test {
                    silo.push(&task.id, Split::Test, ex);
                }
                silos.insert(id, silo);
            }
            let fm = SimFm::fit(&cfg.backend, &task.schema, Some(&corpus.public), None)?;
            let entropy_bits = entropy_map(&silos, &task);
            Ok(SeedData { silos, task, fm, entropy_bits })
        }
        DataConfig::SyntheticNextWord { spec, task, train_fraction } => {
            let corpus =
                crate::partition::synth_next_word_corpus(spec, derive_seed(seed, &[TAG_CORPUS]))?;
            let schema = LabelSchema::next_word();
            let task = Task {
                id: task.id.clone(),
                kind: TaskKind::NextWord,
                description: task.description.clone(),
                schema,
                template_id: "default".into(),
            };
            let mut silos = BTreeMap::new();
            for (i, sentences) in corpus.user_sentences.iter().enumerate() {
                let id = client_name(i, spec.num_users);
                let examples: Vec<LabeledExample> = sentences
                    .iter()
                    .map(|s| crate::partition::SynthNextWordCorpus::sentence_to_example(s))
                    .collect();
                let (train, test) = split_examples(
                    examples,
                    *train_fraction,
                    None,
                    derive_seed(seed, &[TAG_SPLIT, i as u64]),
                );
                let mut silo = ClientSilo::new(id.clone());
                for ex in train {
                    silo.push(&task.id, Split::Train, ex);
                }
                for ex in test {
                    silo.push(&task.id, Split::Test, ex);
                }
                silos.insert(id, silo);
            }
            let fm = SimFm::fit(&cfg.backend, &task.schema, None, Some(&corpus.public_sentences))?;
            let entropy_bits = entropy_map(&silos, &task);
            Ok(SeedData { silos, task, fm, entropy_bits })
        }
        DataConfig::Jsonl { path, task, train_cap } => {
            let records = read_jsonl(Path::new(path))?;
            let schema = LabelSchema::classification(task.classes.clone())?;
            let task = Task {
                id: task.id.clone(),
                kind: TaskKind::Classification,
                description: task.description.clone(),
                schema,
                template_id: "default".into(),
            };
            task.validate()?;
            let mut silos = build_silos(&records);
            if let Some(cap) = train_cap {
                for silo in silos.values_mut() {
                    silo.truncate_train(&task.id, *cap);
                }
            }
            let mut pool: Vec<TaggedExample> = task
                .schema
                .classes
                .iter()
                .map(|c| TaggedExample::public(LabeledExample::text(c.clone(), c.clone())))
                .collect();
            pool.extend(
                cfg.public_demos
                    .iter()
                    .map(|d| TaggedExample::public(LabeledExample::text(d.input.clone(), d.label.clone()))),
            );
            let fm = SimFm::fit(&cfg.backend, &task.schema, Some(&pool), None)?;
            let entropy_bits = entropy_map(&silos, &task);
            Ok(SeedData { silos, task, fm, entropy_bits })
        }
    }
}

// --------------------------------------------------------------------------
// Scenario execution
// --------------------------------------------------------------------------

/// One evaluated method variant; sweeps produce several per scenario.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub policy: Option<DemoPolicy>,
    pub k: Option<usize>,
    pub report: EvalReport,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub method_tag: &'static str,
    pub seed: u64,
    pub variants: Vec<VariantResult>,
    pub rounds: Vec<RoundStats>,
    pub ledger: FlowLedger,
    pub cost: CostTally,
    pub secrecy: SecrecyVerdict,
    pub exposure: BTreeMap<String, TaskExposure>,
}

pub fn method_tag(method: &Method) -> &'static str {
    match method {
        Method::Fl { .. } => "fl",
        Method::LocalOnly { .. } => "local_only",
        Method::IclZeroShot => "icl_zero_shot",
        Method::IclKshot { .. } => "icl_kshot",
        Method::IclDecomposed { .. } => "icl_decomposed",
        Method::IclCalibrated { .. } => "icl_calibrated",
        Method::IclDecomposedCalibrated { .. } => "icl_decomposed_calibrated",
        Method::PolicySweep { .. } => "policy_sweep",
    }
}

fn silo_id_set(silos: &BTreeMap<String, ClientSilo>) -> BTreeSet<String> {
    silos.keys().cloned().collect()
}

fn text_featurizer(cfg: &RunConfig) -> Result<Featurizer> {
    Ok(Featurizer::Text(TextEncoder::new(cfg.backend.embed_dim, cfg.backend.embed_seed)?))
}

/// Score a trained model per silo against that silo's test split.
fn evaluate_trained<'a>(
    silos: &BTreeMap<String, ClientSilo>,
    task: &Task,
    featurizer: &Featurizer,
    model_for: impl Fn(&str) -> &'a GlobalModel,
) -> Result<EvalReport> {
    let mut per_user = Vec::new();
    let mut per_class: BTreeMap<String, ClassStats> = task
        .schema
        .classes
        .iter()
        .map(|c| (c.clone(), ClassStats::default()))
        .collect();
    let mut calls = 0u64;
    for (id, silo) in silos {
        let model = model_for(id);
        let tests = silo.test(&task.id);
        let mut correct = 0usize;
        for ex in tests {
            let x = featurizer.featurize(&ex.input)?;
            let pred = model.predict(&x)?;
            calls += 1;
            let stats = per_class
                .get_mut(&ex.label)
                .ok_or_else(|| Error::UnknownClass(ex.label.clone()))?;
            stats.support += 1;
            if task.schema.classes[pred] == ex.label {
                stats.correct += 1;
                correct += 1;
            }
        }
        per_user.push(UserEval {
            client_id: id.clone(),
            n_train: silo.n_train(&task.id),
            n_test: tests.len(),
            correct,
            accuracy: if tests.is_empty() {
                None
            } else {
                Some(correct as f64 / tests.len() as f64)
            },
            demo_count: 0,
        });
    }
    finish_report(per_user, per_class, 0, calls)
}

fn ledger_fm_downloads(
    silos: &BTreeMap<String, ClientSilo>,
    fm_bytes: u64,
    ledger: &mut FlowLedger,
) -> Result<()> {
    for id in silos.keys() {
        ledger.append(FlowEvent::new(
            0,
            Party::PublicRepo,
            Party::silo(id),
            PayloadKind::FmDownload,
            fm_bytes,
            false,
            false,
            None,
        )?);
    }
    Ok(())
}

/// Mean per-device in-context inference cost over the variants actually run.
fn icl_cost(
    fm: &SimFm,
    variants: &[VariantResult],
    n_clients: usize,
    network: &crate::cost::NetworkSpec,
) -> CostTally {
    let c = n_clients.max(1) as f64;
    let mut tokens = 0.0;
    for v in variants {
        let ratio = if v.report.total_test > 0 {
            v.report.classify_calls as f64 / v.report.total_test as f64
        } else {
            1.0
        };
        tokens += v.report.context_tokens as f64 * ratio;
    }
    let spec = fm.spec();
    CostTally::new(
        CostKind::InContext,
        0.0,
        inference_flops(spec, 1) * tokens / c,
        icl_download_bytes(spec),
        0.0,
        spec.param_bytes() as f64,
        network,
    )
}

fn classify_with_respond<'a>(
    fm: &'a SimFm,
    template: &ContextTemplate,
    task: &Task,
) -> impl Fn(&PromptParts, &str) -> Result<(Prediction, u64)> + 'a {
    let template = template.clone();
    let schema = task.schema.clone();
    move |parts, input| {
        prompt_classify(fm, &template, parts, input, &schema).map(|(p, _)| (p, 1))
    }
}

fn run_icl_classification(
    data: &SeedData,
    cfg: &RunConfig,
    policy: DemoPolicy,
    k: usize,
    resample: bool,
    seed: u64,
    ledger: &mut FlowLedger,
    classify: impl FnMut(&PromptParts, &str) -> Result<(Prediction, u64)>,
) -> Result<EvalReport> {
    let setup = EvalSetup {
        template: cfg.template.clone(),
        policy,
        k,
        seed: derive_seed(seed, &[TAG_EVAL]),
        resample_per_example: resample,
        public_demos: cfg.public_demos.clone(),
    };
    evaluate_classification(&data.silos, &data.task, &setup, ledger, classify)
}

fn run_icl_next_word(
    data: &SeedData,
    cfg: &RunConfig,
    policy: DemoPolicy,
    k: usize,
    seed: u64,
    ledger: &mut FlowLedger,
) -> Result<EvalReport> {
    if k > 0 {
        let eval_seed = derive_seed(seed, &[TAG_EVAL]);
        for (ui, id) in data.silos.keys().enumerate() {
            select_demonstrations(
                policy,
                k,
                derive_seed(eval_seed, &[TAG_DEMO_NW, ui as u64]),
                id,
                &data.silos,
                &data.task,
                &cfg.public_demos,
                ledger,
            )?;
        }
    }
    evaluate_next_word(&data.fm, &data.silos, &data.task)
}

fn run_fl_scenario(
    data: &SeedData,
    cfg: &RunConfig,
    fl: &FlConfig,
    seed: u64,
    ledger: &mut FlowLedger,
) -> Result<(VariantResult, Vec<RoundStats>, CostTally)> {
    let featurizer = text_featurizer(cfg)?;
    let dim = featurizer.dim();
    let classes = data.task.schema.classes.len();
    let fl_seed = derive_seed(seed, &[TAG_FL]);
    let init = if fl.init_from_backend {
        if fl.model != ModelKind::Logistic {
            return Err(Error::NoProgress(
                "backend warm start requires the logistic model".into(),
            ));
        }
        let scorer = data
            .fm
            .scorer()
            .ok_or_else(|| Error::NoProgress("backend has no scorer to warm start from".into()))?;
        GlobalModel::init_from_scorer(scorer, data.fm.encoder(), &data.task.schema.classes, dim)?
    } else {
        GlobalModel::init(fl.model, dim, classes, fl_seed)?
    };
    let outcome = run_federated(&data.silos, &data.task, &featurizer, fl, fl_seed, init, ledger)?;
    let report = evaluate_trained(&data.silos, &data.task, &featurizer, |_| &outcome.model)?;

    let c = data.silos.len().max(1) as f64;
    let spec = outcome.model.spec;
    let rounds_per_device: f64 =
        outcome.rounds.iter().map(|r| r.clients as f64).sum::<f64>() / c;
    let comm = spec.param_bytes() as f64 * rounds_per_device;
    let cost = CostTally::new(
        CostKind::Federated,
        outcome.total_train_flops / c,
        inference_flops(&spec, fl.seq_len) * (report.total_test as f64 / c),
        comm,
        comm,
        spec.param_bytes() as f64,
        &cfg.network,
    );
    Ok((
        VariantResult { policy: None, k: None, report },
        outcome.rounds,
        cost,
    ))
}

fn run_local_only_scenario(
    data: &SeedData,
    cfg: &RunConfig,
    fl: &FlConfig,
    seed: u64,
) -> Result<(VariantResult, CostTally)> {
    let featurizer = text_featurizer(cfg)?;
    let dim = featurizer.dim();
    let classes = data.task.schema.classes.len();
    let fl_seed = derive_seed(seed, &[TAG_FL]);
    let init = GlobalModel::init(fl.model, dim, classes, fl_seed)?;
    let models = train_local_only(&data.silos, &data.task, &featurizer, fl, fl_seed, &init)?;
    let report = evaluate_trained(&data.silos, &data.task, &featurizer, |id| &models[id])?;

    let c = data.silos.len().max(1) as f64;
    let spec = init.spec;
    let total_training: f64 = data
        .silos
        .values()
        .map(|silo| {
            let n = silo.n_train(&data.task.id) as u64;
            if n == 0 {
                return 0.0;
            }
            let steps = fl.rounds * fl.local_epochs * n.div_ceil(fl.batch_size as u64);
            training_flops(&spec, steps, fl.batch_size as u64, fl.seq_len)
        })
        .sum();
    let cost = CostTally::new(
        CostKind::LocalOnly,
        total_training / c,
        inference_flops(&spec, fl.seq_len) * (report.total_test as f64 / c),
        0.0,
        0.0,
        spec.param_bytes() as f64,
        &cfg.network,
    );
    Ok((VariantResult { policy: None, k: None, report }, cost))
}

/// Execute one scenario against one seed's data.
pub fn run_scenario(
    data: &SeedData,
    cfg: &RunConfig,
    scenario: &Scenario,
    seed: u64,
) -> Result<ScenarioOutcome> {
    let mut ledger = FlowLedger::new();
    let mut rounds = Vec::new();
    let mut variants = Vec::new();
    let is_next_word = data.task.kind == TaskKind::NextWord;

    let cost = match &scenario.method {
        Method::Fl { fl } => {
            let (variant, r, cost) = run_fl_scenario(data, cfg, fl, seed, &mut ledger)?;
            variants.push(variant);
            rounds = r;
            cost
        }
        Method::LocalOnly { fl } => {
            let (variant, cost) = run_local_only_scenario(data, cfg, fl, seed)?;
            variants.push(variant);
            cost
        }
        method => {
            ledger_fm_downloads(&data.silos, data.fm.spec().param_bytes(), &mut ledger)?;
            match method {
                Method::IclZeroShot => {
                    let report = if is_next_word {
                        run_icl_next_word(data, cfg, DemoPolicy::UserPrivacy, 0, seed, &mut ledger)?
                    } else {
                        let classify = classify_with_respond(&data.fm, &cfg.template, &data.task);
                        run_icl_classification(
                            data, cfg, DemoPolicy::UserPrivacy, 0, false, seed, &mut ledger, classify,
                        )?
                    };
                    variants.push(VariantResult { policy: None, k: Some(0), report });
                }
                Method::IclKshot { policy, k, resample_per_example } => {
                    let report = if is_next_word {
                        run_icl_next_word(data, cfg, *policy, *k, seed, &mut ledger)?
                    } else {
                        let classify = classify_with_respond(&data.fm, &cfg.template, &data.task);
                        run_icl_classification(
                            data, cfg, *policy, *k, *resample_per_example, seed, &mut ledger,
                            classify,
                        )?
                    };
                    variants.push(VariantResult { policy: Some(*policy), k: Some(*k), report });
                }
                Method::IclDecomposed { group_size, policy, k } => {
                    let grouping = partition_label_groups(
                        &data.task.schema,
                        *group_size,
                        derive_seed(seed, &[TAG_GROUPING]),
                    )?;
                    let report = run_icl_classification(
                        data, cfg, *policy, *k, false, seed, &mut ledger,
                        |parts, input| {
                            decomposed_classify(
                                &data.fm, &grouping, parts, input, &data.task.schema, None,
                            )
                            .map(|(c, calls)| (Prediction::Class(c), calls))
                        },
                    )?;
                    variants.push(VariantResult { policy: Some(*policy), k: Some(*k), report });
                }
                Method::IclCalibrated { cf_inputs, policy, k } => {
                    let p_cf = estimate_content_free(
                        &data.fm, &data.task.schema, &data.task.description, cf_inputs,
                    )?;
                    let cal = build_calibrator(&p_cf)?;
                    let report = run_icl_classification(
                        data, cfg, *policy, *k, false, seed, &mut ledger,
                        |parts, input| {
                            let scores =
                                data.fm.class_scores(parts, input, &data.task.schema)?;
                            let q = cal.calibrate(&scores)?;
                            let i = argmax(&q).ok_or_else(|| {
                                Error::SchemaViolation("empty class list".into())
                            })?;
                            Ok((Prediction::Class(data.task.schema.classes[i].clone()), 1))
                        },
                    )?;
                    variants.push(VariantResult { policy: Some(*policy), k: Some(*k), report });
                }
                Method::IclDecomposedCalibrated { group_size, cf_inputs, policy, k } => {
                    let p_cf = estimate_content_free(
                        &data.fm, &data.task.schema, &data.task.description, cf_inputs,
                    )?;
                    let cal = build_calibrator(&p_cf)?;
                    let grouping = partition_label_groups(
                        &data.task.schema,
                        *group_size,
                        derive_seed(seed, &[TAG_GROUPING]),
                    )?;
                    let report = run_icl_classification(
                        data, cfg, *policy, *k, false, seed, &mut ledger,
                        |parts, input| {
                            decomposed_classify(
                                &data.fm, &grouping, parts, input, &data.task.schema,
                                Some((&cal, &p_cf)),
                            )
                            .map(|(c, calls)| (Prediction::Class(c), calls))
                        },
                    )?;
                    variants.push(VariantResult { policy: Some(*policy), k: Some(*k), report });
                }
                Method::PolicySweep { policies, ks } => {
                    for policy in policies {
                        for &k in ks {
                            let report = if is_next_word {
                                run_icl_next_word(data, cfg, *policy, k, seed, &mut ledger)?
                            } else {
                                let classify =
                                    classify_with_respond(&data.fm, &cfg.template, &data.task);
                                run_icl_classification(
                                    data, cfg, *policy, k, false, seed, &mut ledger, classify,
                                )?
                            };
                            variants.push(VariantResult {
                                policy: Some(*policy),
                                k: Some(k),
                                report,
                            });
                        }
                    }
                }
                Method::Fl { .. } | Method::LocalOnly { .. } => unreachable!(),
            }
            icl_cost(&data.fm, &variants, data.silos.len(), &cfg.network)
        }
    };

    let secrecy = perfect_secrecy(&ledger, &silo_id_set(&data.silos));
    let exposure = task_privacy_exposure(&ledger);
    Ok(ScenarioOutcome {
        scenario: scenario.name.clone(),
        method_tag: method_tag(&scenario.method),
        seed,
        variants,
        rounds,
        ledger,
        cost,
        secrecy,
        exposure,
    })
}

// --------------------------------------------------------------------------
// Entropy analysis
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyPoint {
    pub client_id: String,
    pub n_train: usize,
    pub entropy_bits: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyAnalysis {
    pub points: Vec<EntropyPoint>,
    pub qualifying: usize,
    /// Rank correlation between entropy and accuracy; absent when too few
    /// users qualify or the statistic is undefined.
    pub spearman: Option<f64>,
    pub warning: Option<String>,
}

/// Relate per-user train-label entropy to per-user accuracy. Users with
/// fewer than `MIN_TRAIN_FOR_ENTROPY` training examples are excluded; below
/// `MIN_USERS_FOR_CORRELATION` qualifying users, only a warning is produced.
pub fn entropy_analysis(data: &SeedData, report: &EvalReport) -> EntropyAnalysis {
    let mut points = Vec::new();
    for u in &report.per_user {
        let (Some(acc), Some(Some(e))) = (u.accuracy, data.entropy_bits.get(&u.client_id))
        else {
            continue;
        };
        if u.n_train < MIN_TRAIN_FOR_ENTROPY {
            continue;
        }
        points.push(EntropyPoint {
            client_id: u.client_id.clone(),
            n_train: u.n_train,
            entropy_bits: *e,
            accuracy: acc,
        });
    }
    let qualifying = points.len();
    if qualifying < MIN_USERS_FOR_CORRELATION {
        return EntropyAnalysis {
            points,
            qualifying,
            spearman: None,
            warning: Some(format!(
                "only {qualifying} users have at least {MIN_TRAIN_FOR_ENTROPY} training examples; correlation withheld"
            )),
        };
    }
    let xs: Vec<f64> = points.iter().map(|p| p.entropy_bits).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let rho = spearman(&xs, &ys);
    EntropyAnalysis {
        points,
        qualifying,
        spearman: rho,
        warning: if rho.is_none() {
            Some("rank correlation undefined on these points".into())
        } else {
            None
        },
    }
}

// --------------------------------------------------------------------------
// Run loop and artifacts
// --------------------------------------------------------------------------

pub struct RunOutputs {
    pub dir: PathBuf,
    pub outcomes: Vec<ScenarioOutcome>,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    scenario: &'a str,
    method: &'a str,
    seed: u64,
    policy: Option<&'a str>,
    k: Option<usize>,
    macro_accuracy: f64,
    micro_accuracy: f64,
    total_test: usize,
    classify_calls: u64,
    context_tokens: u64,
    secrecy_holds: bool,
    secrecy_witnesses: usize,
    ledger_events: usize,
}

#[derive(Serialize)]
struct CostRow<'a> {
    scenario: &'a str,
    seed: u64,
    #[serde(flatten)]
    tally: &'a CostTally,
}

#[derive(Serialize)]
struct LedgerRow<'a> {
    scenario: &'a str,
    seed: u64,
    #[serde(flatten)]
    event: &'a FlowEvent,
}

#[derive(Serialize)]
struct EntropyRow<'a> {
    scenario: &'a str,
    seed: u64,
    qualifying: usize,
    spearman: Option<f64>,
    warning: Option<&'a str>,
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn emit_reports(
    cfg: &RunConfig,
    dir: &Path,
    outcomes: &[ScenarioOutcome],
    analyses: &[(usize, EntropyAnalysis)],
) -> Result<()> {
    let mut metrics = Vec::new();
    for oc in outcomes {
        for v in &oc.variants {
            metrics.push(MetricsRow {
                scenario: &oc.scenario,
                method: oc.method_tag,
                seed: oc.seed,
                policy: v.policy.map(|p| p.name()),
                k: v.k,
                macro_accuracy: v.report.macro_accuracy,
                micro_accuracy: v.report.micro_accuracy,
                total_test: v.report.total_test,
                classify_calls: v.report.classify_calls,
                context_tokens: v.report.context_tokens,
                secrecy_holds: oc.secrecy.holds(),
                secrecy_witnesses: oc.secrecy.witness_count(),
                ledger_events: oc.ledger.len(),
            });
        }
    }
    write_text(
        &dir.join("metrics.json"),
        &(serde_json::to_string_pretty(&metrics)? + "\n"),
    )?;

    let costs: Vec<CostRow> = outcomes
        .iter()
        .map(|oc| CostRow { scenario: &oc.scenario, seed: oc.seed, tally: &oc.cost })
        .collect();
    write_text(&dir.join("cost.json"), &(serde_json::to_string_pretty(&costs)? + "\n"))?;

    let mut ledger_lines = String::new();
    for oc in outcomes {
        for event in oc.ledger.events() {
            let row = LedgerRow { scenario: &oc.scenario, seed: oc.seed, event };
            ledger_lines.push_str(&serde_json::to_string(&row)?);
            ledger_lines.push('\n');
        }
    }
    write_text(&dir.join("ledger.jsonl"), &ledger_lines)?;

    let mut per_user = csv::Writer::from_writer(Vec::new());
    per_user.write_record([
        "scenario", "seed", "policy", "k", "client_id", "n_train", "n_test",
        "accuracy", "demo_count",
    ])?;
    for oc in outcomes {
        for v in &oc.variants {
            for u in &v.report.per_user {
                per_user.write_record([
                    oc.scenario.clone(),
                    oc.seed.to_string(),
                    v.policy.map(|p| p.name().to_string()).unwrap_or_default(),
                    v.k.map(|k| k.to_string()).unwrap_or_default(),
                    u.client_id.clone(),
                    u.n_train.to_string(),
                    u.n_test.to_string(),
                    opt_f64(u.accuracy),
                    u.demo_count.to_string(),
                ])?;
            }
        }
    }
    let bytes = per_user.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    std::fs::write(dir.join("per_user.csv"), bytes)?;

    let mut per_class = csv::Writer::from_writer(Vec::new());
    per_class.write_record(["scenario", "seed", "policy", "k", "class", "support", "correct"])?;
    for oc in outcomes {
        for v in &oc.variants {
            for (class, stats) in &v.report.per_class {
                per_class.write_record([
                    oc.scenario.clone(),
                    oc.seed.to_string(),
                    v.policy.map(|p| p.name().to_string()).unwrap_or_default(),
                    v.k.map(|k| k.to_string()).unwrap_or_default(),
                    class.clone(),
                    stats.support.to_string(),
                    stats.correct.to_string(),
                ])?;
            }
        }
    }
    let bytes = per_class.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    std::fs::write(dir.join("per_class.csv"), bytes)?;

    let mut rounds = csv::Writer::from_writer(Vec::new());
    rounds.write_record([
        "scenario", "seed", "round", "clients", "loss", "bytes_up", "bytes_down", "flops",
    ])?;
    for oc in outcomes {
        for r in &oc.rounds {
            rounds.write_record([
                oc.scenario.clone(),
                oc.seed.to_string(),
                r.round.to_string(),
                r.clients.to_string(),
                r.loss.to_string(),
                r.bytes_up.to_string(),
                r.bytes_down.to_string(),
                r.flops.to_string(),
            ])?;
        }
    }
    let bytes = rounds.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    std::fs::write(dir.join("rounds.csv"), bytes)?;

    let entropy_rows: Vec<EntropyRow> = analyses
        .iter()
        .map(|(i, a)| EntropyRow {
            scenario: &outcomes[*i].scenario,
            seed: outcomes[*i].seed,
            qualifying: a.qualifying,
            spearman: a.spearman,
            warning: a.warning.as_deref(),
        })
        .collect();
    write_text(
        &dir.join("entropy.json"),
        &(serde_json::to_string_pretty(&entropy_rows)? + "\n"),
    )?;

    let mut by_k = csv::Writer::from_writer(Vec::new());
    by_k.write_record(["scenario", "seed", "policy", "k", "macro_accuracy", "micro_accuracy"])?;
    for oc in outcomes {
        for v in &oc.variants {
            let (Some(policy), Some(k)) = (v.policy, v.k) else { continue };
            by_k.write_record([
                oc.scenario.clone(),
                oc.seed.to_string(),
                policy.name().to_string(),
                k.to_string(),
                v.report.macro_accuracy.to_string(),
                v.report.micro_accuracy.to_string(),
            ])?;
        }
    }
    let bytes = by_k.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    std::fs::write(dir.join("plotdata").join("accuracy_by_k.csv"), bytes)?;

    let mut scatter = csv::Writer::from_writer(Vec::new());
    scatter.write_record(["scenario", "seed", "client_id", "n_train", "entropy_bits", "accuracy"])?;
    for (i, a) in analyses {
        for p in &a.points {
            scatter.write_record([
                outcomes[*i].scenario.clone(),
                outcomes[*i].seed.to_string(),
                p.client_id.clone(),
                p.n_train.to_string(),
                p.entropy_bits.to_string(),
                p.accuracy.to_string(),
            ])?;
        }
    }
    let bytes = scatter.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    std::fs::write(dir.join("plotdata").join("entropy_accuracy.csv"), bytes)?;

    let meta = serde_json::json!({
        "name": cfg.name,
        "created_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "seeds": cfg.seeds,
        "scenarios": cfg.scenarios.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        "config": cfg,
    });
    write_text(&dir.join("meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    Ok(())
}

/// Execute every scenario for every seed and write the artifact set.
pub fn run_all(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutputs> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("plotdata"))?;
    let mut outcomes = Vec::new();
    let mut analyses = Vec::new();
    for &seed in &cfg.seeds {
        let data = materialize(cfg, seed)?;
        for scenario in &cfg.scenarios {
            let oc = run_scenario(&data, cfg, scenario, seed)?;
            if let Some(first) = oc.variants.first() {
                if data.task.kind == TaskKind::Classification {
                    analyses.push((outcomes.len(), entropy_analysis(&data, &first.report)));
                }
            }
            outcomes.push(oc);
        }
    }
    emit_reports(cfg, out_dir, &outcomes, &analyses)?;
    Ok(RunOutputs { dir: out_dir.to_path_buf(), outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small_config() -> RunConfig {
        parse_config(
            &serde_json::json!({
                "name": "small",
                "seeds": [3],
                "data": {
                    "source": "synthetic_classification",
                    "spec": {
                        "num_classes": 3,
                        "vocab_per_class": 5,
                        "shared_vocab": 12,
                        "docs_per_class": 20,
                        "doc_len": 6,
                        "class_purity": 0.95
                    },
                    "partition": { "num_clients": 6, "mode": "dirichlet", "alpha": 0.5, "seed": 2 },
                    "task": { "id": "topic", "description": "name the topic" }
                },
                "backend": { "spec": { "params": 1000000, "bytes_per_param": 4, "max_input_len": 256 } },
                "scenarios": [
                    { "name": "zero", "method": "icl_zero_shot" },
                    { "name": "own3", "method": "icl_kshot", "policy": "user_privacy", "k": 3 },
                    { "name": "pool3", "method": "icl_kshot", "policy": "no_user_privacy", "k": 3 },
                    { "name": "fed", "method": "fl",
                      "fl": { "rounds": 2, "client_fraction": 1.0, "local_epochs": 1,
                               "lr": 0.5, "batch_size": 8, "kind": "logistic" } },
                    { "name": "solo", "method": "local_only",
                      "fl": { "rounds": 2, "client_fraction": 1.0, "local_epochs": 1,
                               "lr": 0.5, "batch_size": 8, "kind": "logistic" } }
                ]
            })
            .to_string(),
        )
        .unwrap()
    }

    #[test]
    fn materialization_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = materialize(&cfg, 3).unwrap();
        let b = materialize(&cfg, 3).unwrap();
        assert_eq!(a.silos.len(), 6);
        for (id, silo) in &a.silos {
            assert_eq!(silo.train("topic"), b.silos[id].train("topic"));
            assert_eq!(silo.test("topic"), b.silos[id].test("topic"));
        }
        let c = materialize(&cfg, 4).unwrap();
        assert!(a.silos.iter().any(|(id, s)| s.train("topic") != c.silos[id].train("topic")));
    }

    #[test]
    fn secrecy_verdicts_split_by_architecture() {
        let cfg = small_config();
        let data = materialize(&cfg, 3).unwrap();
        let by_name = |name: &str| {
            let sc = cfg.scenarios.iter().find(|s| s.name == name).unwrap();
            run_scenario(&data, &cfg, sc, 3).unwrap()
        };
        assert!(by_name("zero").secrecy.holds());
        assert!(by_name("own3").secrecy.holds());
        assert!(!by_name("pool3").secrecy.holds());
        assert!(!by_name("fed").secrecy.holds());
        assert!(by_name("solo").secrecy.holds());
        assert!(by_name("solo").ledger.is_empty());
    }

    #[test]
    fn run_artifacts_are_byte_identical_across_reruns() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_all(&cfg, &a).unwrap();
        run_all(&cfg, &b).unwrap();
        for name in ["metrics.json", "cost.json", "ledger.jsonl", "per_user.csv",
                     "per_class.csv", "rounds.csv", "entropy.json"] {
            let fa = std::fs::read(a.join(name)).unwrap();
            let fb = std::fs::read(b.join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs across reruns");
        }
    }

    #[test]
    fn zero_shot_rows_are_identical_across_policies_in_a_sweep() {
        let mut cfg = small_config();
        cfg.public_demos = vec![crate::fm::Demonstration {
            input: "sw0 sw1".into(),
            label: "c0".into(),
        }];
        cfg.scenarios = vec![Scenario {
            name: "sweep".into(),
            method: Method::PolicySweep {
                policies: vec![
                    DemoPolicy::UserPrivacy,
                    DemoPolicy::NoUserPrivacy,
                    DemoPolicy::Public,
                ],
                ks: vec![0, 2],
            },
        }];
        cfg.validate().unwrap();
        let data = materialize(&cfg, 3).unwrap();
        let oc = run_scenario(&data, &cfg, &cfg.scenarios[0], 3).unwrap();
        let zero_rows: Vec<&VariantResult> =
            oc.variants.iter().filter(|v| v.k == Some(0)).collect();
        assert_eq!(zero_rows.len(), 3);
        for v in &zero_rows[1..] {
            assert_eq!(v.report.micro_accuracy, zero_rows[0].report.micro_accuracy);
            assert_eq!(v.report.macro_accuracy, zero_rows[0].report.macro_accuracy);
        }
    }

    #[test]
    fn entropy_analysis_withholds_correlation_below_minimum_users() {
        let cfg = small_config();
        let data = materialize(&cfg, 3).unwrap();
        let sc = &cfg.scenarios[0];
        let oc = run_scenario(&data, &cfg, sc, 3).unwrap();
        let mut thin = data;
        thin.entropy_bits = thin
            .entropy_bits
            .iter()
            .enumerate()
            .map(|(i, (id, e))| (id.clone(), if i == 0 { *e } else { None }))
            .collect();
        let analysis = entropy_analysis(&thin, &oc.variants[0].report);
        assert!(analysis.qualifying < MIN_USERS_FOR_CORRELATION);
        assert!(analysis.spearman.is_none());
        assert!(analysis.warning.is_some());
    }
}
