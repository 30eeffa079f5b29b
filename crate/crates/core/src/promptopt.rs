//! Prompt-procedure refinements that run entirely on the device: content-free
//! score calibration and two-stage label-space decomposition.

use rand::seq::SliceRandom;

use crate::domain::LabelSchema;
use crate::fm::{FoundationModel, PromptParts};
use crate::rng::rng_for;
use crate::stats::{argmax, softmax};
use crate::{Error, Result};

const TAG_GROUPS: u64 = 0x96;

// --------------------------------------------------------------------------
// Content-free calibration
// --------------------------------------------------------------------------

/// Mean class scores over content-free probe inputs, queried zero-shot with
/// the task description in place. An empty probe list means the single empty
/// string.
pub fn estimate_content_free(
    fm: &dyn FoundationModel,
    schema: &LabelSchema,
    description: &str,
    cf_inputs: &[String],
) -> Result<Vec<f64>> {
    let empty = [String::new()];
    let probes: &[String] = if cf_inputs.is_empty() { &empty } else { cf_inputs };
    let parts = PromptParts::zero_shot(description);
    let mut mean = vec![0.0; schema.classes.len()];
    for probe in probes {
        let scores = fm.class_scores(&parts, probe, schema)?;
        if scores.len() != mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "backend returned {} scores for {} classes",
                scores.len(),
                mean.len()
            )));
        }
        for (m, s) in mean.iter_mut().zip(&scores) {
            *m += s / probes.len() as f64;
        }
    }
    Ok(mean)
}

/// Diagonal affine correction fit to a content-free score vector: class k is
/// rescaled by 1 / p_cf[k] and the result renormalized through a softmax. If
/// the backend scores the probes uniformly this is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator {
    w: Vec<f64>,
}

pub fn build_calibrator(p_cf: &[f64]) -> Result<Calibrator> {
    if p_cf.is_empty() {
        return Err(Error::DegenerateCalibration("empty content-free scores".into()));
    }
    let mut w = Vec::with_capacity(p_cf.len());
    for (i, &p) in p_cf.iter().enumerate() {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::DegenerateCalibration(format!(
                "content-free score for class {i} is {p}"
            )));
        }
        w.push(1.0 / p);
    }
    Ok(Calibrator { w })
}

impl Calibrator {
    pub fn num_classes(&self) -> usize {
        self.w.len()
    }

    pub fn calibrate(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.w.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores against a {}-class calibrator",
                scores.len(),
                self.w.len()
            )));
        }
        Ok(softmax(
            &scores.iter().zip(&self.w).map(|(s, w)| s * w).collect::<Vec<f64>>(),
        ))
    }
}

// --------------------------------------------------------------------------
// Label-space decomposition
// --------------------------------------------------------------------------

/// A seeded split of the label space into groups of at most `group_size`,
/// with any smaller remainder group last.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrouping {
    pub groups: Vec<Vec<String>>,
}

pub fn partition_label_groups(
    schema: &LabelSchema,
    group_size: usize,
    seed: u64,
) -> Result<LabelGrouping> {
    if group_size < 2 {
        return Err(Error::BadGrouping(format!("group size {group_size} below 2")));
    }
    let mut labels = schema.classes.clone();
    let mut rng = rng_for(seed, &[TAG_GROUPS]);
    labels.shuffle(&mut rng);
    let groups = labels.chunks(group_size).map(|c| c.to_vec()).collect();
    Ok(LabelGrouping { groups })
}

impl LabelGrouping {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Scorer invocations a decomposed query costs: one per group plus the
    /// runoff, except that a single group needs no runoff.
    pub fn calls_per_query(&self) -> u64 {
        if self.groups.len() == 1 {
            1
        } else {
            self.groups.len() as u64 + 1
        }
    }
}

/// Classify in two stages: argmax within each label group, then a runoff
/// among the group winners. With a calibrator, scores are corrected at both
/// stages using the matching slices of the content-free vector. Returns the
/// winning class and the number of scorer calls spent.
pub fn decomposed_classify(
    fm: &dyn FoundationModel,
    grouping: &LabelGrouping,
    parts: &PromptParts,
    input: &str,
    schema: &LabelSchema,
    calibration: Option<(&Calibrator, &[f64])>,
) -> Result<(String, u64)> {
    if grouping.groups.is_empty() {
        return Err(Error::BadGrouping("no label groups".into()));
    }
    if let Some((cal, p_cf)) = calibration {
        if cal.num_classes() != schema.classes.len() || p_cf.len() != schema.classes.len() {
            return Err(Error::ShapeMismatch(
                "calibrator does not cover the full label space".into(),
            ));
        }
    }

    let score_subset = |labels: &[String], calls: &mut u64| -> Result<Vec<f64>> {
        let sub = schema.restrict(labels)?;
        let raw = fm.class_scores(parts, input, &sub)?;
        *calls += 1;
        match calibration {
            None => Ok(raw),
            Some((_, p_cf)) => {
                let slice: Vec<f64> = labels
                    .iter()
                    .map(|l| {
                        let i = schema
                            .class_index(l)
                            .ok_or_else(|| Error::UnknownClass(l.clone()))?;
                        Ok(p_cf[i])
                    })
                    .collect::<Result<_>>()?;
                let cal = build_calibrator(&slice)?;
                cal.calibrate(&raw)
            }
        }
    };

    let mut calls = 0u64;
    if grouping.groups.len() == 1 {
        let scores = score_subset(&grouping.groups[0], &mut calls)?;
        let i = argmax(&scores).ok_or(Error::BadGrouping("empty label group".into()))?;
        return Ok((grouping.groups[0][i].clone(), calls));
    }

    let mut finalists = Vec::with_capacity(grouping.groups.len());
    for group in &grouping.groups {
        let scores = score_subset(group, &mut calls)?;
        let i = argmax(&scores).ok_or(Error::BadGrouping("empty label group".into()))?;
        finalists.push(group[i].clone());
    }
    let scores = score_subset(&finalists, &mut calls)?;
    let i = argmax(&scores).ok_or(Error::BadGrouping("empty runoff".into()))?;
    Ok((finalists[i].clone(), calls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::collections::BTreeMap;

    use crate::fm::MockFm;

    fn schema_of(n: usize) -> LabelSchema {
        LabelSchema::classification((0..n).map(|i| format!("c{i:02}")).collect()).unwrap()
    }

    // --- calibration ---

    #[test]
    fn calibration_hand_check() {
        let cal = build_calibrator(&[0.8, 0.2]).unwrap();
        let q = cal.calibrate(&[0.9, 0.1]).unwrap();
        let expect = softmax(&[0.9 / 0.8, 0.1 / 0.2]);
        assert_relative_eq!(q[0], expect[0], max_relative = 1e-12);
        assert!((q[0] - 0.6514).abs() < 1e-4, "{}", q[0]);
        assert!((q[1] - 0.3486).abs() < 1e-4, "{}", q[1]);
    }

    #[test]
    fn content_free_scores_calibrate_to_uniform() {
        let p_cf = vec![0.55, 0.3, 0.15];
        let cal = build_calibrator(&p_cf).unwrap();
        let q = cal.calibrate(&p_cf).unwrap();
        for v in q {
            assert!((v - 1.0 / 3.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn uniform_rescaling_never_moves_the_argmax() {
        let mut rng = rng_for(3, &[0xca1]);
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let c = rng.random::<f64>() * 4.0 + 0.1;
            let cal = build_calibrator(&vec![1.0 / c; n]).unwrap();
            let q = cal.calibrate(&p).unwrap();
            assert_eq!(argmax(&p), argmax(&q));
        }
    }

    #[test]
    fn degenerate_content_free_scores_are_refused() {
        assert!(build_calibrator(&[]).is_err());
        assert!(build_calibrator(&[0.5, 0.0]).is_err());
        assert!(build_calibrator(&[0.5, f64::NAN]).is_err());
        assert!(build_calibrator(&[0.5, f64::INFINITY]).is_err());
        assert!(build_calibrator(&[0.5, -0.1]).is_err());
    }

    #[test]
    fn probe_mean_comes_from_zero_shot_scores() {
        let schema = schema_of(2);
        let fm = MockFm::new()
            .script_scores("", vec![0.9, 0.1])
            .script_scores("na", vec![0.7, 0.3]);
        let p = estimate_content_free(&fm, &schema, "d", &[]).unwrap();
        assert_eq!(p, vec![0.9, 0.1]);
        let p2 = estimate_content_free(
            &fm,
            &schema,
            "d",
            &["".to_string(), "na".to_string()],
        )
        .unwrap();
        assert_relative_eq!(p2[0], 0.8, max_relative = 1e-12);
        assert_relative_eq!(p2[1], 0.2, max_relative = 1e-12);
    }

    // --- grouping ---

    #[test]
    fn grouping_covers_labels_with_remainder_last() {
        let schema = schema_of(10);
        let g = partition_label_groups(&schema, 4, 7).unwrap();
        assert_eq!(g.groups.len(), 3);
        assert_eq!(g.groups[0].len(), 4);
        assert_eq!(g.groups[1].len(), 4);
        assert_eq!(g.groups[2].len(), 2);
        let mut all: Vec<String> = g.groups.concat();
        all.sort();
        assert_eq!(all, schema.classes);
    }

    #[test]
    fn grouping_is_seeded() {
        let schema = schema_of(12);
        let a = partition_label_groups(&schema, 5, 1).unwrap();
        let b = partition_label_groups(&schema, 5, 1).unwrap();
        let c = partition_label_groups(&schema, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn group_size_below_two_is_refused() {
        let schema = schema_of(4);
        assert!(partition_label_groups(&schema, 1, 0).is_err());
    }

    // --- decomposition ---

    fn strengths_mock(n: usize, seed: u64) -> (MockFm, LabelSchema, Vec<f64>) {
        let schema = schema_of(n);
        let mut rng = rng_for(seed, &[0x57e]);
        let mut strengths = BTreeMap::new();
        let mut raw = Vec::with_capacity(n);
        for c in &schema.classes {
            let v = rng.random::<f64>() + 0.05;
            strengths.insert(c.clone(), v);
            raw.push(v);
        }
        let z: f64 = raw.iter().sum();
        let full: Vec<f64> = raw.iter().map(|v| v / z).collect();
        (MockFm::new().with_strengths(strengths), schema, full)
    }

    #[test]
    fn twenty_labels_in_groups_of_four_cost_six_calls() {
        let (fm, schema, _) = strengths_mock(20, 1);
        let grouping = partition_label_groups(&schema, 4, 3).unwrap();
        assert_eq!(grouping.calls_per_query(), 6);
        let parts = PromptParts::zero_shot("");
        let (_, calls) =
            decomposed_classify(&fm, &grouping, &parts, "x", &schema, None).unwrap();
        assert_eq!(calls, 6);
        assert_eq!(fm.score_call_count(), 6);
    }

    #[test]
    fn single_group_equals_direct_scoring_with_one_call() {
        let (fm, schema, full) = strengths_mock(5, 2);
        let grouping = partition_label_groups(&schema, 8, 3).unwrap();
        assert_eq!(grouping.num_groups(), 1);
        let parts = PromptParts::zero_shot("");
        let (winner, calls) =
            decomposed_classify(&fm, &grouping, &parts, "x", &schema, None).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(winner, schema.classes[argmax(&full).unwrap()]);
    }

    #[test]
    fn decomposition_recovers_the_direct_argmax() {
        for seed in 0..20 {
            let (fm, schema, full) = strengths_mock(12, seed);
            let grouping = partition_label_groups(&schema, 4, seed + 100).unwrap();
            let parts = PromptParts::zero_shot("");
            let (winner, calls) =
                decomposed_classify(&fm, &grouping, &parts, "x", &schema, None).unwrap();
            assert_eq!(winner, schema.classes[argmax(&full).unwrap()], "seed {seed}");
            assert_eq!(calls, 4);
        }
    }

    #[test]
    fn calibrated_decomposition_recovers_the_calibrated_argmax() {
        for seed in 0..10 {
            let (fm, schema, full) = strengths_mock(9, seed);
            let mut rng = rng_for(seed, &[0xcf]);
            let p_cf: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 0.1).collect();
            let cal = build_calibrator(&p_cf).unwrap();
            let direct = cal.calibrate(&full).unwrap();
            let grouping = partition_label_groups(&schema, 3, seed + 50).unwrap();
            let parts = PromptParts::zero_shot("");
            let (winner, calls) = decomposed_classify(
                &fm,
                &grouping,
                &parts,
                "x",
                &schema,
                Some((&cal, &p_cf)),
            )
            .unwrap();
            assert_eq!(calls, 4);
            assert_eq!(
                winner,
                schema.classes[argmax(&direct).unwrap()],
                "seed {seed}"
            );
        }
    }
}
