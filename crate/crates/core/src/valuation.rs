//! Leave-one-out contextual influence.
//!
//! For a deduplicated context list `C`, the influence of `c_i` is
//! `v(C) - v(C \ c_i)`, where `v` is a utility of the generator's output.
//! Summing influences gives a group score whose maximizing subset is exactly
//! the set of strictly positive contexts, so selection needs no top-k.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::metrics::{normalize_answer, MetricKind};
use crate::types::{AnswerSet, CIVector, ContextList, Query, Sample, SelectionResult, SelectionStrategy};

pub const DEFAULT_DEDUP_COSINE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityKind {
    /// Max over aliases of the answer's forced log-probability (negated cross-entropy).
    CrossEntropy,
    /// A task metric applied to the generated text.
    Metric(MetricKind),
}

impl UtilityKind {
    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::CrossEntropy => "cross-entropy",
            UtilityKind::Metric(m) => m.name(),
        }
    }
}

impl std::str::FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(UtilityKind::CrossEntropy),
            other => other.parse().map(UtilityKind::Metric),
        }
    }
}

impl Serialize for UtilityKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for UtilityKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn utility(
    subset: &ContextList,
    query: &Query,
    answers: &AnswerSet,
    kind: UtilityKind,
    gateway: &Gateway,
) -> Result<f64> {
    match kind {
        UtilityKind::CrossEntropy => gateway.score_best_alias(query, subset, answers),
        UtilityKind::Metric(metric) => {
            let resp = gateway.generate(query, subset)?;
            Ok(metric.score(&resp.text, answers))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DedupPolicy {
    /// Equal after answer-style normalization.
    NormalizedText,
    /// Cosine similarity of caller-supplied vectors (aligned with the list) at or above `threshold`.
    Embedding { vectors: Vec<Vec<f64>>, threshold: f64 },
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Positions kept by [`dedup`]: the first member of every duplicate group.
pub fn dedup_indices(contexts: &ContextList, policy: &DedupPolicy) -> Result<Vec<usize>> {
    match policy {
        DedupPolicy::NormalizedText => {
            let mut seen = HashSet::new();
            Ok((0..contexts.len())
                .filter(|&i| seen.insert(normalize_answer(&contexts.contexts[i].text)))
                .collect())
        }
        DedupPolicy::Embedding { vectors, threshold } => {
            if vectors.len() != contexts.len() {
                return Err(Error::InvalidArgument(format!(
                    "embedding dedup needs one vector per context ({} vectors for {} contexts)",
                    vectors.len(),
                    contexts.len()
                )));
            }
            let mut kept: Vec<usize> = Vec::new();
            for i in 0..contexts.len() {
                if kept.iter().all(|&k| cosine(&vectors[k], &vectors[i]) < *threshold) {
                    kept.push(i);
                }
            }
            Ok(kept)
        }
    }
}

pub fn dedup(contexts: &ContextList, policy: &DedupPolicy) -> Result<ContextList> {
    Ok(contexts.pick(&dedup_indices(contexts, policy)?))
}

/// Influence values together with the deduplicated list they are aligned to.
#[derive(Debug, Clone, PartialEq)]
pub struct CiValuation {
    pub contexts: ContextList,
    pub ci: CIVector,
}

/// Influence of every context, after text-normalized deduplication.
pub fn ci_values(sample: &Sample, kind: UtilityKind, gateway: &Gateway) -> Result<CiValuation> {
    ci_values_with(sample, kind, gateway, &DedupPolicy::NormalizedText)
}

/// Exactly `n + 1` utility evaluations: the full list, then each leave-one-out list.
pub fn ci_values_with(
    sample: &Sample,
    kind: UtilityKind,
    gateway: &Gateway,
    policy: &DedupPolicy,
) -> Result<CiValuation> {
    let contexts = dedup(&sample.contexts, policy)?;
    let n = contexts.len();
    if n == 0 {
        return Ok(CiValuation {
            contexts,
            ci: CIVector::default(),
        });
    }
    // index n is the full list, index i < n drops context i
    let utilities: Vec<f64> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let subset = if i == n { contexts.clone() } else { contexts.without(i) };
            utility(&subset, &sample.query, &sample.answers, kind, gateway)
        })
        .collect::<Result<_>>()?;
    let full = utilities[n];
    let values = utilities[..n].iter().map(|u| full - u).collect();
    Ok(CiValuation {
        contexts,
        ci: CIVector::new(values),
    })
}

/// The sample with its deduplicated contexts and freshly computed influence values.
pub fn value_sample(sample: &Sample, kind: UtilityKind, gateway: &Gateway) -> Result<Sample> {
    let CiValuation { contexts, ci } = ci_values(sample, kind, gateway)?;
    let mut out = sample.clone();
    out.contexts = contexts;
    out.ci = Some(ci);
    out.meta.insert("utility".into(), serde_json::json!(kind.name()));
    Ok(out)
}

fn check_scores(contexts: &ContextList, scores: &[f64]) -> Result<()> {
    if contexts.len() != scores.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs contexts",
            left: scores.len(),
            right: contexts.len(),
        });
    }
    Ok(())
}

/// Keeps contexts whose score is strictly above `threshold`, in input order.
pub fn select_above(
    contexts: &ContextList,
    scores: &[f64],
    threshold: f64,
    strategy: SelectionStrategy,
) -> Result<SelectionResult> {
    check_scores(contexts, scores)?;
    let kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > threshold).collect();
    Ok(SelectionResult::from_indices(contexts, &kept, scores, strategy))
}

/// Keeps every context with a strictly positive influence value.
pub fn select_positive(contexts: &ContextList, ci: &CIVector) -> Result<SelectionResult> {
    select_above(contexts, ci.as_slice(), 0.0, SelectionStrategy::PositiveCi)
}

/// Summed influence of a group of distinct positions.
pub fn group_influence(ci: &CIVector, members: &[usize]) -> Result<f64> {
    let mut seen = HashSet::with_capacity(members.len());
    let mut total = 0.0;
    for &m in members {
        if m >= ci.len() {
            return Err(Error::IndexOutOfRange {
                index: m,
                len: ci.len(),
            });
        }
        if !seen.insert(m) {
            return Err(Error::InvalidArgument(format!("member {m} listed twice")));
        }
        total += ci.values[m];
    }
    Ok(total)
}

/// Positions ranked by score, highest first; ties go to the lower position.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Positions ranked by score, lowest first; ties go to the lower position.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

pub fn top_k_select(contexts: &ContextList, scores: &[f64], k: usize) -> Result<SelectionResult> {
    top_k_select_as(contexts, scores, k, SelectionStrategy::TopK)
}

pub fn top_k_select_as(
    contexts: &ContextList,
    scores: &[f64],
    k: usize,
    strategy: SelectionStrategy,
) -> Result<SelectionResult> {
    check_scores(contexts, scores)?;
    let mut kept: Vec<usize> = rank_descending(scores).into_iter().take(k).collect();
    kept.sort_unstable();
    Ok(SelectionResult::from_indices(contexts, &kept, scores, strategy))
}

/// Divides by the largest magnitude so values land in [-1, 1]; all-zero input stays zero.
pub fn scale_ci(values: &[f64]) -> Vec<f64> {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return values.to_vec();
    }
    values.iter().map(|v| v / max_abs).collect()
}

/// Dataset-wide [`scale_ci`] over every sample's CI vector. Returns the divisor used.
pub fn scale_dataset(samples: &mut [Sample]) -> f64 {
    let max_abs = samples
        .iter()
        .filter_map(|s| s.ci.as_ref())
        .flat_map(|c| c.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        for ci in samples.iter_mut().filter_map(|s| s.ci.as_mut()) {
            for v in &mut ci.values {
                *v /= max_abs;
            }
        }
    }
    max_abs
}
