//! Domain vocabulary shared by every other module.
//!
//! Values are plain data: construct them, run [`validate_sample`], then share
//! them freely. The JSON Lines wire form of a [`Sample`] is
//! `{"id", "query", "answers", "contexts", "ci"?, "meta"?}`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Gold answer aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerSet {
    pub answers: Vec<String>,
}

impl AnswerSet {
    pub fn new<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            answers: answers.into_iter().map(Into::into).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.answers.iter().map(String::as_str)
    }

    /// The first alias, used as the canonical gold text.
    pub fn primary(&self) -> Option<&str> {
        self.answers.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl Context {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            origin: None,
        }
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = Some(origin.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextList {
    pub contexts: Vec<Context>,
}

impl ContextList {
    pub fn new(contexts: Vec<Context>) -> Self {
        Self { contexts }
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Context> {
        self.contexts.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + Clone {
        self.contexts.iter().map(|c| c.id.as_str())
    }

    /// Sub-list made of the given indices, in the order the indices are listed.
    pub fn pick(&self, indices: &[usize]) -> ContextList {
        ContextList::new(indices.iter().map(|&i| self.contexts[i].clone()).collect())
    }

    /// The list with one position removed.
    pub fn without(&self, index: usize) -> ContextList {
        let mut contexts = self.contexts.clone();
        contexts.remove(index);
        ContextList::new(contexts)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.contexts.iter().position(|c| c.id == id)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.len());
        for c in &self.contexts {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::invariant("contexts", format!("duplicate id {:?}", c.id)));
            }
            if c.text.trim().is_empty() {
                return Err(Error::invariant(
                    "contexts",
                    format!("context {:?} has empty text", c.id),
                ));
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ContextList {
    type Item = &'a Context;
    type IntoIter = std::slice::Iter<'a, Context>;

    fn into_iter(self) -> Self::IntoIter {
        self.contexts.iter()
    }
}

impl FromIterator<Context> for ContextList {
    fn from_iter<T: IntoIterator<Item = Context>>(iter: T) -> Self {
        ContextList::new(iter.into_iter().collect())
    }
}

/// Per-context influence values, index-aligned with a [`ContextList`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CIVector {
    pub values: Vec<f64>,
}

impl CIVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Errors when the vector is not aligned with `n` contexts or holds a non-finite value.
    pub fn check_aligned(&self, n: usize) -> Result<()> {
        if self.values.len() != n {
            return Err(Error::LengthMismatch {
                what: "ci values vs contexts",
                left: self.values.len(),
                right: n,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invariant("ci", format!("value at index {i} is not finite")));
        }
        Ok(())
    }
}

pub type Meta = BTreeMap<String, serde_json::Value>;

/// One valuation unit: query, gold answers, ordered contexts and optional CI values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SampleRecord", into = "SampleRecord")]
pub struct Sample {
    pub query: Query,
    pub answers: AnswerSet,
    pub contexts: ContextList,
    pub ci: Option<CIVector>,
    pub meta: Meta,
}

impl Sample {
    pub fn new(query: Query, answers: AnswerSet, contexts: ContextList) -> Self {
        Self {
            query,
            answers,
            contexts,
            ci: None,
            meta: Meta::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.query.id
    }

    pub fn with_ci(mut self, ci: CIVector) -> Self {
        self.ci = Some(ci);
        self
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    query: String,
    answers: Vec<String>,
    contexts: Vec<Context>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ci: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: Meta,
}

impl From<SampleRecord> for Sample {
    fn from(r: SampleRecord) -> Self {
        Sample {
            query: Query::new(r.id, r.query),
            answers: AnswerSet::new(r.answers),
            contexts: ContextList::new(r.contexts),
            ci: r.ci.map(CIVector::new),
            meta: r.meta,
        }
    }
}

impl From<Sample> for SampleRecord {
    fn from(s: Sample) -> Self {
        SampleRecord {
            id: s.query.id,
            query: s.query.text,
            answers: s.answers.answers,
            contexts: s.contexts.contexts,
            ci: s.ci.map(|c| c.values),
            meta: s.meta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    PositiveCi,
    TopK,
    ExternalScore,
    Random,
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionStrategy::PositiveCi => "positive-ci",
            SelectionStrategy::TopK => "top-k",
            SelectionStrategy::ExternalScore => "external-score",
            SelectionStrategy::Random => "random",
        })
    }
}

/// Contexts kept by a selection rule, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub kept_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub strategy: SelectionStrategy,
}

impl SelectionResult {
    /// Builds a result from kept positions; `indices` must be ascending and distinct.
    pub fn from_indices(
        contexts: &ContextList,
        indices: &[usize],
        scores: &[f64],
        strategy: SelectionStrategy,
    ) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self {
            kept_ids: indices.iter().map(|&i| contexts.contexts[i].id.clone()).collect(),
            scores: indices.iter().map(|&i| scores[i]).collect(),
            strategy,
        }
    }

    /// The kept contexts, resolved against the list the selection was made from.
    pub fn kept(&self, contexts: &ContextList) -> ContextList {
        contexts
            .iter()
            .filter(|c| self.kept_ids.contains(&c.id))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.kept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_ids.is_empty()
    }
}

/// Checks every type invariant and hands the sample back unchanged.
pub fn validate_sample(sample: Sample) -> Result<Sample> {
    if sample.query.id.is_empty() {
        return Err(Error::invariant("id", "empty sample id"));
    }
    if sample.query.text.trim().is_empty() {
        return Err(Error::invariant("query", "empty query text"));
    }
    if sample.answers.answers.is_empty() {
        return Err(Error::invariant("answers", "answer set is empty"));
    }
    let mut seen = HashSet::new();
    for a in &sample.answers.answers {
        if a.trim().is_empty() {
            return Err(Error::invariant("answers", "empty answer alias"));
        }
        if !seen.insert(normalize_answer(a)) {
            return Err(Error::invariant(
                "answers",
                format!("alias {a:?} duplicates another after normalization"),
            ));
        }
    }
    sample.contexts.check()?;
    if let Some(ci) = &sample.ci {
        ci.check_aligned(sample.contexts.len())?;
    }
    Ok(sample)
}

/// Validates each sample and additionally requires sample ids to be unique.
pub fn validate_dataset(samples: Vec<Sample>) -> Result<Vec<Sample>> {
    let mut ids = HashSet::new();
    samples
        .into_iter()
        .map(|s| {
            let s = validate_sample(s)?;
            if !ids.insert(s.query.id.clone()) {
                return Err(Error::invariant("id", format!("duplicate sample id {:?}", s.query.id)));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Sample {
        Sample::new(
            Query::new("q1", "who won the 2016 election?"),
            AnswerSet::new(["Donald Trump"]),
            ContextList::new(vec![Context::new("c1", "alpha"), Context::new("c2", "beta")]),
        )
    }

    #[test]
    fn well_formed_sample_passes_unchanged() {
        let s = sample();
        assert_eq!(validate_sample(s.clone()).unwrap(), s);
    }

    #[test]
    fn duplicate_context_id_rejected() {
        let mut s = sample();
        s.contexts.contexts[1].id = "c1".into();
        let err = validate_sample(s).unwrap_err().to_string();
        assert!(err.contains("duplicate id"), "{err}");
    }

    #[test]
    fn misaligned_ci_rejected() {
        let s = sample().with_ci(CIVector::new(vec![0.1]));
        let err = validate_sample(s).unwrap_err().to_string();
        assert!(err.contains("length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_ci_rejected() {
        let s = sample().with_ci(CIVector::new(vec![0.1, f64::NAN]));
        assert!(validate_sample(s).is_err());
    }

    #[test]
    fn blank_query_and_alias_collisions_rejected() {
        let mut s = sample();
        s.query.text = "   ".into();
        assert!(validate_sample(s).is_err());

        let mut s = sample();
        s.answers = AnswerSet::new(["The Beatles", "beatles."]);
        assert!(validate_sample(s).is_err());

        let mut s = sample();
        s.answers = AnswerSet::new(Vec::<String>::new());
        assert!(validate_sample(s).is_err());
    }

    #[test]
    fn dataset_rejects_repeated_sample_ids() {
        assert!(validate_dataset(vec![sample(), sample()]).is_err());
    }

    #[test]
    fn wire_field_names() {
        let mut s = sample().with_ci(CIVector::new(vec![0.5, -0.25]));
        s.contexts.contexts[0].origin = Some("wiki".into());
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["id"], "q1");
        assert_eq!(json["query"], "who won the 2016 election?");
        assert_eq!(json["answers"][0], "Donald Trump");
        assert_eq!(json["contexts"][0]["origin"], "wiki");
        assert!(json["contexts"][1].get("origin").is_none());
        assert_eq!(json["ci"][1], -0.25);
        assert!(json.get("meta").is_none());
    }

    #[test]
    fn selection_keeps_input_order() {
        let s = sample();
        let r = SelectionResult::from_indices(&s.contexts, &[1], &[0.2, 0.7], SelectionStrategy::TopK);
        assert_eq!(r.kept_ids, vec!["c2"]);
        assert_eq!(r.scores, vec![0.7]);
        assert_eq!(r.kept(&s.contexts).len(), 1);
        assert_eq!(serde_json::to_value(r.strategy).unwrap(), "top-k");
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (
            "[a-z0-9]{1,8}",
            "[a-z ]{0,12}[a-z]",
            proptest::collection::vec("[a-z]{1,6}", 1..4),
            proptest::collection::vec(("[a-z ]{0,10}[a-z]", -10.0f64..10.0), 0..6),
            any::<bool>(),
        )
            .prop_map(|(id, q, answers, ctx, with_ci)| {
                let contexts: ContextList = ctx
                    .iter()
                    .enumerate()
                    .map(|(i, (t, _))| Context::new(format!("c{i}"), t.clone()))
                    .collect();
                let mut answers: Vec<String> = answers;
                answers.sort();
                answers.dedup();
                let mut s = Sample::new(Query::new(id, q), AnswerSet::new(answers), contexts);
                if with_ci {
                    s.ci = Some(CIVector::new(ctx.iter().map(|(_, v)| *v).collect()));
                }
                s.meta.insert("cluster".into(), serde_json::json!("k"));
                s
            })
    }

    proptest! {
        #[test]
        fn json_round_trip(s in arb_sample()) {
            let line = serde_json::to_string(&s).unwrap();
            let back: Sample = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn validation_is_idempotent(s in arb_sample()) {
            let once = validate_sample(s.clone());
            if let Ok(v) = once {
                prop_assert_eq!(validate_sample(v.clone()).unwrap(), v);
            }
        }
    }
}
