//! Deterministic simulated generator.
//!
//! A [`SimWorld`] plants, for each query, a set of required facts and, for each
//! context, signed fact weights (support > 0, poison < 0). The simulated
//! generator answers correctly iff the supplied contexts cover every required
//! fact and the summed support weight strictly exceeds the summed poison
//! weight. Tags on facts outside the query's required set are irrelevant and
//! contribute nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityMode {
    /// Forced-answer score of the gold answer is the summed relevant weight.
    Additive,
    /// Forced-answer score is 0 for the emitted answer and a penalty otherwise.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTag {
    pub fact: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimQuery {
    pub answer: String,
    pub required: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub seed: u64,
    pub mode: UtilityMode,
    #[serde(default = "default_distractor")]
    pub distractor: String,
    pub facts: BTreeSet<String>,
    pub queries: BTreeMap<String, SimQuery>,
    pub contexts: BTreeMap<String, Vec<FactTag>>,
}

fn default_distractor() -> String {
    "I don't know".to_string()
}

/// Aggregate view of a context subset with respect to one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetView {
    pub covered: bool,
    pub support: f64,
    pub poison: f64,
    pub net: f64,
}

impl SubsetView {
    pub fn answers(&self) -> bool {
        self.covered && self.support > self.poison
    }
}

impl SimWorld {
    pub fn validate(&self) -> Result<()> {
        for (qid, q) in &self.queries {
            if q.required.is_empty() {
                return Err(Error::invariant(
                    "sim world",
                    format!("query {qid:?} has no required facts"),
                ));
            }
            if let Some(f) = q.required.iter().find(|f| !self.facts.contains(*f)) {
                return Err(Error::invariant(
                    "sim world",
                    format!("query {qid:?} requires unknown fact {f:?}"),
                ));
            }
            if q.answer.trim().is_empty() {
                return Err(Error::invariant(
                    "sim world",
                    format!("query {qid:?} has an empty answer"),
                ));
            }
        }
        for (cid, tags) in &self.contexts {
            for t in tags {
                if !t.weight.is_finite() {
                    return Err(Error::invariant(
                        "sim world",
                        format!("context {cid:?} has a non-finite weight"),
                    ));
                }
                if !self.facts.contains(&t.fact) {
                    return Err(Error::invariant(
                        "sim world",
                        format!("context {cid:?} tags unknown fact {:?}", t.fact),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: SimWorld = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            line: e.line(),
            source: e,
        })?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("world serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn query(&self, query_id: &str) -> Result<&SimQuery> {
        self.queries
            .get(query_id)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))
    }

    /// Summed weight of the context's tags on facts the query requires.
    pub fn relevant_weight(&self, query_id: &str, context_id: &str) -> Result<f64> {
        let q = self.query(query_id)?;
        let tags = self.tags(context_id)?;
        Ok(tags
            .iter()
            .filter(|t| q.required.contains(&t.fact))
            .map(|t| t.weight)
            .sum())
    }

    fn tags(&self, context_id: &str) -> Result<&[FactTag]> {
        self.contexts
            .get(context_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownContext(context_id.to_string()))
    }

    pub fn view<'a, I>(&self, query_id: &str, context_ids: I) -> Result<SubsetView>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let q = self.query(query_id)?;
        let mut covered_facts = BTreeSet::new();
        let (mut support, mut poison, mut net) = (0.0, 0.0, 0.0);
        for cid in context_ids {
            for t in self.tags(cid)? {
                if !q.required.contains(&t.fact) {
                    continue;
                }
                net += t.weight;
                if t.weight > 0.0 {
                    support += t.weight;
                    covered_facts.insert(t.fact.as_str());
                } else {
                    poison -= t.weight;
                }
            }
        }
        Ok(SubsetView {
            covered: q.required.iter().all(|f| covered_facts.contains(f.as_str())),
            support,
            poison,
            net,
        })
    }

    /// Text the simulated generator emits for this subset.
    pub fn respond<'a, I>(&self, query_id: &str, context_ids: I) -> Result<String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let view = self.view(query_id, context_ids)?;
        Ok(if view.answers() {
            self.query(query_id)?.answer.clone()
        } else {
            self.distractor.clone()
        })
    }

    /// Analytic forced-answer log-probability.
    pub fn forced_score<'a, I>(
        &self,
        query_id: &str,
        context_ids: I,
        answer: &str,
        penalty_per_token: f64,
    ) -> Result<f64>
    where
        I: IntoIterator<Item = &'a str> + Clone,
    {
        let penalty = penalty_per_token * answer.split_whitespace().count().max(1) as f64;
        let norm = normalize_answer(answer);
        match self.mode {
            UtilityMode::Threshold => {
                let emitted = self.respond(query_id, context_ids)?;
                Ok(if normalize_answer(&emitted) == norm {
                    0.0
                } else {
                    penalty
                })
            }
            UtilityMode::Additive => {
                let q = self.query(query_id)?;
                let view = self.view(query_id, context_ids)?;
                Ok(if normalize_answer(&q.answer) == norm {
                    view.net
                } else {
                    penalty
                })
            }
        }
    }
}

/// Brute-force utility straight from the planted structure: the summed relevant
/// weight in additive mode, the 0/1 answer condition in threshold mode.
pub fn sim_exact_utility(query_id: &str, subset: &[&str], world: &SimWorld) -> Result<f64> {
    let view = world.view(query_id, subset.iter().copied())?;
    Ok(match world.mode {
        UtilityMode::Additive => view.net,
        UtilityMode::Threshold => {
            if view.answers() {
                1.0
            } else {
                0.0
            }
        }
    })
}
