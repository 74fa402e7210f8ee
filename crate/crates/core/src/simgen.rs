//! Seeded synthetic worlds for the simulated generator.
//!
//! All planted weights are multiples of 1/64, so every subset sum is exact
//! in binary floating point and leave-one-out differences recover the
//! planted weights bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csm::{gelu, CsmMetadata, CsmWeights, EmbeddingRecord, Linear};
use crate::error::{Error, Result};
use crate::gateway::{FactTag, SimQuery, SimWorld, UtilityMode};
use crate::seeding::rng_for;
use crate::types::{AnswerSet, Context, ContextList, Query, Sample};

const UNIT: f64 = 1.0 / 64.0;

const WORDS: &[&str] = &[
    "harbor", "ledger", "granite", "orchid", "meadow", "lantern", "copper", "falcon", "willow", "summit", "cobalt",
    "ember", "glacier", "thistle", "quarry", "saffron", "beacon", "cedar", "marble", "tundra",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub samples: usize,
    pub mode: UtilityMode,
    pub min_contexts: usize,
    pub max_contexts: usize,
    pub max_facts: usize,
    /// Chance that a filler context is extra support.
    pub support_rate: f64,
    /// Chance that a filler context is poison.
    pub poison_rate: f64,
    /// Chance that a query is missing support for one required fact.
    pub unanswerable_rate: f64,
    /// Consecutive queries sharing one `cluster` meta tag.
    pub cluster_size: usize,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            samples: 50,
            mode: UtilityMode::Additive,
            min_contexts: 6,
            max_contexts: 12,
            max_facts: 2,
            support_rate: 0.2,
            poison_rate: 0.25,
            unanswerable_rate: 0.1,
            cluster_size: 2,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFixture {
    pub world: SimWorld,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy)]
enum Role {
    Support(usize, i64),
    Poison(usize, i64),
    Noise,
}

struct Builder {
    world: SimWorld,
    samples: Vec<Sample>,
}

impl Builder {
    fn new(mode: UtilityMode, seed: u64) -> Self {
        Self {
            world: SimWorld {
                seed,
                mode,
                distractor: "I don't know".into(),
                facts: BTreeSet::new(),
                queries: BTreeMap::new(),
                contexts: BTreeMap::new(),
            },
            samples: Vec::new(),
        }
    }

    fn push(&mut self, index: usize, fact_count: usize, roles: &[Role], cluster: &str, rng: &mut ChaCha8Rng) {
        let qid = format!("q{index:04}");
        let facts: Vec<String> = (0..fact_count).map(|f| format!("{qid}.f{f}")).collect();
        let background = format!("{qid}.bg");
        self.world.facts.extend(facts.iter().cloned());
        self.world.facts.insert(background.clone());
        let answer = format!("{}{index}", capitalize(WORDS[index % WORDS.len()]));
        self.world.queries.insert(
            qid.clone(),
            SimQuery {
                answer: answer.clone(),
                required: facts.iter().cloned().collect(),
            },
        );
        let topic = WORDS[rng.random_range(0..WORDS.len())];
        let contexts: ContextList = roles
            .iter()
            .enumerate()
            .map(|(j, role)| {
                let cid = format!("{qid}.c{j:02}");
                let tag = match *role {
                    Role::Support(f, units) => FactTag {
                        fact: facts[f].clone(),
                        weight: units as f64 * UNIT,
                    },
                    Role::Poison(f, units) => FactTag {
                        fact: facts[f].clone(),
                        weight: -(units as f64) * UNIT,
                    },
                    Role::Noise => FactTag {
                        fact: background.clone(),
                        weight: rng.random_range(1..=16) as f64 * UNIT,
                    },
                };
                self.world.contexts.insert(cid.clone(), vec![tag]);
                let filler: Vec<&str> = (0..4).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
                Context::new(cid.clone(), format!("Passage {cid} on {topic}: {}.", filler.join(" ")))
            })
            .collect();
        let query = Query::new(&qid, format!("Which {topic} record is linked to entry {index}?"));
        let mut sample = Sample::new(
            query,
            AnswerSet::new([answer.clone(), format!("the {} {index}", WORDS[index % WORDS.len()])]),
            contexts,
        );
        sample.meta.insert("cluster".into(), serde_json::json!(cluster));
        self.samples.push(sample);
    }

    fn finish(self) -> Result<SimFixture> {
        self.world.validate()?;
        Ok(SimFixture {
            world: self.world,
            samples: self.samples,
        })
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Mixed world: every answerable query has at least one supporting context
/// per required fact, plus extra support, poison and background noise.
pub fn generate(spec: &SimSpec) -> Result<SimFixture> {
    if spec.max_facts == 0 || spec.min_contexts < spec.max_facts || spec.max_contexts < spec.min_contexts {
        return Err(Error::Config(
            "sim spec needs 1 <= max_facts <= min_contexts <= max_contexts".into(),
        ));
    }
    let mut b = Builder::new(spec.mode, spec.seed);
    for i in 0..spec.samples {
        let mut rng = rng_for(spec.seed, i as u64);
        let m = rng.random_range(1..=spec.max_facts);
        let n = rng.random_range(spec.min_contexts..=spec.max_contexts);
        let unanswerable = rng.random::<f64>() < spec.unanswerable_rate;
        let covered = if unanswerable { m - 1 } else { m };
        let mut roles: Vec<Role> = (0..covered)
            .map(|f| Role::Support(f, rng.random_range(8..=64)))
            .collect();
        while roles.len() < n {
            let x = rng.random::<f64>();
            let f = rng.random_range(0..m);
            roles.push(if x < spec.support_rate {
                Role::Support(f, rng.random_range(4..=48))
            } else if x < spec.support_rate + spec.poison_rate {
                Role::Poison(f, rng.random_range(4..=48))
            } else {
                Role::Noise
            });
        }
        roles.shuffle(&mut rng);
        let cluster = format!("topic{}", i / spec.cluster_size.max(1));
        b.push(i, m, &roles, &cluster, &mut rng);
    }
    b.finish()
}

/// Threshold-mode world with fixed list length for curve experiments.
///
/// Three sample shapes, chosen per sample:
/// - answerable: two facts, one critical supporting context each, weak poison;
/// - blocked: one fact whose support (listed first) is outweighed by a poison context;
/// - unanswerable: one of two facts has no support.
pub fn curve_fixture(samples: usize, contexts: usize, seed: u64) -> Result<SimFixture> {
    if contexts < 4 {
        return Err(Error::Config(
            "curve fixture needs at least 4 contexts per sample".into(),
        ));
    }
    let mut b = Builder::new(UtilityMode::Threshold, seed);
    for i in 0..samples {
        let mut rng = rng_for(seed, i as u64);
        let shape = rng.random_range(0..4);
        let (facts, roles) = match shape {
            0 | 1 => {
                let mut r = vec![
                    Role::Support(0, 32),
                    Role::Support(1, 32),
                    Role::Poison(0, 8),
                    Role::Poison(1, 8),
                ];
                r.resize(contexts, Role::Noise);
                r.shuffle(&mut rng);
                (2, r)
            }
            2 => {
                let mut rest = vec![Role::Poison(0, 32)];
                rest.resize(contexts - 1, Role::Noise);
                rest.shuffle(&mut rng);
                let mut r = vec![Role::Support(0, 16)];
                r.extend(rest);
                (1, r)
            }
            _ => {
                let mut r = vec![Role::Support(0, 32), Role::Poison(1, 8)];
                r.resize(contexts, Role::Noise);
                r.shuffle(&mut rng);
                (2, r)
            }
        };
        b.push(i, facts, &roles, &format!("topic{i}"), &mut rng);
    }
    b.finish()
}

/// Pair embeddings whose first coordinate encodes the planted relevant weight,
/// and a model whose blocks are identity maps and whose head reads that
/// coordinate. Its score is positive exactly when the noisy weight is.
pub fn probe_model(
    fixture: &SimFixture,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<(Vec<EmbeddingRecord>, CsmWeights)> {
    const OFFSET: f64 = 2.0;
    let mut records = Vec::new();
    for (i, s) in fixture.samples.iter().enumerate() {
        let mut rng = rng_for(seed, i as u64);
        for c in s.contexts.iter() {
            let w = fixture.world.relevant_weight(&s.query.id, &c.id)?;
            let mut vector: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            vector[0] = OFFSET + w + rng.random_range(-noise..=noise);
            records.push(EmbeddingRecord {
                query_id: s.query.id.clone(),
                context_id: c.id.clone(),
                vector,
            });
        }
    }
    let mut weights = CsmWeights::zeros(CsmMetadata::new(dim, 2 * dim, 4, "sim-probe"))?;
    let mut fc1 = Linear::zeros(dim, 4);
    fc1.weight[0] = 1.0;
    let mut fc2 = Linear::zeros(4, 1);
    fc2.weight[0] = 1.0;
    fc2.bias[0] = -(gelu(OFFSET) as f32 as f64);
    weights.head_fc1 = fc1;
    weights.head_fc2 = fc2;
    Ok((records, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::sim_exact_utility;

    #[test]
    fn generated_worlds_are_valid_and_seeded() {
        let spec = SimSpec {
            samples: 30,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_eq!(a.samples.len(), 30);
        for s in &a.samples {
            assert!((spec.min_contexts..=spec.max_contexts).contains(&s.contexts.len()));
            s.contexts.check().unwrap();
        }
        let other = generate(&SimSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(a.samples, other.samples);
    }

    #[test]
    fn weights_are_dyadic() {
        let f = generate(&SimSpec::default()).unwrap();
        for tags in f.world.contexts.values() {
            for t in tags {
                assert_eq!((t.weight * 64.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn curve_fixture_shapes() {
        let f = curve_fixture(40, 10, 3).unwrap();
        assert!(f.samples.iter().all(|s| s.contexts.len() == 10));
        let answered = f
            .samples
            .iter()
            .filter(|s| {
                let ids: Vec<&str> = s.contexts.ids().collect();
                sim_exact_utility(&s.query.id, &ids, &f.world).unwrap() == 1.0
            })
            .count();
        assert!(answered > 0 && answered < 40);
    }

    #[test]
    fn probe_sign_tracks_weight() {
        let f = generate(&SimSpec {
            samples: 5,
            ..Default::default()
        })
        .unwrap();
        let (records, weights) = probe_model(&f, 16, 0.0, 1).unwrap();
        let store = crate::csm::EmbeddingStore::from_records(records).unwrap();
        let provider = crate::csm::EmbeddingProvider::File(store);
        for s in &f.samples {
            let scores = crate::csm::csm_scores(&s.query, &s.contexts, &weights, &provider).unwrap();
            for (c, score) in s.contexts.iter().zip(scores) {
                let w = f.world.relevant_weight(&s.query.id, &c.id).unwrap();
                if w != 0.0 {
                    assert_eq!(score > 0.0, w > 0.0, "{} {w} {score}", c.id);
                }
            }
        }
    }
}
