//! Training-corpus construction for the surrogate model.
//!
//! Samples are split by rarity rate `r = mean(ci) + alpha * std(ci)` into
//! trivial (`r < delta1`) and hard (`r > delta2`) groups. Trivial samples are
//! down-sampled; each hard sample spawns two synthetic samples by recombining
//! its high-influence contexts with contexts drawn from a donor sample whose
//! query is unrelated:
//!
//! - high: host query and answers over `C^P ∪ donor subset`,
//! - low: donor query and answers over the same context union.
//!
//! Every record also carries its empirical rarity frequency `p` (for the
//! reweighted MSE) and, when hard, contrastive anchor/positive/negative sets.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::metrics::normalize_answer;
use crate::seeding::{derive_seed, rng_for};
use crate::types::{CIVector, ContextList, Sample};
use crate::valuation::{scale_dataset, value_sample, UtilityKind};

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_DELTA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RarityStats {
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub r: f64,
}

/// Mean plus `alpha` population standard deviations of the CI values.
pub fn rarity(ci: &CIVector, alpha: f64) -> Result<RarityStats> {
    if ci.is_empty() {
        return Err(Error::InvalidArgument("rarity of an empty CI vector".into()));
    }
    let n = ci.len() as f64;
    let mu = ci.values.iter().sum::<f64>() / n;
    let var = ci.values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    Ok(RarityStats {
        mu,
        sigma,
        alpha,
        r: mu + alpha * sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleCategory {
    Trivial,
    Hard,
    Neither,
}

pub fn categorize(r: f64, delta1: f64, delta2: f64) -> Result<SampleCategory> {
    if delta1 > delta2 {
        return Err(Error::InvalidArgument(format!(
            "delta1 {delta1} exceeds delta2 {delta2}"
        )));
    }
    Ok(if r < delta1 {
        SampleCategory::Trivial
    } else if r > delta2 {
        SampleCategory::Hard
    } else {
        SampleCategory::Neither
    })
}

/// Keeps each sample independently with probability `keep_rate`.
pub fn downsample(samples: &[Sample], keep_rate: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&keep_rate) {
        return Err(Error::InvalidArgument(format!("keep rate {keep_rate} outside [0, 1]")));
    }
    let mut rng = rng_for(seed, 0);
    Ok(samples
        .iter()
        .filter(|_| rng.random::<f64>() < keep_rate)
        .cloned()
        .collect())
}

/// Generator and utility used to re-value synthetic samples.
#[derive(Clone, Copy)]
pub struct Recompute<'a> {
    pub gateway: &'a Gateway,
    pub kind: UtilityKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionParams {
    pub gamma: f64,
    pub donor_subset_size: usize,
    pub seed: u64,
}

fn high_ci_indices(host: &Sample, gamma: f64) -> Result<Vec<usize>> {
    let ci = host
        .ci
        .as_ref()
        .ok_or_else(|| Error::Intervention(format!("host {:?} has no CI values", host.id())))?;
    ci.check_aligned(host.contexts.len())?;
    let picked: Vec<usize> = (0..ci.len()).filter(|&i| ci.values[i] > gamma).collect();
    if picked.is_empty() {
        return Err(Error::Intervention(format!(
            "host {:?} has no context with CI above {gamma}",
            host.id()
        )));
    }
    Ok(picked)
}

fn recombine(host: &Sample, donor: &Sample, params: &InterventionParams) -> Result<(ContextList, Vec<String>)> {
    if host.query.id == donor.query.id || normalize_answer(&host.query.text) == normalize_answer(&donor.query.text) {
        return Err(Error::Intervention(format!(
            "donor query {:?} is identical to the host query",
            donor.query.id
        )));
    }
    let high = host.contexts.pick(&high_ci_indices(host, params.gamma)?);
    let high_ids: HashSet<&str> = high.ids().collect();
    let pool: Vec<usize> = (0..donor.contexts.len())
        .filter(|&i| !high_ids.contains(donor.contexts.contexts[i].id.as_str()))
        .collect();
    let mut rng = rng_for(params.seed, 1);
    let mut drawn: Vec<usize> = pool
        .choose_multiple(&mut rng, params.donor_subset_size.min(pool.len()))
        .copied()
        .collect();
    drawn.sort_unstable();
    let targets = high.ids().map(str::to_string).collect();
    let mut contexts = high.contexts;
    contexts.extend(drawn.into_iter().map(|i| donor.contexts.contexts[i].clone()));
    Ok((ContextList::new(contexts), targets))
}

fn finish(
    mut out: Sample,
    targets: Vec<String>,
    tag: &str,
    host: &Sample,
    donor: &Sample,
    recompute: Option<Recompute<'_>>,
) -> Result<Sample> {
    out.meta.insert("intervention".into(), serde_json::json!(tag));
    out.meta.insert("host".into(), serde_json::json!(host.id()));
    out.meta.insert("donor".into(), serde_json::json!(donor.id()));
    match recompute {
        Some(r) => value_sample(&out, r.kind, r.gateway),
        None => {
            out.meta.insert(format!("{tag}_targets"), serde_json::json!(targets));
            Ok(out)
        }
    }
}

/// Host query over its high-influence contexts placed among donor contexts.
pub fn intervene_high(
    host: &Sample,
    donor: &Sample,
    params: &InterventionParams,
    recompute: Option<Recompute<'_>>,
) -> Result<Sample> {
    let (contexts, targets) = recombine(host, donor, params)?;
    let mut out = Sample::new(host.query.clone(), host.answers.clone(), contexts);
    out.meta = host.meta.clone();
    finish(out, targets, "high", host, donor, recompute)
}

/// Donor query over the host's high-influence contexts, which are off-topic for it.
pub fn intervene_low(
    host: &Sample,
    donor: &Sample,
    params: &InterventionParams,
    recompute: Option<Recompute<'_>>,
) -> Result<Sample> {
    let (contexts, targets) = recombine(host, donor, params)?;
    let mut out = Sample::new(donor.query.clone(), donor.answers.clone(), contexts);
    out.meta = donor.meta.clone();
    finish(out, targets, "low", host, donor, recompute)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub probabilities: Vec<f64>,
}

impl FrequencyTable {
    pub fn bin_of(&self, r: f64) -> usize {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        if hi <= lo {
            return 0;
        }
        let width = (hi - lo) / bins as f64;
        (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1)
    }

    /// Empirical frequency of the bin holding `r`.
    pub fn p(&self, r: f64) -> f64 {
        self.probabilities[self.bin_of(r)]
    }
}

/// Equal-width histogram over `[min r, max r]`; the top edge belongs to the last bin.
pub fn empirical_freq(values: &[f64], bin_count: usize) -> Result<FrequencyTable> {
    if values.is_empty() || bin_count == 0 {
        return Err(Error::InvalidArgument(
            "frequency table needs values and at least one bin".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { bin_count } else { 1 };
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    let mut table = FrequencyTable {
        edges,
        counts: vec![0; bins],
        probabilities: vec![0.0; bins],
    };
    for &v in values {
        let b = table.bin_of(v);
        table.counts[b] += 1;
    }
    let total = values.len() as f64;
    table.probabilities = table.counts.iter().map(|&c| c as f64 / total).collect();
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePairSet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub epsilon1: f64,
    pub epsilon2: f64,
}

/// One pair set per anchor that has at least one positive (`|gap| < eps1`)
/// and one negative (`|gap| > eps2`).
pub fn contrastive_pairs(
    ci: &CIVector,
    epsilon1: f64,
    epsilon2: f64,
    max_negatives: usize,
    seed: u64,
) -> Result<Vec<ContrastivePairSet>> {
    if epsilon1 > epsilon2 {
        return Err(Error::InvalidArgument(format!(
            "epsilon1 {epsilon1} exceeds epsilon2 {epsilon2}"
        )));
    }
    let v = &ci.values;
    let mut out = Vec::new();
    for anchor in 0..v.len() {
        let others = (0..v.len()).filter(|&j| j != anchor);
        let positives: Vec<usize> = others
            .clone()
            .filter(|&j| (v[anchor] - v[j]).abs() < epsilon1)
            .collect();
        let negatives: Vec<usize> = others.filter(|&j| (v[anchor] - v[j]).abs() > epsilon2).collect();
        if positives.is_empty() || negatives.is_empty() || max_negatives == 0 {
            continue;
        }
        let mut rng = rng_for(seed, anchor as u64);
        let positive = *positives.choose(&mut rng).expect("non-empty");
        let mut negatives = negatives;
        if negatives.len() > max_negatives {
            negatives.shuffle(&mut rng);
            negatives.truncate(max_negatives);
            negatives.sort_unstable();
        }
        out.push(ContrastivePairSet {
            anchor,
            positive,
            negatives,
            epsilon1,
            epsilon2,
        });
    }
    Ok(out)
}

/// How to decide that two queries are semantically distinct.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryDistinctness {
    /// Both samples carry a `cluster` meta tag and the tags differ.
    ClusterTags,
    /// Cosine similarity of query vectors below `threshold`.
    Embeddings {
        vectors: HashMap<String, Vec<f64>>,
        threshold: f64,
    },
}

pub const DEFAULT_DISTINCT_COSINE: f64 = 0.5;

impl QueryDistinctness {
    pub fn distinct(&self, a: &Sample, b: &Sample) -> Result<bool> {
        if a.query.id == b.query.id {
            return Ok(false);
        }
        match self {
            QueryDistinctness::ClusterTags => Ok(match (a.meta_str("cluster"), b.meta_str("cluster")) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            }),
            QueryDistinctness::Embeddings { vectors, threshold } => {
                let get = |s: &Sample| {
                    vectors
                        .get(&s.query.id)
                        .ok_or_else(|| Error::MissingEmbedding(format!("query {:?}", s.query.id)))
                };
                let (x, y) = (get(a)?, get(b)?);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) };
                Ok(cos < *threshold)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub alpha: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub gamma: f64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub keep_rate: f64,
    pub bin_count: usize,
    pub donor_subset_size: usize,
    pub max_negatives: usize,
    /// Re-value synthetic samples with the generator.
    pub recompute: bool,
    /// Scale all CI values by the dataset-wide max magnitude before forging.
    pub scale_ci: bool,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            delta1: DEFAULT_DELTA,
            delta2: DEFAULT_DELTA,
            gamma: 0.1,
            epsilon1: 0.05,
            epsilon2: 0.3,
            keep_rate: 0.2,
            bin_count: 20,
            donor_subset_size: 4,
            max_negatives: 8,
            recompute: true,
            scale_ci: true,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    InterveneHigh,
    InterveneLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub record: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SampleCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<ContrastivePairSet>,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeManifest {
    pub config: ForgeConfig,
    pub ci_scale_divisor: f64,
    pub input_samples: usize,
    pub input_categories: BTreeMap<SampleCategory, usize>,
    pub trivial_kept: usize,
    pub hard_without_high_ci: usize,
    pub hard_without_donor: usize,
    pub interventions: BTreeMap<Provenance, usize>,
    pub output_records: usize,
    pub output_categories: BTreeMap<SampleCategory, usize>,
    pub frequency_table: Option<FrequencyTable>,
}

fn record_for(sample: Sample, provenance: Provenance, config: &ForgeConfig, record: usize) -> Result<CorpusRecord> {
    let (rarity, category, pairs) = match &sample.ci {
        Some(ci) if !ci.is_empty() => {
            let r = rarity(ci, config.alpha)?.r;
            let cat = categorize(r, config.delta1, config.delta2)?;
            let pairs = if cat == SampleCategory::Hard {
                contrastive_pairs(
                    ci,
                    config.epsilon1,
                    config.epsilon2,
                    config.max_negatives,
                    derive_seed(config.seed, 10_000 + record as u64),
                )?
            } else {
                Vec::new()
            };
            (Some(r), Some(cat), pairs)
        }
        _ => (None, None, Vec::new()),
    };
    Ok(CorpusRecord {
        record,
        provenance,
        category,
        rarity,
        p: None,
        pairs,
        sample,
    })
}

/// Builds the training corpus from valued samples.
pub fn build_corpus(
    samples: &[Sample],
    config: &ForgeConfig,
    distinctness: &QueryDistinctness,
    recompute: Option<Recompute<'_>>,
) -> Result<(Vec<CorpusRecord>, ForgeManifest)> {
    categorize(0.0, config.delta1, config.delta2)?;
    let mut samples = samples.to_vec();
    if let Some(s) = samples.iter().find(|s| s.ci.is_none()) {
        return Err(Error::invariant(
            "ci",
            format!("sample {:?} has not been valued", s.id()),
        ));
    }
    let divisor = if config.scale_ci {
        scale_dataset(&mut samples)
    } else {
        1.0
    };
    let divisor = if divisor > 0.0 { divisor } else { 1.0 };

    let mut input_categories = BTreeMap::new();
    let mut by_cat: HashMap<SampleCategory, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let ci = s.ci.as_ref().expect("checked above");
        let cat = if ci.is_empty() {
            SampleCategory::Trivial
        } else {
            categorize(rarity(ci, config.alpha)?.r, config.delta1, config.delta2)?
        };
        *input_categories.entry(cat).or_insert(0) += 1;
        by_cat.entry(cat).or_default().push(i);
    }

    let trivial: Vec<Sample> = by_cat
        .get(&SampleCategory::Trivial)
        .map(|ix| ix.iter().map(|&i| samples[i].clone()).collect())
        .unwrap_or_default();
    let trivial_kept = downsample(&trivial, config.keep_rate, derive_seed(config.seed, 1))?;
    let kept_ids: HashSet<String> = trivial_kept.iter().map(|s| s.id().to_string()).collect();

    let mut out: Vec<(Sample, Provenance)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let ci = s.ci.as_ref().expect("checked above");
        let trivial = ci.is_empty() || by_cat.get(&SampleCategory::Trivial).is_some_and(|ix| ix.contains(&i));
        if !trivial || kept_ids.contains(s.id()) {
            out.push((s.clone(), Provenance::Original));
        }
    }

    let mut interventions = BTreeMap::new();
    let (mut no_high, mut no_donor) = (0, 0);
    for &h in by_cat.get(&SampleCategory::Hard).map(Vec::as_slice).unwrap_or(&[]) {
        let host = &samples[h];
        if high_ci_indices(host, config.gamma).is_err() {
            no_high += 1;
            continue;
        }
        let mut order: Vec<usize> = (0..samples.len()).filter(|&j| j != h).collect();
        order.shuffle(&mut rng_for(config.seed, 20_000 + h as u64));
        let mut donor = None;
        for j in order {
            if distinctness.distinct(host, &samples[j])? {
                donor = Some(j);
                break;
            }
        }
        let Some(d) = donor else {
            no_donor += 1;
            continue;
        };
        let params = InterventionParams {
            gamma: config.gamma,
            donor_subset_size: config.donor_subset_size,
            seed: derive_seed(config.seed, 30_000 + h as u64),
        };
        let rescale = |mut s: Sample| {
            if let Some(ci) = s.ci.as_mut() {
                ci.values.iter_mut().for_each(|v| *v /= divisor);
            }
            s
        };
        let hi = intervene_high(host, &samples[d], &params, recompute)?;
        out.push((rescale(hi), Provenance::InterveneHigh));
        let lo = intervene_low(host, &samples[d], &params, recompute)?;
        out.push((rescale(lo), Provenance::InterveneLow));
        *interventions.entry(Provenance::InterveneHigh).or_insert(0) += 1;
        *interventions.entry(Provenance::InterveneLow).or_insert(0) += 1;
    }

    let mut records = out
        .into_iter()
        .enumerate()
        .map(|(i, (s, p))| record_for(s, p, config, i))
        .collect::<Result<Vec<_>>>()?;
    let rarities: Vec<f64> = records.iter().filter_map(|r| r.rarity).collect();
    let table = if rarities.is_empty() {
        None
    } else {
        Some(empirical_freq(&rarities, config.bin_count)?)
    };
    let mut output_categories = BTreeMap::new();
    for rec in &mut records {
        if let (Some(t), Some(r)) = (&table, rec.rarity) {
            rec.p = Some(t.p(r));
        }
        if let Some(c) = rec.category {
            *output_categories.entry(c).or_insert(0) += 1;
        }
    }
    let manifest = ForgeManifest {
        config: config.clone(),
        ci_scale_divisor: divisor,
        input_samples: samples.len(),
        input_categories,
        trivial_kept: trivial_kept.len(),
        hard_without_high_ci: no_high,
        hard_without_donor: no_donor,
        interventions,
        output_records: records.len(),
        output_categories,
        frequency_table: table,
    };
    Ok((records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnswerSet, Context, Query};

    fn valued(id: &str, cluster: &str, ci: &[f64]) -> Sample {
        let contexts: ContextList = (0..ci.len())
            .map(|i| Context::new(format!("{id}-c{i}"), format!("{id} passage {i}")))
            .collect();
        let mut s = Sample::new(
            Query::new(id, format!("question {id}")),
            AnswerSet::new([format!("answer {id}")]),
            contexts,
        )
        .with_ci(CIVector::new(ci.to_vec()));
        s.meta.insert("cluster".into(), serde_json::json!(cluster));
        s
    }

    #[test]
    fn rarity_cases() {
        assert_eq!(rarity(&CIVector::new(vec![0.0; 4]), 10.0).unwrap().r, 0.0);
        let s = rarity(&CIVector::new(vec![0.2, -0.1, 0.5]), 0.0).unwrap();
        assert!((s.r - s.mu).abs() < 1e-15);
        // mu = 0.2, population variance = 0.06
        let s = rarity(&CIVector::new(vec![0.2, -0.1, 0.5]), 10.0).unwrap();
        assert!((s.mu - 0.2).abs() < 1e-15);
        assert!((s.sigma - 0.06f64.sqrt()).abs() < 1e-15);
        assert!((s.r - (0.2 + 10.0 * 0.06f64.sqrt())).abs() < 1e-12);
        assert!((s.r - 2.6495).abs() < 1e-4);
        assert!(rarity(&CIVector::default(), 1.0).is_err());
    }

    #[test]
    fn categorize_cases() {
        assert_eq!(categorize(2.0, 5.0, 5.0).unwrap(), SampleCategory::Trivial);
        assert_eq!(categorize(7.0, 5.0, 5.0).unwrap(), SampleCategory::Hard);
        assert_eq!(categorize(5.0, 5.0, 5.0).unwrap(), SampleCategory::Neither);
        assert_eq!(categorize(4.0, 3.0, 5.0).unwrap(), SampleCategory::Neither);
        assert!(categorize(1.0, 6.0, 5.0).is_err());
    }

    #[test]
    fn downsample_cases() {
        let s: Vec<Sample> = (0..50).map(|i| valued(&format!("s{i}"), "a", &[0.0])).collect();
        assert_eq!(downsample(&s, 1.0, 3).unwrap(), s);
        assert!(downsample(&s, 0.0, 3).unwrap().is_empty());
        assert_eq!(downsample(&s, 0.3, 9).unwrap(), downsample(&s, 0.3, 9).unwrap());
        assert!(downsample(&s, 1.5, 9).is_err());
    }

    #[test]
    fn intervention_structure() {
        let mut host = valued("h", "x", &[0.0, 0.6, 0.0, 0.9]);
        host.contexts.contexts[1].id = "c2".into();
        host.contexts.contexts[3].id = "c4".into();
        let mut donor = valued("d", "y", &[0.0, 0.0]);
        donor.contexts.contexts[0].id = "x1".into();
        donor.contexts.contexts[1].id = "x2".into();
        let params = InterventionParams {
            gamma: 0.1,
            donor_subset_size: 2,
            seed: 5,
        };

        let hi = intervene_high(&host, &donor, &params, None).unwrap();
        assert_eq!(hi.contexts.ids().collect::<Vec<_>>(), vec!["c2", "c4", "x1", "x2"]);
        assert_eq!(hi.query, host.query);
        assert_eq!(hi.answers, host.answers);
        assert!(hi.ci.is_none());
        assert_eq!(hi.meta["high_targets"], serde_json::json!(["c2", "c4"]));

        let lo = intervene_low(&host, &donor, &params, None).unwrap();
        assert_eq!(lo.query, donor.query);
        assert_eq!(lo.answers, donor.answers);
        assert_eq!(lo.meta["low_targets"], serde_json::json!(["c2", "c4"]));
    }

    #[test]
    fn intervention_threshold_and_errors() {
        let host = valued("h", "x", &[0.6, 0.05]);
        let donor = valued("d", "y", &[0.0, 0.0, 0.0]);
        let params = InterventionParams {
            gamma: 0.1,
            donor_subset_size: 1,
            seed: 1,
        };
        let hi = intervene_high(&host, &donor, &params, None).unwrap();
        assert_eq!(hi.contexts.contexts[0].id, "h-c0");
        assert_eq!(hi.contexts.len(), 2);
        assert!(!hi.contexts.ids().any(|id| id == "h-c1"));

        let same = valued("h", "y", &[0.0]);
        assert!(matches!(
            intervene_high(&host, &same, &params, None),
            Err(Error::Intervention(_))
        ));
        let flat = valued("f", "x", &[0.01, 0.02]);
        assert!(matches!(
            intervene_low(&flat, &donor, &params, None),
            Err(Error::Intervention(_))
        ));

        let a = intervene_low(&host, &donor, &params, None).unwrap();
        let b = intervene_low(&host, &donor, &params, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frequency_tables() {
        let t = empirical_freq(&[3.0, 3.0, 3.0], 5).unwrap();
        assert_eq!(t.counts, vec![3]);
        assert_eq!(t.p(3.0), 1.0);

        let t = empirical_freq(&[0.0, 1.0], 2).unwrap();
        assert_eq!((t.p(0.0), t.p(1.0)), (0.5, 0.5));

        // width 2 over [0, 10]: bins [0,2) [2,4) [4,6) [6,8) [8,10]
        let v = [0.0, 1.0, 1.5, 2.0, 3.9, 5.0, 7.0, 8.0, 9.5, 10.0];
        let t = empirical_freq(&v, 5).unwrap();
        assert_eq!(t.counts, vec![3, 2, 1, 1, 3]);
        assert_eq!(t.edges, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert!((t.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.p(9.5), 0.3);
        assert!(empirical_freq(&[], 3).is_err());
    }

    #[test]
    fn pair_roles() {
        let ci = CIVector::new(vec![0.5, 0.52, 0.1, 0.3]);
        let pairs = contrastive_pairs(&ci, 0.05, 0.3, 4, 0).unwrap();
        let a0 = pairs.iter().find(|p| p.anchor == 0).unwrap();
        assert_eq!(a0.positive, 1);
        assert_eq!(a0.negatives, vec![2]);
        // gap 0.2 between 0.5 and 0.3 is neither role
        assert!(!a0.negatives.contains(&3));
        // anchors 2 and 3 have no positive
        assert!(pairs.iter().all(|p| p.anchor != 2 && p.anchor != 3));
        assert!(contrastive_pairs(&ci, 0.5, 0.3, 4, 0).is_err());

        let ci = CIVector::new(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let capped = contrastive_pairs(&ci, 0.05, 0.3, 2, 3).unwrap();
        assert!(capped.iter().all(|p| p.negatives.len() <= 2));
        assert_eq!(capped, contrastive_pairs(&ci, 0.05, 0.3, 2, 3).unwrap());
    }

    #[test]
    fn distinctness_policies() {
        let a = valued("a", "x", &[0.0]);
        let b = valued("b", "y", &[0.0]);
        let c = valued("c", "x", &[0.0]);
        let tags = QueryDistinctness::ClusterTags;
        assert!(tags.distinct(&a, &b).unwrap());
        assert!(!tags.distinct(&a, &c).unwrap());
        let emb = QueryDistinctness::Embeddings {
            vectors: HashMap::from([
                ("a".to_string(), vec![1.0, 0.0]),
                ("b".to_string(), vec![0.9, 0.1]),
                ("c".to_string(), vec![0.0, 1.0]),
            ]),
            threshold: DEFAULT_DISTINCT_COSINE,
        };
        assert!(!emb.distinct(&a, &b).unwrap());
        assert!(emb.distinct(&a, &c).unwrap());
        assert!(emb.distinct(&a, &valued("z", "q", &[0.0])).is_err());
    }

    #[test]
    fn corpus_without_recompute() {
        let mut samples = vec![
            valued("h1", "a", &[1.0, -0.8, 0.0, 0.0]),
            valued("h2", "b", &[0.0, 0.9, 0.0, -1.0]),
        ];
        for i in 0..10 {
            samples.push(valued(&format!("t{i}"), &format!("t{i}"), &[0.0, 0.01, 0.0, 0.0]));
        }
        let cfg = ForgeConfig {
            recompute: false,
            keep_rate: 0.5,
            ..Default::default()
        };
        let (records, manifest) = build_corpus(&samples, &cfg, &QueryDistinctness::ClusterTags, None).unwrap();
        assert_eq!(manifest.input_categories[&SampleCategory::Hard], 2);
        assert_eq!(manifest.input_categories[&SampleCategory::Trivial], 10);
        assert_eq!(manifest.interventions[&Provenance::InterveneHigh], 2);
        let originals = records.iter().filter(|r| r.provenance == Provenance::Original).count();
        assert_eq!(originals, 2 + manifest.trivial_kept);
        assert_eq!(manifest.output_records, records.len());
        let hard = records
            .iter()
            .find(|r| r.sample.id() == "h1" && r.provenance == Provenance::Original)
            .unwrap();
        assert!(!hard.pairs.is_empty());
        assert!(records
            .iter()
            .filter(|r| r.rarity.is_some())
            .all(|r| r.p.unwrap() > 0.0));
        // label-free synthetic samples carry no rarity
        assert!(records
            .iter()
            .filter(|r| r.provenance != Provenance::Original)
            .all(|r| r.rarity.is_none()));

        let again = build_corpus(&samples, &cfg, &QueryDistinctness::ClusterTags, None).unwrap();
        assert_eq!(again.0, records);

        let json = serde_json::to_string(&records[0]).unwrap();
        let back: CorpusRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, records[0]);
    }

    #[test]
    fn corpus_rejects_unvalued_input() {
        let mut s = valued("a", "x", &[0.0]);
        s.ci = None;
        assert!(build_corpus(&[s], &ForgeConfig::default(), &QueryDistinctness::ClusterTags, None).is_err());
    }
}
