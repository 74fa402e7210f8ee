//! Experiment drivers: score sources, prefix curves, strategy tables and
//! rank-correlation reports. Every driver is a pure function of its inputs,
//! the gateway cache state and the seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csm::{csm_scores, CsmWeights, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::jsonl;
use crate::metrics::{spearman, MetricKind};
use crate::seeding::{rng_for, stream_of};
use crate::types::{ContextList, Sample, SelectionResult, SelectionStrategy};
use crate::valuation::{rank_ascending, rank_descending, select_above, top_k_select_as};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    OracleCi,
    Csm,
    ExternalScoreFile,
    Random,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::OracleCi => "oracle-ci",
            ScorerKind::Csm => "csm",
            ScorerKind::ExternalScoreFile => "external-score-file",
            ScorerKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    #[default]
    Descending,
    Ascending,
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub context_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Result<Self> {
        let mut scores = HashMap::new();
        for r in records {
            if !r.score.is_finite() {
                return Err(Error::invariant(
                    "score",
                    format!("non-finite score for ({}, {})", r.sample_id, r.context_id),
                ));
            }
            if scores
                .insert((r.sample_id.clone(), r.context_id.clone()), r.score)
                .is_some()
            {
                return Err(Error::invariant(
                    "score",
                    format!("duplicate score for ({}, {})", r.sample_id, r.context_id),
                ));
            }
        }
        Ok(Self { scores })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(jsonl::read::<ScoreRecord>(path)?)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores aligned with the sample's context list.
    pub fn aligned(&self, sample: &Sample) -> Result<Vec<f64>> {
        sample
            .contexts
            .iter()
            .map(|c| {
                self.scores
                    .get(&(sample.id().to_string(), c.id.clone()))
                    .copied()
                    .ok_or_else(|| Error::MissingScore {
                        sample: sample.id().to_string(),
                        context: c.id.clone(),
                    })
            })
            .collect()
    }
}

/// Source of per-context quality scores.
#[derive(Debug)]
pub enum Scorer {
    OracleCi,
    Random {
        seed: u64,
    },
    External(ScoreTable),
    Csm {
        weights: Box<CsmWeights>,
        provider: EmbeddingProvider,
    },
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::OracleCi => ScorerKind::OracleCi,
            Scorer::Random { .. } => ScorerKind::Random,
            Scorer::External(_) => ScorerKind::ExternalScoreFile,
            Scorer::Csm { .. } => ScorerKind::Csm,
        }
    }

    pub fn scores(&self, sample: &Sample) -> Result<Vec<f64>> {
        match self {
            Scorer::OracleCi => {
                let ci = sample
                    .ci
                    .as_ref()
                    .ok_or_else(|| Error::invariant("ci", format!("sample {:?} has not been valued", sample.id())))?;
                ci.check_aligned(sample.contexts.len())?;
                Ok(ci.values.clone())
            }
            Scorer::Random { seed } => {
                use rand::Rng;
                let mut rng = rng_for(*seed, stream_of(sample.id()));
                Ok((0..sample.contexts.len()).map(|_| rng.random::<f64>()).collect())
            }
            Scorer::External(table) => table.aligned(sample),
            Scorer::Csm { weights, provider } => csm_scores(&sample.query, &sample.contexts, weights, provider),
        }
    }
}

/// Scores every context of every sample, in dataset order.
pub fn score_dataset(samples: &[Sample], scorer: &Scorer) -> Result<Vec<ScoreRecord>> {
    let per_sample: Vec<Vec<ScoreRecord>> = samples
        .par_iter()
        .map(|s| {
            let scores = scorer.scores(s)?;
            Ok(s.contexts
                .iter()
                .zip(scores)
                .map(|(c, score)| ScoreRecord {
                    sample_id: s.id().to_string(),
                    context_id: c.id.clone(),
                    score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectRule {
    Positive,
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub sample_id: String,
    #[serde(flatten)]
    pub selection: SelectionResult,
}

fn strategy_for(kind: ScorerKind, rule: SelectRule) -> SelectionStrategy {
    match (kind, rule) {
        (ScorerKind::Random, _) => SelectionStrategy::Random,
        (_, SelectRule::TopK(_)) => SelectionStrategy::TopK,
        (ScorerKind::ExternalScoreFile, SelectRule::Positive) => SelectionStrategy::ExternalScore,
        (_, SelectRule::Positive) => SelectionStrategy::PositiveCi,
    }
}

pub fn select_with(
    sample: &Sample,
    scores: &[f64],
    rule: SelectRule,
    strategy: SelectionStrategy,
) -> Result<SelectionResult> {
    match rule {
        SelectRule::Positive => select_above(&sample.contexts, scores, 0.0, strategy),
        SelectRule::TopK(k) => top_k_select_as(&sample.contexts, scores, k, strategy),
    }
}

pub fn select_dataset(samples: &[Sample], scorer: &Scorer, rule: SelectRule) -> Result<Vec<SelectionRecord>> {
    let strategy = strategy_for(scorer.kind(), rule);
    samples
        .par_iter()
        .map(|s| {
            Ok(SelectionRecord {
                sample_id: s.id().to_string(),
                selection: select_with(s, &scorer.scores(s)?, rule, strategy)?,
            })
        })
        .collect()
}

/// Task metric of the answer generated from `indices` (presented in list order).
fn answer_score(sample: &Sample, indices: &[usize], gateway: &Gateway, metric: MetricKind) -> Result<f64> {
    let mut kept = indices.to_vec();
    kept.sort_unstable();
    let subset: ContextList = sample.contexts.pick(&kept);
    let resp = gateway.generate(&sample.query, &subset)?;
    Ok(metric.score(&resp.text, &sample.answers))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub score: f64,
    /// Mean over samples of the influence of the context added at step `k`
    /// (0 for samples whose list is already exhausted, and at `k = 0`).
    pub mean_added_ci: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub scorer: ScorerKind,
    pub order: Order,
    pub metric: MetricKind,
    pub samples: usize,
    pub points: Vec<CurvePoint>,
    /// Largest `k` such that every step up to `k` adds positive mean influence.
    pub k_star: Option<usize>,
    /// First `k` attaining the maximum score.
    pub best_k: usize,
}

/// Metric after keeping the first `k` contexts of each scorer ranking, for every `k`.
/// `k = 0` is generation without contexts.
pub fn run_curves(
    samples: &[Sample],
    gateway: &Gateway,
    scorer: &Scorer,
    order: Order,
    metric: MetricKind,
) -> Result<CurveReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("curves need at least one sample".into()));
    }
    let k_max = samples.iter().map(|s| s.contexts.len()).max().unwrap_or(0);
    let with_ci = samples
        .iter()
        .all(|s| s.ci.as_ref().is_some_and(|c| c.len() == s.contexts.len()));
    let rows: Vec<(Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let scores = scorer.scores(s)?;
            let ranking = match order {
                Order::Descending => rank_descending(&scores),
                Order::Ascending => rank_ascending(&scores),
            };
            let n = ranking.len();
            let mut metric_at = Vec::with_capacity(k_max + 1);
            for k in 0..=n {
                metric_at.push(answer_score(s, &ranking[..k], gateway, metric)?);
            }
            let last = metric_at[n];
            metric_at.resize(k_max + 1, last);
            let mut added = vec![0.0; k_max + 1];
            if let Some(ci) = s.ci.as_ref().filter(|_| with_ci) {
                for (k, &idx) in ranking.iter().enumerate() {
                    added[k + 1] = ci.values[idx];
                }
            }
            Ok((metric_at, added))
        })
        .collect::<Result<_>>()?;

    let count = samples.len() as f64;
    let points: Vec<CurvePoint> = (0..=k_max)
        .map(|k| CurvePoint {
            k,
            score: rows.iter().map(|r| r.0[k]).sum::<f64>() / count,
            mean_added_ci: with_ci.then(|| rows.iter().map(|r| r.1[k]).sum::<f64>() / count),
        })
        .collect();
    let k_star = with_ci.then(|| {
        points[1..]
            .iter()
            .take_while(|p| p.mean_added_ci.is_some_and(|v| v > 0.0))
            .count()
    });
    let best = points.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
    let best_k = points.iter().position(|p| p.score == best).unwrap_or(0);
    Ok(CurveReport {
        scorer: scorer.kind(),
        order,
        metric,
        samples: samples.len(),
        points,
        k_star,
        best_k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStrategy {
    /// No contexts.
    Vanilla,
    KeepAll,
    /// Contexts with positive oracle influence.
    OraclePositive,
    /// Contexts with negative oracle influence.
    OracleNegative,
    /// Contexts the scorer rates above zero.
    ScorerPositive,
    ScorerTopK,
    RandomTopK,
}

impl EvalStrategy {
    pub const ALL: [EvalStrategy; 7] = [
        EvalStrategy::Vanilla,
        EvalStrategy::KeepAll,
        EvalStrategy::OraclePositive,
        EvalStrategy::OracleNegative,
        EvalStrategy::ScorerPositive,
        EvalStrategy::ScorerTopK,
        EvalStrategy::RandomTopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalStrategy::Vanilla => "vanilla",
            EvalStrategy::KeepAll => "keep-all",
            EvalStrategy::OraclePositive => "oracle-positive",
            EvalStrategy::OracleNegative => "oracle-negative",
            EvalStrategy::ScorerPositive => "scorer-positive",
            EvalStrategy::ScorerTopK => "scorer-top-k",
            EvalStrategy::RandomTopK => "random-top-k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub strategy: EvalStrategy,
    pub score: f64,
    pub mean_kept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub scorer: ScorerKind,
    pub metric: MetricKind,
    pub top_k: usize,
    pub samples: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, strategy: EvalStrategy) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

/// Metric per selection strategy. Oracle rows are skipped when some sample lacks influence values.
pub fn run_eval(
    samples: &[Sample],
    gateway: &Gateway,
    scorer: &Scorer,
    metric: MetricKind,
    top_k: usize,
    seed: u64,
) -> Result<EvalTable> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    let valued = samples.iter().all(|s| s.ci.is_some());
    let strategies: Vec<EvalStrategy> = EvalStrategy::ALL
        .into_iter()
        .filter(|s| valued || !matches!(s, EvalStrategy::OraclePositive | EvalStrategy::OracleNegative))
        .collect();
    let random = Scorer::Random { seed };
    let per_sample: Vec<Vec<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let scores = scorer.scores(s)?;
            let n = s.contexts.len();
            strategies
                .iter()
                .map(|strategy| {
                    let kept: Vec<usize> = match strategy {
                        EvalStrategy::Vanilla => Vec::new(),
                        EvalStrategy::KeepAll => (0..n).collect(),
                        EvalStrategy::OraclePositive | EvalStrategy::OracleNegative => {
                            let ci = Scorer::OracleCi.scores(s)?;
                            let positive = *strategy == EvalStrategy::OraclePositive;
                            (0..n)
                                .filter(|&i| if positive { ci[i] > 0.0 } else { ci[i] < 0.0 })
                                .collect()
                        }
                        EvalStrategy::ScorerPositive => (0..n).filter(|&i| scores[i] > 0.0).collect(),
                        EvalStrategy::ScorerTopK => rank_descending(&scores).into_iter().take(top_k).collect(),
                        EvalStrategy::RandomTopK => {
                            rank_descending(&random.scores(s)?).into_iter().take(top_k).collect()
                        }
                    };
                    Ok((answer_score(s, &kept, gateway, metric)?, kept.len()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let count = samples.len() as f64;
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(j, &strategy)| EvalRow {
            strategy,
            score: per_sample.iter().map(|r| r[j].0).sum::<f64>() / count,
            mean_kept: per_sample.iter().map(|r| r[j].1 as f64).sum::<f64>() / count,
        })
        .collect();
    Ok(EvalTable {
        scorer: scorer.kind(),
        metric,
        top_k,
        samples: samples.len(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRho {
    pub sample_id: String,
    pub contexts: usize,
    /// Absent when either side is constant or the list has fewer than two contexts.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanReport {
    pub samples: usize,
    pub defined: usize,
    pub mean_rho: Option<f64>,
    pub pooled_rho: Option<f64>,
    pub per_sample: Vec<SampleRho>,
}

fn defined(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-sample rank correlation between predicted scores and oracle influence, its mean,
/// and the correlation pooled over all (sample, context) pairs.
pub fn run_spearman(samples: &[Sample], predicted: &ScoreTable) -> Result<SpearmanReport> {
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut all_pred, mut all_ci) = (Vec::new(), Vec::new());
    for s in samples {
        let ci = Scorer::OracleCi.scores(s)?;
        let pred = predicted.aligned(s)?;
        let rho = defined(spearman(&pred, &ci))?;
        per_sample.push(SampleRho {
            sample_id: s.id().to_string(),
            contexts: ci.len(),
            rho,
        });
        all_pred.extend(pred);
        all_ci.extend(ci);
    }
    let rhos: Vec<f64> = per_sample.iter().filter_map(|r| r.rho).collect();
    Ok(SpearmanReport {
        samples: samples.len(),
        defined: rhos.len(),
        mean_rho: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
        pooled_rho: defined(spearman(&all_pred, &all_ci))?,
        per_sample,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn curves_csv(report: &CurveReport) -> String {
    let mut out = String::from("k,score,mean_added_ci\n");
    for p in &report.points {
        writeln!(out, "{},{:.6},{}", p.k, p.score, fmt_opt(p.mean_added_ci)).expect("string write");
    }
    out
}

pub fn eval_csv(table: &EvalTable) -> String {
    let mut out = String::from("strategy,scorer,metric,top_k,score,mean_kept\n");
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            r.strategy.name(),
            table.scorer.name(),
            table.metric.name(),
            table.top_k,
            r.score,
            r.mean_kept
        )
        .expect("string write");
    }
    out
}

pub fn spearman_csv(report: &SpearmanReport) -> String {
    let mut out = String::from("sample_id,contexts,rho\n");
    for r in &report.per_sample {
        writeln!(out, "{},{},{}", r.sample_id, r.contexts, fmt_opt(r.rho)).expect("string write");
    }
    out
}
