//! Reference implementations of the surrogate-model training losses and the
//! Gumbel soft-selection mask. A trainer must reproduce these numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::ContrastivePairSet;
use crate::types::CIVector;

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_KL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub beta: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    Supervised,
    EndToEnd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: Option<f64>,
    pub cts: Option<f64>,
    pub suf: Option<f64>,
    pub nec: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub paradigm: Paradigm,
    pub components: LossComponents,
    pub coefficients: LossCoefficients,
    pub combined: f64,
}

/// `mse + beta * cts` for supervised training, `suf + lambda * nec` end to end.
pub fn combine(
    components: LossComponents,
    paradigm: Paradigm,
    coefficients: LossCoefficients,
) -> Result<LossBreakdown> {
    let combined = match paradigm {
        Paradigm::Supervised => {
            let mse = components.mse.ok_or(Error::MissingComponent("mse"))?;
            let cts = components.cts.ok_or(Error::MissingComponent("cts"))?;
            mse + coefficients.beta * cts
        }
        Paradigm::EndToEnd => {
            let suf = components.suf.ok_or(Error::MissingComponent("suf"))?;
            let nec = components.nec.ok_or(Error::MissingComponent("nec"))?;
            suf + coefficients.lambda * nec
        }
    };
    if !combined.is_finite() {
        return Err(Error::InvalidArgument("combined loss is not finite".into()));
    }
    Ok(LossBreakdown {
        paradigm,
        components,
        coefficients,
        combined,
    })
}

/// Mean over samples of (per-sample mean squared error) / p(i).
pub fn weighted_mse(predictions: &[Vec<f64>], targets: &[CIVector], p: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.len() != p.len() {
        return Err(Error::LengthMismatch {
            what: "weighted mse batch",
            left: predictions.len(),
            right: targets.len().min(p.len()),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((pred, target), &weight) in predictions.iter().zip(targets).zip(p) {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "frequency weight must be positive, got {weight}"
            )));
        }
        if pred.len() != target.len() {
            return Err(Error::LengthMismatch {
                what: "prediction vs target",
                left: pred.len(),
                right: target.len(),
            });
        }
        if pred.is_empty() {
            continue;
        }
        let se: f64 = pred.iter().zip(&target.values).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / pred.len() as f64 / weight;
    }
    Ok(total / predictions.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE-style loss averaged over anchors, on raw dot products scaled by `1/tau`.
pub fn contrastive_loss(embeddings: &[Vec<f64>], pairs: &[ContrastivePairSet], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let get = |i: usize| {
        embeddings.get(i).map(Vec::as_slice).ok_or(Error::IndexOutOfRange {
            index: i,
            len: embeddings.len(),
        })
    };
    let mut total = 0.0;
    for set in pairs {
        if set.negatives.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "anchor {} has no negatives",
                set.anchor
            )));
        }
        let anchor = get(set.anchor)?;
        let pos = dot(anchor, get(set.positive)?) / tau;
        let mut logits = vec![pos];
        for &n in &set.negatives {
            logits.push(dot(anchor, get(n)?) / tau);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - pos;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean of per-sample contrastive losses over the samples that have pairs.
pub fn contrastive_loss_batch(batch: &[(Vec<Vec<f64>>, Vec<ContrastivePairSet>)], tau: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for (emb, pairs) in batch {
        if pairs.is_empty() {
            continue;
        }
        total += contrastive_loss(emb, pairs, tau)?;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

/// Output of [`gumbel_mask`]: `soft` keep probabilities and the values used in
/// the forward pass (equal to `soft` unless hardened).
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelMask {
    pub soft: Vec<f64>,
    pub forward: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn standard_gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Two-category Gumbel-Softmax per context on logits `(m_i, 0)`, returning the keep coordinate.
pub fn gumbel_mask(scores: &[f64], temperature: f64, seed: u64, hard: bool) -> Result<GumbelMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gumbel_mask_with(scores, temperature, &mut rng, hard)
}

pub fn gumbel_mask_with<R: Rng>(scores: &[f64], temperature: f64, rng: &mut R, hard: bool) -> Result<GumbelMask> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let soft: Vec<f64> = scores
        .iter()
        .map(|&m| {
            let keep = standard_gumbel(rng);
            let drop = standard_gumbel(rng);
            // softmax over two logits is a logistic of their difference
            sigmoid((m + keep - drop) / temperature)
        })
        .collect();
    let forward = if hard {
        soft.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect()
    } else {
        soft.clone()
    };
    Ok(GumbelMask { soft, forward })
}

fn check_logprobs(lp: &[f64]) -> Result<()> {
    if lp.iter().any(|v| !v.is_finite() || *v > 0.0) {
        return Err(Error::InvalidArgument(
            "log-probabilities must be finite and <= 0".into(),
        ));
    }
    Ok(())
}

/// Batch mean of the gold answer's negative log-likelihood under the kept contexts.
pub fn sufficiency_loss(gold_token_logprobs: &[Vec<f64>]) -> Result<f64> {
    if gold_token_logprobs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for lp in gold_token_logprobs {
        check_logprobs(lp)?;
        total -= lp.iter().sum::<f64>();
    }
    Ok(total / gold_token_logprobs.len() as f64)
}

/// `KL(uniform || f)` with `f` clamped below at `epsilon`.
pub fn necessity_loss(distribution: &[f64], epsilon: f64) -> Result<f64> {
    if distribution.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    if distribution.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "distribution entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = distribution.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("distribution sums to {sum}, not 1")));
    }
    let u = 1.0 / distribution.len() as f64;
    Ok(distribution.iter().map(|&f| u * (u / f.max(epsilon)).ln()).sum())
}

/// Batch mean of [`necessity_loss`].
pub fn necessity_loss_batch(distributions: &[Vec<f64>], epsilon: f64) -> Result<f64> {
    if distributions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in distributions {
        total += necessity_loss(d, epsilon)?;
    }
    Ok(total / distributions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(anchor: usize, positive: usize, negatives: Vec<usize>) -> ContrastivePairSet {
        ContrastivePairSet {
            anchor,
            positive,
            negatives,
            epsilon1: 0.05,
            epsilon2: 0.3,
        }
    }

    #[test]
    fn weighted_mse_cases() {
        let t = vec![CIVector::new(vec![0.5, -0.5]), CIVector::new(vec![1.0, 0.0])];
        let p = vec![vec![0.5, -0.5], vec![1.0, 0.0]];
        assert_eq!(weighted_mse(&p, &t, &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(
            weighted_mse(&[vec![1.0]], &[CIVector::new(vec![0.0])], &[0.5]).unwrap(),
            2.0
        );

        // uniform p reduces to the plain element-wise MSE
        let p = vec![vec![0.1, 0.2], vec![0.3, -0.4]];
        let plain = [(0.1f64 - 0.5), (0.2 + 0.5), (0.3 - 1.0), (-0.4 - 0.0)]
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            / 4.0;
        assert!((weighted_mse(&p, &t, &[1.0, 1.0]).unwrap() - plain).abs() < 1e-12);

        assert!(weighted_mse(&p, &t, &[1.0, 0.0]).is_err());
        assert!(weighted_mse(&p, &t, &[1.0]).is_err());
    }

    #[test]
    fn contrastive_cases() {
        // equal positive and negative similarity: -ln(1/2)
        let e = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.5, -0.5]];
        let l = contrastive_loss(&e, &[pair(0, 1, vec![2])], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // large positive similarity drives the loss to zero
        let e = vec![vec![1.0], vec![1e3], vec![0.1]];
        assert!(contrastive_loss(&e, &[pair(0, 1, vec![2])], 1.0).unwrap() < 1e-12);

        // doubling tau equals halving every dot product
        let e = vec![vec![0.3, 0.8], vec![0.9, -0.2], vec![-0.4, 0.6], vec![0.1, 0.1]];
        let half: Vec<Vec<f64>> = e.iter().map(|v| v.iter().map(|x| x / 2.0).collect()).collect();
        let ps = [pair(0, 1, vec![2, 3])];
        let a = contrastive_loss(&e, &ps, 2.0).unwrap();
        // scaling the anchor only halves every dot product involving it
        let mut anchor_half = e.clone();
        anchor_half[0] = half[0].clone();
        let b = contrastive_loss(&anchor_half, &ps, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(contrastive_loss(&e, &ps, 0.0).is_err());
        assert!(contrastive_loss(&e, &[pair(0, 1, vec![])], 1.0).is_err());
        assert!(contrastive_loss(&e, &[pair(0, 9, vec![2])], 1.0).is_err());
    }

    #[test]
    fn gumbel_cases() {
        let a = gumbel_mask(&[0.3, -1.0, 2.0], 0.5, 11, false).unwrap();
        let b = gumbel_mask(&[0.3, -1.0, 2.0], 0.5, 11, false).unwrap();
        assert_eq!(a, b);
        assert!(a.soft.iter().all(|v| *v > 0.0 && *v < 1.0));

        let big = gumbel_mask(&[f64::INFINITY, 1e6], 1.0, 3, false).unwrap();
        assert_eq!(big.soft[0], 1.0);
        assert!(big.soft[1] > 1.0 - 1e-12);

        let hard = gumbel_mask(&[5.0, -5.0], 0.1, 4, true).unwrap();
        assert_eq!(hard.forward, vec![1.0, 0.0]);
        assert_ne!(hard.soft, hard.forward);

        assert!(gumbel_mask(&[0.0], 0.0, 1, false).is_err());
    }

    #[test]
    fn gumbel_high_temperature_centres_on_half() {
        let m = gumbel_mask(&vec![1.5; 5000], 1e4, 8, false).unwrap();
        let mean = m.soft.iter().sum::<f64>() / m.soft.len() as f64;
        assert!((mean - 0.5).abs() < 0.02);
        assert!(m.soft.iter().all(|v| (v - 0.5).abs() < 0.02));
    }

    #[test]
    fn sufficiency_cases() {
        assert_eq!(sufficiency_loss(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        // uniform over V = 50 for 3 tokens
        let v = 50f64;
        let l = sufficiency_loss(&[vec![-(v.ln()); 3]]).unwrap();
        assert!((l - 3.0 * v.ln()).abs() < 1e-12);
        assert!(sufficiency_loss(&[vec![0.1]]).is_err());
        let lo = sufficiency_loss(&[vec![-1.0, -2.0]]).unwrap();
        let hi = sufficiency_loss(&[vec![-0.5, -2.0]]).unwrap();
        assert!(hi < lo);
    }

    #[test]
    fn necessity_cases() {
        assert!(necessity_loss(&[0.25; 4], DEFAULT_KL_EPSILON).unwrap().abs() < 1e-15);
        let l = necessity_loss(&[0.75, 0.25], DEFAULT_KL_EPSILON).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.14384).abs() < 1e-5);
        let l = necessity_loss(&[1.0, 0.0], 1e-8).unwrap();
        let oracle = 0.5 * (0.5f64).ln() + 0.5 * (0.5f64 / 1e-8).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!(necessity_loss(&[0.5, 0.4], 1e-8).is_err());
        assert!(necessity_loss(&[1.5, -0.5], 1e-8).is_err());
    }

    #[test]
    fn combine_cases() {
        let c = LossComponents {
            mse: Some(0.4),
            cts: Some(2.0),
            ..Default::default()
        };
        let zero_beta = LossCoefficients {
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(combine(c, Paradigm::Supervised, zero_beta).unwrap().combined, 0.4);
        let d = combine(c, Paradigm::Supervised, LossCoefficients::default()).unwrap();
        assert_eq!(
            (d.coefficients.beta, d.coefficients.tau, d.coefficients.lambda),
            (0.1, 1.0, 1.0)
        );
        assert!((d.combined - 0.6).abs() < 1e-15);
        let e = LossComponents {
            suf: Some(1.0),
            nec: Some(2.0),
            ..Default::default()
        };
        assert_eq!(
            combine(e, Paradigm::EndToEnd, LossCoefficients::default())
                .unwrap()
                .combined,
            3.0
        );
        assert!(matches!(
            combine(e, Paradigm::Supervised, LossCoefficients::default()),
            Err(Error::MissingComponent("mse"))
        ));
    }

    proptest! {
        #[test]
        fn weighted_mse_non_negative(
            rows in proptest::collection::vec(proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..6), 1..5),
            p in 0.01f64..1.0,
        ) {
            let preds: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
            let targets: Vec<CIVector> = rows.iter().map(|r| CIVector::new(r.iter().map(|x| x.1).collect())).collect();
            let ps = vec![p; rows.len()];
            let l = weighted_mse(&preds, &targets, &ps).unwrap();
            prop_assert!(l >= 0.0);
            let same = weighted_mse(&preds, &preds.iter().cloned().map(CIVector::new).collect::<Vec<_>>(), &ps).unwrap();
            prop_assert_eq!(same, 0.0);
        }

        #[test]
        fn contrastive_monotone_in_similarities(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            pos in proptest::collection::vec(-1.0f64..1.0, 3),
            neg in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 0.05);
            let h = 1e-3;
            let norm2: f64 = a.iter().map(|x| x * x).sum();
            let ps = [pair(0, 1, vec![2])];
            let base = contrastive_loss(&[a.clone(), pos.clone(), neg.clone()], &ps, 1.0).unwrap();
            // moving the positive along the anchor raises its dot product by h*|a|^2
            let pos_up: Vec<f64> = pos.iter().zip(&a).map(|(p, x)| p + h * x).collect();
            let l_pos = contrastive_loss(&[a.clone(), pos_up, neg.clone()], &ps, 1.0).unwrap();
            prop_assert!(l_pos < base, "d/dpos {} {} {}", base, l_pos, norm2);
            let neg_up: Vec<f64> = neg.iter().zip(&a).map(|(p, x)| p + h * x).collect();
            let l_neg = contrastive_loss(&[a.clone(), pos, neg_up], &ps, 1.0).unwrap();
            prop_assert!(l_neg > base);
        }

        #[test]
        fn necessity_non_negative(raw in proptest::collection::vec(0.001f64..1.0, 2..8)) {
            let s: f64 = raw.iter().sum();
            let d: Vec<f64> = raw.iter().map(|x| x / s).collect();
            prop_assert!(necessity_loss(&d, DEFAULT_KL_EPSILON).unwrap() >= -1e-12);
        }
    }
}
