//! Answer-quality metrics (EM, token F1, choice accuracy) and Spearman rank correlation.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AnswerSet;

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[serde(alias = "em")]
    ExactMatch,
    #[serde(alias = "f1")]
    TokenF1,
    #[serde(alias = "acc")]
    Accuracy,
}

impl MetricKind {
    pub fn score(self, prediction: &str, answers: &AnswerSet) -> f64 {
        match self {
            MetricKind::ExactMatch => exact_match(prediction, answers),
            MetricKind::TokenF1 => token_f1(prediction, answers),
            MetricKind::Accuracy => accuracy(prediction, answers),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ExactMatch => "em",
            MetricKind::TokenF1 => "f1",
            MetricKind::Accuracy => "acc",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" | "exact-match" => Ok(MetricKind::ExactMatch),
            "f1" | "token-f1" => Ok(MetricKind::TokenF1),
            "acc" | "accuracy" => Ok(MetricKind::Accuracy),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, answers: &AnswerSet) -> f64 {
    let pred = normalize_answer(prediction);
    if answers.iter().any(|a| normalize_answer(a) == pred) {
        1.0
    } else {
        0.0
    }
}

/// Choice-label accuracy; the answer set holds the correct label(s).
pub fn accuracy(prediction: &str, labels: &AnswerSet) -> f64 {
    exact_match(prediction, labels)
}

fn f1_tokens(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over aliases of multiset token F1 on normalized text.
pub fn token_f1(prediction: &str, answers: &AnswerSet) -> f64 {
    let pred_norm = normalize_answer(prediction);
    let pred: Vec<&str> = pred_norm.split_whitespace().collect();
    answers
        .iter()
        .map(|a| {
            let gold_norm = normalize_answer(a);
            let gold: Vec<&str> = gold_norm.split_whitespace().collect();
            f1_tokens(&pred, &gold)
        })
        .fold(0.0, f64::max)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero rank variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "spearman inputs",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(a: &[&str]) -> AnswerSet {
        AnswerSet::new(a.iter().copied())
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Donald Trump."), "donald trump");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("1957"), "1957");
        assert_eq!(normalize_answer("  An   apple,  a day "), "apple day");
        // articles only match whole words
        assert_eq!(normalize_answer("Theatre anthem"), "theatre anthem");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("Donald Trump", &set(&["Donald Trump"])), 1.0);
        assert_eq!(exact_match("the Donald Trump.", &set(&["donald trump"])), 1.0);
        assert_eq!(exact_match("Trump", &set(&["Donald Trump"])), 0.0);
        assert_eq!(exact_match("DJT", &set(&["Donald Trump", "DJT"])), 1.0);
    }

    #[test]
    fn f1_cases() {
        // P = 1/2, R = 1
        let f = token_f1("Donald Trump", &set(&["Trump"]));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("Paris France", &set(&["paris france"])), 1.0);
        assert_eq!(token_f1("Berlin", &set(&["Paris"])), 0.0);
        assert_eq!(token_f1("", &set(&["Paris"])), 0.0);
        assert_eq!(token_f1("the", &set(&["a"])), 1.0);
        // multiset overlap: one shared "new" token only
        let f = token_f1("new new york", &set(&["new york"]));
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_label_match() {
        assert_eq!(accuracy("(B)", &set(&["b"])), 1.0);
        assert_eq!(accuracy("C", &set(&["b"])), 0.0);
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[30., 20., 10.]).unwrap() + 1.0).abs() < 1e-12);
        // 1 - 6*2/(4*15)
        assert!((spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn tied_ranks_average() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_normalization(p in "[A-Za-z ,.!]{0,20}", g in "[A-Za-z ,.]{1,20}") {
            let gold = set(&[g.as_str()]);
            let gold_n = set(&[normalize_answer(&g).as_str()]);
            let pn = normalize_answer(&p);
            prop_assert_eq!(exact_match(&p, &gold), exact_match(&pn, &gold_n));
            prop_assert_eq!(token_f1(&p, &gold), token_f1(&pn, &gold_n));
            prop_assert!(token_f1(&p, &gold) >= exact_match(&p, &gold));
        }

        #[test]
        fn spearman_symmetric_and_monotone_invariant(
            xs in proptest::collection::vec(-50i32..50, 2..20),
            ys in proptest::collection::vec(-50i32..50, 2..20),
        ) {
            let n = xs.len().min(ys.len());
            let x: Vec<f64> = xs[..n].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = ys[..n].iter().map(|&v| v as f64).collect();
            if let Ok(r) = spearman(&x, &y) {
                prop_assert!((r - spearman(&y, &x).unwrap()).abs() < 1e-12);
                let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0 * v).collect();
                prop_assert!((r - spearman(&tx, &y).unwrap()).abs() < 1e-12);
            }
            let distinct = x.iter().any(|v| *v != x[0]);
            if distinct {
                prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
