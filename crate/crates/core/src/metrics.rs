//! Per-AU precision, recall, F1 and AUC, and the evaluation report.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::AuModel;

/// Binarized outcome counts for one AU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// A prediction counts as positive when `p >= threshold`.
    pub fn from_scores(preds: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_inputs(preds, labels)?;
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }
}

/// Precision, recall and F1; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl F1Score {
    /// F1 is undefined whenever P or R is. Otherwise it is computed as
    /// `2TP / (2TP + FP + FN)`, the harmonic mean of P and R, taken as 0
    /// when P = R = 0.
    pub fn from_confusion(c: &Confusion) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = match (precision, recall) {
            (Some(_), Some(_)) => ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            _ => None,
        };
        Self { precision, recall, f1 }
    }
}

fn check_inputs(preds: &[f64], labels: &[u8]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract("predictions must lie in [0, 1]".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Contract("labels must be binary".into()));
    }
    Ok(())
}

pub fn f1_score(preds: &[f64], labels: &[u8], threshold: f64) -> Result<F1Score> {
    Ok(F1Score::from_confusion(&Confusion::from_scores(preds, labels, threshold)?))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via average ranks. `None` if either class is absent.
pub fn auc_score(preds: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(preds, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    // Twice the average 1-based rank keeps everything in integers.
    let mut rank_sum2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && preds[order[end]] == preds[order[start]] {
            end += 1;
        }
        let twice_avg = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        rank_sum2 += twice_avg * pos_in_group;
        start = end;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(Some(u2 as f64 / (2 * p * n) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuMetrics {
    pub au: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_au: Vec<AuMetrics>,
    /// Unweighted mean over defined per-AU F1 values.
    pub macro_f1: Option<f64>,
    pub macro_auc: Option<f64>,
    pub n_samples: usize,
    pub threshold: f64,
    /// AUs left out of the macro means because their value is undefined.
    pub excluded_f1: Vec<usize>,
    pub excluded_auc: Vec<usize>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Vec<usize>) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut missing = Vec::new();
    for (i, v) in values.enumerate() {
        match v {
            Some(x) => {
                sum += x;
                count += 1;
            }
            None => missing.push(i),
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

impl EvalReport {
    /// `probs[s][i]` is the probability of AU `i` for sample `s`.
    pub fn from_predictions(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty corpus".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} prediction rows but {} label rows",
                probs.len(),
                labels.len()
            )));
        }
        let n_aus = labels[0].len();
        if probs.iter().any(|r| r.len() != n_aus) || labels.iter().any(|r| r.len() != n_aus) {
            return Err(Error::Contract("ragged prediction or label rows".into()));
        }
        let mut per_au = Vec::with_capacity(n_aus);
        for au in 0..n_aus {
            let p: Vec<f64> = probs.iter().map(|r| r[au]).collect();
            let y: Vec<u8> = labels.iter().map(|r| r[au]).collect();
            let f = f1_score(&p, &y, threshold)?;
            per_au.push(AuMetrics {
                au,
                precision: f.precision,
                recall: f.recall,
                f1: f.f1,
                auc: auc_score(&p, &y)?,
                support: y.iter().map(|&v| v as u64).sum(),
            });
        }
        let (macro_f1, excluded_f1) = mean_defined(per_au.iter().map(|m| m.f1));
        let (macro_auc, excluded_auc) = mean_defined(per_au.iter().map(|m| m.auc));
        Ok(Self {
            per_au,
            macro_f1,
            macro_auc,
            n_samples: probs.len(),
            threshold,
            excluded_f1,
            excluded_auc,
        })
    }

    /// Columns: `au,precision,recall,f1,auc,support`; one row per AU then a
    /// `macro` summary row. Undefined values are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("au,precision,recall,f1,auc,support\n");
        for m in &self.per_au {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.au,
                cell(m.precision),
                cell(m.recall),
                cell(m.f1),
                cell(m.auc),
                m.support
            );
        }
        let _ = writeln!(
            out,
            "macro,,,{},{},{}",
            cell(self.macro_f1),
            cell(self.macro_auc),
            self.n_samples
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs inference over the corpus in order and aggregates every metric.
pub fn evaluate(model: &AuModel, corpus: &Corpus, threshold: f64) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty corpus".into()));
    }
    let inputs: Vec<_> = corpus.records.iter().map(|r| &r.input).collect();
    let out = crate::trainer::infer(model, &inputs)?;
    let probs: Vec<Vec<f64>> = (0..out.probabilities.rows())
        .map(|i| out.probabilities.row(i).to_vec())
        .collect();
    EvalReport::from_predictions(&probs, &corpus.labels(), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(p: &[f64], y: &[u8]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    if p[i] > p[j] {
                        num += 1.0;
                    } else if p[i] == p[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| num / pairs)
    }

    #[test]
    fn f1_examples() {
        let f = f1_score(&[0.9, 0.1, 0.8], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (Some(1.0), Some(1.0), Some(1.0)));
        // TP=1 FP=1 FN=1 gives P = R = 0.5.
        let f = f1_score(&[0.9, 0.7, 0.2], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((f.precision, f.recall), (Some(0.5), Some(0.5)));
        assert_eq!(f.f1, Some(0.5));
        // TP=1 FP=1 FN=0.
        let f = f1_score(&[0.9, 0.7, 0.2], &[1, 0, 0], 0.5).unwrap();
        assert_eq!((f.precision, f.recall), (Some(0.5), Some(1.0)));
        assert!((f.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_undefined_cases() {
        let f = f1_score(&[0.1, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (None, None, None));
        let f = f1_score(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (None, Some(0.0), None));
        let f = f1_score(&[0.9, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (Some(0.0), None, None));
        let f = f1_score(&[0.9, 0.2], &[0, 1], 0.5).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (Some(0.0), Some(0.0), Some(0.0)));
        assert!(matches!(f1_score(&[0.1], &[1, 0], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_score(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), Some(1.0));
        assert_eq!(auc_score(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), Some(0.5));
        assert_eq!(auc_score(&[0.9, 0.4, 0.6], &[1, 0, 1]).unwrap(), Some(1.0));
        assert_eq!(auc_score(&[0.9, 0.4], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn report_macro_and_exclusions() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![1, 0], vec![0, 0]];
        let r = EvalReport::from_predictions(&probs, &labels, 0.5).unwrap();
        assert_eq!(r.macro_f1, Some(1.0));
        assert_eq!(r.excluded_f1, vec![1]);
        assert_eq!(r.excluded_auc, vec![1]);
        assert_eq!(r.n_samples, 2);
        let csv = r.to_csv();
        assert!(csv.starts_with("au,precision,recall,f1,auc,support\n"));
        assert_eq!(csv.lines().count(), 4);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["per_au"][1]["f1"], serde_json::Value::Null);

        let single = EvalReport::from_predictions(&[vec![0.9], vec![0.1], vec![0.7]], &[vec![1], vec![1], vec![0]], 0.5)
            .unwrap();
        assert_eq!(single.macro_f1, single.per_au[0].f1);
        assert!(EvalReport::from_predictions(&[], &[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(rows in prop::collection::vec((0u8..5, 0u8..2), 1..60)) {
            let p: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 4.0).collect();
            let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
            prop_assert_eq!(auc_score(&p, &y).unwrap(), brute_auc(&p, &y));
        }

        #[test]
        fn auc_invariant_to_monotone_transform(rows in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..50)) {
            let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let q: Vec<f64> = p.iter().map(|x| x * x * x).collect();
            prop_assert_eq!(auc_score(&p, &y).unwrap(), auc_score(&q, &y).unwrap());
        }

        #[test]
        fn f1_invariant_to_threshold_preserving_transform(rows in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..50)) {
            let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
            // sqrt keeps 0.25 as the boundary when mapped against 0.5.
            let q: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
            prop_assert_eq!(f1_score(&p, &y, 0.25).unwrap(), f1_score(&q, &y, 0.5).unwrap());
        }
    }
}
