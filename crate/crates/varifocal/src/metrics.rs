//! Evaluation metrics: accuracy, macro-F1, per-case accuracy with and
//! without dispatch, confusion matrices and one-vs-all macro ROC/AUC.

use serde::{Deserialize, Serialize};

use crate::dispatch::{dispatch_case, CaseProbabilities};
use crate::error::{Error, Result};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_pairs(preds: &[usize], truths: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::invalid("prediction/label length mismatch"));
        }
        let mut cm = Self::new(n_classes);
        for (&p, &t) in preds.iter().zip(truths) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n_classes || pred >= self.n_classes {
            return Err(Error::invalid(format!(
                "class out of range: truth {truth}, pred {pred}, classes {}",
                self.n_classes
            )));
        }
        self.counts[truth * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|k| self.count(k, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Precision, recall and F1 per class. Classes with an empty
    /// denominator contribute 0 and still count toward macro averages.
    pub fn per_class(&self) -> Vec<ClassScores> {
        (0..self.n_classes)
            .map(|j| {
                let tp = self.count(j, j) as f64;
                let fp: f64 = (0..self.n_classes)
                    .filter(|&t| t != j)
                    .map(|t| self.count(t, j) as f64)
                    .sum();
                let fn_: f64 = (0..self.n_classes)
                    .filter(|&p| p != j)
                    .map(|p| self.count(j, p) as f64)
                    .sum();
                let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScores { precision, recall, f1 }
            })
            .collect()
    }

    pub fn f1_macro(&self) -> f64 {
        let scores = self.per_class();
        scores.iter().map(|s| s.f1).sum::<f64>() / self.n_classes as f64
    }

    /// Rows of the matrix as CSV text (header `true\pred,0,1,...`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for j in 0..self.n_classes {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for t in 0..self.n_classes {
            out.push_str(&t.to_string());
            for p in 0..self.n_classes {
                out.push_str(&format!(",{}", self.count(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Fraction of matching prediction/label pairs.
pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::invalid("accuracy needs equal, non-empty inputs"));
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Predictions and labels of one evaluated patient case.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub preds: Vec<usize>,
    pub truths: Vec<usize>,
}

/// Per-case accuracy (argmax assignment, no dispatch), averaged over cases.
pub fn acc_per_case(cases: &[CaseOutcome]) -> Result<MeanStd> {
    if cases.is_empty() {
        return Err(Error::invalid("acc_per_case needs at least one case"));
    }
    let accs: Vec<f64> = cases
        .iter()
        .map(|c| accuracy(&c.preds, &c.truths))
        .collect::<Result<_>>()?;
    Ok(mean_std(&accs))
}

/// Per-case accuracy after running the dispatch strategy on each case's
/// probability matrix.
pub fn acc_per_case_d(
    cases: &[(CaseProbabilities, Vec<usize>)],
    th: f64,
) -> Result<MeanStd> {
    if cases.is_empty() {
        return Err(Error::invalid("acc_per_case_d needs at least one case"));
    }
    let accs: Vec<f64> = cases
        .iter()
        .map(|(probs, truths)| {
            let assignment = dispatch_case(probs, th)?;
            let preds = assignment.labels(probs.len());
            accuracy(&preds, truths)
        })
        .collect::<Result<_>>()?;
    Ok(mean_std(&accs))
}

/// One-vs-all AUC for a single class given scores and binary membership.
/// Tie-aware Mann-Whitney formulation, identical to the trapezoidal area
/// under the threshold-swept ROC curve.
fn auc_binary(scores: &[f64], is_positive: &[bool]) -> Option<f64> {
    let pos = is_positive.iter().filter(|&&b| b).count();
    let neg = is_positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over ties
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if is_positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro-averaged one-vs-all ROC AUC. Classes without both a positive and a
/// negative example are skipped; their names are returned for reporting.
pub fn roc_auc_macro(scores: &[Vec<f64>], truths: &[usize]) -> Result<(f64, Vec<usize>)> {
    if scores.is_empty() || scores.len() != truths.len() {
        return Err(Error::invalid("roc_auc_macro needs equal, non-empty inputs"));
    }
    let n_classes = scores[0].len();
    if truths.iter().all(|&t| t == truths[0]) {
        return Err(Error::invalid("roc_auc_macro: single-class ground truth"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for class in 0..n_classes {
        let class_scores: Vec<f64> = scores.iter().map(|row| row[class]).collect();
        let membership: Vec<bool> = truths.iter().map(|&t| t == class).collect();
        match auc_binary(&class_scores, &membership) {
            Some(auc) => {
                total += auc;
                used += 1;
            }
            None => skipped.push(class),
        }
    }
    if used == 0 {
        return Err(Error::invalid("roc_auc_macro: no class had both outcomes"));
    }
    Ok((total / used as f64, skipped))
}

/// Complete evaluation summary, serialized as the report JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub n_cases: usize,
    pub acc_type: f64,
    pub f1_macro_type: f64,
    pub acc_polarity: f64,
    pub f1_macro_polarity: f64,
    pub acc_per_case: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_per_case_d: Option<MeanStd>,
    pub auc_macro_type: f64,
    pub auc_macro_polarity: f64,
    pub per_class_type: Vec<ClassScores>,
    /// Classes skipped in the type AUC for lack of both outcomes.
    pub auc_skipped_types: Vec<usize>,
}

impl EvaluationReport {
    /// Plain-text table for terminal output.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "samples: {}   cases: {}\n",
            self.n_samples, self.n_cases
        ));
        out.push_str(&format!(
            "{:<22} {:>8} {:>8}\n",
            "metric", "type", "polarity"
        ));
        out.push_str(&format!(
            "{:<22} {:>8.4} {:>8.4}\n",
            "accuracy", self.acc_type, self.acc_polarity
        ));
        out.push_str(&format!(
            "{:<22} {:>8.4} {:>8.4}\n",
            "macro F1", self.f1_macro_type, self.f1_macro_polarity
        ));
        out.push_str(&format!(
            "{:<22} {:>8.4} {:>8.4}\n",
            "macro AUC", self.auc_macro_type, self.auc_macro_polarity
        ));
        out.push_str(&format!(
            "{:<22} {:>8.4} ±{:.4}\n",
            "acc per case", self.acc_per_case.mean, self.acc_per_case.std
        ));
        if let Some(d) = self.acc_per_case_d {
            out.push_str(&format!(
                "{:<22} {:>8.4} ±{:.4}\n",
                "acc per case (disp)", d.mean, d.std
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn f1_macro_hand_values() {
        // diagonal -> 1.0
        let cm = ConfusionMatrix::from_pairs(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.f1_macro(), 1.0);

        // 2-class [[1,1],[1,1]] -> macro 0.5
        let cm = ConfusionMatrix::from_pairs(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((cm.f1_macro() - 0.5).abs() < 1e-12);

        // 3-class [[2,0,0],[1,1,0],[0,0,2]] -> 37/45
        let preds = [0, 0, 0, 1, 2, 2];
        let truths = [0, 0, 1, 1, 2, 2];
        let cm = ConfusionMatrix::from_pairs(&preds, &truths, 3).unwrap();
        assert_eq!(cm.count(1, 0), 1);
        assert!((cm.f1_macro() - 37.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_equals_trace_over_total() {
        let preds = [0, 1, 1, 2, 0];
        let truths = [0, 1, 2, 2, 1];
        let cm = ConfusionMatrix::from_pairs(&preds, &truths, 3).unwrap();
        assert_eq!(cm.accuracy(), accuracy(&preds, &truths).unwrap());
    }

    #[test]
    fn f1_macro_permutation_invariant() {
        let preds = [0, 0, 1, 2, 2, 1, 0];
        let truths = [0, 1, 1, 2, 0, 1, 0];
        let cm = ConfusionMatrix::from_pairs(&preds, &truths, 3).unwrap();
        // permute classes 0->1, 1->2, 2->0 consistently
        let perm = |k: usize| (k + 1) % 3;
        let p2: Vec<usize> = preds.iter().map(|&k| perm(k)).collect();
        let t2: Vec<usize> = truths.iter().map(|&k| perm(k)).collect();
        let cm2 = ConfusionMatrix::from_pairs(&p2, &t2, 3).unwrap();
        assert!((cm.f1_macro() - cm2.f1_macro()).abs() < 1e-12);
    }

    #[test]
    fn per_case_mean_and_std() {
        let cases = vec![
            CaseOutcome { preds: vec![1, 1], truths: vec![1, 1] },
            CaseOutcome { preds: vec![1, 0], truths: vec![1, 1] },
        ];
        let ms = acc_per_case(&cases).unwrap();
        assert!((ms.mean - 0.75).abs() < 1e-12);
        assert!((ms.std - 0.25).abs() < 1e-12);

        let one = vec![CaseOutcome { preds: vec![2, 2, 2], truths: vec![2, 2, 2] }];
        let ms = acc_per_case(&one).unwrap();
        assert_eq!((ms.mean, ms.std), (1.0, 0.0));
    }

    #[test]
    fn auc_hand_trace() {
        // scores {0.1, 0.4, 0.35, 0.8}, truth {0,0,1,1} -> 0.75
        let auc = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_limits_and_invariance() {
        // perfectly separated -> 1.0
        let auc = auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
        // constant scores -> 0.5
        let auc = auc_binary(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
        // monotone transform leaves AUC unchanged
        let s = [0.1, 0.7, 0.3, 0.9, 0.5];
        let t = [false, true, false, true, true];
        let a1 = auc_binary(&s, &t).unwrap();
        let s2: Vec<f64> = s.iter().map(|v| (v * 7.0).exp()).collect();
        let a2 = auc_binary(&s2, &t).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
    }

    #[test]
    fn macro_auc_skips_absent_classes() {
        let scores = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.8, 0.1],
        ];
        let truths = [0, 1, 0, 1]; // class 2 never appears
        let (auc, skipped) = roc_auc_macro(&scores, &truths).unwrap();
        assert_eq!(skipped, vec![2]);
        assert!(auc > 0.9);
        assert!(roc_auc_macro(&scores, &[1, 1, 1, 1]).is_err());
    }
}
