//! Threshold-free classification metrics: rank-statistic AUC and expected
//! calibration error with small-bin exclusion.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Area under the ROC curve as a rank statistic: the probability that a
/// uniformly drawn positive outscores a uniformly drawn negative, ties
/// counted half. Computed with midranks, so tied scores are exact, and
/// invariant under any strictly monotone transform of the scores.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("auc: non-finite score".into()));
    }
    let mut n_pos = 0u64;
    for &l in labels {
        if l == 1.0 {
            n_pos += 1;
        } else if l != 0.0 {
            return Err(Error::Metric(format!("auc: label {l} is not binary")));
        }
    }
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "auc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Walk tie groups, assigning every member the group midrank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // 1-based average rank
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Reliability diagram over equal-width confidence bins plus the expected
/// calibration error. Bins below `min_count` stay in the diagram but are
/// excluded from the ECE, whose weights renormalize over included bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityBins {
    /// `bins + 1` edges over [0, 1]; the last bin includes 1.0.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub included: Vec<bool>,
    pub min_count: usize,
    pub ece: f64,
}

impl ReliabilityBins {
    /// CSV rows (`bin_lo,bin_hi,count,mean_confidence,accuracy,included`)
    /// for external plotting.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy", "included"])?;
        for i in 0..self.counts.len() {
            w.write_record([
                format!("{}", self.edges[i]),
                format!("{}", self.edges[i + 1]),
                format!("{}", self.counts[i]),
                format!("{}", self.mean_confidence[i]),
                format!("{}", self.accuracy[i]),
                format!("{}", self.included[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bin confidences, compare to observed correctness, and compute the ECE
/// over sufficiently populated bins.
pub fn ece(
    confidences: &[f64],
    correct: &[bool],
    bins: usize,
    min_count: usize,
) -> Result<ReliabilityBins> {
    if confidences.len() != correct.len() {
        return Err(Error::Metric(format!(
            "ece: {} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() || bins == 0 {
        return Err(Error::Metric("ece: empty input or zero bins".into()));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Metric("ece: confidence outside [0, 1]".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct_sum = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        conf_sum[b] += c;
        correct_sum[b] += ok as u64 as f64;
    }
    let included: Vec<bool> = counts.iter().map(|&c| c >= min_count).collect();
    let total_included: usize =
        counts.iter().zip(&included).filter(|(_, &inc)| inc).map(|(&c, _)| c).sum();
    if total_included == 0 {
        return Err(Error::Metric(format!(
            "ece: every bin has fewer than {min_count} samples"
        )));
    }
    let mut e = 0.0;
    let mut mean_confidence = vec![0.0; bins];
    let mut accuracy = vec![0.0; bins];
    for b in 0..bins {
        if counts[b] > 0 {
            mean_confidence[b] = conf_sum[b] / counts[b] as f64;
            accuracy[b] = correct_sum[b] / counts[b] as f64;
        }
        if included[b] {
            e += counts[b] as f64 / total_included as f64
                * (mean_confidence[b] - accuracy[b]).abs();
        }
    }
    Ok(ReliabilityBins {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        mean_confidence,
        accuracy,
        included,
        min_count,
        ece: e,
    })
}
