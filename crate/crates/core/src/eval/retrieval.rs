//! Cross-modal retrieval diagnostics in the shared embedding space:
//! estimating a query image's manifestation vector from nearby training
//! manifestations (distance-threshold strategy) and retrieving the single
//! nearest report to build a grade confusion matrix, with a permutation
//! test against grade-shuffled nulls.
//!
//! Cosine distance is `1 − cosine similarity`, so a distance threshold of
//! 0.4 admits neighbors with similarity at least 0.6.

use crate::error::{Error, Result};
use crate::manifestation::{ManifestationVector, DIM};
use crate::matrix::Matrix;
use crate::rng;
use crate::synthdata::N_GRADES;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Cosine-distance radius of the neighborhood.
    pub t_distance: f64,
    /// A dimension is predicted present when the neighborhood mean strictly
    /// exceeds this.
    pub t_classification: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { t_distance: 0.4, t_classification: 0.15 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_distance > 0.0 && self.t_distance <= 2.0) {
            return Err(Error::Config(format!(
                "t_distance {} outside (0, 2]",
                self.t_distance
            )));
        }
        if !(self.t_classification > 0.0 && self.t_classification < 1.0) {
            return Err(Error::Config(format!(
                "t_classification {} outside (0, 1)",
                self.t_classification
            )));
        }
        Ok(())
    }
}

fn cosine_row(query: &[f64], bank: &Matrix, out: &mut Vec<f64>) -> Result<()> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::Numeric("zero-norm query embedding".into()));
    }
    out.clear();
    for i in 0..bank.rows {
        let row = bank.row(i);
        let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn == 0.0 {
            return Err(Error::Numeric(format!("zero-norm bank embedding at row {i}")));
        }
        out.push(dot / (qn * rn));
    }
    Ok(())
}

/// One query's neighborhood-averaged manifestation estimate.
#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub estimate: ManifestationVector,
    /// Per-dimension neighborhood means before thresholding.
    pub mean_vector: Vec<f64>,
    pub neighbors: usize,
    /// True when no training embedding fell inside `t_distance`; the
    /// estimate is then all-absent and should be treated as an abstention.
    pub abstained: bool,
}

/// Average the manifestation vectors of all training points within cosine
/// distance `t_distance` of the query; dimensions whose mean strictly
/// exceeds `t_classification` are predicted present.
pub fn manifestation_estimate(
    query: &[f64],
    train_emb: &Matrix,
    train_mani: &[ManifestationVector],
    cfg: &RetrievalConfig,
) -> Result<EstimateOutcome> {
    cfg.validate()?;
    if train_emb.rows != train_mani.len() || train_emb.rows == 0 {
        return Err(Error::Contract(format!(
            "{} training embeddings vs {} manifestation vectors",
            train_emb.rows,
            train_mani.len()
        )));
    }
    if query.len() != train_emb.cols {
        return Err(Error::Shape(format!(
            "query dimension {} vs bank dimension {}",
            query.len(),
            train_emb.cols
        )));
    }
    let mut sims = Vec::new();
    cosine_row(query, train_emb, &mut sims)?;
    let mut mean = vec![0.0; DIM];
    let mut neighbors = 0usize;
    for (i, &s) in sims.iter().enumerate() {
        if 1.0 - s <= cfg.t_distance {
            neighbors += 1;
            for k in train_mani[i].active_indices() {
                mean[k] += 1.0;
            }
        }
    }
    if neighbors == 0 {
        return Ok(EstimateOutcome {
            estimate: ManifestationVector::zero(),
            mean_vector: mean,
            neighbors: 0,
            abstained: true,
        });
    }
    let inv = 1.0 / neighbors as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let mut estimate = ManifestationVector::zero();
    for (k, &m) in mean.iter().enumerate() {
        if m > cfg.t_classification {
            estimate.set(k, true);
        }
    }
    Ok(EstimateOutcome { estimate, mean_vector: mean, neighbors, abstained: false })
}

/// Estimation quality aggregated over queries and dimensions. Accuracy,
/// sensitivity and specificity are averaged over the 35 dimensions;
/// dimensions where a rate is undefined (no positives, or no negatives,
/// among the scored queries) are skipped for that rate and counted in
/// `dims_skipped_*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Accuracy a predictor with the same per-dimension positive rates
    /// would achieve by chance: mean over dimensions of
    /// `p̂·p + (1−p̂)(1−p)`.
    pub chance_accuracy: f64,
    pub n_queries: usize,
    pub n_abstained: usize,
    pub dims_skipped_sensitivity: usize,
    pub dims_skipped_specificity: usize,
}

/// Estimate every test query against the training bank and score the
/// predictions dimension-wise against the true test manifestations.
/// Abstaining queries are excluded from the scoring denominator.
pub fn manifestation_metrics(
    test_emb: &Matrix,
    test_mani: &[ManifestationVector],
    train_emb: &Matrix,
    train_mani: &[ManifestationVector],
    cfg: &RetrievalConfig,
) -> Result<EstimationMetrics> {
    if test_emb.rows != test_mani.len() || test_emb.rows == 0 {
        return Err(Error::Contract(format!(
            "{} test embeddings vs {} manifestation vectors",
            test_emb.rows,
            test_mani.len()
        )));
    }
    let mut scored: Vec<(ManifestationVector, &ManifestationVector)> = Vec::new();
    let mut n_abstained = 0usize;
    for i in 0..test_emb.rows {
        let out = manifestation_estimate(test_emb.row(i), train_emb, train_mani, cfg)?;
        if out.abstained {
            n_abstained += 1;
        } else {
            scored.push((out.estimate, &test_mani[i]));
        }
    }
    if scored.is_empty() {
        return Err(Error::Metric(
            "every query abstained; no neighborhood within t_distance".into(),
        ));
    }
    let n = scored.len() as f64;
    let mut acc_sum = 0.0;
    let mut sens_sum = 0.0;
    let mut spec_sum = 0.0;
    let mut chance_sum = 0.0;
    let mut sens_dims = 0usize;
    let mut spec_dims = 0usize;
    for k in 0..DIM {
        let mut tp = 0.0;
        let mut tn = 0.0;
        let mut fp = 0.0;
        let mut fnv = 0.0;
        for (pred, truth) in &scored {
            match (pred.get(k), truth.get(k)) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnv += 1.0,
            }
        }
        acc_sum += (tp + tn) / n;
        if tp + fnv > 0.0 {
            sens_sum += tp / (tp + fnv);
            sens_dims += 1;
        }
        if tn + fp > 0.0 {
            spec_sum += tn / (tn + fp);
            spec_dims += 1;
        }
        let p = (tp + fnv) / n;
        let p_hat = (tp + fp) / n;
        chance_sum += p_hat * p + (1.0 - p_hat) * (1.0 - p);
    }
    Ok(EstimationMetrics {
        accuracy: acc_sum / DIM as f64,
        sensitivity: if sens_dims > 0 { sens_sum / sens_dims as f64 } else { 0.0 },
        specificity: if spec_dims > 0 { spec_sum / spec_dims as f64 } else { 0.0 },
        chance_accuracy: chance_sum / DIM as f64,
        n_queries: test_emb.rows,
        n_abstained,
        dims_skipped_sensitivity: DIM - sens_dims,
        dims_skipped_specificity: DIM - spec_dims,
    })
}

/// Grade confusion from 1-NN report retrieval. Rows are true image grades,
/// columns retrieved-report grades; grades are 1-based ordinals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn diagonal_fraction(&self) -> f64 {
        let diag: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total.max(1) as f64
    }

    /// CSV with a header row of retrieved grades and one row per true grade.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true_grade".to_string()];
        header.extend((1..=self.counts.len()).map(|g| format!("retrieved_{g}")));
        w.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![format!("{}", i + 1)];
            rec.extend(row.iter().map(|c| format!("{c}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_grades(name: &str, grades: &[u8]) -> Result<()> {
    if let Some(&g) = grades.iter().find(|&&g| g == 0 || g as usize > N_GRADES) {
        return Err(Error::Contract(format!(
            "{name} grade {g} outside 1..={N_GRADES}"
        )));
    }
    Ok(())
}

/// Index of the most-similar bank row for each query row (ties resolved to
/// the lowest index).
pub fn nearest_indices(queries: &Matrix, bank: &Matrix) -> Result<Vec<usize>> {
    if bank.rows == 0 {
        return Err(Error::Contract("retrieval bank is empty".into()));
    }
    if queries.cols != bank.cols {
        return Err(Error::Shape(format!(
            "query dimension {} vs bank dimension {}",
            queries.cols, bank.cols
        )));
    }
    let mut sims = Vec::new();
    let mut out = Vec::with_capacity(queries.rows);
    for i in 0..queries.rows {
        cosine_row(queries.row(i), bank, &mut sims)?;
        let best = sims
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .expect("bank verified non-empty");
        out.push(best);
    }
    Ok(out)
}

/// Retrieve the single nearest report for every image and tabulate
/// retrieved grade against true grade.
pub fn report_retrieve(
    image_emb: &Matrix,
    image_grades: &[u8],
    report_emb: &Matrix,
    report_grades: &[u8],
) -> Result<ConfusionMatrix> {
    if image_emb.rows != image_grades.len() || image_emb.rows == 0 {
        return Err(Error::Contract(format!(
            "{} image embeddings vs {} grades",
            image_emb.rows,
            image_grades.len()
        )));
    }
    if report_emb.rows != report_grades.len() {
        return Err(Error::Contract(format!(
            "{} report embeddings vs {} grades",
            report_emb.rows,
            report_grades.len()
        )));
    }
    check_grades("image", image_grades)?;
    check_grades("report", report_grades)?;
    let nn = nearest_indices(image_emb, report_emb)?;
    let mut counts = vec![vec![0u64; N_GRADES]; N_GRADES];
    for (i, &j) in nn.iter().enumerate() {
        counts[image_grades[i] as usize - 1][report_grades[j] as usize - 1] += 1;
    }
    Ok(ConfusionMatrix { counts, total: image_emb.rows as u64 })
}

/// Permutation-test outcome for retrieval grade agreement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationOutcome {
    /// Observed diagonal fraction of the true confusion matrix.
    pub observed: f64,
    /// Mean diagonal fraction under grade-shuffled nulls.
    pub null_mean: f64,
    pub n_permutations: usize,
    /// `(1 + #{null ≥ observed}) / (1 + n)` — add-one estimator, never 0.
    pub p_value: f64,
}

/// Test whether 1-NN retrieval matches grades better than chance by
/// shuffling the report grade labels. Nearest neighbors are computed once;
/// only the grade assignment is permuted, which is exactly the null of
/// "reports carry no grade information at their embedding positions".
pub fn retrieval_permutation_test(
    image_emb: &Matrix,
    image_grades: &[u8],
    report_emb: &Matrix,
    report_grades: &[u8],
    n_permutations: usize,
    seed: u64,
) -> Result<PermutationOutcome> {
    if n_permutations == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    let observed =
        report_retrieve(image_emb, image_grades, report_emb, report_grades)?.diagonal_fraction();
    let nn = nearest_indices(image_emb, report_emb)?;
    let n = image_emb.rows as f64;
    let mut null_mean = 0.0;
    let mut at_least = 0usize;
    let mut grades = report_grades.to_vec();
    for p in 0..n_permutations {
        let mut r = rng::derive(seed, "retrieval-null", p as u64);
        rng::shuffle(&mut grades, &mut r);
        let hits = nn
            .iter()
            .enumerate()
            .filter(|&(i, &j)| image_grades[i] == grades[j])
            .count();
        let frac = hits as f64 / n;
        null_mean += frac;
        if frac >= observed {
            at_least += 1;
        }
    }
    Ok(PermutationOutcome {
        observed,
        null_mean: null_mean / n_permutations as f64,
        n_permutations,
        p_value: (1.0 + at_least as f64) / (1.0 + n_permutations as f64),
    })
}
