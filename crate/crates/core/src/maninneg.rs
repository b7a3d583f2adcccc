//! Manifestation-driven hard-negative batch construction.
//!
//! A batch is assembled around a uniformly drawn anchor: Hamming distances
//! to the anchor's manifestation are drawn from a Gaussian over the integer
//! distances truncated to a window, one candidate is picked uniformly from
//! the bucket at each drawn distance, and instances whose manifestation
//! collides with an already-kept one are dropped (one random representative
//! survives). The Gaussian mean is annealed from easy (`mu_max`) to hard
//! (`mu_min`) over the first training steps, after which it stays put.
//!
//! Empty buckets inside the window simply drop out of the distance support;
//! the pmf is renormalized over the distances that actually exist for the
//! current anchor. Only if *no* windowed bucket is populated does sampling
//! fail.

use crate::error::{Error, Result};
use crate::manifestation::{DedupKey, ManifestationVector, DIM};
use crate::rng::{gen_index, RngStream};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Sampler configuration. Defaults: distance window `[1, 18]`, σ = 3,
/// hardness annealed linearly from μ = 11 at step 0 to μ = 0 at step 50.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManiNegConfig {
    pub mu_max: f64,
    pub mu_min: f64,
    pub sigma: f64,
    /// Smallest admissible anchor–negative distance (≥ 1: a negative never
    /// shares the anchor's manifestation).
    pub window_min: u32,
    /// Largest admissible anchor–negative distance.
    pub window_max: u32,
    /// Step at which μ reaches `mu_min` and stays there.
    pub anneal_end_step: u64,
    /// Instances drawn per batch (anchor included) before deduplication.
    pub batch_size: usize,
}

impl Default for ManiNegConfig {
    fn default() -> Self {
        Self {
            mu_max: 11.0,
            mu_min: 0.0,
            sigma: 3.0,
            window_min: 1,
            window_max: 18,
            anneal_end_step: 50,
            batch_size: 64,
        }
    }
}

impl ManiNegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("maninneg.sigma = {} must be positive", self.sigma)));
        }
        if self.window_min < 1 || self.window_min > self.window_max || self.window_max as usize > DIM {
            return Err(Error::Config(format!(
                "maninneg window [{}, {}] must satisfy 1 <= min <= max <= {DIM}",
                self.window_min, self.window_max
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "maninneg.batch_size = {} leaves no room for negatives",
                self.batch_size
            )));
        }
        if self.mu_min > self.mu_max {
            return Err(Error::Config(format!(
                "maninneg.mu_min {} exceeds mu_max {}",
                self.mu_min, self.mu_max
            )));
        }
        Ok(())
    }
}

/// Hardness schedule: linear interpolation from `mu_max` at step 0 to
/// `mu_min` at `anneal_end_step`, constant afterwards.
pub fn mu_at_step(cfg: &ManiNegConfig, step: u64) -> f64 {
    if cfg.anneal_end_step == 0 || step >= cfg.anneal_end_step {
        return cfg.mu_min;
    }
    let frac = step as f64 / cfg.anneal_end_step as f64;
    cfg.mu_max + (cfg.mu_min - cfg.mu_max) * frac
}

/// Snapshot of the schedule at a step; carried by the trainer so the
/// sampled hardness is always consistent with the logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub step: u64,
    pub mu_current: f64,
}

impl AnnealState {
    pub fn at(cfg: &ManiNegConfig, step: u64) -> Self {
        Self { step, mu_current: mu_at_step(cfg, step) }
    }
}

/// Gaussian over the integer points of `support`, renormalized to sum to 1.
/// `support` is whatever distances actually exist for the anchor at hand;
/// an empty support cannot be normalized and is a sampling error.
pub fn truncated_gaussian_pmf(mu: f64, sigma: f64, support: &[u32]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Sampling("truncated gaussian over empty support".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma = {sigma} must be positive")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let weights: Vec<f64> = support
        .iter()
        .map(|&d| {
            let diff = d as f64 - mu;
            (-diff * diff * inv).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric(format!(
            "truncated gaussian weights degenerate (sum {total:e})"
        )));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Distance-bucketed view of a dataset relative to one anchor
/// manifestation: `buckets[d]` lists the indices at Hamming distance `d`.
/// The anchor itself (and any manifestation-identical instance) sits in
/// bucket 0, which the window never reaches.
#[derive(Debug, Clone)]
pub struct HammingBucketIndex {
    pub anchor_key: DedupKey,
    pub buckets: Vec<Vec<u32>>,
}

/// Build the bucket index of `vectors` around `anchor` by direct scan.
pub fn build_index(anchor: &ManifestationVector, vectors: &[ManifestationVector]) -> HammingBucketIndex {
    let mut buckets = vec![Vec::new(); DIM + 1];
    for (i, v) in vectors.iter().enumerate() {
        buckets[anchor.hamming(v) as usize].push(i as u32);
    }
    HammingBucketIndex { anchor_key: anchor.dedup_key(), buckets }
}

/// One sampled batch: dataset indices with the anchor first, plus the raw
/// pre-deduplication distance draws for auditing the sampling distribution.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<u32>,
    pub sampled_distances: Vec<u32>,
}

/// Windowed distances with non-empty buckets.
fn realized_support(index: &HammingBucketIndex, cfg: &ManiNegConfig) -> Vec<u32> {
    (cfg.window_min..=cfg.window_max)
        .filter(|&d| !index.buckets[d as usize].is_empty())
        .collect()
}

/// Draw from a categorical distribution by inverse CDF over `pmf`.
fn sample_categorical(pmf: &[f64], rng: &mut RngStream) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1 // guard against accumulated rounding
}

/// Sample negatives for a *given* anchor through a prebuilt index. Returns
/// the batch (anchor first) and the raw distance draws.
pub fn sample_batch_for_anchor(
    anchor_idx: u32,
    index: &HammingBucketIndex,
    cfg: &ManiNegConfig,
    state: &AnnealState,
    vectors: &[ManifestationVector],
    rng: &mut RngStream,
) -> Result<SampledBatch> {
    let support = realized_support(index, cfg);
    if support.is_empty() {
        return Err(Error::Sampling(format!(
            "no candidates within distance window [{}, {}] of anchor {anchor_idx}",
            cfg.window_min, cfg.window_max
        )));
    }
    let pmf = truncated_gaussian_pmf(state.mu_current, cfg.sigma, &support)?;

    let draws = cfg.batch_size - 1;
    let mut sampled_distances = Vec::with_capacity(draws);
    let mut candidates = Vec::with_capacity(draws);
    for _ in 0..draws {
        let d = support[sample_categorical(&pmf, rng)];
        sampled_distances.push(d);
        let bucket = &index.buckets[d as usize];
        candidates.push(bucket[gen_index(rng, bucket.len())]);
    }

    // Deduplicate by manifestation: group draws by key in first-appearance
    // order, keep one uniformly chosen representative per group. The batch
    // shrinks rather than resampling. Negatives sit at distance ≥ 1, so
    // none can collide with the anchor's own key.
    let mut order: Vec<DedupKey> = Vec::new();
    let mut groups: HashMap<DedupKey, Vec<u32>> = HashMap::new();
    for &c in &candidates {
        let key = vectors[c as usize].dedup_key();
        groups.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        groups.get_mut(&key).unwrap().push(c);
    }
    let mut indices = Vec::with_capacity(order.len() + 1);
    indices.push(anchor_idx);
    for key in order {
        let members = &groups[&key];
        indices.push(members[gen_index(rng, members.len())]);
    }
    Ok(SampledBatch { indices, sampled_distances })
}

/// Stateless batch sampling: uniform anchor, fresh index. Used by parallel
/// audits where each batch owns an independent stream.
pub fn sample_batch_once(
    vectors: &[ManifestationVector],
    cfg: &ManiNegConfig,
    state: &AnnealState,
    rng: &mut RngStream,
) -> Result<SampledBatch> {
    cfg.validate()?;
    if vectors.len() < 2 {
        return Err(Error::Sampling(format!(
            "dataset of {} instances cannot form a batch",
            vectors.len()
        )));
    }
    let anchor_idx = gen_index(rng, vectors.len()) as u32;
    let index = build_index(&vectors[anchor_idx as usize], vectors);
    sample_batch_for_anchor(anchor_idx, &index, cfg, state, vectors, rng)
}

/// Training-loop sampler: owns the manifestation table and memoizes bucket
/// indexes per distinct anchor manifestation, so repeated anchors across
/// steps reuse their index. Memoization is invisible to the draw sequence.
pub struct ManiNegSampler {
    cfg: ManiNegConfig,
    vectors: Vec<ManifestationVector>,
    memo: HashMap<DedupKey, HammingBucketIndex>,
}

impl ManiNegSampler {
    pub fn new(vectors: Vec<ManifestationVector>, cfg: ManiNegConfig) -> Result<Self> {
        cfg.validate()?;
        if vectors.len() < 2 {
            return Err(Error::Sampling(format!(
                "dataset of {} instances cannot form a batch",
                vectors.len()
            )));
        }
        Ok(Self { cfg, vectors, memo: HashMap::new() })
    }

    pub fn config(&self) -> &ManiNegConfig {
        &self.cfg
    }

    pub fn vectors(&self) -> &[ManifestationVector] {
        &self.vectors
    }

    pub fn sample_batch(&mut self, state: &AnnealState, rng: &mut RngStream) -> Result<SampledBatch> {
        let anchor_idx = gen_index(rng, self.vectors.len()) as u32;
        let key = self.vectors[anchor_idx as usize].dedup_key();
        if !self.memo.contains_key(&key) {
            let index = build_index(&self.vectors[anchor_idx as usize], &self.vectors);
            self.memo.insert(key, index);
        }
        sample_batch_for_anchor(
            anchor_idx,
            &self.memo[&key],
            &self.cfg,
            state,
            &self.vectors,
            rng,
        )
    }
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Empirical-vs-analytic audit of the sampler's distance distribution.
#[derive(Debug, Clone)]
pub struct DistanceAudit {
    /// Distances `window_min..=window_max`.
    pub distances: Vec<u32>,
    /// Observed frequency of each distance among all raw draws.
    pub empirical: Vec<f64>,
    /// Expected frequency: the per-anchor renormalized pmf averaged over
    /// the batches actually sampled.
    pub analytic: Vec<f64>,
    pub total_draws: u64,
    pub tv_distance: f64,
}

/// Sample `batches` batches at a fixed anneal state, each on the derived
/// stream `(seed, "audit", batch)`, and histogram the raw distance draws.
/// Embarrassingly parallel: batch order never matters.
pub fn audit_distances(
    vectors: &[ManifestationVector],
    cfg: &ManiNegConfig,
    state: &AnnealState,
    batches: u64,
    seed: u64,
) -> Result<DistanceAudit> {
    cfg.validate()?;
    let span = (cfg.window_max - cfg.window_min + 1) as usize;
    let per_batch: Vec<(Vec<u64>, Vec<f64>)> = crate::par::try_map_indexed(batches as usize, |b| {
        let mut rng = crate::rng::derive(seed, "audit", b as u64);
        let anchor_idx = gen_index(&mut rng, vectors.len()) as u32;
        let index = build_index(&vectors[anchor_idx as usize], vectors);
        let support = realized_support(&index, cfg);
        if support.is_empty() {
            return Err(Error::Sampling(format!(
                "audit batch {b}: no candidates within window"
            )));
        }
        let pmf = truncated_gaussian_pmf(state.mu_current, cfg.sigma, &support)?;
        let batch =
            sample_batch_for_anchor(anchor_idx, &index, cfg, state, vectors, &mut rng)?;
        let mut counts = vec![0u64; span];
        for &d in &batch.sampled_distances {
            counts[(d - cfg.window_min) as usize] += 1;
        }
        let mut expected = vec![0.0; span];
        for (&d, &p) in support.iter().zip(&pmf) {
            expected[(d - cfg.window_min) as usize] = p;
        }
        Ok((counts, expected))
    })?;

    let mut counts = vec![0u64; span];
    let mut expected_sum = vec![0.0; span];
    for (c, e) in &per_batch {
        for i in 0..span {
            counts[i] += c[i];
            expected_sum[i] += e[i];
        }
    }
    let total_draws: u64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / total_draws as f64).collect();
    let analytic: Vec<f64> = expected_sum.iter().map(|e| e / batches as f64).collect();
    let tv = total_variation(&empirical, &analytic);
    Ok(DistanceAudit {
        distances: (cfg.window_min..=cfg.window_max).collect(),
        empirical,
        analytic,
        total_draws,
        tv_distance: tv,
    })
}

/// A dataset whose every anchor sees every distance in `[1, max_d]`:
/// multiplicity `copies` of the "staircase" vectors `v_j` = first `j` bits
/// set, `j = 0..=max_d`, so `hamming(v_i, v_j) = |i − j|`. Used to exercise
/// the sampler on a support with no holes.
pub fn staircase_vectors(max_d: u32, copies: usize) -> Vec<ManifestationVector> {
    assert!(max_d as usize <= DIM);
    let mut out = Vec::with_capacity((max_d as usize + 1) * copies);
    for j in 0..=max_d {
        let v = ManifestationVector::from_indices(
            &(0..j as usize).collect::<Vec<_>>(),
        )
        .unwrap();
        for _ in 0..copies {
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> ManiNegConfig {
        ManiNegConfig::default()
    }

    #[test]
    fn schedule_hits_documented_values() {
        let c = cfg();
        assert_eq!(mu_at_step(&c, 0), 11.0);
        assert_eq!(mu_at_step(&c, 25), 5.5);
        assert_eq!(mu_at_step(&c, 50), 0.0);
        assert_eq!(mu_at_step(&c, 51), 0.0);
        assert_eq!(mu_at_step(&c, 10_000), 0.0);
        // Monotone non-increasing along the way.
        let mut prev = f64::INFINITY;
        for s in 0..60 {
            let mu = mu_at_step(&c, s);
            assert!(mu <= prev);
            prev = mu;
        }
    }

    #[test]
    fn anneal_state_mirrors_schedule() {
        let c = cfg();
        let st = AnnealState::at(&c, 25);
        assert_eq!(st.mu_current, 5.5);
        assert_eq!(st.step, 25);
    }

    #[test]
    fn pmf_is_normalized_with_mode_at_mu() {
        let support: Vec<u32> = (1..=18).collect();
        let pmf = truncated_gaussian_pmf(11.0, 3.0, &support).unwrap();
        let sum: f64 = pmf.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let mode = support[pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0];
        assert_eq!(mode, 11);
    }

    #[test]
    fn pmf_single_point_support_is_one() {
        let pmf = truncated_gaussian_pmf(11.0, 3.0, &[5]).unwrap();
        assert_eq!(pmf, vec![1.0]);
    }

    #[test]
    fn pmf_empty_support_is_sampling_error() {
        assert!(matches!(
            truncated_gaussian_pmf(11.0, 3.0, &[]),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn index_buckets_partition_the_dataset() {
        let mut rng = rng::root(5);
        let vectors: Vec<ManifestationVector> = (0..200)
            .map(|_| {
                use rand::Rng;
                let bits: Vec<bool> = (0..DIM).map(|_| rng.gen_bool(0.25)).collect();
                ManifestationVector::from_bools(&bits).unwrap()
            })
            .collect();
        let anchor = vectors[0];
        let index = build_index(&anchor, &vectors);
        // Anchor lands in bucket 0.
        assert!(index.buckets[0].contains(&0));
        // Union of buckets covers every index exactly once.
        let mut seen = vec![false; vectors.len()];
        for (d, bucket) in index.buckets.iter().enumerate() {
            for &i in bucket {
                assert!(!seen[i as usize]);
                seen[i as usize] = true;
                // Brute-force distance agreement.
                assert_eq!(anchor.hamming(&vectors[i as usize]) as usize, d);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn index_on_clones_put_everything_in_bucket_zero() {
        let v = ManifestationVector::from_indices(&[1, 4, 9]).unwrap();
        let vectors = vec![v; 6];
        let index = build_index(&v, &vectors);
        assert_eq!(index.buckets[0].len(), 6);
        assert!(index.buckets[1..].iter().all(|b| b.is_empty()));
    }

    #[test]
    fn hand_built_distances_bucket_correctly() {
        let anchor = ManifestationVector::from_indices(&[0, 1, 2, 3, 4, 5, 6]).unwrap();
        let d2 = ManifestationVector::from_indices(&[0, 1, 2, 3, 4]).unwrap();
        let d2b = ManifestationVector::from_indices(&[0, 1, 2, 3, 4, 5, 6, 10, 11]).unwrap();
        let d7 = ManifestationVector::from_indices(&[]).unwrap();
        let vectors = vec![anchor, d2, d2b, d7];
        let index = build_index(&anchor, &vectors);
        assert_eq!(index.buckets[0], vec![0]);
        assert_eq!(index.buckets[2], vec![1, 2]);
        assert_eq!(index.buckets[7], vec![3]);
    }

    #[test]
    fn all_negatives_sharing_one_manifestation_collapse() {
        let anchor = ManifestationVector::from_indices(&[0]).unwrap();
        let neg = ManifestationVector::from_indices(&[1, 2]).unwrap();
        let mut vectors = vec![anchor];
        vectors.extend(std::iter::repeat(neg).take(30));
        let mut c = cfg();
        c.batch_size = 16;
        let mut sampler = ManiNegSampler::new(vectors, c.clone()).unwrap();
        let mut r = rng::root(3);
        // Force the anchor to be instance 0 by resampling until it is.
        for _ in 0..50 {
            let state = AnnealState::at(&c, 100);
            let batch = sampler.sample_batch(&state, &mut r).unwrap();
            if batch.indices[0] == 0 {
                assert_eq!(batch.indices.len(), 2, "anchor plus one representative");
                assert_ne!(batch.indices[1], 0);
                return;
            }
        }
        panic!("anchor 0 never drawn");
    }

    #[test]
    fn no_duplicate_manifestations_and_min_distance_one() {
        let vectors = staircase_vectors(18, 7);
        let c = cfg();
        let mut sampler = ManiNegSampler::new(vectors.clone(), c.clone()).unwrap();
        let mut r = rng::root(17);
        for step in [0u64, 10, 30, 80] {
            let state = AnnealState::at(&c, step);
            let batch = sampler.sample_batch(&state, &mut r).unwrap();
            let anchor = vectors[batch.indices[0] as usize];
            let mut keys = std::collections::HashSet::new();
            for &i in &batch.indices {
                assert!(keys.insert(vectors[i as usize].dedup_key()), "duplicate manifestation");
            }
            for &i in &batch.indices[1..] {
                assert!(anchor.hamming(&vectors[i as usize]) >= 1);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_stream() {
        let vectors = staircase_vectors(18, 5);
        let c = cfg();
        let state = AnnealState::at(&c, 7);
        let mut a = rng::derive(9, "s", 0);
        let mut b = rng::derive(9, "s", 0);
        let ba = sample_batch_once(&vectors, &c, &state, &mut a).unwrap();
        let bb = sample_batch_once(&vectors, &c, &state, &mut b).unwrap();
        assert_eq!(ba.indices, bb.indices);
        assert_eq!(ba.sampled_distances, bb.sampled_distances);
    }

    #[test]
    fn memoized_and_stateless_paths_agree() {
        let vectors = staircase_vectors(18, 5);
        let c = cfg();
        let state = AnnealState::at(&c, 3);
        let mut sampler = ManiNegSampler::new(vectors.clone(), c.clone()).unwrap();
        let mut a = rng::derive(21, "s", 1);
        let mut b = rng::derive(21, "s", 1);
        for _ in 0..10 {
            let m = sampler.sample_batch(&state, &mut a).unwrap();
            let s = sample_batch_once(&vectors, &c, &state, &mut b).unwrap();
            assert_eq!(m.indices, s.indices);
        }
    }

    #[test]
    fn harder_mu_draws_closer_negatives() {
        let vectors = staircase_vectors(18, 5);
        let c = cfg();
        let mean_distance = |mu_step: u64, seed: u64| -> f64 {
            let state = AnnealState::at(&c, mu_step);
            let mut total = 0u64;
            let mut n = 0u64;
            for b in 0..1000 {
                let mut r = rng::derive(seed, "mono", b);
                let batch = sample_batch_once(&vectors, &c, &state, &mut r).unwrap();
                total += batch.sampled_distances.iter().map(|&d| d as u64).sum::<u64>();
                n += batch.sampled_distances.len() as u64;
            }
            total as f64 / n as f64
        };
        let easy = mean_distance(0, 5); // μ = 11
        let hard = mean_distance(100, 5); // μ = 0
        assert!(
            hard < easy,
            "mean distance at μ=0 ({hard}) should undercut μ=11 ({easy})"
        );
    }

    #[test]
    fn empty_window_is_a_sampling_error() {
        // Candidates exist only at distance 0 (manifestation clones).
        let v = ManifestationVector::from_indices(&[2, 3]).unwrap();
        let vectors = vec![v; 10];
        let c = cfg();
        let state = AnnealState::at(&c, 0);
        let mut r = rng::root(2);
        assert!(matches!(
            sample_batch_once(&vectors, &c, &state, &mut r),
            Err(Error::Sampling(_))
        ));

        // Candidates exist only beyond the window.
        let far = ManifestationVector::from_indices(&(0..25).collect::<Vec<_>>()).unwrap();
        let near = ManifestationVector::zero();
        let mut vectors = vec![near; 1];
        vectors.extend(std::iter::repeat(far).take(9));
        // Anchor choice is random; only the `near` anchor has an empty
        // window (far↔far distances are 0). Try until anchor 0 is drawn.
        let mut saw_error = false;
        for s in 0..40 {
            let mut r = rng::derive(s, "w", 0);
            match sample_batch_once(&vectors, &c, &state, &mut r) {
                Err(Error::Sampling(_)) => {
                    saw_error = true;
                    break;
                }
                _ => continue,
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn audit_tv_is_small_on_a_dense_dataset() {
        // A full-length chain: every anchor v_j sees every distance in
        // [1, 18] because max(j, 35 - j) >= 18 for all j.
        let vectors = staircase_vectors(35, 3);
        let c = cfg();
        let state = AnnealState::at(&c, 0); // μ = 11
        let audit = audit_distances(&vectors, &c, &state, 2000, 42).unwrap();
        assert!(
            audit.tv_distance < 0.02,
            "tv {} over {} draws",
            audit.tv_distance,
            audit.total_draws
        );
        // With a full support the analytic histogram is the window pmf.
        let pmf = truncated_gaussian_pmf(11.0, 3.0, &audit.distances).unwrap();
        for (a, p) in audit.analytic.iter().zip(&pmf) {
            assert!((a - p).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut c = cfg();
        c.sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.window_min = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.window_max = 40;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}
