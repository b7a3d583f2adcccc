//! Contrastive objectives over unit-norm embedding batches.
//!
//! Terminology used throughout: the *pair loss* for anchor `i` in modality
//! `m1` against candidates in `m2` is cross-entropy of a target row against
//! scores `exp(⟨z1_i, z2_k⟩/τ)` normalized by a denominator that sums over
//! every other instance (`k ≠ i`) in both modalities — the matched pair is
//! *not* part of the denominator, so with identical embeddings and hard
//! targets the pair loss is exactly `log(2(N−1))`. The batch loss sums the
//! pair loss over all anchors in both directions. `imc_loss` applies this
//! between the two image views; `itm_loss` averages it over the
//! image–text, image–manifestation and text–manifestation pairs, with label
//! smoothing on the text-involving pairs only; `total_loss` adds the two.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::tensor::{log_sum_exp, Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Which image view represents the image modality in the cross-modal terms
/// of one training step. Chosen by a fair coin per step from the training
/// stream and logged with the step metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageView {
    Cc,
    Mlo,
}

/// Temperatures, smoothing, and negative-set switches for all loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// τ for the image–manifestation pair.
    pub tau_image_mani: f64,
    /// τ for the image–text pair.
    pub tau_image_text: f64,
    /// τ for the manifestation–text pair.
    pub tau_mani_text: f64,
    /// τ for the intra-image (cc–mlo) term.
    pub tau_intra_image: f64,
    /// Smoothing mass α; applied to the text-involving pairs when
    /// `label_smoothing` is on.
    pub smoothing_alpha: f64,
    pub label_smoothing: bool,
    /// Keep same-modality similarities in every denominator. The published
    /// objective includes them; disabling restricts each denominator to the
    /// candidate modality.
    pub include_within_modality_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_image_mani: 0.03,
            tau_image_text: 0.3,
            tau_mani_text: 0.3,
            tau_intra_image: 0.03,
            smoothing_alpha: 0.1,
            label_smoothing: true,
            include_within_modality_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("tau_image_mani", self.tau_image_mani),
            ("tau_image_text", self.tau_image_text),
            ("tau_mani_text", self.tau_mani_text),
            ("tau_intra_image", self.tau_intra_image),
        ] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("{name} = {tau} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.smoothing_alpha) {
            return Err(Error::Config(format!(
                "smoothing_alpha = {} outside [0, 1)",
                self.smoothing_alpha
            )));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        if self.label_smoothing {
            self.smoothing_alpha
        } else {
            0.0
        }
    }
}

/// One training batch embedded into the shared space: `n×d` unit rows per
/// modality, id-aligned. Text and manifestation are absent under modality
/// ablations.
pub struct EmbeddingBatch {
    pub ids: Vec<u64>,
    pub image_cc: TensorId,
    pub image_mlo: TensorId,
    pub text: Option<TensorId>,
    pub mani: Option<TensorId>,
}

/// Per-term values of one loss evaluation, for the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub imc: f64,
    pub image_text: Option<f64>,
    pub image_mani: Option<f64>,
    pub text_mani: Option<f64>,
    pub total: f64,
}

/// Output of [`total_loss`]: the differentiable scalar plus its breakdown.
pub struct LossOutput {
    pub loss: TensorId,
    pub breakdown: LossBreakdown,
}

/// Cosine similarity of two unit vectors. Deviation from unit norm beyond
/// `1e-4` is a contract violation, not silently renormalized.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (name, v) in [("a", a), ("b", b)] {
        let norm = dot(v, v).sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "cosine_sim: input {name} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(dot(a, b))
}

/// Smoothed target matrix: `(1−α)·1[i=k] + α/n`. With `α = 0` this is
/// bit-for-bit the identity. Every row sums to 1.
pub fn smoothed_targets(n: usize, alpha: f64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Contract("smoothed_targets: empty batch".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("smoothing alpha {alpha} outside [0, 1)")));
    }
    let mut m = Matrix::zeros(n, n);
    if alpha == 0.0 {
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
    } else {
        let off = alpha / n as f64;
        for i in 0..n {
            for k in 0..n {
                m.data[i * n + k] = if i == k { (1.0 - alpha) + off } else { off };
            }
        }
    }
    Ok(m)
}

/// Straight-line evaluation of the pair loss for anchor `i`, direction
/// `z1 → z2`, against target row `targets[i, ·]`. This is the scalar,
/// non-differentiable form of the same quantity the tape op computes;
/// summing it over anchors and directions reproduces [`batch_cl_loss`].
pub fn pair_loss(
    z1: &Matrix,
    z2: &Matrix,
    i: usize,
    tau: f64,
    targets: &Matrix,
    include_within: bool,
) -> Result<f64> {
    let n = z1.rows;
    if z2.rows != n || z2.cols != z1.cols {
        return Err(Error::Shape(format!(
            "pair_loss: {n}x{} vs {}x{}",
            z1.cols, z2.rows, z2.cols
        )));
    }
    if n < 2 {
        return Err(Error::Contract(format!("pair_loss: batch of {n} has no negatives")));
    }
    if i >= n {
        return Err(Error::Contract(format!("pair_loss: anchor {i} outside batch of {n}")));
    }
    if targets.rows != n || targets.cols != n {
        return Err(Error::Shape(format!(
            "pair_loss: target matrix {}x{} for batch of {n}",
            targets.rows, targets.cols
        )));
    }
    let anchor = z1.row(i);
    let mut exponents = Vec::with_capacity(2 * (n - 1));
    for k in 0..n {
        if k == i {
            continue;
        }
        exponents.push(cosine_sim(anchor, z2.row(k))? / tau);
        if include_within {
            exponents.push(cosine_sim(anchor, z1.row(k))? / tau);
        }
    }
    let log_denom = log_sum_exp(&exponents);
    let mut target_term = 0.0;
    for k in 0..n {
        let p = targets.data[i * n + k];
        if p != 0.0 {
            target_term += p * (cosine_sim(anchor, z2.row(k))? / tau);
        }
    }
    Ok(log_denom - target_term)
}

/// Differentiable batch contrastive loss between two modalities: the pair
/// loss summed over all anchors and both directions.
pub fn batch_cl_loss(
    tape: &mut Tape,
    z1: TensorId,
    z2: TensorId,
    tau: f64,
    targets: &Matrix,
    include_within: bool,
) -> Result<TensorId> {
    let fwd = tape.contrastive_dir(z1, z2, tau, &targets.data, include_within)?;
    let bwd = tape.contrastive_dir(z2, z1, tau, &targets.data, include_within)?;
    tape.add(fwd, bwd)
}

/// Intra-image consistency: batch loss between the cc and mlo views with
/// hard targets.
pub fn imc_loss(tape: &mut Tape, batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<TensorId> {
    let n = batch.ids.len();
    let hard = smoothed_targets(n, 0.0)?;
    batch_cl_loss(
        tape,
        batch.image_cc,
        batch.image_mlo,
        cfg.tau_intra_image,
        &hard,
        cfg.include_within_modality_negatives,
    )
}

/// Cross-modal matching: mean of the batch losses over the modality pairs
/// that are present. Label smoothing applies to image–text and
/// text–manifestation; image–manifestation always uses hard targets. The
/// image side uses the per-step `view`.
pub fn itm_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    view: ImageView,
) -> Result<(TensorId, [Option<f64>; 3])> {
    let n = batch.ids.len();
    let image = match view {
        ImageView::Cc => batch.image_cc,
        ImageView::Mlo => batch.image_mlo,
    };
    let hard = smoothed_targets(n, 0.0)?;
    let smooth = smoothed_targets(n, cfg.alpha())?;
    let iw = cfg.include_within_modality_negatives;

    let mut terms: Vec<TensorId> = Vec::new();
    let mut values: [Option<f64>; 3] = [None, None, None];
    if let Some(text) = batch.text {
        let t = batch_cl_loss(tape, image, text, cfg.tau_image_text, &smooth, iw)?;
        values[0] = Some(tape.scalar(t)?);
        terms.push(t);
    }
    if let Some(mani) = batch.mani {
        let t = batch_cl_loss(tape, image, mani, cfg.tau_image_mani, &hard, iw)?;
        values[1] = Some(tape.scalar(t)?);
        terms.push(t);
    }
    if let (Some(text), Some(mani)) = (batch.text, batch.mani) {
        let t = batch_cl_loss(tape, text, mani, cfg.tau_mani_text, &smooth, iw)?;
        values[2] = Some(tape.scalar(t)?);
        terms.push(t);
    }
    if terms.is_empty() {
        return Err(Error::Contract(
            "itm_loss: no cross-modal pairs present (image-only batch)".into(),
        ));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let mean = tape.scale(acc, 1.0 / terms.len() as f64)?;
    Ok((mean, values))
}

/// Full objective: intra-image term plus (when any cross-modal pair exists)
/// the cross-modal matching term.
pub fn total_loss(
    tape: &mut Tape,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    view: ImageView,
) -> Result<LossOutput> {
    cfg.validate()?;
    let imc = imc_loss(tape, batch, cfg)?;
    let imc_val = tape.scalar(imc)?;
    let (loss, values) = if batch.text.is_some() || batch.mani.is_some() {
        let (itm, values) = itm_loss(tape, batch, cfg, view)?;
        (tape.add(imc, itm)?, values)
    } else {
        (imc, [None, None, None])
    };
    let total = tape.scalar(loss)?;
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            imc: imc_val,
            image_text: values[0],
            image_mani: values[1],
            text_mani: values[2],
            total,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Random unit-row matrix.
    fn random_unit(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::root(seed);
        let mut m = Matrix::zeros(n, d);
        for v in m.data.iter_mut() {
            *v = r.gen::<f64>() - 0.5;
        }
        m.l2_normalize_rows().unwrap();
        m
    }

    /// All rows identical (a shared unit vector).
    fn identical_unit(n: usize, d: usize) -> Matrix {
        let mut base = vec![0.0; d];
        for (j, v) in base.iter_mut().enumerate() {
            *v = (j as f64 + 1.0).sin();
        }
        let norm = dot(&base, &base).sqrt();
        base.iter_mut().for_each(|v| *v /= norm);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            m.row_mut(i).copy_from_slice(&base);
        }
        m
    }

    fn tape_loss(z1: &Matrix, z2: &Matrix, tau: f64, targets: &Matrix, iw: bool) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(z1.rows, z1.cols, z1.data.clone()).unwrap();
        let b = t.constant(z2.rows, z2.cols, z2.data.clone()).unwrap();
        let l = batch_cl_loss(&mut t, a, b, tau, targets, iw).unwrap();
        t.scalar(l).unwrap()
    }

    #[test]
    fn cosine_sim_basics() {
        let z = [0.6, 0.8];
        assert!((cosine_sim(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        let neg = [-0.6, -0.8];
        assert!((cosine_sim(&z, &neg).unwrap() + 1.0).abs() < 1e-12);
        let orth = [0.8, -0.6];
        assert!(cosine_sim(&z, &orth).unwrap().abs() < 1e-12);
        let long = [1.2, 0.9];
        assert!(matches!(cosine_sim(&z, &long), Err(Error::Contract(_))));
    }

    #[test]
    fn smoothed_targets_zero_alpha_is_identity() {
        let m = smoothed_targets(5, 0.0).unwrap();
        for i in 0..5 {
            for k in 0..5 {
                let expect = if i == k { 1.0 } else { 0.0 };
                assert_eq!(m.data[i * 5 + k], expect);
            }
        }
    }

    #[test]
    fn smoothed_targets_known_values() {
        let m = smoothed_targets(4, 0.1).unwrap();
        assert!((m.data[0] - 0.925).abs() < 1e-15);
        assert!((m.data[1] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn smoothed_target_rows_sum_to_one() {
        for &(n, alpha) in &[(2usize, 0.3), (7, 0.05), (16, 0.9), (3, 0.0)] {
            let m = smoothed_targets(n, alpha).unwrap();
            for i in 0..n {
                let s: f64 = m.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "n={n} alpha={alpha} row {i} sums {s}");
            }
        }
        assert!(matches!(smoothed_targets(3, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn identical_embeddings_give_log_two_n_minus_one() {
        for &n in &[2usize, 4, 8] {
            let z = identical_unit(n, 6);
            let hard = smoothed_targets(n, 0.0).unwrap();
            let per_pair = pair_loss(&z, &z, 0, 1.0, &hard, true).unwrap();
            let expect = (2.0 * (n as f64 - 1.0)).ln();
            assert!(
                (per_pair - expect).abs() < 1e-12,
                "n={n}: {per_pair} vs {expect}"
            );
        }
    }

    #[test]
    fn smoothed_loss_with_identical_embeddings_is_alpha_free() {
        let z = identical_unit(5, 4);
        for &alpha in &[0.0, 0.1, 0.4, 0.8] {
            let t = smoothed_targets(5, alpha).unwrap();
            let hard = smoothed_targets(5, 0.0).unwrap();
            let a = pair_loss(&z, &z, 2, 0.3, &t, true).unwrap();
            let b = pair_loss(&z, &z, 2, 0.3, &hard, true).unwrap();
            assert!((a - b).abs() < 1e-10, "alpha={alpha}: {a} vs {b}");
        }
    }

    #[test]
    fn alpha_zero_equals_hard_targets_bitwise() {
        let z1 = random_unit(6, 8, 1);
        let z2 = random_unit(6, 8, 2);
        let hard = smoothed_targets(6, 0.0).unwrap();
        for i in 0..6 {
            let a = pair_loss(&z1, &z2, i, 0.07, &hard, true).unwrap();
            let b = pair_loss(&z1, &z2, i, 0.07, &smoothed_targets(6, 0.0).unwrap(), true).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batch_loss_is_swap_symmetric() {
        let z1 = random_unit(7, 10, 3);
        let z2 = random_unit(7, 10, 4);
        let t = smoothed_targets(7, 0.1).unwrap();
        let ab = tape_loss(&z1, &z2, 0.2, &t, true);
        let ba = tape_loss(&z2, &z1, 0.2, &t, true);
        assert!((ab - ba).abs() < 1e-10, "{ab} vs {ba}");
    }

    #[test]
    fn batch_loss_matches_pair_loss_sum() {
        let z1 = random_unit(5, 12, 7);
        let z2 = random_unit(5, 12, 8);
        let t = smoothed_targets(5, 0.15).unwrap();
        for &iw in &[true, false] {
            let fused = tape_loss(&z1, &z2, 0.09, &t, iw);
            let mut straight = 0.0;
            for i in 0..5 {
                straight += pair_loss(&z1, &z2, i, 0.09, &t, iw).unwrap();
                straight += pair_loss(&z2, &z1, i, 0.09, &t, iw).unwrap();
            }
            assert!((fused - straight).abs() < 1e-10, "iw={iw}: {fused} vs {straight}");
        }
    }

    #[test]
    fn positive_pair_is_excluded_from_denominator() {
        // Two embeddings where including the matched pair would change the
        // value: anchor equals its positive exactly (sim 1, huge exp at low
        // τ), all negatives orthogonal. With the positive excluded the loss
        // is log(2) − 1/τ + ... computable; with it included the loss would
        // be ≥ 0. Check the exact excluded-form value.
        let n = 2;
        let d = 4;
        let mut z1 = Matrix::zeros(n, d);
        z1.row_mut(0)[0] = 1.0;
        z1.row_mut(1)[1] = 1.0;
        let z2 = z1.clone();
        let tau = 0.05;
        let hard = smoothed_targets(n, 0.0).unwrap();
        let got = pair_loss(&z1, &z2, 0, tau, &hard, true).unwrap();
        // Denominator: z2_1 and z1_1 (both orthogonal to the anchor) only.
        let expect = (2.0 * (0.0f64 / tau).exp()).ln() - 1.0 / tau;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // A denominator that included the positive would exceed this by far.
        assert!(got < -15.0);
    }

    #[test]
    fn loss_decreases_as_tau_shrinks_when_positive_dominates() {
        // Positive similarity strictly above all negatives.
        let n = 3;
        let mut z1 = Matrix::zeros(n, 3);
        let mut z2 = Matrix::zeros(n, 3);
        z1.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        z2.row_mut(0).copy_from_slice(&[0.98, 0.198_997_487_421_324, 0.0]);
        z1.row_mut(1).copy_from_slice(&[0.0, 1.0, 0.0]);
        z2.row_mut(1).copy_from_slice(&[0.0, 0.0, 1.0]);
        z1.row_mut(2).copy_from_slice(&[0.0, -1.0, 0.0]);
        z2.row_mut(2).copy_from_slice(&[-1.0, 0.0, 0.0]);
        let hard = smoothed_targets(n, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for &tau in &[1.0, 0.5, 0.2, 0.1, 0.05] {
            let l = pair_loss(&z1, &z2, 0, tau, &hard, true).unwrap();
            assert!(l < prev, "tau={tau}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn smoothing_is_continuous_and_monotone_near_zero() {
        // On a positive-dominant instance, mixing target mass onto worse
        // candidates can only raise the loss, monotonically in α.
        let z1 = random_unit(4, 16, 21);
        let mut z2 = z1.clone();
        // Perturb z2 slightly so positives dominate but are not exact.
        let mut r = rng::root(22);
        for v in z2.data.iter_mut() {
            *v += 0.01 * (r.gen::<f64>() - 0.5);
        }
        z2.l2_normalize_rows().unwrap();
        let base = pair_loss(&z1, &z2, 1, 0.3, &smoothed_targets(4, 0.0).unwrap(), true).unwrap();
        let mut prev = base;
        let mut last_gap = f64::INFINITY;
        for &alpha in &[1e-4, 1e-3, 1e-2, 0.1, 0.3] {
            let l = pair_loss(&z1, &z2, 1, 0.3, &smoothed_targets(4, alpha).unwrap(), true).unwrap();
            assert!(l >= prev, "alpha={alpha}: {l} < {prev}");
            prev = l;
        }
        // Continuity: the gap to the hard loss vanishes as α → 0.
        for &alpha in &[0.1, 1e-2, 1e-3, 1e-4, 1e-6] {
            let l = pair_loss(&z1, &z2, 1, 0.3, &smoothed_targets(4, alpha).unwrap(), true).unwrap();
            let gap = (l - base).abs();
            assert!(gap <= last_gap, "alpha={alpha}");
            last_gap = gap;
        }
        assert!(last_gap < 1e-5);
    }

    #[test]
    fn batch_loss_is_permutation_invariant() {
        let z1 = random_unit(6, 8, 31);
        let z2 = random_unit(6, 8, 32);
        let t = smoothed_targets(6, 0.1).unwrap();
        let base = tape_loss(&z1, &z2, 0.3, &t, true);
        // Apply the same row permutation to both modalities.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |m: &Matrix| {
            let mut p = Matrix::zeros(m.rows, m.cols);
            for (dst, &src) in perm.iter().enumerate() {
                p.row_mut(dst).copy_from_slice(m.row(src));
            }
            p
        };
        let shuffled = tape_loss(&permute(&z1), &permute(&z2), 0.3, &t, true);
        assert!((base - shuffled).abs() < 1e-10, "{base} vs {shuffled}");
    }

    #[test]
    fn imc_value_on_orthogonal_identical_views() {
        // cc and mlo identical per instance, orthogonal across instances,
        // τ = 1, N = 2. Frozen from the straight-line route: each of the 4
        // summed pair terms is −log(e/2) = log 2 − 1.
        let n = 2;
        let mut z = Matrix::zeros(n, 2);
        z.row_mut(0)[0] = 1.0;
        z.row_mut(1)[1] = 1.0;
        let hard = smoothed_targets(n, 0.0).unwrap();
        let mut straight = 0.0;
        for i in 0..n {
            straight += pair_loss(&z, &z, i, 1.0, &hard, true).unwrap() * 2.0;
        }
        let expect = 4.0 * (2.0f64.ln() - 1.0);
        assert!((straight - expect).abs() < 1e-12, "{straight} vs {expect}");

        let mut t = Tape::new();
        let cc = t.constant(n, 2, z.data.clone()).unwrap();
        let mlo = t.constant(n, 2, z.data.clone()).unwrap();
        let batch = EmbeddingBatch {
            ids: vec![0, 1],
            image_cc: cc,
            image_mlo: mlo,
            text: None,
            mani: None,
        };
        let mut cfg = LossConfig::default();
        cfg.tau_intra_image = 1.0;
        let loss = imc_loss(&mut t, &batch, &cfg).unwrap();
        assert!((t.scalar(loss).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn itm_identical_embeddings_hit_the_closed_form() {
        // All three modalities identical across instances: every batch term
        // collapses to 2N·log(2(N−1)) and the mean over pairs equals it.
        let n = 4;
        let z = identical_unit(n, 8);
        let mut t = Tape::new();
        let mk = |t: &mut Tape| t.constant(n, 8, z.data.clone()).unwrap();
        let batch = EmbeddingBatch {
            ids: (0..n as u64).collect(),
            image_cc: mk(&mut t),
            image_mlo: mk(&mut t),
            text: Some(mk(&mut t)),
            mani: Some(mk(&mut t)),
        };
        let mut cfg = LossConfig::default();
        cfg.label_smoothing = false;
        let (itm, _) = itm_loss(&mut t, &batch, &cfg, ImageView::Cc).unwrap();
        let expect = 2.0 * n as f64 * (2.0 * (n as f64 - 1.0)).ln();
        assert!((t.scalar(itm).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn total_is_imc_plus_itm() {
        let n = 5;
        let d = 16;
        let mats: Vec<Matrix> = (0..4).map(|s| random_unit(n, d, 100 + s)).collect();
        let mut t = Tape::new();
        let ids: Vec<TensorId> = mats
            .iter()
            .map(|m| t.constant(n, d, m.data.clone()).unwrap())
            .collect();
        let batch = EmbeddingBatch {
            ids: (0..n as u64).collect(),
            image_cc: ids[0],
            image_mlo: ids[1],
            text: Some(ids[2]),
            mani: Some(ids[3]),
        };
        let cfg = LossConfig::default();
        let out = total_loss(&mut t, &batch, &cfg, ImageView::Mlo).unwrap();
        let imc = imc_loss(&mut t, &batch, &cfg).unwrap();
        let (itm, _) = itm_loss(&mut t, &batch, &cfg, ImageView::Mlo).unwrap();
        let expect = t.scalar(imc).unwrap() + t.scalar(itm).unwrap();
        assert!((out.breakdown.total - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_positive_on_random_batches() {
        let cfg = LossConfig::default();
        for trial in 0..100 {
            let n = 4 + (trial % 5);
            let mats: Vec<Matrix> = (0..4)
                .map(|s| random_unit(n, 32, 1000 + trial as u64 * 7 + s))
                .collect();
            let mut t = Tape::new();
            let ids: Vec<TensorId> = mats
                .iter()
                .map(|m| t.constant(n, 32, m.data.clone()).unwrap())
                .collect();
            let batch = EmbeddingBatch {
                ids: (0..n as u64).collect(),
                image_cc: ids[0],
                image_mlo: ids[1],
                text: Some(ids[2]),
                mani: Some(ids[3]),
            };
            let out = total_loss(&mut t, &batch, &cfg, ImageView::Cc).unwrap();
            assert!(out.breakdown.total > 0.0, "trial {trial}: {}", out.breakdown.total);
        }
    }

    #[test]
    fn scaling_all_temperatures_preserves_the_argmin() {
        // One-parameter family: anchor 0's positive rotates from aligned to
        // anti-aligned while everything else stays fixed. The minimizing θ
        // must not move when every τ is scaled by a common factor.
        let n = 3;
        let steps = 40;
        let family_loss = |theta: f64, tau: f64| {
            let mut z1 = Matrix::zeros(n, 2);
            let mut z2 = Matrix::zeros(n, 2);
            z1.row_mut(0).copy_from_slice(&[1.0, 0.0]);
            z2.row_mut(0).copy_from_slice(&[theta.cos(), theta.sin()]);
            z1.row_mut(1).copy_from_slice(&[0.0, 1.0]);
            z2.row_mut(1).copy_from_slice(&[0.0, -1.0]);
            z1.row_mut(2).copy_from_slice(&[-1.0, 0.0]);
            z2.row_mut(2).copy_from_slice(&[0.6, -0.8]);
            let hard = smoothed_targets(n, 0.0).unwrap();
            tape_loss(&z1, &z2, tau, &hard, true)
        };
        let argmin = |tau: f64| {
            (0..steps)
                .map(|s| s as f64 / steps as f64 * std::f64::consts::PI)
                .enumerate()
                .map(|(i, th)| (i, family_loss(th, tau)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmin(0.2), argmin(0.6));
    }

    #[test]
    fn rejects_batches_too_small_for_negatives() {
        let z = identical_unit(1, 4);
        let t = smoothed_targets(1, 0.0).unwrap();
        assert!(matches!(
            pair_loss(&z, &z, 0, 0.1, &t, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_flow_through_batch_loss() {
        use crate::tensor::gradcheck::check_gradients;
        let z1 = random_unit(4, 6, 51);
        let z2 = random_unit(4, 6, 52);
        let targets = smoothed_targets(4, 0.1).unwrap();
        let params = vec![
            ("z1raw", z1.data.clone(), (4usize, 6usize)),
            ("z2raw", z2.data.clone(), (4usize, 6usize)),
        ];
        // Normalize inside the graph so the inputs need not stay unit under
        // perturbation.
        let f = |vals: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a_raw = t.param(4, 6, vals[0].clone())?;
            let b_raw = t.param(4, 6, vals[1].clone())?;
            let a = t.l2_normalize_rows(a_raw)?;
            let b = t.l2_normalize_rows(b_raw)?;
            let loss = batch_cl_loss(&mut t, a, b, 0.1, &targets, true)?;
            let val = t.scalar(loss)?;
            t.backward(loss)?;
            Ok((
                val,
                vec![
                    t.grad(a_raw).unwrap().to_vec(),
                    t.grad(b_raw).unwrap().to_vec(),
                ],
            ))
        };
        let report = check_gradients(&params, f, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
