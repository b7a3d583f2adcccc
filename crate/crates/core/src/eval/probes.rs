//! Downstream classification protocols over frozen or tunable encoders:
//! a logistic-regression probe solved by L-BFGS, a trained linear head
//! with cosine schedule and early stopping, and full fine-tuning of the
//! image branch with a scaled-down rate on pretrained tensors.
//!
//! All three consume the image branch's penultimate features (the probe
//! and linear head literally, fine-tuning by re-deriving them each epoch)
//! and report AUC on a held-out test split.

use crate::error::{Error, Result};
use crate::eval::metrics::auc;
use crate::matrix::Matrix;
use crate::model::{self, BatchInputs, ModelParams};
use crate::opt::{warmup_cosine, AdamW};
use crate::rng;
use crate::tensor::Tape;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Instances per tape when deriving features for scoring; fixed so that
/// independently computed scoring paths agree bit-for-bit.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    LinearProbe,
    LinearEval,
    FineTune,
}

/// Aggregated protocol outcome across seeds: per-seed AUCs with their mean
/// and sample standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: Protocol,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub warnings: Vec<String>,
}

impl ProbeResult {
    pub fn from_runs(protocol: Protocol, per_seed: Vec<f64>, warnings: Vec<String>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { protocol, per_seed, mean, std, warnings }
    }
}

// ── logistic regression probe ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpConfig {
    /// L2 penalty on the weights (never the intercept).
    pub lambda: f64,
    pub max_iter: usize,
    /// Convergence: gradient L2 norm below this.
    pub tol: f64,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self { lambda: 3.16, max_iter: 1000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub w: Vec<f64>,
    pub b: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False means the iteration budget ran out first — a warning, not an
    /// error.
    pub converged: bool,
}

/// Regularized logistic loss and gradient at the packed point `[w…, b]`:
/// `f = Σ_i [softplus(z_i) − y_i z_i] + (λ/2)‖w‖²` with `z = Xw + b`.
/// The intercept is unpenalized.
pub fn logistic_objective(x: &Matrix, y: &[f64], lambda: f64, wb: &[f64]) -> (f64, Vec<f64>) {
    let d = x.cols;
    let (w, b) = (&wb[..d], wb[d]);
    let mut loss = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let mut grad = vec![0.0; d + 1];
    for (gw, &wv) in grad.iter_mut().zip(w) {
        *gw = lambda * wv;
    }
    for i in 0..x.rows {
        let row = x.row(i);
        let z: f64 = row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        // softplus(z) − y z, computed stably
        loss += z.max(0.0) - y[i] * z + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        let r = p - y[i];
        for (g, &v) in grad.iter_mut().zip(row) {
            *g += r * v;
        }
        grad[d] += r;
    }
    (loss, grad)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Fit the probe with limited-memory BFGS (history 10, backtracking Armijo
/// line search) from the zero vector.
pub fn linear_probe_fit(x: &Matrix, y: &[f64], cfg: &LpConfig) -> Result<LogisticFit> {
    if x.rows != y.len() || x.rows == 0 {
        return Err(Error::Metric(format!(
            "probe: {} feature rows vs {} labels",
            x.rows,
            y.len()
        )));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::Config(format!(
            "probe config lambda {} / tol {} invalid",
            cfg.lambda, cfg.tol
        )));
    }
    let d = x.cols;
    let mut point = vec![0.0; d + 1];
    let (mut loss, mut grad) = logistic_objective(x, y, cfg.lambda, &point);
    let m = 10usize;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::new();
    let mut iterations = 0;
    let mut converged = l2_norm(&grad) < cfg.tol;

    while !converged && iterations < cfg.max_iter {
        // Two-loop recursion for the search direction.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * s.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            for (dv, yi) in dir.iter_mut().zip(yv) {
                *dv -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, yv, _)) = hist.back() {
            let sy: f64 = s.iter().zip(yv).map(|(a, b)| a * b).sum();
            let yy: f64 = yv.iter().map(|a| a * a).sum();
            let gamma = sy / yy.max(1e-300);
            for dv in dir.iter_mut() {
                *dv *= gamma;
            }
        }
        for ((s, yv, rho), &a) in hist.iter().zip(alphas.iter().rev()) {
            let beta = rho * yv.iter().zip(&dir).map(|(x, z)| x * z).sum::<f64>();
            for (dv, si) in dir.iter_mut().zip(s) {
                *dv += (a - beta) * si;
            }
        }
        let mut slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if slope >= 0.0 {
            // Not a descent direction (stale curvature); fall back.
            dir = grad.iter().map(|g| -g).collect();
            slope = -grad.iter().map(|g| g * g).sum::<f64>();
            hist.clear();
        }

        // Backtracking Armijo search.
        let mut step = if hist.is_empty() { (1.0 / l2_norm(&dir)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> =
                point.iter().zip(&dir).map(|(p, d)| p + step * d).collect();
            let (cl, cg) = logistic_objective(x, y, cfg.lambda, &cand);
            if cl <= loss + 1e-4 * step * slope {
                accepted = Some((cand, cl, cg));
                break;
            }
            step *= 0.5;
        }
        let Some((new_point, new_loss, new_grad)) = accepted else {
            break; // line search exhausted: report the best point found
        };

        let s: Vec<f64> = new_point.iter().zip(&point).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if hist.len() == m {
                hist.pop_front();
            }
            hist.push_back((s, yv, 1.0 / sy));
        }
        point = new_point;
        loss = new_loss;
        grad = new_grad;
        iterations += 1;
        converged = l2_norm(&grad) < cfg.tol;
    }

    Ok(LogisticFit {
        w: point[..d].to_vec(),
        b: point[d],
        loss,
        grad_norm: l2_norm(&grad),
        iterations,
        converged,
    })
}

/// Sigmoid scores of a fitted linear model.
pub fn head_scores(x: &Matrix, w: &[f64], b: f64) -> Vec<f64> {
    (0..x.rows)
        .map(|i| {
            let z: f64 = x.row(i).iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Train the probe on `train` and report test AUC.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[f64],
    test_x: &Matrix,
    test_y: &[f64],
    cfg: &LpConfig,
) -> Result<(f64, LogisticFit)> {
    let fit = linear_probe_fit(train_x, train_y, cfg)?;
    let scores = head_scores(test_x, &fit.w, fit.b);
    Ok((auc(&scores, test_y)?, fit))
}

// ── trained linear head ─────────────────────────────────────────────────────

/// Schedule and budget of the trained-head protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            min_lr: 1e-6,
            max_epochs: 1000,
            patience: 100,
            batch_size: 48,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub test_auc: f64,
    pub best_val_auc: f64,
    pub epochs_run: usize,
    pub test_scores: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

/// Head initialization shared by the linear-eval and fine-tune protocols,
/// so a zero-epoch fine-tune scores identically to a fresh head.
pub fn init_head(dim: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut r = rng::derive(seed, "head", 0);
    let s = 1.0 / (dim as f64).sqrt();
    ((0..dim).map(|_| r.gen_range(-s..s)).collect(), 0.0)
}

fn validate_head_cfg(cfg: &HeadConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("head batch_size must be positive".into()));
    }
    Ok(())
}

fn check_xy(name: &str, x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows != y.len() || x.rows == 0 {
        return Err(Error::Metric(format!(
            "{name}: {} feature rows vs {} labels",
            x.rows,
            y.len()
        )));
    }
    Ok(())
}

/// Train a logistic head on frozen features with cosine-annealed AdamW and
/// early stopping on validation AUC; report AUC of the best head on test.
pub fn linear_eval(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    test_x: &Matrix,
    test_y: &[f64],
    cfg: &HeadConfig,
    seed: u64,
) -> Result<HeadOutcome> {
    validate_head_cfg(cfg)?;
    check_xy("linear_eval train", train_x, train_y)?;
    check_xy("linear_eval val", val_x, val_y)?;
    check_xy("linear_eval test", test_x, test_y)?;
    let d = train_x.cols;
    let (mut w, mut b) = init_head(d, seed);
    let mut opt = AdamW::new(&[d, 1]);
    let mut best = (w.clone(), b);
    let mut best_val = f64::NEG_INFINITY;
    let mut patience_left = cfg.patience;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = warmup_cosine(epoch as u64, 0, cfg.max_epochs as u64, cfg.peak_lr, cfg.min_lr)?;
        let mut order: Vec<u32> = (0..train_x.rows as u32).collect();
        let mut er = rng::derive(seed, "head-epoch", epoch as u64);
        rng::shuffle(&mut order, &mut er);
        for chunk in order.chunks(cfg.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &r in chunk {
                let row = train_x.row(r as usize);
                let z: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let resid = (1.0 / (1.0 + (-z).exp()) - train_y[r as usize]) * inv;
                for (g, &v) in gw.iter_mut().zip(row) {
                    *g += resid * v;
                }
                gb += resid;
            }
            let mut bs = [b];
            opt.step(
                &mut [&mut w, &mut bs],
                &[&gw, &[gb]],
                &[lr, lr],
                &[cfg.weight_decay, 0.0],
            )?;
            b = bs[0];
        }
        epochs_run = epoch + 1;
        let val_auc = auc(&head_scores(val_x, &w, b), val_y)?;
        if val_auc > best_val {
            best_val = val_auc;
            best = (w.clone(), b);
            patience_left = cfg.patience;
        } else if patience_left <= 1 {
            break;
        } else {
            patience_left -= 1;
        }
    }

    let (w, b) = best;
    let test_scores = head_scores(test_x, &w, b);
    let test_auc = auc(&test_scores, test_y)?;
    Ok(HeadOutcome {
        test_auc,
        best_val_auc: if best_val.is_finite() { best_val } else { 0.0 },
        epochs_run,
        test_scores,
        w,
        b,
    })
}

// ── fine-tuning ─────────────────────────────────────────────────────────────

/// Fine-tuning budget: the head trains at the scheduled rate, pretrained
/// tensors at `pretrained_scale` times it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub pretrained_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            min_lr: 5e-7,
            pretrained_scale: 0.1,
            max_epochs: 1000,
            patience: 100,
            batch_size: 48,
            weight_decay: 5e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub test_auc: f64,
    pub best_val_auc: f64,
    pub epochs_run: usize,
    pub test_scores: Vec<f64>,
    pub tuned: ModelParams,
}

/// Image-encoder tensors updated during fine-tuning.
const FT_TENSORS: [&str; 4] = ["img_w1", "img_b1", "img_w2", "img_b2"];

fn ft_scores(params: &ModelParams, inputs: &BatchInputs, w: &[f64], b: f64) -> Result<Vec<f64>> {
    let feats = model::image_features(params, inputs, EVAL_CHUNK)?;
    Ok(head_scores(&feats, w, b))
}

/// Fine-tune the image branch plus a fresh logistic head. The input
/// parameters are cloned, never mutated. Early stopping tracks validation
/// AUC; the reported test AUC comes from the best-validation snapshot.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    pretrained: &ModelParams,
    train: &BatchInputs,
    train_y: &[f64],
    val: &BatchInputs,
    val_y: &[f64],
    test: &BatchInputs,
    test_y: &[f64],
    cfg: &FtConfig,
    seed: u64,
) -> Result<FineTuneOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("fine-tune batch_size must be positive".into()));
    }
    if train.len() != train_y.len() || val.len() != val_y.len() || test.len() != test_y.len() {
        return Err(Error::Metric("fine-tune: label counts do not match inputs".into()));
    }
    let dims = pretrained.dims;
    let mut current = pretrained.clone();
    let (mut w, mut b) = init_head(dims.feature, seed);
    let img_idx: Vec<usize> = FT_TENSORS
        .iter()
        .map(|n| current.index_of(n))
        .collect::<Result<_>>()?;
    let mut lens: Vec<usize> =
        img_idx.iter().map(|&i| current.tensors[i].data.len()).collect();
    lens.push(dims.feature);
    lens.push(1);
    let mut opt = AdamW::new(&lens);
    // Weight tensors decay; bias rows do not.
    let wds: Vec<f64> = FT_TENSORS
        .iter()
        .map(|n| if n.ends_with("w1") || n.ends_with("w2") { cfg.weight_decay } else { 0.0 })
        .chain([cfg.weight_decay, 0.0])
        .collect();

    let mut best = (current.clone(), w.clone(), b);
    let mut best_val = f64::NEG_INFINITY;
    let mut patience_left = cfg.patience;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let head_lr =
            warmup_cosine(epoch as u64, 0, cfg.max_epochs as u64, cfg.peak_lr, cfg.min_lr)?;
        let enc_lr = cfg.pretrained_scale * head_lr;
        let mut order: Vec<u32> = (0..train.len() as u32).collect();
        let mut er = rng::derive(seed, "ft-epoch", epoch as u64);
        rng::shuffle(&mut order, &mut er);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let y: Vec<f64> = chunk.iter().map(|&r| train_y[r as usize]).collect();
            let mut tape = Tape::new();
            let bound = model::bind(&mut tape, &current, true)?;
            let x = tape.constant(batch.len(), dims.pixels(), batch.cc.data.clone())?;
            let f = model::encode_images(&mut tape, &bound, &dims, x)?;
            let wid = tape.leaf(dims.feature, 1, w.clone(), true)?;
            let bid = tape.leaf(1, 1, vec![b], true)?;
            let logits = tape.matmul(f, wid)?;
            let logits = tape.add_bias(logits, bid)?;
            let loss = tape.logistic_loss_mean(logits, &y)?;
            tape.backward(loss)?;

            let grab = |id| tape.grad(id).map(|g| g.to_vec());
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(6);
            for (&pi, name) in img_idx.iter().zip(FT_TENSORS) {
                grads.push(grab(bound.id(name)).unwrap_or_else(|| {
                    vec![0.0; current.tensors[pi].data.len()]
                }));
            }
            grads.push(grab(wid).unwrap_or_else(|| vec![0.0; dims.feature]));
            grads.push(grab(bid).unwrap_or_else(|| vec![0.0; 1]));

            let mut bs = [b];
            // Split mutable borrows: take the four encoder tensors out of
            // `current` one at a time via split indices.
            let [i0, i1, i2, i3] = [img_idx[0], img_idx[1], img_idx[2], img_idx[3]];
            let tensors = &mut current.tensors;
            // The four indices are distinct by construction.
            let (mut t0, mut t1, mut t2, mut t3) = (
                std::mem::take(&mut tensors[i0].data),
                std::mem::take(&mut tensors[i1].data),
                std::mem::take(&mut tensors[i2].data),
                std::mem::take(&mut tensors[i3].data),
            );
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let lrs = [enc_lr, enc_lr, enc_lr, enc_lr, head_lr, head_lr];
            opt.step(
                &mut [&mut t0, &mut t1, &mut t2, &mut t3, &mut w, &mut bs],
                &grad_refs,
                &lrs,
                &wds,
            )?;
            tensors[i0].data = t0;
            tensors[i1].data = t1;
            tensors[i2].data = t2;
            tensors[i3].data = t3;
            b = bs[0];
        }
        epochs_run = epoch + 1;
        let val_auc = auc(&ft_scores(&current, val, &w, b)?, val_y)?;
        if val_auc > best_val {
            best_val = val_auc;
            best = (current.clone(), w.clone(), b);
            patience_left = cfg.patience;
        } else if patience_left <= 1 {
            break;
        } else {
            patience_left -= 1;
        }
    }

    let (tuned, w, b) = best;
    let test_scores = ft_scores(&tuned, test, &w, b)?;
    let test_auc = auc(&test_scores, test_y)?;
    Ok(FineTuneOutcome {
        test_auc,
        best_val_auc: if best_val.is_finite() { best_val } else { 0.0 },
        epochs_run,
        test_scores,
        tuned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifestation::ManifestationVector;
    use crate::model::ModelDims;

    /// Two Gaussian blobs separated along a random direction.
    fn separable(n: usize, d: usize, gap: f64, seed: u64) -> (Matrix, Vec<f64>) {
        let mut r = rng::root(seed);
        let dir: Vec<f64> = (0..d).map(|_| r.gen::<f64>() - 0.5).collect();
        let norm = l2_norm(&dir);
        let mut x = Matrix::zeros(n, d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as f64;
            let sign = if label == 1.0 { 1.0 } else { -1.0 };
            for j in 0..d {
                x.data[i * d + j] =
                    sign * gap * dir[j] / norm + 0.4 * (r.gen::<f64>() - 0.5);
            }
            y.push(label);
        }
        (x, y)
    }

    fn random_features(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut r = rng::root(seed);
        let mut x = Matrix::zeros(n, d);
        for v in x.data.iter_mut() {
            *v = r.gen::<f64>() - 0.5;
        }
        let y = (0..n).map(|_| (r.gen::<f64>() < 0.5) as u64 as f64).collect();
        (x, y)
    }

    #[test]
    fn probe_separates_separable_embeddings() {
        let (x, y) = separable(120, 2, 2.0, 1);
        let (a, fit) = linear_probe(&x, &y, &x, &y, &LpConfig::default()).unwrap();
        assert_eq!(a, 1.0);
        assert!(fit.converged, "grad norm {}", fit.grad_norm);
    }

    #[test]
    fn probe_matches_a_gradient_descent_oracle() {
        let (x, y) = random_features(100, 8, 5);
        let cfg = LpConfig::default();
        let fit = linear_probe_fit(&x, &y, &cfg).unwrap();

        // Independent minimizer: plain gradient descent with backtracking
        // on the same convex objective.
        let mut point = vec![0.0; 9];
        let (mut loss, mut grad) = logistic_objective(&x, &y, cfg.lambda, &point);
        for _ in 0..200_000 {
            if l2_norm(&grad) < 1e-8 {
                break;
            }
            let mut step = 1.0;
            loop {
                let cand: Vec<f64> =
                    point.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
                let (cl, cg) = logistic_objective(&x, &y, cfg.lambda, &cand);
                let dec = 1e-4 * step * grad.iter().map(|g| g * g).sum::<f64>();
                if cl <= loss - dec {
                    point = cand;
                    loss = cl;
                    grad = cg;
                    break;
                }
                step *= 0.5;
                if step < 1e-18 {
                    break;
                }
            }
        }
        assert!(
            (fit.loss - loss).abs() < 1e-6,
            "L-BFGS loss {} vs descent oracle {}",
            fit.loss,
            loss
        );
    }

    #[test]
    fn probe_on_label_free_features_sits_near_chance() {
        for seed in 0..5 {
            let (train_x, train_y) = random_features(200, 16, 100 + seed);
            let (test_x, test_y) = random_features(400, 16, 200 + seed);
            let (a, _) =
                linear_probe(&train_x, &train_y, &test_x, &test_y, &LpConfig::default()).unwrap();
            assert!((0.4..=0.6).contains(&a), "seed {seed}: null AUC {a}");
        }
    }

    #[test]
    fn probe_flags_exhausted_budget_instead_of_failing() {
        let (x, y) = separable(60, 4, 3.0, 2);
        let cfg = LpConfig { max_iter: 1, ..LpConfig::default() };
        let fit = linear_probe_fit(&x, &y, &cfg).unwrap();
        assert!(!fit.converged);
    }

    fn head_cfg(epochs: usize) -> HeadConfig {
        HeadConfig { max_epochs: epochs, patience: 50, ..HeadConfig::default() }
    }

    /// Slice a labeled set into train/val/test ranges. Labels alternate, so
    /// contiguous ranges stay class-balanced and share the geometry.
    fn slice3(
        x: &Matrix,
        y: &[f64],
        n_train: usize,
        n_val: usize,
    ) -> ((Matrix, Vec<f64>), (Matrix, Vec<f64>), (Matrix, Vec<f64>)) {
        let take = |lo: usize, hi: usize| {
            (
                Matrix {
                    rows: hi - lo,
                    cols: x.cols,
                    data: x.data[lo * x.cols..hi * x.cols].to_vec(),
                },
                y[lo..hi].to_vec(),
            )
        };
        (
            take(0, n_train),
            take(n_train, n_train + n_val),
            take(n_train + n_val, x.rows),
        )
    }

    #[test]
    fn linear_eval_masters_separable_features() {
        let (x, y) = separable(400, 6, 1.5, 3);
        let ((tx, ty), (vx, vy), (sx, sy)) = slice3(&x, &y, 240, 80);
        let out = linear_eval(&tx, &ty, &vx, &vy, &sx, &sy, &head_cfg(300), 0).unwrap();
        assert!(out.test_auc > 0.99, "AUC {}", out.test_auc);
        assert!(out.epochs_run <= 300);
    }

    #[test]
    fn linear_eval_is_deterministic_per_seed() {
        let (x, y) = separable(180, 4, 0.8, 6);
        let ((tx, ty), (vx, vy), (sx, sy)) = slice3(&x, &y, 100, 40);
        let a = linear_eval(&tx, &ty, &vx, &vy, &sx, &sy, &head_cfg(40), 9).unwrap();
        let b = linear_eval(&tx, &ty, &vx, &vy, &sx, &sy, &head_cfg(40), 9).unwrap();
        assert_eq!(a.test_scores, b.test_scores);
        assert_eq!(a.w, b.w);
        let c = linear_eval(&tx, &ty, &vx, &vy, &sx, &sy, &head_cfg(40), 10).unwrap();
        assert_ne!(a.w, c.w);
    }

    /// Tiny image batch whose label is a *nonlinear* function of the
    /// pixels: bright quadrant either top-left or bottom-right.
    fn quadrant_inputs(n: usize, v: usize, seed: u64) -> (BatchInputs, Vec<f64>) {
        let mut r = rng::root(seed);
        let mut cc = Matrix::zeros(n, v * v);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (r.gen::<f64>() < 0.5) as u64 as f64;
            let corner = if label == 1.0 {
                if r.gen::<f64>() < 0.5 { 0 } else { 3 }
            } else if r.gen::<f64>() < 0.5 {
                1
            } else {
                2
            };
            for py in 0..v {
                for px in 0..v {
                    let q = (py >= v / 2) as usize * 2 + (px >= v / 2) as usize;
                    let base = if q == corner { 0.85 } else { 0.2 };
                    cc.data[i * v * v + py * v + px] =
                        (base + 0.1 * (r.gen::<f64>() - 0.5)).clamp(0.0, 1.0);
                }
            }
            y.push(label);
        }
        let inputs = BatchInputs {
            ids: (0..n as u64).collect(),
            mlo: cc.clone(),
            cc,
            tokens: vec![vec![0]; n],
            mani: vec![ManifestationVector::zero(); n],
        };
        (inputs, y)
    }

    fn tiny_ft_dims(v: usize) -> ModelDims {
        ModelDims {
            view_size: v,
            hidden: 10,
            feature: 4,
            text_embed: 4,
            vocab: 41,
            align: 6,
            repr: 6,
        }
    }

    #[test]
    fn zero_epoch_fine_tune_scores_like_a_fresh_head() {
        let dims = tiny_ft_dims(8);
        let params = ModelParams::init(3, dims).unwrap();
        let (inputs, y) = quadrant_inputs(40, 8, 11);
        let ft = fine_tune(
            &params,
            &inputs,
            &y,
            &inputs,
            &y,
            &inputs,
            &y,
            &FtConfig { max_epochs: 0, ..FtConfig::default() },
            7,
        )
        .unwrap();
        let feats = model::image_features(&params, &inputs, EVAL_CHUNK).unwrap();
        let (w, b) = init_head(dims.feature, 7);
        let expect = head_scores(&feats, &w, b);
        assert_eq!(ft.test_scores, expect, "zero-epoch fine-tune must equal head-at-init");
        // And the input parameters were not mutated.
        assert_eq!(ft.tuned, params);
    }

    #[test]
    fn fine_tuning_beats_a_frozen_random_encoder() {
        let v = 8;
        let dims = tiny_ft_dims(v);
        let (train, train_y) = quadrant_inputs(160, v, 21);
        let (val, val_y) = quadrant_inputs(60, v, 22);
        let (test, test_y) = quadrant_inputs(60, v, 23);
        let mut ft_mean = 0.0;
        let mut le_mean = 0.0;
        let seeds = 5;
        for seed in 0..seeds {
            let params = ModelParams::init(40 + seed, dims).unwrap();
            let fx = model::image_features(&params, &train, EVAL_CHUNK).unwrap();
            let vx = model::image_features(&params, &val, EVAL_CHUNK).unwrap();
            let tx = model::image_features(&params, &test, EVAL_CHUNK).unwrap();
            let le = linear_eval(
                &fx,
                &train_y,
                &vx,
                &val_y,
                &tx,
                &test_y,
                &HeadConfig { max_epochs: 150, patience: 40, ..HeadConfig::default() },
                seed,
            )
            .unwrap();
            let ft = fine_tune(
                &params,
                &train,
                &train_y,
                &val,
                &val_y,
                &test,
                &test_y,
                &FtConfig {
                    max_epochs: 150,
                    patience: 40,
                    peak_lr: 2e-3,
                    min_lr: 2e-5,
                    ..FtConfig::default()
                },
                seed,
            )
            .unwrap();
            ft_mean += ft.test_auc / seeds as f64;
            le_mean += le.test_auc / seeds as f64;
        }
        assert!(
            ft_mean >= le_mean - 1e-9,
            "fine-tune mean {ft_mean} below frozen-feature mean {le_mean}"
        );
    }

    #[test]
    fn fine_tune_is_deterministic_per_seed() {
        let dims = tiny_ft_dims(8);
        let params = ModelParams::init(9, dims).unwrap();
        let (inputs, y) = quadrant_inputs(30, 8, 31);
        let cfg = FtConfig { max_epochs: 3, ..FtConfig::default() };
        let a = fine_tune(&params, &inputs, &y, &inputs, &y, &inputs, &y, &cfg, 4).unwrap();
        let b = fine_tune(&params, &inputs, &y, &inputs, &y, &inputs, &y, &cfg, 4).unwrap();
        assert_eq!(a.test_scores, b.test_scores);
        assert_eq!(a.tuned, b.tuned);
    }

    #[test]
    fn probe_result_aggregates_mean_and_sample_std() {
        let r = ProbeResult::from_runs(
            Protocol::LinearProbe,
            vec![0.8, 0.9, 1.0],
            vec![],
        );
        assert!((r.mean - 0.9).abs() < 1e-12);
        assert!((r.std - 0.1).abs() < 1e-12);
        let single = ProbeResult::from_runs(Protocol::FineTune, vec![0.7], vec![]);
        assert_eq!(single.std, 0.0);
    }
}
