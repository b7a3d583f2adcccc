//! The pretraining loop: hardness-annealed batch sampling, view
//! augmentation, the trimodal forward pass, the combined contrastive
//! objective, and decoupled-weight-decay Adam under a warmup–cosine
//! schedule — with per-step metrics and deterministic resume.

use crate::error::{Error, Result};
use crate::maninneg::{AnnealState, ManiNegSampler};
use crate::matrix::Matrix;
use crate::model::{self, BatchInputs, ModalityMask, ModelParams};
use crate::objectives::{total_loss, ImageView, LossConfig};
use crate::opt::{warmup_cosine, AdamW};
use crate::rng::{self, gen_index};
use crate::synthdata::{augment_view, Dataset};
use crate::tensor::Tape;
use crate::train::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::train::config::ExperimentConfig;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One step's log line. Serialized as JSONL by the command-line runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub total: f64,
    pub imc: f64,
    pub image_text: Option<f64>,
    pub image_mani: Option<f64>,
    pub text_mani: Option<f64>,
    pub lr: f64,
    /// Current hardness mean; absent under uniform candidate sampling.
    pub mu: Option<f64>,
    /// Batch size actually trained on (deduplication can shrink it).
    pub batch_len: usize,
    /// Image view paired with text/manifestation this step.
    pub itm_view: ImageView,
    pub wall_ms: f64,
}

/// Draw `count` distinct positions from `0..n` (partial Fisher–Yates).
fn uniform_distinct(n: usize, count: usize, rng: &mut rng::RngStream) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    let take = count.min(n);
    for k in 0..take {
        let j = k + gen_index(rng, n - k);
        pool.swap(k, j);
    }
    pool.truncate(take);
    pool
}

fn augment_batch(
    inputs: &BatchInputs,
    view_size: usize,
    strength: f64,
    rng: &mut rng::RngStream,
) -> Result<BatchInputs> {
    if strength == 0.0 {
        return Ok(inputs.clone());
    }
    let mut out = inputs.clone();
    let px = view_size * view_size;
    for i in 0..inputs.len() {
        let cc = augment_view(&inputs.cc.data[i * px..(i + 1) * px], view_size, strength, rng)?;
        let mlo = augment_view(&inputs.mlo.data[i * px..(i + 1) * px], view_size, strength, rng)?;
        out.cc.data[i * px..(i + 1) * px].copy_from_slice(&cc);
        out.mlo.data[i * px..(i + 1) * px].copy_from_slice(&mlo);
    }
    Ok(out)
}

/// All tensors step at the same rate; weight decay applies to matrices and
/// embeddings, never to bias rows.
fn decay_schedule(params: &ModelParams, wd: f64) -> Vec<f64> {
    params.tensors.iter().map(|t| if t.rows == 1 { 0.0 } else { wd }).collect()
}

/// Run (or resume) pretraining over the dataset's training split.
/// `on_checkpoint` receives intermediate checkpoints at the configured
/// cadence; the final checkpoint is returned alongside one metrics record
/// per executed step.
pub fn pretrain(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    resume: Option<&Checkpoint>,
    mut on_checkpoint: Option<&mut dyn FnMut(&Checkpoint) -> Result<()>>,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let config_hash = cfg.config_hash()?;
    let train_rows = &dataset.split.train;
    if train_rows.len() < 2 {
        return Err(Error::Config(format!(
            "training split has {} instances; need at least 2",
            train_rows.len()
        )));
    }
    if dataset.config.view_size != cfg.model.view_size {
        return Err(Error::Shape(format!(
            "dataset views are {}x{0}, model expects {1}x{1}",
            dataset.config.view_size, cfg.model.view_size
        )));
    }

    let (mut params, mut opt, start_step) = match resume {
        Some(ck) => {
            ck.compatible_with(cfg)?;
            if ck.rng_seed != cfg.seed {
                return Err(Error::Container(format!(
                    "checkpoint seed {} does not match configured seed {}",
                    ck.rng_seed, cfg.seed
                )));
            }
            if ck.step > cfg.optimizer.total_steps {
                return Err(Error::Container(format!(
                    "checkpoint is at step {}, beyond total_steps {}",
                    ck.step, cfg.optimizer.total_steps
                )));
            }
            (ck.params.clone(), ck.opt.clone(), ck.step)
        }
        None => {
            let params = ModelParams::init(cfg.seed, cfg.model)?;
            let lens: Vec<usize> = params.tensors.iter().map(|t| t.data.len()).collect();
            (params, AdamW::new(&lens), 0)
        }
    };

    let mut sampler = if cfg.ablation.sampling.is_uniform() {
        None
    } else {
        Some(ManiNegSampler::new(
            dataset.manifestations(train_rows),
            cfg.maninneg.clone(),
        )?)
    };
    let loss_cfg = LossConfig {
        label_smoothing: cfg.loss.label_smoothing && cfg.ablation.label_smoothing,
        ..cfg.loss.clone()
    };
    let mask = ModalityMask { text: cfg.ablation.text, mani: cfg.ablation.mani };
    let wds = decay_schedule(&params, cfg.optimizer.weight_decay);
    let mut metrics = Vec::with_capacity((cfg.optimizer.total_steps - start_step) as usize);

    for step in start_step..cfg.optimizer.total_steps {
        let t0 = std::time::Instant::now();
        let lr = warmup_cosine(
            step,
            cfg.optimizer.warmup_steps,
            cfg.optimizer.total_steps,
            cfg.optimizer.peak_lr,
            cfg.optimizer.min_lr,
        )?;

        let mut batch_rng = rng::derive(cfg.seed, "batch", step);
        let (positions, mu) = match sampler.as_mut() {
            Some(s) => {
                let state = AnnealState::at(&cfg.maninneg, step);
                let b = s.sample_batch(&state, &mut batch_rng)?;
                (b.indices, Some(state.mu_current))
            }
            None => (
                uniform_distinct(train_rows.len(), cfg.maninneg.batch_size, &mut batch_rng),
                None,
            ),
        };
        let rows: Vec<u32> = positions.iter().map(|&p| train_rows[p as usize]).collect();
        let inputs = dataset.batch_inputs(&rows)?;
        let mut aug_rng = rng::derive(cfg.seed, "augment", step);
        let inputs =
            augment_batch(&inputs, cfg.model.view_size, cfg.augment_strength, &mut aug_rng)?;

        let view = if rng::derive(cfg.seed, "itm-view", step).gen::<f64>() < 0.5 {
            ImageView::Cc
        } else {
            ImageView::Mlo
        };
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, &params, true)?;
        let mut drop_rng = rng::derive(cfg.seed, "dropout", step);
        let emb = model::forward_trimodal(
            &mut tape,
            &bound,
            &cfg.model,
            &inputs,
            mask,
            true,
            &mut drop_rng,
        )?;
        let out = total_loss(&mut tape, &emb, &loss_cfg, view)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::NanLoss { step, batch_ids: inputs.ids.clone() });
        }
        tape.backward(out.loss)?;

        let grads: Vec<Vec<f64>> = bound
            .ids
            .iter()
            .zip(&params.tensors)
            .map(|(&id, t)| {
                tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data.len()])
            })
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let lrs = vec![lr; params.tensors.len()];
        let mut slices: Vec<&mut [f64]> =
            params.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
        opt.step(&mut slices, &grad_refs, &lrs, &wds)?;

        metrics.push(MetricsRecord {
            step,
            total: out.breakdown.total,
            imc: out.breakdown.imc,
            image_text: out.breakdown.image_text,
            image_mani: out.breakdown.image_mani,
            text_mani: out.breakdown.text_mani,
            lr,
            mu,
            batch_len: inputs.len(),
            itm_view: view,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        let done = step + 1;
        if cfg.checkpoint_every > 0
            && done % cfg.checkpoint_every == 0
            && done < cfg.optimizer.total_steps
        {
            if let Some(cb) = on_checkpoint.as_mut() {
                let ck = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    step: done,
                    rng_seed: cfg.seed,
                    config_hash,
                    params: params.clone(),
                    opt: opt.clone(),
                };
                cb(&ck)?;
            }
        }
    }

    Ok((
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: cfg.optimizer.total_steps,
            rng_seed: cfg.seed,
            config_hash,
            params,
            opt,
        },
        metrics,
    ))
}

/// Untrained baseline with the run's init stream — the comparison point for
/// "does pretraining help" experiments.
pub fn random_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    ModelParams::init(cfg.seed, cfg.model)
}

/// Mean of the first and last `window` losses — the smoke-test signal that
/// training moves.
pub fn loss_trend(metrics: &[MetricsRecord], window: usize) -> Option<(f64, f64)> {
    if metrics.len() < window * 2 || window == 0 {
        return None;
    }
    let head: f64 = metrics[..window].iter().map(|m| m.total).sum::<f64>() / window as f64;
    let tail: f64 =
        metrics[metrics.len() - window..].iter().map(|m| m.total).sum::<f64>() / window as f64;
    Some((head, tail))
}

/// The split-wise penultimate image features and labels a downstream
/// protocol consumes.
pub struct SplitFeatures {
    pub train: (Matrix, Vec<f64>),
    pub val: (Matrix, Vec<f64>),
    pub test: (Matrix, Vec<f64>),
}

pub fn split_features(params: &ModelParams, dataset: &Dataset) -> Result<SplitFeatures> {
    let part = |rows: &[u32]| -> Result<(Matrix, Vec<f64>)> {
        let inputs = dataset.batch_inputs(rows)?;
        let x = model::image_features(params, &inputs, crate::eval::probes::EVAL_CHUNK)?;
        Ok((x, dataset.labels(rows)))
    };
    Ok(SplitFeatures {
        train: part(&dataset.split.train)?,
        val: part(&dataset.split.val)?,
        test: part(&dataset.split.test)?,
    })
}
