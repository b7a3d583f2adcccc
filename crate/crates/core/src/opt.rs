//! Decoupled-weight-decay Adam and the warmup–cosine learning-rate
//! schedule shared by pretraining and the downstream heads.

use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moment buffers are kept per parameter
/// tensor, aligned by position with the slices passed to [`AdamW::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `lens` are the flat lengths of the tensors that will be stepped, in
    /// a fixed order.
    pub fn new(lens: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    /// One update over every tensor. `lrs` and `wds` are per-tensor (the
    /// fine-tuning protocol runs pretrained tensors at a scaled-down rate,
    /// and biases conventionally skip decay). Decay is decoupled:
    /// `p -= lr*wd*p` alongside the moment update.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lrs: &[f64],
        wds: &[f64],
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || lrs.len() != self.m.len()
            || wds.len() != self.m.len()
        {
            return Err(Error::Contract(format!(
                "optimizer built for {} tensors, stepped with {}/{}/{}/{}",
                self.m.len(),
                params.len(),
                grads.len(),
                lrs.len(),
                wds.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((param, grad), (m, v)), (&lr, &wd)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
            .zip(lrs.iter().zip(wds))
        {
            if param.len() != m.len() || grad.len() != m.len() {
                return Err(Error::Contract(format!(
                    "optimizer tensor length {} stepped with param {} / grad {}",
                    m.len(),
                    param.len(),
                    grad.len()
                )));
            }
            for i in 0..m.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * param[i]);
            }
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear ramp `(step+1)/warmup · peak` during
/// warmup (so step 0 trains at `peak/warmup`, never at 0), then cosine
/// annealing from `peak` to `min_lr`, reaching `min_lr` exactly at the
/// final step and staying there.
pub fn warmup_cosine(step: u64, warmup: u64, total: u64, peak: f64, min_lr: f64) -> Result<f64> {
    if total == 0 || warmup >= total {
        return Err(Error::Config(format!(
            "schedule needs warmup {warmup} < total {total}"
        )));
    }
    if !(peak > 0.0) || min_lr < 0.0 || min_lr > peak {
        return Err(Error::Config(format!(
            "schedule rates peak {peak} / min {min_lr} out of order"
        )));
    }
    if step < warmup {
        return Ok(peak * (step + 1) as f64 / warmup as f64);
    }
    let last = total - 1;
    if step >= last {
        return Ok(min_lr);
    }
    let span = (last - warmup) as f64;
    let progress = (step - warmup) as f64 / span.max(1.0);
    Ok(min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
