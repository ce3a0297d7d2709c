//! Optimizer, learning-rate schedule and the training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::data::{epoch_batches, Sample};
use crate::error::{DreamError, Result};
use crate::model::{Dream, LossWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &[Tensor]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, h: AdamHyper) -> Result<()> {
    if !state.matches(params) || grads.len() != params.len() {
        return Err(DreamError::Contract("optimizer state does not match parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(DreamError::shape("adam grad", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gd[i];
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_fraction` of `total` steps, then
/// cosine decay from the peak to `floor_fraction × peak` at `total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    let floor = peak * cfg.schedule.floor_fraction;
    let total = total.max(1);
    let warmup = (cfg.schedule.warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return floor;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    /// Summed token cross-entropy.
    pub ce: f64,
    pub ce_per_token: f64,
    pub align: f64,
    pub penalty: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// Loss and gradients for one batch without updating anything.
pub fn loss_and_grads(model: &Dream, batch: &[Sample], weights: LossWeights) -> Result<(LossReport, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(DreamError::Contract("empty batch".into()));
    }
    let tape = Tape::new(model.config.precision);
    let p = model.store.bind(&tape, true);
    let pass = model.forward(&p, batch, weights)?;
    if let Some((what, index)) = pass.first_non_finite() {
        return Err(DreamError::NonFinite { what, index });
    }
    let report = LossReport {
        step: 0,
        epoch: 0,
        ce: pass.ce.item(),
        ce_per_token: pass.ce.item() / pass.tokens as f64,
        align: pass.align.map_or(0.0, |a| a.item()),
        penalty: pass.penalty.map_or(0.0, |a| a.item()),
        total: pass.total.item(),
        grad_norm: 0.0,
        lr: 0.0,
        tokens: pass.tokens,
    };
    let grads = tape.backward(pass.total)?;
    Ok((report, p.collect(&grads)))
}

/// Forward, backward, clipping and one Adam update at learning rate `lr`.
pub fn train_step(model: &mut Dream, batch: &[Sample], state: &mut AdamState, cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
    let weights = LossWeights {
        lambda: cfg.lambda,
        indicator_reg: cfg.indicator_reg,
    };
    let (mut report, mut grads) = loss_and_grads(model, batch, weights)?;
    report.grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !report.grad_norm.is_finite() {
        return Err(DreamError::NonFinite {
            what: "gradient norm".into(),
            index: 0,
        });
    }
    report.lr = lr;
    let hyper = AdamHyper {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    adam_update(model.store.tensors_mut(), &grads, state, hyper)?;
    let precision = model.config.precision;
    for t in model.store.tensors_mut() {
        precision.round_slice(t.data_mut());
    }
    Ok(report)
}

/// Mean of an epoch's step reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    pub ce_per_token: f64,
    pub align: f64,
    pub total: f64,
}

impl EpochReport {
    pub fn from_steps(epoch: usize, steps: &[LossReport]) -> Self {
        let n = steps.len().max(1) as f64;
        let tokens: usize = steps.iter().map(|s| s.tokens).sum();
        let ce: f64 = steps.iter().map(|s| s.ce).sum();
        EpochReport {
            epoch,
            steps: steps.len(),
            ce: ce / n,
            ce_per_token: ce / tokens.max(1) as f64,
            align: steps.iter().map(|s| s.align).sum::<f64>() / n,
            total: steps.iter().map(|s| s.total).sum::<f64>() / n,
        }
    }
}

/// Deterministic training loop over a fixed dataset. The position is a
/// single step counter; epoch order is derived from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Dream,
    pub state: AdamState,
    pub config: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Dream, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(model.store.tensors());
        Ok(Trainer {
            model,
            state,
            config,
            step: 0,
        })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Scheduled steps: `epochs × batches`, capped by `max_steps`.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.config.epochs * self.batches_per_epoch(n);
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn done(&self, n: usize) -> bool {
        self.step >= self.total_steps(n)
    }

    /// Runs the next step and advances the counter.
    pub fn step_next(&mut self, data: &[Sample]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(DreamError::Dataset("training set is empty".into()));
        }
        let per_epoch = self.batches_per_epoch(data.len());
        let epoch = self.step / per_epoch;
        let index = self.step % per_epoch;
        let batches = epoch_batches(data.len(), self.config.batch_size, self.config.seed, epoch);
        let batch: Vec<Sample> = batches[index].iter().map(|&i| data[i].clone()).collect();
        let total = self.total_steps(data.len());
        let lr = lr_schedule(self.step + 1, total, &self.config);
        let mut report = train_step(&mut self.model, &batch, &mut self.state, &self.config, lr)?;
        report.step = self.step;
        report.epoch = epoch;
        self.step += 1;
        Ok(report)
    }

    /// Trains until the schedule ends, calling `on_step` after every step.
    pub fn run(&mut self, data: &[Sample], mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut out = Vec::new();
        while !self.done(data.len()) {
            let r = self.step_next(data)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}
