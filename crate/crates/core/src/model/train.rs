use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{sft_loss_grad, EncodedExample, ModelParams, SftReduction};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-2,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub optim: OptimConfig,
    pub reduction: SftReduction,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            optim: OptimConfig::default(),
            reduction: SftReduction::SumTokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Decoupled-weight-decay Adam.
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(n: usize, cfg: &OptimConfig) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if let Some(max) = self.cfg.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

/// Seeded minibatch loop shared by SFT and alignment.
pub(crate) fn run_training<F>(
    mut params: ModelParams,
    n_items: usize,
    cfg: &OptimConfig,
    mut loss_grad: F,
) -> Result<(ModelParams, Vec<TracePoint>)>
where
    F: FnMut(&ModelParams, &[usize]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(params.len(), cfg);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = loss_grad(&params, batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            opt.step(params.as_mut_slice(), &mut grad);
            trace.push(TracePoint { step, epoch, loss });
            step += 1;
        }
    }
    Ok((params, trace))
}

pub fn train_sft(
    params: ModelParams,
    dataset: &[EncodedExample],
    cfg: &SftConfig,
) -> Result<(ModelParams, Vec<TracePoint>)> {
    run_training(params, dataset.len(), &cfg.optim, |p, idx| {
        let batch: Vec<EncodedExample> = idx.iter().map(|&i| dataset[i].clone()).collect();
        sft_loss_grad(p, &batch, cfg.reduction)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::{sft_loss, ModelConfig};

    fn toy_dataset() -> Vec<EncodedExample> {
        // Response is a deterministic function of the prompt.
        (0..40)
            .map(|i| {
                let a = 4 + i % 5;
                let b = 4 + (i / 5) % 5;
                EncodedExample::new(vec![a, b], vec![b, a])
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            embed_dim: 6,
            hidden_dim: 12,
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let p = ModelParams::init(cfg(), 1);
        let c = SftConfig {
            optim: OptimConfig {
                lr: 0.0,
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (q, trace) = train_sft(p.clone(), &toy_dataset(), &c).unwrap();
        assert_eq!(p, q);
        assert!(!trace.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy_dataset();
        let p = ModelParams::init(cfg(), 2);
        let c = SftConfig::default();
        let before = sft_loss(&p, &data, c.reduction).unwrap();
        let (q, _) = train_sft(p.clone(), &data, &c).unwrap();
        let after = sft_loss(&q, &data, c.reduction).unwrap();
        assert!(after < before, "{after} !< {before}");
        let (q2, _) = train_sft(p, &data, &c).unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = ModelParams::init(cfg(), 2);
        assert!(train_sft(p, &[], &SftConfig::default()).is_err());
    }
}
