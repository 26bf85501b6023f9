//! Plain teacher-forced language-model training on question/answer pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{PolicyModel, ScoreItem};
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, Adam, Graph};
use crate::seeding;
use crate::tasks::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    /// Position offsets are drawn from `0..=max_offset` per example, so the
    /// model tolerates questions shifted by a prefix.
    pub max_offset: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, lr: 3e-3, warmup: 50, grad_clip: 1.0, max_offset: 8 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: format!("pretrain.{field}"), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }
}

/// Learning rate with linear warmup then cosine decay to a tenth.
pub fn lr_at(step: usize, total: usize, base: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One Adam step on the mean negative log-likelihood of gold outputs.
/// Returns the loss before the update.
pub(crate) fn nll_step(model: &mut PolicyModel, adam: &mut Adam, items: &[ScoreItem<'_>], lr: f64, clip: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params().attach(&mut g);
    let (lp, _) = model.score(&mut g, &vars, items)?;
    let mean = g.mean(lp);
    let loss = g.scale(mean, -1.0);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let mut gs: Vec<_> = vars.iter().map(|v| grads.get(*v)).collect();
    clip_grad_norm(&mut gs, clip);
    adam.lr = lr;
    adam.step(model.params_mut().tensors_mut(), &gs)?;
    Ok(value)
}

/// Train `model` on the gold outputs of `corpus`. Returns per-step losses.
pub fn pretrain(model: &mut PolicyModel, corpus: &[Task], cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let gold: Vec<_> = corpus.iter().map(Task::gold_output).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let max_len = model.config().max_len;
    for step in 0..cfg.steps {
        let mut rng = seeding::stream(seed, &[0x9e7, step as u64]);
        let items: Vec<_> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..corpus.len());
                let len = corpus[i].question.len() + gold[i].len();
                let room = max_len.saturating_sub(len).min(cfg.max_offset);
                let offset = rng.random_range(0..=room);
                ScoreItem { prefix: &[], question: &corpus[i].question, output: &gold[i], offset }
            })
            .collect();
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup);
        losses.push(nll_step(model, &mut adam, &items, lr, cfg.grad_clip)?);
    }
    Ok(losses)
}
