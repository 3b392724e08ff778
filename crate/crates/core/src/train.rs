//! Minibatch training loop shared by every trainer in the pipeline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DgdError, Result};
use crate::rng::{self, Rng};
use crate::tensor::{BoundParams, Graph, LrSchedule, Optimizer, OptimizerKind, ParamSet, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Minibatch steps.
    pub rounds: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 3000,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            lr: 0.05,
            lr_schedule: LrSchedule::Linear,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DgdError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DgdError::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if let LrSchedule::Step { fraction, factor } = self.lr_schedule {
            if !(fraction > 0.0 && factor > 0.0) {
                return Err(DgdError::Config("step schedule needs positive fraction and factor".into()));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Epoch-wise shuffled minibatch indices over `0..n`.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Runs `cfg.rounds` optimizer steps on `net`. `loss_fn` records the loss for
/// one round on a fresh graph; the returned vector holds every round's loss.
pub fn run_rounds(
    net: &mut ParamSet,
    cfg: &TrainConfig,
    stage: &'static str,
    mut loss_fn: impl FnMut(&mut Graph, &BoundParams, usize) -> Result<Var>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, net, cfg.lr, cfg.lr_schedule, cfg.rounds)?;
    let mut losses = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut g = Graph::new();
        let bound = g.bind(net, true);
        let loss = loss_fn(&mut g, &bound, round)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(DgdError::Divergence {
                stage,
                round,
                loss: value,
            });
        }
        let grads = g.backward(loss)?.param_map(&bound, net)?;
        opt.step(net, &grads).map_err(|e| match e {
            DgdError::NonFinite(_) => DgdError::Divergence {
                stage,
                round,
                loss: value,
            },
            other => other,
        })?;
        losses.push(value);
    }
    Ok(losses)
}

pub(crate) fn sampler(n: usize, cfg: &TrainConfig, tag: &str) -> BatchSampler {
    BatchSampler::new(n, cfg.batch_size, rng::stream(cfg.seed, tag, 0))
}
