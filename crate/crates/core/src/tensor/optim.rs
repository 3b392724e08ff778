use serde::{Deserialize, Serialize};

use super::{GradientMap, ParamSet, Tensor};
use crate::error::{DgdError, Result};

/// Learning-rate multiplier as a function of the round index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from the base rate to 0 at round `total`.
    Linear,
    /// Divides the rate by `factor` every `fraction * total` rounds.
    Step { fraction: f64, factor: f64 },
}

impl LrSchedule {
    pub fn multiplier(&self, round: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => {
                if total == 0 {
                    return 0.0;
                }
                (1.0 - round as f64 / total as f64).max(0.0)
            }
            LrSchedule::Step { fraction, factor } => {
                let every = ((fraction * total as f64).round() as usize).max(1);
                factor.powi(-((round / every) as i32))
            }
        }
    }

    pub fn rate(&self, base: f64, round: usize, total: usize) -> f64 {
        base * self.multiplier(round, total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(net: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = net
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam step (beta1 0.9, beta2 0.999, eps 1e-8), applied in place.
    pub fn update(&mut self, net: &mut ParamSet, grads: &GradientMap, lr: f64) -> Result<()> {
        check_lr(lr)?;
        grads.check_matches(net)?;
        if self.m.len() != net.entries().len() {
            return Err(DgdError::Shape("optimizer state does not match network".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (((p, (_, g)), m), v) in net
            .tensors_mut()
            .zip(grads.entries())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        ensure_finite(net)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SgdState;

impl SgdState {
    /// `w <- w - lr * g`, applied in place.
    pub fn update(&mut self, net: &mut ParamSet, grads: &GradientMap, lr: f64) -> Result<()> {
        check_lr(lr)?;
        grads.check_matches(net)?;
        for (p, (_, g)) in net.tensors_mut().zip(grads.entries()) {
            for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gv;
            }
        }
        ensure_finite(net)
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(DgdError::Config(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    Ok(())
}

fn ensure_finite(net: &ParamSet) -> Result<()> {
    for (name, t) in net.entries() {
        if !t.is_finite() {
            return Err(DgdError::NonFinite(format!(
                "parameter {name} after optimizer step"
            )));
        }
    }
    Ok(())
}

/// Optimizer state plus schedule, stepping a single network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: Option<AdamState>,
    base_lr: f64,
    schedule: LrSchedule,
    total_rounds: usize,
    round: usize,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        net: &ParamSet,
        base_lr: f64,
        schedule: LrSchedule,
        total_rounds: usize,
    ) -> Result<Self> {
        check_lr(base_lr)?;
        Ok(Optimizer {
            kind,
            adam: matches!(kind, OptimizerKind::Adam).then(|| AdamState::new(net)),
            base_lr,
            schedule,
            total_rounds,
            round: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.base_lr, self.round, self.total_rounds)
    }

    pub fn step(&mut self, net: &mut ParamSet, grads: &GradientMap) -> Result<()> {
        let lr = self.current_lr();
        match self.kind {
            OptimizerKind::Adam => self
                .adam
                .as_mut()
                .expect("adam state")
                .update(net, grads, lr)?,
            OptimizerKind::Sgd => SgdState.update(net, grads, lr)?,
        }
        self.round += 1;
        Ok(())
    }
}
