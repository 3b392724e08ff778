//! Data-free generator trained against a frozen classifier.
//!
//! The loss combines three terms evaluated by the frozen discriminator on a
//! generated batch: cross-entropy against its own argmax (confidence), a
//! class-balance term on the batch-mean prediction, and an L1 activation
//! reward on the discriminator's feature layer.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DgdError, Result};
use crate::rng;
use crate::synth::{LabeledDataset, Origin};
use crate::tensor::{
    xavier_init, Activation, Architecture, BoundParams, Graph, Layer, LrSchedule, OptimizerKind,
    ParamSet, Tensor, Var,
};
use crate::train::{run_rounds, TrainConfig};

/// How the class-balance term is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceForm {
    /// `sum_k pbar_k ln pbar_k` on the batch-mean prediction `pbar`;
    /// minimizing it spreads the batch over classes.
    BatchMean,
    /// Per-sample `sum_k p_k ln p_k`, averaged over the batch.
    PerSample,
}

/// Sign applied to the mean L1 feature activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSign {
    /// `- beta * mean ||f||_1`: minimizing raises activations.
    Reward,
    /// `+ beta * mean ||f||_1`.
    Penalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub output_activation: OutputActivation,
    pub alpha: f64,
    pub beta: f64,
    pub balance_form: BalanceForm,
    pub activation_sign: ActivationSign,
    pub train: TrainConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 16,
            hidden: vec![64],
            output_activation: OutputActivation::Tanh,
            alpha: 5.0,
            beta: 0.1,
            balance_form: BalanceForm::BatchMean,
            activation_sign: ActivationSign::Reward,
            train: TrainConfig {
                rounds: 200,
                batch_size: 128,
                optimizer: OptimizerKind::Adam,
                lr: 0.2,
                lr_schedule: LrSchedule::Step {
                    fraction: 0.4,
                    factor: 10.0,
                },
                seed: 0,
            },
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(DgdError::Config("generator latent_dim must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(DgdError::Config(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        self.train.validate()
    }

    /// Dense generator `latent -> hidden... -> data_dim` with the configured
    /// output squashing.
    pub fn architecture(&self, data_dim: usize) -> Result<Architecture> {
        let head = match self.output_activation {
            OutputActivation::Linear => None,
            OutputActivation::Sigmoid => Some(Layer::Activation(Activation::Sigmoid)),
            OutputActivation::Tanh => Some(Layer::Activation(Activation::Tanh)),
        };
        Architecture::mlp(self.latent_dim, &self.hidden, data_dim, Activation::Relu, head)
    }
}

const PROB_FLOOR: f64 = 1e-12;

/// Graph handles of the three loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub cross_entropy: Var,
    pub balance: Var,
    pub activation: Var,
}

/// Values of the loss terms on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLossValues {
    pub total: f64,
    pub cross_entropy: f64,
    pub balance: f64,
    pub activation: f64,
}

/// Records the generator loss of batch `x` under the frozen discriminator
/// bound as `disc_bound`.
pub fn generator_loss(
    g: &mut Graph,
    discriminator: &ParamSet,
    disc_bound: &BoundParams,
    x: Var,
    cfg: &GeneratorConfig,
) -> Result<GeneratorLoss> {
    if disc_bound.is_trainable() {
        return Err(DgdError::Graph(
            "the discriminator must be bound frozen in the generator loss".into(),
        ));
    }
    let out = discriminator.forward_graph(g, disc_bound, x)?;
    let logits = out.logits()?;
    let pseudo = g.value(out.output).argmax_rows();
    let cross_entropy = g.cross_entropy(logits, &pseudo)?;

    let balance = match cfg.balance_form {
        BalanceForm::BatchMean => {
            let p = out.output;
            let pbar = g.col_means(p)?;
            let floored = g.add_scalar(pbar, PROB_FLOOR);
            let ln = g.ln(floored);
            let t = g.mul(pbar, ln)?;
            g.sum(t)
        }
        BalanceForm::PerSample => {
            let h = g.entropy_rows(logits)?;
            let m = g.mean(h);
            g.neg(m)
        }
    };

    // mean over the batch of ||f||_1
    let abs = g.abs(out.features);
    let per_row = g.row_sums(abs);
    let activation = g.mean(per_row);

    let weighted_balance = g.scale(balance, cfg.alpha);
    let act_weight = match cfg.activation_sign {
        ActivationSign::Reward => -cfg.beta,
        ActivationSign::Penalty => cfg.beta,
    };
    let weighted_act = g.scale(activation, act_weight);
    let partial = g.add(cross_entropy, weighted_balance)?;
    let total = g.add(partial, weighted_act)?;
    Ok(GeneratorLoss {
        total,
        cross_entropy,
        balance,
        activation,
    })
}

/// Evaluates the loss terms on a fixed batch.
pub fn evaluate_generator_loss(
    discriminator: &ParamSet,
    batch: &Tensor,
    cfg: &GeneratorConfig,
) -> Result<GeneratorLossValues> {
    let mut g = Graph::new();
    let bound = g.bind(discriminator, false);
    let x = g.constant(batch.clone());
    let l = generator_loss(&mut g, discriminator, &bound, x, cfg)?;
    Ok(GeneratorLossValues {
        total: g.scalar(l.total),
        cross_entropy: g.scalar(l.cross_entropy),
        balance: g.scalar(l.balance),
        activation: g.scalar(l.activation),
    })
}

fn latent_batch(rows: usize, dim: usize, seed: u64, tag: &str, index: u64) -> Tensor {
    let mut r = rng::stream(seed, tag, index);
    let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_raw(vec![rows, dim], data)
}

#[derive(Clone, Debug)]
pub struct TrainedGenerator {
    pub net: ParamSet,
    /// Total loss per round.
    pub losses: Vec<f64>,
}

/// The five-step loop: sample noise, generate, evaluate the frozen
/// discriminator, compute the loss, update the generator only.
pub fn train_generator(discriminator: &ParamSet, cfg: &GeneratorConfig) -> Result<TrainedGenerator> {
    cfg.validate()?;
    if !discriminator.architecture().has_softmax_head() {
        return Err(DgdError::Precondition(
            "discriminator must be a softmax classifier".into(),
        ));
    }
    let arch = cfg.architecture(discriminator.architecture().input_dim())?;
    let mut net = xavier_init(&arch, cfg.train.seed);
    let batch = cfg.train.batch_size;
    let losses = run_rounds(&mut net, &cfg.train, "train_generator", |g, gen_bound, round| {
        let z = g.constant(latent_batch(batch, cfg.latent_dim, cfg.train.seed, "generator-z", round as u64));
        let x = arch.forward_graph(g, gen_bound, z)?.output;
        let disc_bound = g.bind(discriminator, false);
        Ok(generator_loss(g, discriminator, &disc_bound, x, cfg)?.total)
    })?;
    Ok(TrainedGenerator { net, losses })
}

/// `count` unlabeled examples from i.i.d. standard-normal latent codes.
pub fn synthesize_dataset(
    generator: &ParamSet,
    count: usize,
    class_count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(DgdError::Precondition("synthesize at least one example".into()));
    }
    let z = latent_batch(count, generator.architecture().input_dim(), seed, "synthesize", 0);
    let x = generator.forward(&z)?.output;
    Ok(LabeledDataset::new(x, None, class_count)?
        .quantized()
        .with_origin(Origin::Synthetic))
}

/// Mean max-probability and entropy (nats) of the argmax class histogram of
/// `classifier` on `x`.
pub fn prediction_profile(classifier: &ParamSet, x: &Tensor) -> Result<(f64, f64)> {
    let p = classifier.forward(x)?.output;
    let k = p.cols();
    let n = p.rows().max(1) as f64;
    let mut hist = vec![0usize; k];
    let mut conf = 0.0;
    for i in 0..p.rows() {
        let row = p.row(i);
        let a = crate::tensor::argmax(row);
        hist[a] += 1;
        conf += row[a];
    }
    let entropy = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum();
    Ok((conf / n, entropy))
}
