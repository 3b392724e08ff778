//! Variational autoencoder over synthetic data and the reconstruction
//! triples built from perturbed latent codes.
//!
//! The encoder emits `2c` values per row: the first `c` are the posterior
//! mean, the rest the log-variance.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::sample_laplace;
use crate::error::{DgdError, Result};
use crate::rng::{self, Rng};
use crate::synth::{LabeledDataset, Origin};
use crate::tensor::{
    xavier_init, Activation, Architecture, BoundParams, Graph, LrSchedule, Optimizer,
    OptimizerKind, ParamSet, Tensor, Var,
};
use crate::train::{sampler, TrainConfig};

/// Lower bound applied to posterior standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Perturbation radius `r` for triples.
    pub radius: f64,
    /// Laplace scale of latent noise; 0 disables it.
    pub dp_scale: f64,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 32,
            hidden: vec![64],
            radius: 1.0,
            dp_scale: 0.0,
            train: TrainConfig {
                rounds: 500,
                batch_size: 128,
                optimizer: OptimizerKind::Adam,
                lr: 1e-3,
                lr_schedule: LrSchedule::Linear,
                seed: 0,
            },
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(DgdError::Config("vae latent_dim must be >= 1".into()));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(DgdError::Config(format!("radius must be >= 0, got {}", self.radius)));
        }
        if !(self.dp_scale >= 0.0 && self.dp_scale.is_finite()) {
            return Err(DgdError::Config(format!(
                "dp_scale must be >= 0, got {}",
                self.dp_scale
            )));
        }
        self.train.validate()
    }

    pub fn encoder_architecture(&self, data_dim: usize) -> Result<Architecture> {
        Architecture::mlp(data_dim, &self.hidden, 2 * self.latent_dim, Activation::Relu, None)
    }

    pub fn decoder_architecture(&self, data_dim: usize) -> Result<Architecture> {
        let hidden: Vec<usize> = self.hidden.iter().rev().copied().collect();
        Architecture::mlp(self.latent_dim, &hidden, data_dim, Activation::Relu, None)
    }
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))` for one example.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let var = s * s;
            -0.5 * (1.0 + var.ln() - m * m - var)
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

fn latent_dim_of(encoder: &ParamSet) -> Result<usize> {
    let out = encoder.architecture().output_dim();
    if out % 2 != 0 {
        return Err(DgdError::Shape(format!(
            "encoder output width {out} is not 2c"
        )));
    }
    Ok(out / 2)
}

/// Records the ELBO loss: mean per-example squared reconstruction error plus
/// mean KL, with `e = mu + sigma * zeta` for the supplied `zeta`.
pub fn vae_loss(
    g: &mut Graph,
    encoder: &ParamSet,
    enc_bound: &BoundParams,
    decoder: &ParamSet,
    dec_bound: &BoundParams,
    x: Var,
    zeta: &Tensor,
) -> Result<VaeLoss> {
    let c = latent_dim_of(encoder)?;
    if decoder.architecture().input_dim() != c {
        return Err(DgdError::Shape(format!(
            "decoder input {} does not match latent dim {c}",
            decoder.architecture().input_dim()
        )));
    }
    let rows = g.value(x).rows();
    if zeta.shape() != [rows, c] {
        return Err(DgdError::Shape(format!(
            "noise shape {:?} does not match [{rows}, {c}]",
            zeta.shape()
        )));
    }
    let h = encoder.forward_graph(g, enc_bound, x)?.output;
    let mu = g.slice_cols(h, 0, c)?;
    let logvar = g.slice_cols(h, c, 2 * c)?;
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let z = g.constant(zeta.clone());
    let noise = g.mul(sigma, z)?;
    let e = g.add(mu, noise)?;
    let xr = decoder.forward_graph(g, dec_bound, e)?.output;

    let diff = g.sub(xr, x)?;
    let sq = g.square(diff);
    let per_row = g.row_sums(sq);
    let reconstruction = g.mean(per_row);

    let var = g.exp(logvar);
    let mu2 = g.square(mu);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, logvar)?;
    let kl_elem = g.add_scalar(b, -1.0);
    let kl_rows = g.row_sums(kl_elem);
    let kl_mean = g.mean(kl_rows);
    let kl = g.scale(kl_mean, 0.5);

    let total = g.add(reconstruction, kl)?;
    Ok(VaeLoss {
        total,
        reconstruction,
        kl,
    })
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_raw(vec![rows, cols], data)
}

/// ELBO of `x` with noise drawn from `seed`.
pub fn evaluate_vae_loss(encoder: &ParamSet, decoder: &ParamSet, x: &Tensor, seed: u64) -> Result<(f64, f64, f64)> {
    let c = latent_dim_of(encoder)?;
    let zeta = normal_matrix(x.rows(), c, &mut rng::stream(seed, "vae-eval", 0));
    let mut g = Graph::new();
    let eb = g.bind(encoder, false);
    let db = g.bind(decoder, false);
    let xv = g.constant(x.clone());
    let l = vae_loss(&mut g, encoder, &eb, decoder, &db, xv, &zeta)?;
    Ok((g.scalar(l.total), g.scalar(l.reconstruction), g.scalar(l.kl)))
}

/// Mean squared reconstruction error through the posterior means.
pub fn reconstruction_mse(encoder: &ParamSet, decoder: &ParamSet, x: &Tensor) -> Result<f64> {
    let c = latent_dim_of(encoder)?;
    let h = encoder.forward(x)?.output;
    let mu = Tensor::from_raw(
        vec![x.rows(), c],
        (0..x.rows()).flat_map(|i| h.row(i)[..c].to_vec()).collect(),
    );
    let xr = decoder.forward(&mu)?.output;
    let se: f64 = xr
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(se / x.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub losses: Vec<f64>,
    /// ELBO on the held-out tail before and after training.
    pub heldout_before: Option<f64>,
    pub heldout_after: Option<f64>,
}

/// Fraction of the synthetic set used as the held-out ELBO slice.
const HELDOUT_FRACTION: f64 = 0.1;

pub fn train_vae(synthetic: &LabeledDataset, cfg: &VaeConfig) -> Result<TrainedVae> {
    cfg.validate()?;
    if synthetic.is_empty() {
        return Err(DgdError::Precondition("synthetic set is empty".into()));
    }
    let dim = synthetic.dim();
    let c = cfg.latent_dim;
    let t = &cfg.train;
    let mut encoder = xavier_init(&cfg.encoder_architecture(dim)?, rng::derive_seed(t.seed, "vae-encoder", 0));
    let mut decoder = xavier_init(&cfg.decoder_architecture(dim)?, rng::derive_seed(t.seed, "vae-decoder", 0));

    let n_held = if synthetic.len() >= 10 {
        (synthetic.len() as f64 * HELDOUT_FRACTION).floor() as usize
    } else {
        0
    };
    let n_train = synthetic.len() - n_held;
    let x = synthetic.features();
    let held = (n_held > 0)
        .then(|| x.select_rows(&(n_train..synthetic.len()).collect::<Vec<_>>()));
    let held_loss = |e: &ParamSet, d: &ParamSet| -> Result<Option<f64>> {
        held.as_ref()
            .map(|h| evaluate_vae_loss(e, d, h, t.seed).map(|v| v.0))
            .transpose()
    };
    let heldout_before = held_loss(&encoder, &decoder)?;

    let mut enc_opt = Optimizer::new(t.optimizer, &encoder, t.lr, t.lr_schedule, t.rounds)?;
    let mut dec_opt = Optimizer::new(t.optimizer, &decoder, t.lr, t.lr_schedule, t.rounds)?;
    let mut batches = sampler(n_train, t, "vae-batches");
    let mut losses = Vec::with_capacity(t.rounds);
    for round in 0..t.rounds {
        let idx = batches.next_batch();
        let xb = x.select_rows(&idx);
        let zeta = normal_matrix(idx.len(), c, &mut rng::stream(t.seed, "vae-zeta", round as u64));
        let mut g = Graph::new();
        let eb = g.bind(&encoder, true);
        let db = g.bind(&decoder, true);
        let xv = g.constant(xb);
        let l = vae_loss(&mut g, &encoder, &eb, &decoder, &db, xv, &zeta)?;
        let value = g.scalar(l.total);
        let diverged = || DgdError::Divergence {
            stage: "train_vae",
            round,
            loss: value,
        };
        if !value.is_finite() {
            return Err(diverged());
        }
        let grads = g.backward(l.total)?;
        let ge = grads.param_map(&eb, &encoder)?;
        let gd = grads.param_map(&db, &decoder)?;
        enc_opt.step(&mut encoder, &ge).map_err(|_| diverged())?;
        dec_opt.step(&mut decoder, &gd).map_err(|_| diverged())?;
        losses.push(value);
    }
    let heldout_after = held_loss(&encoder, &decoder)?;
    Ok(TrainedVae {
        encoder,
        decoder,
        losses,
        heldout_before,
        heldout_after,
    })
}

/// Posterior of one example and a reparameterized sample from it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub e: Vec<f64>,
}

impl LatentCode {
    /// Builds a code, flooring `sigma` and sampling `e = mu + sigma * zeta`.
    pub fn sample(mu: Vec<f64>, sigma: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(DgdError::Shape(format!(
                "mu has {} entries, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        let sigma: Vec<f64> = sigma.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect();
        let e = mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect();
        Ok(LatentCode { mu, sigma, e })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn posteriors(encoder: &ParamSet, x: &Tensor) -> Result<(usize, Tensor)> {
    let c = latent_dim_of(encoder)?;
    Ok((c, encoder.forward(x)?.output))
}

fn code_from_row(row: &[f64], c: usize, rng: &mut Rng) -> Result<LatentCode> {
    let mu = row[..c].to_vec();
    let sigma = row[c..].iter().map(|lv| (0.5 * lv).exp()).collect();
    LatentCode::sample(mu, sigma, rng)
}

/// Encodes each row of `x`; row `i` draws its noise from stream `(seed, i)`.
pub fn encode(encoder: &ParamSet, x: &Tensor, seed: u64) -> Result<Vec<LatentCode>> {
    let (c, h) = posteriors(encoder, x)?;
    (0..x.rows())
        .map(|i| code_from_row(h.row(i), c, &mut rng::stream(seed, "encode", i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Tangent,
    Normal,
}

fn unit_scaled(v: Vec<f64>, r: f64) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 || r == 0.0 {
        return vec![0.0; v.len()];
    }
    v.into_iter().map(|a| r * a / norm).collect()
}

/// Perturbation of length `r` along `direction` relative to the posterior
/// spread: `sigma * zeta` for tangent, `zeta / sigma` for normal.
pub fn perturbation(sigma: &[f64], direction: Direction, r: f64, rng: &mut Rng) -> Vec<f64> {
    let raw = sigma
        .iter()
        .map(|&s| {
            let z: f64 = StandardNormal.sample(rng);
            let s = s.max(SIGMA_FLOOR);
            match direction {
                Direction::Tangent => s * z,
                Direction::Normal => z / s,
            }
        })
        .collect();
    unit_scaled(raw, r)
}

/// Clamps to `[-1, 1]` and adds Laplace(`b`) per coordinate; identity at `b = 0`.
pub fn privatize(code: &mut [f64], b: f64, rng: &mut Rng) {
    if b > 0.0 {
        for v in code.iter_mut() {
            *v = v.clamp(-1.0, 1.0) + sample_laplace(b, rng);
        }
    }
}

/// `e + n*` followed by latent noise of scale `dp_scale`.
pub fn perturb_code(
    code: &LatentCode,
    direction: Direction,
    radius: f64,
    dp_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(radius >= 0.0 && dp_scale >= 0.0) {
        return Err(DgdError::Precondition(format!(
            "radius and dp_scale must be >= 0, got {radius} and {dp_scale}"
        )));
    }
    let mut r = rng::stream(seed, "perturb", 0);
    let n = perturbation(&code.sigma, direction, radius, &mut r);
    let mut out: Vec<f64> = code.e.iter().zip(&n).map(|(a, b)| a + b).collect();
    privatize(&mut out, dp_scale, &mut r);
    Ok(out)
}

/// One reconstruction triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTriple {
    pub x_hat: Vec<f64>,
    pub x_tan: Vec<f64>,
    pub x_norm: Vec<f64>,
}

/// Row-aligned triples: row `j` of each tensor belongs to example `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleSet {
    pub x_hat: Tensor,
    pub x_tan: Tensor,
    pub x_norm: Tensor,
}

impl TripleSet {
    pub fn new(x_hat: Tensor, x_tan: Tensor, x_norm: Tensor) -> Result<Self> {
        if x_hat.shape() != x_tan.shape() || x_hat.shape() != x_norm.shape() {
            return Err(DgdError::Shape(format!(
                "triple members disagree: {:?} {:?} {:?}",
                x_hat.shape(),
                x_tan.shape(),
                x_norm.shape()
            )));
        }
        Ok(TripleSet { x_hat, x_tan, x_norm })
    }

    pub fn len(&self) -> usize {
        self.x_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x_hat.cols()
    }

    pub fn get(&self, j: usize) -> SyntheticTriple {
        SyntheticTriple {
            x_hat: self.x_hat.row(j).to_vec(),
            x_tan: self.x_tan.row(j).to_vec(),
            x_norm: self.x_norm.row(j).to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> TripleSet {
        TripleSet {
            x_hat: self.x_hat.select_rows(indices),
            x_tan: self.x_tan.select_rows(indices),
            x_norm: self.x_norm.select_rows(indices),
        }
    }

    /// The three members as unlabeled synthetic datasets.
    pub fn to_datasets(&self, class_count: usize) -> Result<[LabeledDataset; 3]> {
        let wrap = |t: &Tensor| -> Result<LabeledDataset> {
            Ok(LabeledDataset::new(t.clone(), None, class_count)?.with_origin(Origin::Synthetic))
        };
        Ok([wrap(&self.x_hat)?, wrap(&self.x_tan)?, wrap(&self.x_norm)?])
    }

    pub fn from_datasets(hat: &LabeledDataset, tan: &LabeledDataset, norm: &LabeledDataset) -> Result<Self> {
        TripleSet::new(hat.features().clone(), tan.features().clone(), norm.features().clone())
    }
}

/// Decodes `M(e)`, `M(e + n_tan)` and `M(e + n_norm)` for every example of
/// `unlabeled`, with `M` the identity. Example `j` uses stream `(seed, j)`.
pub fn build_triples(
    encoder: &ParamSet,
    decoder: &ParamSet,
    unlabeled: &LabeledDataset,
    radius: f64,
    dp_scale: f64,
    seed: u64,
) -> Result<TripleSet> {
    if !(radius >= 0.0 && dp_scale >= 0.0) {
        return Err(DgdError::Precondition(format!(
            "radius and dp_scale must be >= 0, got {radius} and {dp_scale}"
        )));
    }
    if unlabeled.is_empty() {
        return Err(DgdError::Precondition("no examples to build triples from".into()));
    }
    let (c, h) = posteriors(encoder, unlabeled.features())?;
    let codes: Vec<[Vec<f64>; 3]> = (0..unlabeled.len())
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, "triple", j as u64);
            let code = code_from_row(h.row(j), c, &mut r)?;
            let shifted = |d: Direction, r: &mut Rng| -> Vec<f64> {
                let n = perturbation(&code.sigma, d, radius, r);
                code.e.iter().zip(&n).map(|(a, b)| a + b).collect()
            };
            let mut hat = code.e.clone();
            let mut tan = shifted(Direction::Tangent, &mut r);
            let mut norm = shifted(Direction::Normal, &mut r);
            privatize(&mut hat, dp_scale, &mut r);
            privatize(&mut tan, dp_scale, &mut r);
            privatize(&mut norm, dp_scale, &mut r);
            Ok([hat, tan, norm])
        })
        .collect::<Result<_>>()?;
    let n = codes.len();
    let stack = |k: usize| -> Result<Tensor> {
        let z = Tensor::from_raw(vec![n, c], codes.iter().flat_map(|t| t[k].iter().copied()).collect());
        Ok(decoder.forward(&z)?.output)
    };
    TripleSet::new(stack(0)?, stack(1)?, stack(2)?)
}
