//! Noisy-argmax aggregation of teacher votes.
//!
//! The mechanism only ever sees a [`VoteHistogram`]; queries reach it
//! exclusively through teacher predictions.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminative::TeacherEnsemble;
use crate::error::{DgdError, Result};
use crate::rng::{self, Rng};
use crate::synth::LabeledDataset;
use crate::tensor::{argmax, Tensor};

/// Per-class teacher vote counts for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    counts: Vec<u32>,
}

impl VoteHistogram {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(DgdError::Data("histogram needs at least one class".into()));
        }
        Ok(VoteHistogram { counts })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Un-noised plurality vote, ties to the lowest class.
    pub fn plurality(&self) -> usize {
        let c: Vec<f64> = self.counts.iter().map(|&v| v as f64).collect();
        argmax(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum NoiseMechanism {
    /// Laplace noise with scale `b = 2 / eps0`; `b = 0` disables noise.
    Laplace { scale: f64 },
    /// Gaussian noise with standard deviation `sigma`. Not accountable.
    Gaussian { sigma: f64 },
}

impl NoiseMechanism {
    pub fn laplace_from_eps0(eps0: f64) -> Result<Self> {
        if !(eps0 > 0.0) {
            return Err(DgdError::Config(format!("eps0 must be positive, got {eps0}")));
        }
        Ok(NoiseMechanism::Laplace { scale: 2.0 / eps0 })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.parameter();
        if !(p >= 0.0 && p.is_finite()) {
            return Err(DgdError::Config(format!(
                "{} noise parameter must be finite and non-negative, got {p}",
                self.name()
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseMechanism::Laplace { .. } => "laplace",
            NoiseMechanism::Gaussian { .. } => "gaussian",
        }
    }

    /// Laplace scale or Gaussian sigma.
    pub fn parameter(&self) -> f64 {
        match *self {
            NoiseMechanism::Laplace { scale } => scale,
            NoiseMechanism::Gaussian { sigma } => sigma,
        }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            NoiseMechanism::Laplace { scale } => sample_laplace(scale, rng),
            NoiseMechanism::Gaussian { sigma } => {
                if sigma == 0.0 {
                    0.0
                } else {
                    sigma * rng.sample::<f64, _>(StandardNormal)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub mechanism: NoiseMechanism,
    pub seed: u64,
}

/// Inverse-CDF Laplace draw: `-b * sgn(u) * ln(1 - 2|u|)`, `u ~ U(-1/2, 1/2)`.
pub fn sample_laplace(scale: f64, rng: &mut Rng) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u = loop {
        let u = rng.random::<f64>() - 0.5;
        if u != -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `argmax_k(counts[k] + noise_k)` with i.i.d. noise; ties to lowest index.
pub fn noisy_argmax(h: &VoteHistogram, mechanism: &NoiseMechanism, rng: &mut Rng) -> usize {
    let noisy: Vec<f64> = h
        .counts
        .iter()
        .map(|&c| c as f64 + mechanism.sample(rng))
        .collect();
    argmax(&noisy)
}

/// Votes of every teacher on a single input row.
pub fn vote_histogram(ensemble: &TeacherEnsemble, x: &Tensor) -> Result<VoteHistogram> {
    if x.rows() != 1 {
        return Err(DgdError::Shape(format!(
            "vote_histogram takes one query row, got {}",
            x.rows()
        )));
    }
    Ok(vote_histograms(ensemble, x)?.remove(0))
}

/// One histogram per row of `x`.
pub fn vote_histograms(ensemble: &TeacherEnsemble, x: &Tensor) -> Result<Vec<VoteHistogram>> {
    let k = ensemble.architecture().output_dim();
    let preds = ensemble.predictions(x)?;
    Ok((0..x.rows())
        .map(|i| {
            let mut counts = vec![0u32; k];
            for p in &preds {
                counts[p[i]] += 1;
            }
            VoteHistogram { counts }
        })
        .collect())
}

/// Privately aggregated label of one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisyLabel {
    pub query_index: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub labels: Vec<NoisyLabel>,
    /// Kept for a future data-dependent accountant.
    pub histograms: Vec<VoteHistogram>,
    /// Mechanism invocations to charge to the privacy ledger.
    pub ledger_delta: usize,
}

impl QueryOutcome {
    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.label).collect()
    }
}

/// Labels every query with a noisy argmax. Query `i` draws its noise from
/// the substream `(cfg.seed, i)`, so the result is order-independent.
pub fn label_query_batch(
    ensemble: &TeacherEnsemble,
    queries: &LabeledDataset,
    cfg: &AggregationConfig,
) -> Result<QueryOutcome> {
    if queries.is_empty() {
        return Err(DgdError::Precondition("no queries to label".into()));
    }
    cfg.mechanism.validate()?;
    let histograms = vote_histograms(ensemble, queries.features())?;
    let labels = histograms
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut r = rng::stream(cfg.seed, "aggregation", i as u64);
            NoisyLabel {
                query_index: i,
                label: noisy_argmax(h, &cfg.mechanism, &mut r),
            }
        })
        .collect::<Vec<_>>();
    Ok(QueryOutcome {
        ledger_delta: labels.len(),
        labels,
        histograms,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    query_index: usize,
    label: usize,
    mechanism: String,
    noise_param: f64,
}

/// CSV with columns `query_index,label,mechanism,noise_param`.
pub fn write_noisy_labels(
    path: impl AsRef<Path>,
    labels: &[NoisyLabel],
    mechanism: &NoiseMechanism,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in labels {
        w.serialize(LabelRow {
            query_index: l.query_index,
            label: l.label,
            mechanism: mechanism.name().into(),
            noise_param: mechanism.parameter(),
        })
        .map_err(|e| DgdError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DgdError::Data(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_noisy_labels(path: impl AsRef<Path>) -> Result<Vec<NoisyLabel>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| DgdError::format(line as u64 + 1, e.to_string()))?;
        out.push(NoisyLabel {
            query_index: row.query_index,
            label: row.label,
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> DgdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DgdError::io(path, io),
        other => DgdError::format(0, format!("{other:?}")),
    }
}
