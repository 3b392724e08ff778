//! Student training on noisy-labeled queries and synthetic triples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminative::evaluate_accuracy;
use crate::error::{DgdError, Result};
use crate::synth::{LabeledDataset, Origin};
use crate::tensor::{xavier_init, Architecture, BoundParams, Graph, Optimizer, ParamSet, Tensor, Var};
use crate::train::{sampler, TrainConfig};
use crate::vae::TripleSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentLossWeights {
    pub w_sup: f64,
    pub w_norm: f64,
    pub w_tan: f64,
    pub w_ent: f64,
}

impl Default for StudentLossWeights {
    fn default() -> Self {
        StudentLossWeights {
            w_sup: 1.0,
            w_norm: 1.0,
            w_tan: 1.0,
            w_ent: 1.0,
        }
    }
}

impl StudentLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_sup, self.w_norm, self.w_tan, self.w_ent];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(DgdError::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(DgdError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    fn unsupervised_active(&self) -> bool {
        self.w_norm > 0.0 || self.w_tan > 0.0 || self.w_ent > 0.0
    }
}

/// Direction in which the entropy term pushes predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// Minimize `H(p)`: sharper predictions on synthetic data.
    Minimize,
    /// Minimize `sum p ln p`, i.e. maximize `H(p)`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
    pub weights: StudentLossWeights,
    pub entropy_sign: EntropySign,
    /// Rounds between metric rows.
    pub log_every: usize,
    pub train: TrainConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            hidden: vec![64],
            weights: StudentLossWeights::default(),
            entropy_sign: EntropySign::Minimize,
            log_every: 100,
            train: TrainConfig {
                rounds: 500,
                lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(DgdError::Config("log_every must be >= 1".into()));
        }
        self.weights.validate()?;
        self.train.validate()
    }
}

/// Mean cross-entropy of the student on labeled rows.
pub fn supervised_energy(
    g: &mut Graph,
    student: &ParamSet,
    bound: &BoundParams,
    x: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let k = student.architecture().output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DgdError::Data(format!("label {bad} out of range for {k} classes")));
    }
    let xv = g.constant(x.clone());
    let logits = student.forward_graph(g, bound, xv)?.logits()?;
    g.cross_entropy(logits, labels)
}

/// Unweighted unsupervised terms on one triple batch.
#[derive(Clone, Copy, Debug)]
pub struct UnsupervisedTerms {
    pub normal: Var,
    pub tangent: Var,
    /// Mean entropy `H(p(x_hat))`, always with the physical sign.
    pub entropy: Var,
}

fn mean_sq_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.square(d);
    let r = g.row_sums(s);
    Ok(g.mean(r))
}

pub fn unsupervised_terms(
    g: &mut Graph,
    student: &ParamSet,
    bound: &BoundParams,
    triples: &TripleSet,
) -> Result<UnsupervisedTerms> {
    let hat = g.constant(triples.x_hat.clone());
    let tan = g.constant(triples.x_tan.clone());
    let norm = g.constant(triples.x_norm.clone());
    let f_hat = student.forward_graph(g, bound, hat)?;
    let f_tan = student.forward_graph(g, bound, tan)?.features;
    let f_norm = student.forward_graph(g, bound, norm)?.features;
    let normal = mean_sq_distance(g, f_hat.features, f_norm)?;
    let tangent = mean_sq_distance(g, f_hat.features, f_tan)?;
    let h = g.entropy_rows(f_hat.logits()?)?;
    let entropy = g.mean(h);
    Ok(UnsupervisedTerms {
        normal,
        tangent,
        entropy,
    })
}

/// `w_norm * normal + w_tan * tangent + w_ent * (+-H)`.
pub fn unsupervised_energy(
    g: &mut Graph,
    student: &ParamSet,
    bound: &BoundParams,
    triples: &TripleSet,
    weights: &StudentLossWeights,
    sign: EntropySign,
) -> Result<(Var, UnsupervisedTerms)> {
    let t = unsupervised_terms(g, student, bound, triples)?;
    let n = g.scale(t.normal, weights.w_norm);
    let tg = g.scale(t.tangent, weights.w_tan);
    let ent_w = match sign {
        EntropySign::Minimize => weights.w_ent,
        EntropySign::Literal => -weights.w_ent,
    };
    let e = g.scale(t.entropy, ent_w);
    let s = g.add(n, tg)?;
    Ok((g.add(s, e)?, t))
}

/// Values of every energy component on fixed data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub e_s: f64,
    pub e_u_norm: f64,
    pub e_u_tan: f64,
    pub e_u_ent: f64,
    /// `w_sup * e_s + E_u` as recorded on the graph.
    pub total: f64,
}

/// Records `w_sup * E_s + E_u` on one graph; either stream may be absent.
pub fn total_energy(
    g: &mut Graph,
    student: &ParamSet,
    bound: &BoundParams,
    labeled: Option<(&Tensor, &[usize])>,
    triples: Option<&TripleSet>,
    cfg: &StudentConfig,
) -> Result<(Var, Option<Var>, Option<UnsupervisedTerms>)> {
    let sup = labeled
        .map(|(x, y)| supervised_energy(g, student, bound, x, y))
        .transpose()?;
    let uns = triples
        .map(|t| unsupervised_energy(g, student, bound, t, &cfg.weights, cfg.entropy_sign))
        .transpose()?;
    let total = match (sup, uns) {
        (Some(s), Some((u, _))) => {
            let ws = g.scale(s, cfg.weights.w_sup);
            g.add(ws, u)?
        }
        (Some(s), None) => g.scale(s, cfg.weights.w_sup),
        (None, Some((u, _))) => u,
        (None, None) => return Err(DgdError::Precondition("no data for the student energy".into())),
    };
    Ok((total, sup, uns.map(|u| u.1)))
}

pub fn evaluate_energy(
    student: &ParamSet,
    labeled: Option<&LabeledDataset>,
    triples: Option<&TripleSet>,
    cfg: &StudentConfig,
) -> Result<EnergyBreakdown> {
    let mut g = Graph::new();
    let bound = g.bind(student, false);
    let lab = match labeled {
        Some(ds) if !ds.is_empty() => Some((ds.features(), ds.require_labels("student energy")?)),
        _ => None,
    };
    let trip = triples.filter(|t| !t.is_empty());
    let (total, sup, uns) = total_energy(&mut g, student, &bound, lab, trip, cfg)?;
    let v = |x: Option<Var>| x.map(|x| g.scalar(x)).unwrap_or(0.0);
    Ok(EnergyBreakdown {
        e_s: v(sup),
        e_u_norm: v(uns.map(|u| u.normal)),
        e_u_tan: v(uns.map(|u| u.tangent)),
        e_u_ent: v(uns.map(|u| u.entropy)),
        total: g.scalar(total),
    })
}

/// One logged row of student training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "E_s")]
    pub e_s: f64,
    #[serde(rename = "E_u_norm")]
    pub e_u_norm: f64,
    #[serde(rename = "E_u_tan")]
    pub e_u_tan: f64,
    #[serde(rename = "E_u_ent")]
    pub e_u_ent: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedStudent {
    pub net: ParamSet,
    pub metrics: Vec<EpochMetrics>,
}

/// Triples used when logging energies.
const METRIC_TRIPLE_CAP: usize = 1024;

/// Alternates one labeled step and one triple step per round. Labeled data
/// of private origin is refused.
pub fn train_student(
    labeled: Option<&LabeledDataset>,
    triples: Option<&TripleSet>,
    cfg: &StudentConfig,
    test: Option<&LabeledDataset>,
) -> Result<TrainedStudent> {
    cfg.validate()?;
    let labeled = labeled.filter(|d| !d.is_empty());
    let triples = triples.filter(|t| !t.is_empty());
    if labeled.is_some_and(|l| l.origin() == Origin::Private) {
        return Err(DgdError::Precondition(
            "student training received private data".into(),
        ));
    }
    let w = cfg.weights;
    if w.w_sup > 0.0 && labeled.is_none() {
        return Err(DgdError::Precondition(
            "w_sup > 0 requires a nonempty labeled set".into(),
        ));
    }
    if w.unsupervised_active() && triples.is_none() {
        return Err(DgdError::Precondition(
            "unsupervised weights require triples".into(),
        ));
    }
    let (dim, k) = match (labeled, triples) {
        (Some(l), t) => {
            if let Some(t) = t {
                if t.dim() != l.dim() {
                    return Err(DgdError::Shape(format!(
                        "triples have dim {}, labeled data {}",
                        t.dim(),
                        l.dim()
                    )));
                }
            }
            (l.dim(), l.class_count())
        }
        (None, Some(_)) => {
            let k = test.map(|t| t.class_count()).ok_or_else(|| {
                DgdError::Precondition("class count unknown without labeled or test data".into())
            })?;
            (triples.unwrap().dim(), k)
        }
        (None, None) => return Err(DgdError::Precondition("student has no training data".into())),
    };

    let arch = Architecture::classifier(dim, &cfg.hidden, k)?;
    let t = &cfg.train;
    let mut net = xavier_init(&arch, t.seed);
    let use_sup = w.w_sup > 0.0;
    let use_uns = w.unsupervised_active();
    let steps_per_round = use_sup as usize + use_uns as usize;
    let mut opt = Optimizer::new(t.optimizer, &net, t.lr, t.lr_schedule, t.rounds * steps_per_round)?;
    let mut lab_batches = labeled.map(|l| sampler(l.len(), t, "student-labeled"));
    let mut trip_batches = triples.map(|tr| sampler(tr.len(), t, "student-triples"));
    let metric_triples = triples.map(|tr| tr.select(&(0..tr.len().min(METRIC_TRIPLE_CAP)).collect::<Vec<_>>()));

    let mut metrics = Vec::new();
    let log = |net: &ParamSet, epoch: usize, metrics: &mut Vec<EpochMetrics>| -> Result<()> {
        let e = evaluate_energy(net, labeled, metric_triples.as_ref(), cfg)?;
        metrics.push(EpochMetrics {
            epoch,
            e_s: e.e_s,
            e_u_norm: e.e_u_norm,
            e_u_tan: e.e_u_tan,
            e_u_ent: e.e_u_ent,
            total: e.total,
            train_acc: labeled.map(|l| evaluate_accuracy(net, l)).transpose()?.unwrap_or(0.0),
            test_acc: test.map(|d| evaluate_accuracy(net, d)).transpose()?,
        });
        Ok(())
    };

    for round in 0..t.rounds {
        let diverged = |loss: f64| DgdError::Divergence {
            stage: "train_student",
            round,
            loss,
        };
        if use_sup {
            let l = labeled.unwrap();
            let idx = lab_batches.as_mut().unwrap().next_batch();
            let x = l.features().select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| l.labels().unwrap()[i]).collect();
            let mut g = Graph::new();
            let b = g.bind(&net, true);
            let (loss, _, _) = total_energy(&mut g, &net, &b, Some((&x, &y)), None, cfg)?;
            step(&mut g, loss, &b, &mut net, &mut opt, diverged)?;
        }
        if use_uns {
            let tr = triples.unwrap();
            let idx = trip_batches.as_mut().unwrap().next_batch();
            let batch = tr.select(&idx);
            let mut g = Graph::new();
            let b = g.bind(&net, true);
            let (loss, _, _) = total_energy(&mut g, &net, &b, None, Some(&batch), cfg)?;
            step(&mut g, loss, &b, &mut net, &mut opt, diverged)?;
        }
        if (round + 1) % cfg.log_every == 0 {
            log(&net, (round + 1) / cfg.log_every, &mut metrics)?;
        }
    }
    if t.rounds % cfg.log_every != 0 || t.rounds == 0 {
        log(&net, t.rounds.div_ceil(cfg.log_every), &mut metrics)?;
    }
    Ok(TrainedStudent { net, metrics })
}

fn step(
    g: &mut Graph,
    loss: Var,
    bound: &BoundParams,
    net: &mut ParamSet,
    opt: &mut Optimizer,
    diverged: impl Fn(f64) -> DgdError,
) -> Result<()> {
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(diverged(value));
    }
    let grads = g.backward(loss)?.param_map(bound, net)?;
    opt.step(net, &grads).map_err(|_| diverged(value))
}

pub fn write_metrics(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(m)
            .map_err(|e| DgdError::Data(format!("metrics row: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| DgdError::Data(format!("metrics csv: {e}")))?;
    crate::io::write_atomic(path.as_ref(), &bytes)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| DgdError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| DgdError::Data(format!("{}: {e}", path.display()))))
        .collect()
}
