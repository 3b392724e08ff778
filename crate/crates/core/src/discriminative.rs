//! Discriminative stream: the baseline classifier trained on all private
//! data and the teacher ensemble trained on a disjoint partition of it.

use rayon::prelude::*;

use crate::error::{DgdError, Result};
use crate::synth::{LabeledDataset, Partition};
use crate::tensor::{xavier_init, Architecture, ParamSet, Tensor};
use crate::train::{run_rounds, sampler, TrainConfig};

/// Result of training one classifier.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub net: ParamSet,
    /// Minibatch loss per round.
    pub losses: Vec<f64>,
    /// Accuracy on the carved-out validation slice (logging only).
    pub validation_accuracy: Option<f64>,
}

/// Fraction of each training set held out for logging.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Cross-entropy training from a Xavier init seeded with `cfg.seed`.
pub fn train_classifier(
    ds: &LabeledDataset,
    architecture: &Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    let labels = ds.require_labels("train_classifier")?;
    if !architecture.has_softmax_head() {
        return Err(DgdError::Config(format!(
            "classifier architecture `{architecture}` has no softmax head"
        )));
    }
    if architecture.input_dim() != ds.dim() || architecture.output_dim() != ds.class_count() {
        return Err(DgdError::Shape(format!(
            "architecture `{architecture}` does not fit data of dim {} with {} classes",
            ds.dim(),
            ds.class_count()
        )));
    }
    if ds.is_empty() {
        return Err(DgdError::Precondition("training set is empty".into()));
    }

    let n_val = if ds.len() >= 10 {
        (ds.len() as f64 * VALIDATION_FRACTION).floor() as usize
    } else {
        0
    };
    // validation rows are the tail slice
    let n_train = ds.len() - n_val;
    let train_x = ds.features().select_rows(&(0..n_train).collect::<Vec<_>>());
    let train_y = &labels[..n_train];

    let mut net = xavier_init(architecture, cfg.seed);
    let mut batches = sampler(n_train, cfg, "classifier-batches");
    let losses = run_rounds(&mut net, cfg, "train_classifier", |g, bound, _| {
        let idx = batches.next_batch();
        let x = g.constant(train_x.select_rows(&idx));
        let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let logits = architecture.forward_graph(g, bound, x)?.logits()?;
        g.cross_entropy(logits, &y)
    })?;

    let validation_accuracy = if n_val > 0 {
        let idx: Vec<usize> = (n_train..ds.len()).collect();
        Some(evaluate_accuracy(&net, &ds.subset(&idx))?)
    } else {
        None
    };
    if !losses.is_empty() {
        log::debug!(
            "classifier trained: first loss {:.4}, last loss {:.4}, val acc {:?}",
            losses[0],
            losses[losses.len() - 1],
            validation_accuracy
        );
    }
    Ok(TrainedClassifier {
        net,
        losses,
        validation_accuracy,
    })
}

/// Teachers sharing one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEnsemble {
    teachers: Vec<ParamSet>,
}

impl TeacherEnsemble {
    pub fn new(teachers: Vec<ParamSet>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or_else(|| DgdError::Precondition("ensemble needs at least one teacher".into()))?;
        if teachers.iter().any(|t| t.architecture() != first.architecture()) {
            return Err(DgdError::Precondition(
                "all teachers must share one architecture".into(),
            ));
        }
        Ok(TeacherEnsemble { teachers })
    }

    pub fn teachers(&self) -> &[ParamSet] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn architecture(&self) -> &Architecture {
        self.teachers[0].architecture()
    }

    /// Each teacher's argmax prediction for every row of `x`, teacher-major.
    pub fn predictions(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        self.teachers.iter().map(|t| t.predict(x)).collect()
    }

    /// Accuracy of the un-noised plurality vote (ties to lowest class).
    pub fn consensus_accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        let labels = ds.require_labels("consensus_accuracy")?;
        let preds = self.predictions(ds.features())?;
        let k = ds.class_count();
        let correct = (0..ds.len())
            .filter(|&i| {
                let mut counts = vec![0.0; k];
                for p in &preds {
                    counts[p[i]] += 1.0;
                }
                crate::tensor::argmax(&counts) == labels[i]
            })
            .count();
        Ok(correct as f64 / ds.len().max(1) as f64)
    }
}

/// Teacher `i` sees only the rows of subset `i` and uses seed `cfg.seed + i`.
pub fn train_teacher_ensemble(
    ds: &LabeledDataset,
    partition: &Partition,
    architecture: &Architecture,
    cfg: &TrainConfig,
) -> Result<TeacherEnsemble> {
    ds.require_labels("train_teacher_ensemble")?;
    if partition.total() != ds.len() {
        return Err(DgdError::Precondition(format!(
            "partition covers {} examples, dataset has {}",
            partition.total(),
            ds.len()
        )));
    }
    let shards: Vec<LabeledDataset> = partition.subsets().iter().map(|s| ds.subset(s)).collect();
    let teachers = shards
        .par_iter()
        .enumerate()
        .map(|(i, shard)| train_teacher(shard, architecture, &cfg.with_seed(cfg.seed + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    TeacherEnsemble::new(teachers)
}

/// Trains one teacher on its own shard.
pub fn train_teacher(
    shard: &LabeledDataset,
    architecture: &Architecture,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    Ok(train_classifier(shard, architecture, cfg)?.net)
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn evaluate_accuracy(net: &ParamSet, ds: &LabeledDataset) -> Result<f64> {
    let labels = ds.require_labels("evaluate_accuracy")?;
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(ds.features())?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}
