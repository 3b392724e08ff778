//! Synthetic stand-ins for private data, disjoint partitioning, and the
//! `DGDS` dataset file format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{DgdError, Result};
use crate::io::{write_atomic, ByteReader};
use crate::rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DGDS";
pub const DATASET_VERSION: u32 = 1;

/// Where a dataset came from. Not persisted; set by whoever loads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Private training data. Must never reach the student.
    Private,
    /// Held-out evaluation data.
    HeldOut,
    /// Generator output or reconstructions of it.
    Synthetic,
    Unspecified,
}

/// Feature matrix with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    class_count: usize,
    origin: Origin,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(DgdError::Shape(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if class_count == 0 {
            return Err(DgdError::Config("class count must be positive".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(DgdError::Data(format!(
                    "{} labels for {} examples",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&k| k >= class_count) {
                return Err(DgdError::Data(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        if !features.is_finite() {
            return Err(DgdError::NonFinite("dataset features".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
            origin: Origin::Unspecified,
        })
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a precondition error naming `what` needed them.
    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| DgdError::Precondition(format!("{what} needs a labeled dataset")))
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rows at `indices`, same origin and class count.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            origin: self.origin,
        }
    }

    pub fn without_labels(&self) -> LabeledDataset {
        LabeledDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        Ok(LabeledDataset::new(self.features.clone(), Some(labels), self.class_count)?
            .with_origin(self.origin))
    }

    /// Per-class label counts.
    pub fn label_histogram(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut h = vec![0; self.class_count];
            for &k in l {
                h[k] += 1;
            }
            h
        })
    }

    /// Fraction of the most frequent class.
    pub fn majority_rate(&self) -> Option<f64> {
        let h = self.label_histogram()?;
        if self.is_empty() {
            return Some(0.0);
        }
        Some(*h.iter().max().unwrap() as f64 / self.len() as f64)
    }

    /// Rounds every feature to f32 precision so the dataset survives a
    /// `DGDS` round trip unchanged.
    pub fn quantized(mut self) -> Self {
        for v in self.features.data_mut() {
            *v = *v as f32 as f64;
        }
        self
    }
}

/// Gaussian-cluster classification task with fixed centers.
#[derive(Clone, Debug)]
pub struct MixtureTask {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

const MAX_CENTER_ATTEMPTS: usize = 1000;

impl MixtureTask {
    /// Draws `classes` unit-norm centers at pairwise distance >= 2*spread.
    pub fn new(classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if classes < 2 || dim < 2 {
            return Err(DgdError::Config(format!(
                "mixture needs >= 2 classes and >= 2 dims, got K={classes}, dim={dim}"
            )));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(DgdError::Config(format!("spread must be positive, got {spread}")));
        }
        let mut rng = rng::stream(seed, "mixture-centers", 0);
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect();
            let separated = (0..classes).all(|i| {
                (i + 1..classes).all(|j| distance(&centers[i], &centers[j]) >= 2.0 * spread)
            });
            if separated {
                return Ok(MixtureTask { centers, spread });
            }
        }
        Err(DgdError::Config(format!(
            "cannot place {classes} unit centers in {dim} dims with separation {}",
            2.0 * spread
        )))
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_class` draws per cluster, classes interleaved (example i has
    /// class i mod K).
    pub fn sample(&self, per_class: usize, seed: u64) -> Result<LabeledDataset> {
        let k = self.centers.len();
        let dim = self.centers[0].len();
        let mut rng = rng::stream(seed, "mixture-samples", 0);
        let n = k * per_class;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            for &mu in &self.centers[c] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + self.spread * z);
            }
            labels.push(c);
        }
        Ok(LabeledDataset::new(Tensor::matrix(n, dim, data)?, Some(labels), k)?.quantized())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// K Gaussian clusters around unit-norm centers; balanced, deterministic.
pub fn make_mixture_dataset(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    MixtureTask::new(classes, dim, spread, seed)?.sample(per_class, seed)
}

pub const DIGIT_CELL: usize = 8;

const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####..",
    ],
    [
        "...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######.",
    ],
    [
        "..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".#......", ".######.",
    ],
    [
        ".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", "......#.", ".#####..",
    ],
    [
        ".....#..", "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..",
    ],
    [
        ".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..",
    ],
    [
        "...###..", "..#.....", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####..",
    ],
    [
        ".######.", "......#.", ".....#..", ".....#..", "....#...", "....#...", "...#....", "...#....",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####..",
    ],
    [
        "..####..", ".#....#.", ".#....#.", ".#....#.", "..#####.", "......#.", ".....#..", "..###...",
    ],
];

/// Binary 8x8 glyph of each digit class, row-major in {0, 1}.
pub fn digit_templates(classes: usize) -> Vec<Vec<f64>> {
    GLYPHS
        .iter()
        .take(classes)
        .map(|g| {
            g.iter()
                .flat_map(|row| row.bytes().map(|b| if b == b'#' { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect()
}

/// Digit glyphs with each pixel flipped independently with probability
/// `noise`. Classes interleaved as in [`MixtureTask::sample`].
pub fn make_digitgrid_dataset(
    classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(2..=10).contains(&classes) {
        return Err(DgdError::Config(format!(
            "digit grid supports 2..=10 classes, got {classes}"
        )));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(DgdError::Config(format!("noise must be in [0, 0.5), got {noise}")));
    }
    let templates = digit_templates(classes);
    let dim = DIGIT_CELL * DIGIT_CELL;
    let mut rng = rng::stream(seed, "digitgrid", 0);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &px in &templates[c] {
            let flip = noise > 0.0 && rng.random::<f64>() < noise;
            data.push(if flip { 1.0 - px } else { px });
        }
        labels.push(c);
    }
    LabeledDataset::new(Tensor::matrix(n, dim, data)?, Some(labels), classes)
}

/// Disjoint index subsets over a parent dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    subsets: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness, coverage of `0..total`, and non-emptiness.
    pub fn new(subsets: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for (s, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(DgdError::Precondition(format!("subset {s} is empty")));
            }
            for &i in subset {
                if i >= total {
                    return Err(DgdError::Precondition(format!(
                        "subset {s} index {i} out of range {total}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DgdError::Precondition(format!(
                        "index {i} appears in more than one subset"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DgdError::Precondition(format!(
                "index {missing} is not covered by any subset"
            )));
        }
        Ok(Partition { subsets })
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn total(&self) -> usize {
        self.subsets.iter().map(Vec::len).sum()
    }
}

/// Random equal-size (+-1) disjoint subsets covering `ds`; the remainder
/// goes to the first subsets.
pub fn partition_disjoint(ds: &LabeledDataset, n: usize, seed: u64) -> Result<Partition> {
    let total = ds.len();
    if n == 0 || n > total {
        return Err(DgdError::Config(format!(
            "cannot split {total} examples into {n} non-empty subsets"
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng::stream(seed, "partition", 0));
    let base = total / n;
    let extra = total % n;
    let mut subsets = Vec::with_capacity(n);
    let mut start = 0;
    for s in 0..n {
        let len = base + usize::from(s < extra);
        subsets.push(idx[start..start + len].to_vec());
        start += len;
    }
    Partition::new(subsets, total)
}

/// First `query_count` examples become the query set, the rest the
/// unlabeled pool.
pub fn split_query_pool(
    ds: &LabeledDataset,
    query_count: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if query_count > ds.len() {
        return Err(DgdError::Config(format!(
            "query count {query_count} exceeds pool of {}",
            ds.len()
        )));
    }
    let q: Vec<usize> = (0..query_count).collect();
    let u: Vec<usize> = (query_count..ds.len()).collect();
    Ok((ds.subset(&q), ds.subset(&u)))
}

pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let n = ds.len();
    let dim = ds.dim();
    if ds.class_count() > u16::MAX as usize + 1 {
        return Err(DgdError::Data("class count exceeds u16 label range".into()));
    }
    let mut out = Vec::with_capacity(21 + n * dim * 4 + n * 2);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.class_count() as u32).to_le_bytes());
    out.push(u8::from(ds.labels().is_some()));
    for &v in ds.features().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = ds.labels() {
        for &l in labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(DgdError::format(0, format!("bad magic {magic:?}, expected DGDS")));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(DgdError::format(4, format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let k = r.u32()? as usize;
    let flag_at = r.offset();
    let labeled = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(DgdError::format(flag_at, format!("bad label flag {other}"))),
    };
    if dim == 0 || k == 0 {
        return Err(DgdError::format(8, "dimension and class count must be positive"));
    }
    let need = n * dim * 4 + if labeled { n * 2 } else { 0 };
    if r.remaining() != need {
        return Err(DgdError::format(
            r.offset(),
            format!("payload is {} bytes, header implies {need}", r.remaining()),
        ));
    }
    let feat_at = r.offset();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        data.push(r.f32()? as f64);
    }
    let features = Tensor::matrix(n, dim, data)
        .map_err(|e| DgdError::format(feat_at, e.to_string()))?;
    let labels = if labeled {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u16()? as usize);
        }
        Some(l)
    } else {
        None
    };
    LabeledDataset::new(features, labels, k).map_err(|e| DgdError::format(feat_at, e.to_string()))
}

pub fn write_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DgdError::io(path, e))?;
    decode_dataset(&bytes)
}
