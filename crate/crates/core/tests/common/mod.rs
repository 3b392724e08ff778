#![allow(dead_code)]

pub mod gradsuite;

use dgd_core::tensor::{BoundParams, Graph, ParamSet, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error on near-zero gradients.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates skipped because the loss has a kink within the step.
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

fn loss_value<F>(nets: &[ParamSet], build: &F) -> f64
where
    F: Fn(&mut Graph, &[ParamSet], &[BoundParams]) -> Var,
{
    let mut g = Graph::new();
    let bounds: Vec<BoundParams> = nets.iter().map(|n| g.bind(n, true)).collect();
    let l = build(&mut g, nets, &bounds);
    g.scalar(l)
}

/// Compares reverse-mode gradients of `build` w.r.t. every parameter of
/// every net against central differences.
pub fn fd_check<F>(nets: &[ParamSet], build: F) -> FdReport
where
    F: Fn(&mut Graph, &[ParamSet], &[BoundParams]) -> Var,
{
    let mut g = Graph::new();
    let bounds: Vec<BoundParams> = nets.iter().map(|n| g.bind(n, true)).collect();
    let loss = build(&mut g, nets, &bounds);
    let grads = g.backward(loss).expect("backward");
    let maps: Vec<_> = nets
        .iter()
        .zip(&bounds)
        .map(|(n, b)| grads.param_map(b, n).expect("param map"))
        .collect();

    let base = loss_value(nets, &build);
    let mut report = FdReport::default();
    for (ni, net) in nets.iter().enumerate() {
        for (name, t) in net.entries() {
            let analytic = maps[ni].get(name).expect("gradient entry");
            for k in 0..t.len() {
                let shifted = |delta: f64| {
                    let mut copy = nets.to_vec();
                    copy[ni].get_mut(name).unwrap().data_mut()[k] += delta;
                    loss_value(&copy, &build)
                };
                let up = shifted(FD_STEP);
                let down = shifted(-FD_STEP);
                let central = (up - down) / (2.0 * FD_STEP);
                let right = (up - base) / FD_STEP;
                let left = (base - down) / FD_STEP;
                if (right - left).abs() > 1e-3 * central.abs().max(1.0) {
                    report.skipped += 1;
                    continue;
                }
                let a = analytic.data()[k];
                let rel = (a - central).abs() / a.abs().max(central.abs()).max(REL_FLOOR);
                report.checked += 1;
                if rel > report.max_rel {
                    report.max_rel = rel;
                    report.worst = format!("net {ni} {name}[{k}]: analytic {a:e} fd {central:e}");
                }
            }
        }
    }
    report
}

/// Multinomial logistic regression by full-batch gradient descent, written
/// with plain loops. Returns training accuracy.
pub fn logistic_train_accuracy(x: &[Vec<f64>], y: &[usize], k: usize, iters: usize, lr: f64) -> f64 {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; k];
    let n = x.len() as f64;
    let scores = |w: &Vec<Vec<f64>>, row: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (row, &label) in x.iter().zip(y) {
            let s = scores(&w, row);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / z - if c == label { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += p * row[j] / n;
                }
                grad[c][d] += p / n;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j];
            }
        }
    }
    let hits = x
        .iter()
        .zip(y)
        .filter(|(row, &label)| {
            let s = scores(&w, row);
            dgd_core::tensor::argmax(&s) == label
        })
        .count();
    hits as f64 / n
}

/// Index of the template with the smallest squared distance.
pub fn nearest_template(row: &[f64], templates: &[Vec<f64>]) -> usize {
    let dist: Vec<f64> = templates
        .iter()
        .map(|t| -t.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    dgd_core::tensor::argmax(&dist)
}

/// Laplace(0, b) by inverse CDF from a ChaCha8 stream unrelated to the
/// library's generators.
pub fn laplace_oracle(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Monte-Carlo marginals of report-noisy-max with Laplace(b) noise.
/// Ties go to the lowest index.
pub fn noisy_max_marginals(counts: &[u32], b: f64, trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; counts.len()];
    for _ in 0..trials {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &c) in counts.iter().enumerate() {
            let v = c as f64 + laplace_oracle(&mut rng, b);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        hits[best] += 1;
    }
    hits.iter().map(|&h| h as f64 / trials as f64).collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Path to a checked-in config under the workspace `configs/` directory.
pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}
