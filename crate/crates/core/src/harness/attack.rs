//! Model-inversion probe: gradient ascent on a victim's class confidence.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DgdError, Result};
use crate::rng;
use crate::tensor::{Graph, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub target_class: usize,
    /// Reconstructed input.
    pub input: Vec<f64>,
    /// `p(target | x)` before the first step and after each step.
    pub confidence: Vec<f64>,
}

/// Magnitude of the seeded uniform start point.
const INIT_SCALE: f64 = 0.01;

/// Maximizes `ln p(target | x) - l2_weight * ||x||^2` over `x` by plain
/// gradient ascent, projecting onto `bounds` after each step when given.
pub fn inversion_attack(
    victim: &ParamSet,
    target_class: usize,
    steps: usize,
    lr: f64,
    l2_weight: f64,
    bounds: Option<[f64; 2]>,
    seed: u64,
) -> Result<Inversion> {
    let arch = victim.architecture();
    if !arch.has_softmax_head() {
        return Err(DgdError::Precondition("inversion needs a softmax classifier".into()));
    }
    let k = arch.output_dim();
    if target_class >= k {
        return Err(DgdError::Config(format!(
            "target class {target_class} out of range for {k} classes"
        )));
    }
    let dim = arch.input_dim();
    let mut r = rng::stream(seed, "inversion", target_class as u64);
    let mut x: Vec<f64> = (0..dim).map(|_| r.random_range(-INIT_SCALE..INIT_SCALE)).collect();
    if let Some([lo, hi]) = bounds {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    let mut confidence = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let bound = g.bind(victim, false);
        let xv = g.parameter(Tensor::from_raw(vec![1, dim], x.clone()));
        let out = victim.forward_graph(&mut g, &bound, xv)?;
        confidence.push(g.value(out.output).data()[target_class]);
        if step == steps {
            break;
        }
        let logp = g.log_softmax(out.logits()?);
        let picked = g.pick(logp, &[target_class])?;
        let gain = g.sum(picked);
        let sq = g.square(xv);
        let norm = g.sum(sq);
        let penalty = g.scale(norm, l2_weight);
        let objective = g.sub(gain, penalty)?;
        let grads = g.backward(objective)?;
        let grad = grads.get(xv).expect("input gradient");
        for (v, d) in x.iter_mut().zip(grad) {
            *v += lr * d;
            if let Some([lo, hi]) = bounds {
                *v = v.clamp(lo, hi);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DgdError::NonFinite(format!("inversion diverged at step {step}")));
        }
    }
    Ok(Inversion {
        target_class,
        input: x,
        confidence,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// How closely a reconstruction resembles its class template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateAgreement {
    /// Nearest template (by cosine) is the target's.
    pub nearest_is_target: bool,
    /// Cosine to the target template minus the best cosine to any other.
    pub margin: f64,
}

pub fn template_agreement(input: &[f64], target: usize, templates: &[Vec<f64>]) -> Result<TemplateAgreement> {
    if target >= templates.len() {
        return Err(DgdError::Config(format!("no template for class {target}")));
    }
    if templates.iter().any(|t| t.len() != input.len()) {
        return Err(DgdError::Shape("template width differs from the input".into()));
    }
    let own = cosine(input, &templates[target]);
    let other = templates
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != target)
        .map(|(_, t)| cosine(input, t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(TemplateAgreement {
        nearest_is_target: own > other,
        margin: own - other,
    })
}

/// Summary of attacking every class of a victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    /// Fraction of classes whose reconstruction is nearest its own template.
    pub agreement_rate: f64,
    /// Mean cosine margin over classes.
    pub mean_margin: f64,
    pub inversions: Vec<Inversion>,
}

/// Attacks each class in turn and scores the reconstructions.
pub fn attack_all_classes(
    victim: &ParamSet,
    templates: &[Vec<f64>],
    steps: usize,
    lr: f64,
    l2_weight: f64,
    bounds: Option<[f64; 2]>,
    seed: u64,
) -> Result<AttackSummary> {
    let k = victim.architecture().output_dim();
    let mut hits = 0usize;
    let mut margin = 0.0;
    let mut inversions = Vec::with_capacity(k);
    for t in 0..k {
        let inv = inversion_attack(victim, t, steps, lr, l2_weight, bounds, seed)?;
        let a = template_agreement(&inv.input, t, templates)?;
        hits += a.nearest_is_target as usize;
        margin += a.margin;
        inversions.push(inv);
    }
    Ok(AttackSummary {
        agreement_rate: hits as f64 / k as f64,
        mean_margin: margin / k as f64,
        inversions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Architecture;

    fn linear_victim() -> ParamSet {
        let arch = Architecture::classifier(4, &[], 3).unwrap();
        let mut net = ParamSet::zeros(&arch);
        // [in, out] layout: column j is class j's weight vector
        let w = [
            [1.0, -0.5, 0.2],
            [0.3, 0.8, -1.0],
            [-0.7, 0.1, 0.6],
            [0.5, 0.4, 0.9],
        ];
        let data = net.get_mut("dense0.weight").unwrap().data_mut();
        for i in 0..4 {
            for j in 0..3 {
                data[i * 3 + j] = w[i][j];
            }
        }
        net
    }

    #[test]
    fn zero_steps_return_the_seeded_start() {
        let v = linear_victim();
        let a = inversion_attack(&v, 1, 0, 0.1, 0.01, None, 3).unwrap();
        let b = inversion_attack(&v, 1, 0, 0.1, 0.01, None, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.confidence.len(), 1);
        assert!(a.input.iter().all(|x| x.abs() <= INIT_SCALE));
    }

    #[test]
    fn confidence_rises() {
        let v = linear_victim();
        let a = inversion_attack(&v, 2, 50, 0.1, 0.01, None, 1).unwrap();
        assert_eq!(a.confidence.len(), 51);
        assert!(a.confidence[50] > a.confidence[0] + 0.3);
    }

    #[test]
    fn bounds_are_respected() {
        let v = linear_victim();
        let a = inversion_attack(&v, 0, 100, 1.0, 0.0, Some([0.0, 1.0]), 1).unwrap();
        assert!(a.input.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn bad_target_is_config_error() {
        assert!(matches!(
            inversion_attack(&linear_victim(), 3, 1, 0.1, 0.0, None, 0),
            Err(DgdError::Config(_))
        ));
    }

    #[test]
    fn agreement_scores_cosine_margin() {
        let templates = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = template_agreement(&[2.0, 1.0], 0, &templates).unwrap();
        assert!(a.nearest_is_target);
        let c = 1.0 / 5f64.sqrt();
        assert!((a.margin - (2.0 * c - c)).abs() < 1e-12);
        assert!(!template_agreement(&[2.0, 1.0], 1, &templates).unwrap().nearest_is_target);
    }
}
