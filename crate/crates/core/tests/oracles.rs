mod common;

use dgd_core::aggregation::{noisy_argmax, NoiseMechanism, VoteHistogram};
use dgd_core::discriminative::{evaluate_accuracy, train_classifier, train_teacher_ensemble};
use dgd_core::generator::{synthesize_dataset, train_generator, GeneratorConfig, OutputActivation};
use dgd_core::harness::inversion_attack;
use dgd_core::rng;
use dgd_core::synth::{digit_templates, make_digitgrid_dataset, make_mixture_dataset, partition_disjoint};
use dgd_core::tensor::{xavier_init, Architecture, LrSchedule, ParamSet};
use dgd_core::train::TrainConfig;
use dgd_core::vae::{perturbation, reconstruction_mse, train_vae, Direction, LatentCode, VaeConfig};

fn rows(ds: &dgd_core::synth::LabeledDataset) -> Vec<Vec<f64>> {
    (0..ds.len()).map(|i| ds.row(i).to_vec()).collect()
}

#[test]
fn two_class_mixture_is_linearly_separable() {
    let ds = make_mixture_dataset(2, 2, 200, 0.05, 3).unwrap();
    let acc = common::logistic_train_accuracy(&rows(&ds), ds.labels().unwrap(), 2, 500, 1.0);
    assert!(acc >= 0.99, "logistic oracle reached {acc}");
}

#[test]
fn noisy_digits_stay_nearest_their_template() {
    let ds = make_digitgrid_dataset(10, 100, 0.1, 5).unwrap();
    let templates = digit_templates(10);
    let labels = ds.labels().unwrap();
    let hits = (0..ds.len())
        .filter(|&i| common::nearest_template(ds.row(i), &templates) == labels[i])
        .count();
    let acc = hits as f64 / ds.len() as f64;
    assert!(acc > 0.95, "template oracle accuracy {acc}");
}

#[test]
fn noisy_argmax_agrees_with_an_independent_simulation() {
    let h = VoteHistogram::new(vec![3, 1, 1]).unwrap();
    let trials = 1_000_000;
    for (b, check) in [(40.0, 0usize), (0.1, 1)] {
        let mut r = rng::seeded(17);
        let mech = NoiseMechanism::Laplace { scale: b };
        let hits = (0..trials).filter(|_| noisy_argmax(&h, &mech, &mut r) == 0).count();
        let lib = hits as f64 / trials as f64;
        let oracle = common::noisy_max_marginals(h.counts(), b, trials, 99)[0];
        if check == 0 {
            assert!((lib - 0.344).abs() < 0.01, "P(0) = {lib}");
            assert!((oracle - 0.344).abs() < 0.01, "oracle P(0) = {oracle}");
        } else {
            assert!(lib > 0.999 && oracle > 0.999, "{lib} {oracle}");
        }
    }
}

#[test]
fn latent_samples_center_on_mu() {
    let mu = vec![0.5, -1.0, 2.0];
    let sigma = vec![0.2, 1.0, 3.0];
    let n = 10_000;
    let mut sums = vec![0.0; 3];
    for s in 0..n {
        let mut r = rng::stream(1, "clt", s);
        let code = LatentCode::sample(mu.clone(), sigma.clone(), &mut r).unwrap();
        for (acc, v) in sums.iter_mut().zip(&code.e) {
            *acc += v;
        }
    }
    for i in 0..3 {
        let mean = sums[i] / n as f64;
        assert!((mean - mu[i]).abs() <= 3.0 * sigma[i] / 100.0, "coordinate {i}: mean {mean}");
    }
}

#[test]
fn anisotropic_sigma_separates_tangent_and_normal() {
    let sigma = [10.0, 0.1];
    let n = 10_000;
    let mut tangent_hits = 0;
    let mut normal_hits = 0;
    for s in 0..n {
        let t = perturbation(&sigma, Direction::Tangent, 1.0, &mut rng::stream(2, "tan", s));
        let m = perturbation(&sigma, Direction::Normal, 1.0, &mut rng::stream(2, "norm", s));
        tangent_hits += (t[0].abs() > t[1].abs()) as usize;
        normal_hits += (m[1].abs() > m[0].abs()) as usize;
    }
    assert!(tangent_hits * 100 >= 99 * n as usize, "tangent {tangent_hits}");
    assert!(normal_hits * 100 >= 99 * n as usize, "normal {normal_hits}");
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn inversion_of_a_linear_model_follows_the_class_weights() {
    // zero-sum class weights, so the ascent direction at the origin is the
    // target's own weight vector
    let (d, k) = (6, 4);
    let arch = Architecture::classifier(d, &[], k).unwrap();
    let mut net = xavier_init(&arch, 4);
    let w = net.get_mut("dense0.weight").unwrap().data_mut();
    for i in 0..d {
        let row = &mut w[i * k..(i + 1) * k];
        let m = row.iter().sum::<f64>() / k as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
    let net: ParamSet = net;
    let w = net.get("dense0.weight").unwrap().data().to_vec();
    for t in 0..k {
        let col: Vec<f64> = (0..d).map(|i| w[i * k + t]).collect();
        let inv = inversion_attack(&net, t, 300, 0.1, 0.01, None, 8).unwrap();
        let c = cosine(&inv.input, &col);
        assert!(c > 0.9, "class {t}: cosine {c}");
    }
}

#[test]
fn teachers_on_shards_stay_within_ten_points_of_the_baseline() {
    let ds = make_mixture_dataset(10, 16, 200, 0.15, 11).unwrap();
    let test = make_mixture_dataset(10, 16, 100, 0.15, 11).unwrap();
    let arch = Architecture::classifier(16, &[64], 10).unwrap();
    let cfg = TrainConfig {
        rounds: 1000,
        batch_size: 128,
        lr: 0.05,
        lr_schedule: LrSchedule::Linear,
        ..TrainConfig::default()
    };
    let base = train_classifier(&ds, &arch, &cfg).unwrap();
    let base_acc = evaluate_accuracy(&base.net, &test).unwrap();
    let part = partition_disjoint(&ds, 20, 11).unwrap();
    let ens = train_teacher_ensemble(&ds, &part, &arch, &cfg).unwrap();
    let mean: f64 = ens
        .teachers()
        .iter()
        .map(|t| evaluate_accuracy(t, &test).unwrap())
        .sum::<f64>()
        / ens.len() as f64;
    assert!(base_acc - mean <= 0.10, "baseline {base_acc}, mean teacher {mean}");
}

#[test]
fn vae_halves_reconstruction_error_on_digit_synthetic_data() {
    let ds = make_digitgrid_dataset(10, 100, 0.1, 6).unwrap();
    let arch = Architecture::classifier(64, &[64], 10).unwrap();
    let cfg = TrainConfig {
        rounds: 600,
        lr: 0.05,
        lr_schedule: LrSchedule::Linear,
        ..TrainConfig::default()
    };
    let disc = train_classifier(&ds, &arch, &cfg).unwrap().net;
    let mut gcfg = GeneratorConfig {
        output_activation: OutputActivation::Sigmoid,
        beta: 0.01,
        ..GeneratorConfig::default()
    };
    gcfg.train.lr = 0.01;
    let generator = train_generator(&disc, &gcfg).unwrap().net;
    let synthetic = synthesize_dataset(&generator, 1000, 10, 6).unwrap();
    let vcfg = VaeConfig::default();
    let untrained = VaeConfig {
        train: TrainConfig { rounds: 0, ..vcfg.train.clone() },
        ..vcfg.clone()
    };
    let before = train_vae(&synthetic, &untrained).unwrap();
    let after = train_vae(&synthetic, &vcfg).unwrap();
    let x = synthetic.features();
    let m0 = reconstruction_mse(&before.encoder, &before.decoder, x).unwrap();
    let m1 = reconstruction_mse(&after.encoder, &after.decoder, x).unwrap();
    assert!(m1 < 0.5 * m0, "mse {m0} -> {m1}");
}
