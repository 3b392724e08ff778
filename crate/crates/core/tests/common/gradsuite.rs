use super::{fd_check, FdReport};
use dgd_core::generator::{generator_loss, ActivationSign, BalanceForm, GeneratorConfig, OutputActivation};
use dgd_core::student::{total_energy, EntropySign, StudentConfig, StudentLossWeights};
use dgd_core::tensor::{xavier_init, Activation, Architecture, BoundParams, Graph, Layer, ParamSet, Tensor, Var};
use dgd_core::vae::{vae_loss, TripleSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

fn jitter(net: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = net.entries().iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        for v in net.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn assert_report(what: &str, r: &FdReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(
        r.skipped * 20 <= r.checked,
        "{what}: {} of {} coordinates sit on kinks",
        r.skipped,
        r.checked
    );
    assert!(r.max_rel < TOL, "{what}: max relative error {:e} at {}", r.max_rel, r.worst);
}

fn act_of(i: usize) -> Activation {
    [Activation::Tanh, Activation::Sigmoid, Activation::Relu][i % 3]
}

fn losses(g: &mut Graph, net: &ParamSet, b: &BoundParams, x: &Tensor, y: &[usize], kind: usize) -> Var {
    let xv = g.constant(x.clone());
    let out = net.forward_graph(g, b, xv).unwrap();
    let logits = out.logits().unwrap();
    match kind {
        0 => g.cross_entropy(logits, y).unwrap(),
        1 => {
            let h = g.entropy_rows(logits).unwrap();
            let hm = g.mean(h);
            let a = g.abs(out.features);
            let rs = g.row_sums(a);
            let am = g.mean(rs);
            g.add(hm, am).unwrap()
        }
        2 => {
            let lp = g.log_softmax(logits);
            let picked = g.pick(lp, y).unwrap();
            let s = g.sum(picked);
            let nll = g.neg(s);
            let p = g.softmax(logits);
            let pbar = g.col_means(p).unwrap();
            let fl = g.add_scalar(pbar, 1e-3);
            let ln = g.ln(fl);
            let t = g.mul(pbar, ln).unwrap();
            let bal = g.sum(t);
            let bal = g.scale(bal, 3.0);
            g.add(nll, bal).unwrap()
        }
        3 => {
            let cols = g.slice_cols(logits, 0, 2).unwrap();
            let half = g.scale(cols, 0.5);
            let e = g.exp(half);
            let s = g.sum(e);
            let sq = g.square(out.features);
            let m = g.mean(sq);
            g.sub(s, m).unwrap()
        }
        _ => {
            let target = g.constant(Tensor::matrix(x.rows(), net.architecture().output_dim(), vec![0.2; x.rows() * net.architecture().output_dim()]).unwrap());
            let d = g.sub(out.output, target).unwrap();
            let sq = g.square(d);
            let rs = g.row_sums(sq);
            let lossv = g.mean(rs);
            let w = g.mul(out.features, out.features).unwrap();
            let ws = g.mean(w);
            g.add(lossv, ws).unwrap()
        }
    }
}

pub fn random_networks(out: &mut Vec<(String, FdReport)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..24 {
        let d = rng.random_range(2..5);
        let k = rng.random_range(3..5);
        let depth = rng.random_range(0..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..5)).collect();
        let arch = Architecture::mlp(d, &hidden, k, act_of(i), Some(Layer::Softmax)).unwrap();
        let mut net = xavier_init(&arch, i as u64);
        jitter(&mut net, &mut rng);
        let rows = rng.random_range(2..6);
        let x = random_matrix(rows, d, &mut rng);
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let kind = i % 5;
        let r = fd_check(&[net], |g, nets, b| losses(g, &nets[0], &b[0], &x, &y, kind));
        out.push((format!("net {i} (loss {kind}, hidden {hidden:?})"), r));
    }
}

pub fn shared_parameters(out: &mut Vec<(String, FdReport)>) {
    // the same net applied to two batches, outputs multiplied
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = Architecture::mlp(3, &[4], 2, Activation::Tanh, Some(Layer::Activation(Activation::Sigmoid))).unwrap();
    let mut net = xavier_init(&arch, 3);
    jitter(&mut net, &mut rng);
    let a = random_matrix(3, 3, &mut rng);
    let bx = random_matrix(3, 3, &mut rng);
    let r = fd_check(&[net], |g, nets, b| {
        let av = g.constant(a.clone());
        let bv = g.constant(bx.clone());
        let oa = nets[0].forward_graph(g, &b[0], av).unwrap().output;
        let ob = nets[0].forward_graph(g, &b[0], bv).unwrap().output;
        let m = g.mul(oa, ob).unwrap();
        let s = g.sum(m);
        g.scale(s, -2.0)
    });
    out.push(("shared parameters".to_string(), r));
}

pub fn generator_losses(out: &mut Vec<(String, FdReport)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let variants = [
        (BalanceForm::BatchMean, ActivationSign::Reward, OutputActivation::Tanh),
        (BalanceForm::PerSample, ActivationSign::Penalty, OutputActivation::Sigmoid),
        (BalanceForm::BatchMean, ActivationSign::Penalty, OutputActivation::Linear),
    ];
    for (i, (balance_form, activation_sign, output_activation)) in variants.into_iter().enumerate() {
        let cfg = GeneratorConfig {
            latent_dim: 3,
            hidden: vec![4],
            output_activation,
            balance_form,
            activation_sign,
            ..GeneratorConfig::default()
        };
        let disc_arch = Architecture::classifier(4, &[5], 3).unwrap();
        let mut disc = xavier_init(&disc_arch, 100 + i as u64);
        jitter(&mut disc, &mut rng);
        let mut gen = xavier_init(&cfg.architecture(4).unwrap(), 200 + i as u64);
        jitter(&mut gen, &mut rng);
        let z = random_matrix(5, 3, &mut rng);
        let r = fd_check(&[gen], |g, nets, b| {
            let db = g.bind(&disc, false);
            let zv = g.constant(z.clone());
            let x = nets[0].forward_graph(g, &b[0], zv).unwrap().output;
            generator_loss(g, &disc, &db, x, &cfg).unwrap().total
        });
        out.push((format!("generator variant {i}"), r));
    }
}

pub fn elbos(out: &mut Vec<(String, FdReport)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..3 {
        let (d, c) = (4, 2);
        let enc_arch = Architecture::mlp(d, &[5], 2 * c, act_of(i), None).unwrap();
        let dec_arch = Architecture::mlp(c, &[5], d, act_of(i + 1), None).unwrap();
        let mut enc = xavier_init(&enc_arch, 300 + i as u64);
        let mut dec = xavier_init(&dec_arch, 400 + i as u64);
        jitter(&mut enc, &mut rng);
        jitter(&mut dec, &mut rng);
        let x = random_matrix(4, d, &mut rng);
        let zeta = random_matrix(4, c, &mut rng);
        let r = fd_check(&[enc, dec], |g, nets, b| {
            let xv = g.constant(x.clone());
            vae_loss(g, &nets[0], &b[0], &nets[1], &b[1], xv, &zeta).unwrap().total
        });
        out.push((format!("elbo {i}"), r));
    }
}

pub fn student_energies(out: &mut Vec<(String, FdReport)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let signs = [EntropySign::Minimize, EntropySign::Literal, EntropySign::Minimize];
    for (i, sign) in signs.into_iter().enumerate() {
        let arch = Architecture::mlp(3, &[4], 3, act_of(i), Some(Layer::Softmax)).unwrap();
        let mut net = xavier_init(&arch, 500 + i as u64);
        jitter(&mut net, &mut rng);
        let cfg = StudentConfig {
            hidden: vec![4],
            weights: StudentLossWeights {
                w_sup: rng.random_range(0.5..2.0),
                w_norm: rng.random_range(0.5..2.0),
                w_tan: rng.random_range(0.5..2.0),
                w_ent: rng.random_range(0.5..2.0),
            },
            entropy_sign: sign,
            ..StudentConfig::default()
        };
        let x = random_matrix(3, 3, &mut rng);
        let y = vec![0, 2, 1];
        let triples = TripleSet::new(random_matrix(4, 3, &mut rng), random_matrix(4, 3, &mut rng), random_matrix(4, 3, &mut rng)).unwrap();
        let r = fd_check(&[net], |g, nets, b| {
            total_energy(g, &nets[0], &b[0], Some((&x, &y)), Some(&triples), &cfg).unwrap().0
        });
        out.push((format!("student energy {i}"), r));
    }
}


/// Every network of the suite with its finite-difference report.
pub fn run_all() -> Vec<(String, FdReport)> {
    let mut out = Vec::new();
    random_networks(&mut out);
    shared_parameters(&mut out);
    generator_losses(&mut out);
    elbos(&mut out);
    student_energies(&mut out);
    out
}
