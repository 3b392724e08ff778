use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{BoundParams, Graph, Var};
use super::Tensor;
use crate::error::{DgdError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Activation(Activation),
    Softmax,
}

/// Declarative layer list of a feed-forward network.
///
/// Textual form: `dense:16x32,relu,dense:32x10,softmax`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    layers: Vec<Layer>,
}

impl Architecture {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let arch = Architecture { layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Dense stack `input -> hidden... -> output` with `hidden_act` between
    /// dense layers and an optional final activation or softmax.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        head: Option<Layer>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: prev,
                outputs: h,
            });
            layers.push(Layer::Activation(hidden_act));
            prev = h;
        }
        layers.push(Layer::Dense {
            inputs: prev,
            outputs: output,
        });
        if let Some(h) = head {
            layers.push(h);
        }
        Architecture::new(layers)
    }

    /// Classifier: hidden ReLU layers followed by a dense+softmax head.
    pub fn classifier(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        Architecture::mlp(input, hidden, classes, Activation::Relu, Some(Layer::Softmax))
    }

    fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        if !matches!(self.layers.first(), Some(Layer::Dense { .. })) {
            return Err(DgdError::Config(
                "architecture must start with a dense layer".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(DgdError::Config(format!(
                            "layer {i}: dense sizes must be positive"
                        )));
                    }
                    if let Some(p) = prev {
                        if p != inputs {
                            return Err(DgdError::Config(format!(
                                "layer {i}: dense input {inputs} does not match previous output {p}"
                            )));
                        }
                    }
                    prev = Some(outputs);
                }
                Layer::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(DgdError::Config(
                            "softmax is only allowed as the final layer".into(),
                        ));
                    }
                    if !matches!(self.layers[i - 1], Layer::Dense { .. }) {
                        return Err(DgdError::Config(
                            "softmax must directly follow a dense layer".into(),
                        ));
                    }
                }
                Layer::Activation(_) => {}
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0] {
            Layer::Dense { inputs, .. } => inputs,
            _ => unreachable!("validated"),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                Layer::Dense { outputs, .. } => Some(outputs),
                _ => None,
            })
            .expect("validated")
    }

    pub fn dense_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .count()
    }

    pub fn has_softmax_head(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    /// Layer index where features are tapped: the input of the head dense
    /// layer for classifiers, the end of the network otherwise.
    pub fn feature_layer(&self) -> usize {
        if self.has_softmax_head() {
            self.layers.len() - 2
        } else {
            self.layers.len()
        }
    }

    /// Number of parameter entries in the backbone.
    pub fn feature_boundary(&self) -> usize {
        if self.has_softmax_head() {
            2 * (self.dense_count() - 1)
        } else {
            2 * self.dense_count()
        }
    }

    /// Width of the feature activation.
    pub fn feature_dim(&self) -> usize {
        if self.has_softmax_head() {
            match self.layers[self.layers.len() - 2] {
                Layer::Dense { inputs, .. } => inputs,
                _ => unreachable!("validated"),
            }
        } else {
            self.output_dim()
        }
    }

    /// Records a forward pass on `g` using the parameters in `bound`.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<NetVars> {
        let in_cols = g.value(x).cols();
        if in_cols != self.input_dim() {
            return Err(DgdError::Shape(format!(
                "input has {in_cols} columns, network expects {}",
                self.input_dim()
            )));
        }
        let vars = bound.vars();
        if vars.len() != 2 * self.dense_count() {
            return Err(DgdError::Graph(format!(
                "binding has {} parameters, architecture `{self}` needs {}",
                vars.len(),
                2 * self.dense_count()
            )));
        }
        let feature_layer = self.feature_layer();
        let mut h = x;
        let mut features = None;
        let mut logits = None;
        let mut dense = 0;
        for (i, layer) in self.layers().iter().enumerate() {
            if i == feature_layer {
                features = Some(h);
            }
            h = match layer {
                Layer::Dense { .. } => {
                    let z = g.matmul(h, vars[2 * dense])?;
                    let z = g.add_bias(z, vars[2 * dense + 1])?;
                    dense += 1;
                    z
                }
                Layer::Activation(Activation::Relu) => g.relu(h),
                Layer::Activation(Activation::Sigmoid) => g.sigmoid(h),
                Layer::Activation(Activation::Tanh) => g.tanh(h),
                Layer::Softmax => {
                    logits = Some(h);
                    g.softmax(h)
                }
            };
        }
        Ok(NetVars {
            features: features.unwrap_or(h),
            logits,
            output: h,
        })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { inputs, outputs } => format!("dense:{inputs}x{outputs}"),
                Layer::Activation(Activation::Relu) => "relu".into(),
                Layer::Activation(Activation::Sigmoid) => "sigmoid".into(),
                Layer::Activation(Activation::Tanh) => "tanh".into(),
                Layer::Softmax => "softmax".into(),
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for Architecture {
    type Err = DgdError;

    fn from_str(s: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let layer = match tok {
                "relu" => Layer::Activation(Activation::Relu),
                "sigmoid" => Layer::Activation(Activation::Sigmoid),
                "tanh" => Layer::Activation(Activation::Tanh),
                "softmax" => Layer::Softmax,
                _ => {
                    let sizes = tok.strip_prefix("dense:").ok_or_else(|| {
                        DgdError::Config(format!("unknown layer `{tok}`"))
                    })?;
                    let (a, b) = sizes.split_once('x').ok_or_else(|| {
                        DgdError::Config(format!("dense layer `{tok}` needs INxOUT"))
                    })?;
                    let parse = |v: &str| {
                        v.parse::<usize>()
                            .map_err(|_| DgdError::Config(format!("bad size in `{tok}`")))
                    };
                    Layer::Dense {
                        inputs: parse(a)?,
                        outputs: parse(b)?,
                    }
                }
            };
            layers.push(layer);
        }
        Architecture::new(layers)
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named parameters of one network plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    architecture: Architecture,
    entries: Vec<(String, Tensor)>,
}

fn expected_entries(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut idx = 0;
    for layer in arch.layers() {
        if let Layer::Dense { inputs, outputs } = *layer {
            out.push((format!("dense{idx}.weight"), vec![inputs, outputs]));
            out.push((format!("dense{idx}.bias"), vec![outputs]));
            idx += 1;
        }
    }
    out
}

impl ParamSet {
    /// Assembles a parameter set, checking names and shapes against the
    /// architecture.
    pub fn from_entries(architecture: Architecture, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = expected_entries(&architecture);
        if expected.len() != entries.len() {
            return Err(DgdError::Shape(format!(
                "architecture `{architecture}` needs {} entries, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(DgdError::Shape(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(DgdError::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(ParamSet {
            architecture,
            entries,
        })
    }

    pub fn zeros(architecture: &Architecture) -> Self {
        let entries = expected_entries(architecture)
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        ParamSet {
            architecture: architecture.clone(),
            entries,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn feature_boundary(&self) -> usize {
        self.architecture.feature_boundary()
    }

    /// Backbone entries (everything before the head).
    pub fn backbone(&self) -> &[(String, Tensor)] {
        &self.entries[..self.feature_boundary()]
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the forward pass of this network on `g`.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<NetVars> {
        self.architecture.forward_graph(g, bound, x)
    }

    /// Inference pass returning the feature activation and the network output
    /// (softmax probabilities for classifiers).
    pub fn forward(&self, batch: &Tensor) -> Result<Forward> {
        let mut g = Graph::new();
        let bound = g.bind(self, false);
        let x = g.constant(batch.clone());
        let vars = self.forward_graph(&mut g, &bound, x)?;
        Ok(Forward {
            features: g.value(vars.features).clone(),
            output: g.value(vars.output).clone(),
        })
    }

    /// Argmax class per row (lowest index on ties).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.output.argmax_rows())
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub features: Var,
    /// Pre-softmax activations, present for classifiers.
    pub logits: Option<Var>,
    pub output: Var,
}

impl NetVars {
    pub fn logits(&self) -> Result<Var> {
        self.logits
            .ok_or_else(|| DgdError::Graph("network has no softmax head".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub features: Tensor,
    pub output: Tensor,
}

/// Per-parameter gradients keyed like the `ParamSet` they differentiate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    entries: Vec<(String, Tensor)>,
}

impl GradientMap {
    pub(crate) fn from_entries_unchecked(entries: Vec<(String, Tensor)>) -> Self {
        GradientMap { entries }
    }

    pub fn zeros_like(net: &ParamSet) -> Self {
        GradientMap {
            entries: net
                .entries()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Checks key set and shapes against `net`.
    pub fn check_matches(&self, net: &ParamSet) -> Result<()> {
        if self.entries.len() != net.entries().len() {
            return Err(DgdError::Shape(format!(
                "gradient map has {} entries, network has {}",
                self.entries.len(),
                net.entries().len()
            )));
        }
        for ((gn, gt), (pn, pt)) in self.entries.iter().zip(net.entries()) {
            if gn != pn || gt.shape() != pt.shape() {
                return Err(DgdError::Shape(format!(
                    "gradient {gn} {:?} does not match parameter {pn} {:?}",
                    gt.shape(),
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Xavier-uniform weights, zero biases.
pub fn xavier_init(architecture: &Architecture, seed: u64) -> ParamSet {
    let mut rng = rng::stream(seed, "xavier", 0);
    let mut net = ParamSet::zeros(architecture);
    for (name, t) in net.entries.iter_mut() {
        if !name.ends_with(".weight") {
            continue;
        }
        let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    net
}
