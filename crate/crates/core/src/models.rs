//! Declarative model definitions (LeNet-300-100, LeNet-5 variant) and the
//! masked forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Lenet300,
    Lenet5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inp: usize,
        out: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
}

/// Which pruning rate applies to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateClass {
    Dense,
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn rate_class(&self) -> Option<RateClass> {
        match self.kind {
            LayerKind::Dense { .. } => Some(RateClass::Dense),
            LayerKind::Conv2d { .. } => Some(RateClass::Conv),
            _ => None,
        }
    }

    /// Output neurons (dense) or filters (conv).
    pub fn units(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out, .. } => out,
            LayerKind::Conv2d { c_out, .. } => c_out,
            _ => 0,
        }
    }

    /// Weight elements per unit: `inp` for dense, `c_in * k * k` for conv.
    pub fn unit_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inp, .. } => inp,
            LayerKind::Conv2d { c_in, k, .. } => c_in * k * k,
            _ => 0,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inp, out } => vec![out, inp],
            LayerKind::Conv2d { c_in, c_out, k, .. } => vec![c_out, c_in, k, k],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.units() * (self.unit_len() + 1)
    }
}

/// Where a weighted layer's inputs come from: the producing weighted layer
/// and how many consecutive input elements belong to one of its units
/// (1 for dense -> dense, `h * w` after a flatten, per-channel for conv).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSource {
    pub layer: usize,
    pub elems_per_unit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

fn dense(name: &str, inp: usize, out: usize, prunable: bool) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Dense { inp, out },
        prunable,
    }
}

fn conv(name: &str, c_in: usize, c_out: usize, k: usize, pad: usize) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind: LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride: 1,
            pad,
        },
        prunable: true,
    }
}

fn plain(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        prunable: false,
    }
}

impl ModelSpec {
    pub fn lenet300(seed: u64) -> Self {
        Self {
            id: ModelId::Lenet300,
            input: (1, 28, 28),
            layers: vec![
                plain("flatten", LayerKind::Flatten),
                dense("fc1", 784, 300, true),
                plain("relu1", LayerKind::Relu),
                dense("fc2", 300, 100, true),
                plain("relu2", LayerKind::Relu),
                dense("fc3", 100, 10, false),
            ],
            seed,
        }
    }

    pub fn lenet5(seed: u64) -> Self {
        Self {
            id: ModelId::Lenet5,
            input: (3, 32, 32),
            layers: vec![
                conv("conv1", 3, 64, 5, 2),
                plain("relu1", LayerKind::Relu),
                plain("pool1", LayerKind::MaxPool { k: 2, stride: 2 }),
                conv("conv2", 64, 64, 5, 2),
                plain("relu2", LayerKind::Relu),
                plain("pool2", LayerKind::MaxPool { k: 2, stride: 2 }),
                plain("flatten", LayerKind::Flatten),
                dense("fc1", 4096, 1024, true),
                plain("relu3", LayerKind::Relu),
                dense("fc2", 1024, 10, false),
            ],
            seed,
        }
    }

    pub fn build(id: ModelId, seed: u64) -> Self {
        match id {
            ModelId::Lenet300 => Self::lenet300(seed),
            ModelId::Lenet5 => Self::lenet5(seed),
        }
    }

    /// Indices (into `layers`) of layers carrying weights, in order. Position
    /// in this list is the "weighted layer index" used by masks and params.
    pub fn weighted(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].has_weights())
            .collect()
    }

    pub fn weighted_specs(&self) -> Vec<&LayerSpec> {
        self.layers.iter().filter(|l| l.has_weights()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Per-sample output shape of every layer, starting from `input`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let (c, h, w) = self.input;
        let mut cur = vec![c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match l.kind {
                LayerKind::Dense { inp, out } => {
                    if cur.iter().product::<usize>() != inp || cur.len() != 1 {
                        return Err(Error::Dimension(format!("{}: input {cur:?}", l.name)));
                    }
                    vec![out]
                }
                LayerKind::Conv2d {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    if cur.len() != 3 || cur[0] != c_in {
                        return Err(Error::Dimension(format!("{}: input {cur:?}", l.name)));
                    }
                    vec![
                        c_out,
                        (cur[1] + 2 * pad - k) / stride + 1,
                        (cur[2] + 2 * pad - k) / stride + 1,
                    ]
                }
                LayerKind::Relu => cur,
                LayerKind::MaxPool { k, stride } => {
                    vec![cur[0], (cur[1] - k) / stride + 1, (cur[2] - k) / stride + 1]
                }
                LayerKind::Flatten => vec![cur.iter().product()],
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Input shape (per sample) of layer `i`.
    pub fn input_shape(&self, i: usize) -> Result<Vec<usize>> {
        if i == 0 {
            let (c, h, w) = self.input;
            return Ok(vec![c, h, w]);
        }
        Ok(self.shapes()?[i - 1].clone())
    }

    /// For weighted layer `wl`, the weighted layer feeding it (if any).
    pub fn input_source(&self, wl: usize) -> Result<Option<InputSource>> {
        let weighted = self.weighted();
        if wl == 0 {
            return Ok(None);
        }
        let prev = weighted[wl - 1];
        let this = weighted[wl];
        let shapes = self.shapes()?;
        let prev_out = &shapes[prev];
        let in_shape = self.input_shape(this)?;
        let units = self.layers[prev].units();
        let total: usize = in_shape.iter().product();
        let elems_per_unit = match self.layers[this].kind {
            LayerKind::Conv2d { .. } => 1,
            _ => total / units,
        };
        debug_assert_eq!(prev_out[0], units);
        Ok(Some(InputSource {
            layer: wl - 1,
            elems_per_unit,
        }))
    }
}

/// A [`ModelSpec`] with its parameters: `params[2 * wl]` is the weight and
/// `params[2 * wl + 1]` the bias of weighted layer `wl`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
}

/// Elementwise masks for one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Parameters are recorded as trainable leaves.
    Train,
    /// Parameters are recorded as constants; nothing to differentiate.
    Eval,
}

/// Result of a forward pass. The tape stays alive so callers can run the
/// backward pass or read captured activations.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub params: Vec<Var>,
    /// Post-ReLU activation of every prunable layer, keyed by weighted index.
    pub activations: Vec<(usize, Var)>,
}

impl Model {
    /// Kaiming-uniform (fan-in) weights, biases uniform in `+-1/sqrt(fan_in)`.
    pub fn init(spec: ModelSpec) -> Self {
        let mut rng = stream(spec.seed, Purpose::Init);
        let mut params = Vec::new();
        for l in spec.layers.iter().filter(|l| l.has_weights()) {
            let fan_in = l.unit_len() as f64;
            let wb = (6.0 / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            let shape = l.weight_shape();
            let n = shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(-wb..wb) as f32).collect();
            let b: Vec<f32> = (0..l.units()).map(|_| rng.random_range(-bb..bb) as f32).collect();
            params.push(Tensor::new(shape, w).expect("weight shape"));
            params.push(Tensor::new(vec![l.units()], b).expect("bias shape"));
        }
        Self { spec, params }
    }

    pub fn lenet300(seed: u64) -> Self {
        Self::init(ModelSpec::lenet300(seed))
    }

    pub fn lenet5(seed: u64) -> Self {
        Self::init(ModelSpec::lenet5(seed))
    }

    pub fn weight(&self, wl: usize) -> &Tensor {
        &self.params[2 * wl]
    }

    pub fn bias(&self, wl: usize) -> &Tensor {
        &self.params[2 * wl + 1]
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec
            .weighted_specs()
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Forward pass over `x: [b, c, h, w]`. With `masks`, every weight and
    /// bias enters as `param * mask`.
    pub fn forward(
        &self,
        x: Tensor,
        masks: Option<&[LayerMask]>,
        mode: Mode,
        capture: bool,
    ) -> Result<Forward> {
        let (c, h, w) = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Dimension(format!(
                "model expects [b, {c}, {h}, {w}], got {s:?}"
            )));
        }
        if let Some(m) = masks {
            if m.len() * 2 != self.params.len() {
                return Err(Error::Dimension(format!(
                    "{} layer masks for {} weighted layers",
                    m.len(),
                    self.params.len() / 2
                )));
            }
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => tape.param(p.clone()),
                Mode::Eval => tape.constant(p.clone()),
            })
            .collect();
        let mut cur = tape.constant(x);
        let mut wl = 0;
        let mut activations = Vec::new();
        let mut pending_capture: Option<usize> = None;
        for layer in &self.spec.layers {
            match layer.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let (mut wv, mut bv) = (params[2 * wl], params[2 * wl + 1]);
                    if let Some(m) = masks {
                        let mw = tape.constant(m[wl].weight.clone());
                        let mb = tape.constant(m[wl].bias.clone());
                        wv = tape.mul(wv, mw)?;
                        bv = tape.mul(bv, mb)?;
                    }
                    cur = match layer.kind {
                        LayerKind::Dense { .. } => tape.linear(cur, wv, bv)?,
                        LayerKind::Conv2d { stride, pad, .. } => tape.conv2d(cur, wv, bv, stride, pad)?,
                        _ => unreachable!(),
                    };
                    if capture && layer.prunable {
                        pending_capture = Some(wl);
                    }
                    wl += 1;
                }
                LayerKind::Relu => {
                    cur = tape.relu(cur);
                    if let Some(i) = pending_capture.take() {
                        activations.push((i, cur));
                    }
                }
                LayerKind::MaxPool { k, stride } => cur = tape.maxpool2d(cur, k, stride)?,
                LayerKind::Flatten => cur = tape.flatten(cur)?,
            }
        }
        Ok(Forward {
            tape,
            logits: cur,
            params,
            activations,
        })
    }
}
