//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each op evaluates eagerly and appends a node holding its output and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in exact reverse recording order and accumulates gradients
//! additively, so a value used twice receives the sum of both contributions.

use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        f: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if `v` was not reached from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros of the right shape when unreached.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant input (data, masks). No gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// Fully connected layer: `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::Dimension(format!("linear x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let y = kernels::linear_forward(
            self.value(x).data(),
            batch,
            inp,
            self.value(w).data(),
            self.value(b).data(),
            out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation: `x: [b, c_in, h, w]`, `f: [c_out, c_in, k, k]`,
    /// `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, f: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sf, sb) = (self.shape(x), self.shape(f), self.shape(bias));
        if sx.len() != 4 || sf.len() != 4 || sf[2] != sf[3] || sx[1] != sf[1] || sb != [sf[0]] {
            return Err(Error::Dimension(format!("conv2d x{sx:?} f{sf:?} b{sb:?}")));
        }
        let geom = ConvGeom {
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sf[0],
            k: sf[2],
            stride,
            pad,
        };
        geom.validate()?;
        let batch = sx[0];
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            batch,
            self.value(f).data(),
            self.value(bias).data(),
        );
        let shape = vec![batch, geom.c_out, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(f) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv2d { x, f, b: bias, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    /// Max pooling over the last two axes of a rank-4 tensor.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("maxpool2d on shape {s:?}")));
        }
        let (y, arg, oh, ow) =
            kernels::maxpool_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], k, stride)?;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], y)?,
            Op::MaxPool { x, arg },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = *s.first().unwrap_or(&1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[lead, rest])
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_shape(self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_shape(self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::Sum { x }, rg)
    }

    /// Mean softmax cross-entropy; `logits: [batch, classes]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("softmax_xent on shape {s:?}")));
        }
        let (batch, classes) = (s[0], s[1]);
        let (loss, probs) = kernels::softmax_xent_forward(self.value(logits).data(), batch, classes, labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Nodes not reachable from `root` (or
    /// not requiring gradients) get `None`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contrib: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm(
                            kernels::Mat::new(g.data(), m, n),
                            kernels::Mat::new(self.value(*b).data(), k, n).t(),
                            T::zero(),
                            &mut da,
                        );
                        contrib.push((*a, Tensor::new(vec![m, k], da)?));
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::gemm(
                            kernels::Mat::new(self.value(*a).data(), m, k).t(),
                            kernels::Mat::new(g.data(), m, n),
                            T::zero(),
                            &mut db,
                        );
                        contrib.push((*b, Tensor::new(vec![k, n], db)?));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (sx, sw) = (self.shape(*x), self.shape(*w));
                    let (dx, dw, db) = kernels::linear_backward(
                        g.data(),
                        self.value(*x).data(),
                        sx[0],
                        sx[1],
                        self.value(*w).data(),
                        sw[0],
                        self.rg(*x),
                    );
                    if let Some(dx) = dx {
                        contrib.push((*x, Tensor::new(sx.to_vec(), dx)?));
                    }
                    contrib.push((*w, Tensor::new(sw.to_vec(), dw)?));
                    contrib.push((*b, Tensor::new(vec![sw[0]], db)?));
                }
                Op::Conv2d { x, f, b, geom } => {
                    let (dx, df, db) = kernels::conv2d_backward(
                        geom,
                        g.data(),
                        self.value(*x).data(),
                        self.shape(*x)[0],
                        self.value(*f).data(),
                        self.rg(*x),
                    );
                    if let Some(dx) = dx {
                        contrib.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                    }
                    contrib.push((*f, Tensor::new(self.shape(*f).to_vec(), df)?));
                    contrib.push((*b, Tensor::new(vec![geom.c_out], db)?));
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    contrib.push((*x, Tensor::new(self.shape(*x).to_vec(), d)?));
                }
                Op::MaxPool { x, arg } => {
                    let d = kernels::maxpool_backward(g.data(), arg, self.value(*x).len());
                    contrib.push((*x, Tensor::new(self.shape(*x).to_vec(), d)?));
                }
                Op::Reshape { x } => {
                    contrib.push((*x, g.reshape(self.shape(*x))?));
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&gv, &v)| gv * v)
                            .collect();
                        contrib.push((*a, Tensor::new(self.shape(*a).to_vec(), d)?));
                    }
                    if self.rg(*b) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&gv, &v)| gv * v)
                            .collect();
                        contrib.push((*b, Tensor::new(self.shape(*b).to_vec(), d)?));
                    }
                }
                Op::Add { a, b } => {
                    contrib.push((*a, g.clone()));
                    contrib.push((*b, g));
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    contrib.push((*x, Tensor::full(self.shape(*x), gv)));
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                } => {
                    let s = self.shape(*logits);
                    let d = kernels::softmax_xent_backward(probs, s[0], s[1], labels, g.data()[0]);
                    contrib.push((*logits, Tensor::new(s.to_vec(), d)?));
                }
            }
            for (v, d) in contrib {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d)?,
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
