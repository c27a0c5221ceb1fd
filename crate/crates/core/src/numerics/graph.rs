//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Leaves
//! created from tensors with `requires_grad` receive their gradient in
//! [`Tensor::grad`] after [`Graph::backward`].

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Mul(Var, Var),
    Sum(Var),
    WeightedCrossEntropy {
        probs: Var,
        targets: Vec<u8>,
        w0: f32,
        w1: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {what}")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `input` is `[n, c, h, w]`; `weight` is `[o, c, k, k]`; `bias` is `[o]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Config(format!(
                "conv2d shapes incompatible: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        if stride == 0 || xs[2] < ws[2] || xs[3] < ws[2] {
            return Err(Error::Config(format!(
                "conv2d kernel {} with stride {stride} does not fit input {xs:?}",
                ws[2]
            )));
        }
        let geo = ConvGeometry {
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
        };
        let n = xs[0];
        let out = kernels::conv2d_forward(
            &geo,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
        );
        let value = finite(
            Tensor::new(vec![n, geo.out_channels, geo.out_h(), geo.out_w()], out)?,
            "conv2d",
        )?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            needs,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 || window == 0 || s[2] < window || s[3] < window {
            return Err(Error::Config(format!(
                "max pool window {window} does not fit input {s:?}"
            )));
        }
        let (out, argmax) =
            kernels::max_pool_forward(self.value(input).data(), s[0] * s[1], s[2], s[3], window);
        let value = Tensor::new(vec![s[0], s[1], s[2] / window, s[3] / window], out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), kernels::relu_forward(x.data()))?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Relu(input), needs))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).detached().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let n = s.first().copied().unwrap_or(1);
        let rest = self.value(input).numel() / n;
        self.reshape(input, vec![n, rest])
    }

    /// `input` is `[n, in]`; `weight` is `[in, out]`; `bias` is `[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Config(format!(
                "linear shapes incompatible: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, fin, fout) = (xs[0], ws[0], ws[1]);
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            fin,
            fout,
        );
        let value = finite(Tensor::new(vec![n, fout], out)?, "linear")?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Softmax over the last dimension of a rank-2 tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::Usage(format!(
                "softmax expects [n, classes], got {:?}",
                x.shape()
            )));
        }
        let out = kernels::softmax_forward(x.data(), x.shape()[1]);
        let value = finite(Tensor::new(x.shape().to_vec(), out)?, "softmax")?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Softmax(input), needs))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Usage(format!(
                "mul shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = finite(Tensor::new(x.shape().to_vec(), out)?, "mul")?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let value = finite(Tensor::scalar(total), "sum")?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Sum(input), needs))
    }

    /// Class-weighted binary cross-entropy on the positive-class column of
    /// `probs` (`[n, 2]`), averaged over the batch.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        targets: &[u8],
        w0: f32,
        w1: f32,
    ) -> Result<Var> {
        let p = self.value(probs);
        if targets.is_empty() {
            return Err(Error::Argument("loss over an empty batch".into()));
        }
        if p.shape() != [targets.len(), 2] {
            return Err(Error::Usage(format!(
                "loss expects probabilities [{}, 2], got {:?}",
                targets.len(),
                p.shape()
            )));
        }
        if !(w0 > 0.0 && w1 > 0.0) {
            return Err(Error::Argument(format!(
                "class weights must be positive, got w0={w0}, w1={w1}"
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::Argument(format!("target {bad} is not a binary label")));
        }
        let loss = kernels::weighted_ce_forward(p.data(), targets, w0, w1);
        let value = finite(Tensor::scalar(loss), "weighted cross-entropy")?;
        let needs = self.needs(&[probs]);
        Ok(self.push(
            value,
            Op::WeightedCrossEntropy {
                probs,
                targets: targets.to_vec(),
                w0,
                w1,
            },
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss`, storing gradients on every
    /// leaf that requires them. Earlier gradients on those leaves are
    /// replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if matches!(root.op, Op::Leaf) {
            return Err(Error::Usage(
                "backward called on a tensor with no recorded graph".into(),
            ));
        }
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Vec<f32>, grads: &mut Vec<Option<Vec<f32>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geo,
                } => {
                    let n = self.nodes[input.0].value.shape()[0];
                    let cg = kernels::conv2d_backward(
                        geo,
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        n,
                    );
                    send(*input, cg.input, &mut grads);
                    send(*weight, cg.weight, &mut grads);
                    send(*bias, cg.bias, &mut grads);
                }
                Op::MaxPool2d { input, argmax } => {
                    let len = self.nodes[input.0].value.numel();
                    send(*input, kernels::max_pool_backward(&g, argmax, len), &mut grads);
                }
                Op::Relu(input) => {
                    let d = kernels::relu_backward(self.nodes[input.0].value.data(), &g);
                    send(*input, d, &mut grads);
                }
                Op::Reshape(input) => send(*input, g, &mut grads),
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let ws = self.nodes[weight.0].value.shape();
                    let lg = kernels::linear_backward(
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        ws[0],
                        ws[1],
                    );
                    send(*input, lg.input, &mut grads);
                    send(*weight, lg.weight, &mut grads);
                    send(*bias, lg.bias, &mut grads);
                }
                Op::Softmax(input) => {
                    let width = node.value.shape()[1];
                    let d = kernels::softmax_backward(node.value.data(), &g, width);
                    send(*input, d, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let da = y.iter().zip(&g).map(|(p, q)| p * q).collect();
                    let db = x.iter().zip(&g).map(|(p, q)| p * q).collect();
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Sum(input) => {
                    let len = self.nodes[input.0].value.numel();
                    send(*input, vec![g[0]; len], &mut grads);
                }
                Op::WeightedCrossEntropy {
                    probs,
                    targets,
                    w0,
                    w1,
                } => {
                    let d = kernels::weighted_ce_backward(
                        self.nodes[probs.0].value.data(),
                        targets,
                        *w0,
                        *w1,
                        g[0],
                    );
                    send(*probs, d, &mut grads);
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.needs_grad, g) {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}
