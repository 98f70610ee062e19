use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
        hw: usize,
    },
    Affine {
        input: usize,
        weight: usize,
        bias: usize,
        n: usize,
        c_in: usize,
        c_out: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Select {
        input: usize,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape is single-owner; build one per forward pass or per explanation.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are accumulated only for leaves
    /// created with `requires_grad` and the nodes that depend on them.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> TensorId {
        value.grad = None;
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(id)?].value)
    }

    /// Accumulated gradient of `id`, available after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Result<Option<&[T]>> {
        Ok(self.nodes[self.index(id)?].value.grad())
    }

    pub fn requires_grad(&self, id: TensorId) -> Result<bool> {
        Ok(self.nodes[self.index(id)?].requires_grad)
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn index(&self, id: TensorId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(id.index)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        TensorId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn tracks(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// 2-D cross-correlation of an NCHW batch with OIKK weights.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let bs = self.nodes[bi].value.shape();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("weights must be O×I×K×K, got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight input channels {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias shape {bs:?} != [{}]", ws[0])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let k = ws[2];
        if xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {k} exceeds padded input {}×{} (padding {padding})",
                    xs[2], xs[3]
                ),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad: padding,
            oh: (xs[2] + 2 * padding - k) / stride + 1,
            ow: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let value = Tensor::new(vec![geom.n, geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.tracks(&[xi, wi, bi]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.tracks(&[xi]);
        Ok(self.push(value, rg, Op::Relu { input: xi }))
    }

    pub fn max_pool2d(&mut self, input: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let xi = self.index(input)?;
        let xs = self.nodes[xi].value.shape();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input must be NCHW, got {xs:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "max_pool2d: window and stride must be positive".into(),
            ));
        }
        if window > xs[2] || window > xs[3] {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {window} larger than input {}×{}", xs[2], xs[3]),
            ));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            window,
            stride,
            oh: (xs[2] - window) / stride + 1,
            ow: (xs[3] - window) / stride + 1,
        };
        let shape = vec![xs[0], xs[1], geom.oh, geom.ow];
        let (out, argmax) = kernels::max_pool_forward(&geom, self.nodes[xi].value.data());
        let value = Tensor::new(shape, out)?;
        let rg = self.tracks(&[xi]);
        Ok(self.push(value, rg, Op::MaxPool { input: xi, argmax }))
    }

    /// Per-channel spatial mean: NCHW → NC.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let xi = self.index(input)?;
        let xs = self.nodes[xi].value.shape();
        if xs.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be NCHW, got {xs:?}"),
            ));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = kernels::gap_forward(n * c, hw, self.nodes[xi].value.data());
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.tracks(&[xi]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input: xi, hw }))
    }

    /// `input · weightᵀ + bias` for `input: N×C_in`, `weight: C_out×C_in`.
    pub fn affine(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let bs = self.nodes[bi].value.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(
                "affine",
                format!("expected matrices, got input {xs:?} and weights {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "affine",
                format!("input width {} != weight width {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("affine", format!("bias shape {bs:?} != [{}]", ws[0])));
        }
        let (n, c_in, c_out) = (xs[0], xs[1], ws[0]);
        let out = kernels::affine_forward(
            n,
            c_in,
            c_out,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let value = Tensor::new(vec![n, c_out], out)?;
        let rg = self.tracks(&[xi, wi, bi]);
        Ok(self.push(
            value,
            rg,
            Op::Affine {
                input: xi,
                weight: wi,
                bias: bi,
                n,
                c_in,
                c_out,
            },
        ))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    ///
    /// Returns the scalar loss handle and the `N×C` probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<(TensorId, Tensor<T>)> {
        let li = self.index(logits)?;
        let ls = self.nodes[li].value.shape();
        if ls.len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be N×C, got {ls:?}"),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let x = self.nodes[li].value.data();
        let probs = kernels::softmax_rows(n, c, x);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            total = total + (lse - row[label]);
        }
        let loss = total / T::from_usize(n).expect("batch fits scalar");
        let prob_tensor = Tensor::new(vec![n, c], probs.clone())?;
        let rg = self.tracks(&[li]);
        let id = self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        );
        Ok((id, prob_tensor))
    }

    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let xi = self.index(input)?;
        let s = self.nodes[xi]
            .value
            .data()
            .iter()
            .copied()
            .fold(T::zero(), |a, b| a + b);
        let rg = self.tracks(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { input: xi }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, |ai, bi| Op::Add { a: ai, b: bi })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, |ai, bi| Op::Mul { a: ai, b: bi })
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<TensorId> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.tracks(&[ai, bi]);
        Ok(self.push(value, rg, make(ai, bi)))
    }

    pub fn scale(&mut self, input: TensorId, factor: T) -> Result<TensorId> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.tracks(&[xi]);
        Ok(self.push(value, rg, Op::Scale { input: xi, factor }))
    }

    /// Picks one element (flat row-major index) as a scalar.
    pub fn select(&mut self, input: TensorId, index: usize) -> Result<TensorId> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        if index >= x.numel() {
            return Err(Error::InvalidArgument(format!(
                "select: index {index} out of range for {} elements",
                x.numel()
            )));
        }
        let value = Tensor::scalar(x.data()[index]);
        let rg = self.tracks(&[xi]);
        Ok(self.push(value, rg, Op::Select { input: xi, index }))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every gradient-tracking node recorded up to `root` ends with a
    /// gradient buffer (zeros if unreachable from the root). Calling again
    /// without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let ri = self.index(root)?;
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.nodes[ri].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.nodes[ri].value.shape()
            )));
        }
        if !self.nodes[ri].requires_grad {
            return Err(Error::Backward(
                "root does not depend on any gradient-tracking tensor".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[ri].value.grad = Some(vec![T::one()]);

        for i in (0..=ri).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].value.grad = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                let acc = self.nodes[target].value.grad_mut_or_zero();
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
        }
        for node in &mut self.nodes[..=ri] {
            if node.requires_grad {
                node.value.grad_mut_or_zero();
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let val = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*input), val(*weight), g);
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*input, dx)]
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                vec![(*input, dx)]
            }
            Op::GlobalAvgPool { input, hw } => {
                let denom = T::from_usize(*hw).expect("spatial size fits scalar");
                let mut dx = Vec::with_capacity(val(*input).len());
                for &d in g {
                    let share = d / denom;
                    dx.extend(std::iter::repeat_n(share, *hw));
                }
                vec![(*input, dx)]
            }
            Op::Affine {
                input,
                weight,
                bias,
                n,
                c_in,
                c_out,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let mut dx = vec![T::zero(); n * c_in];
                let mut dw = vec![T::zero(); c_out * c_in];
                let mut db = vec![T::zero(); *c_out];
                for r in 0..*n {
                    let xrow = &x[r * c_in..(r + 1) * c_in];
                    let dxrow = &mut dx[r * c_in..(r + 1) * c_in];
                    for o in 0..*c_out {
                        let d = g[r * c_out + o];
                        db[o] = db[o] + d;
                        let wrow = &w[o * c_in..(o + 1) * c_in];
                        let dwrow = &mut dw[o * c_in..(o + 1) * c_in];
                        for k in 0..*c_in {
                            dxrow[k] = dxrow[k] + d * wrow[k];
                            dwrow[k] = dwrow[k] + d * xrow[k];
                        }
                    }
                }
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::from_usize(n).expect("batch fits scalar");
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    let idx = r * c + label;
                    dx[idx] = (probs[idx] - T::one()) * scale;
                }
                vec![(*logits, dx)]
            }
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                let db = g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => {
                vec![(*input, g.iter().map(|&d| d * *factor).collect())]
            }
            Op::Select { input, index } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                dx[*index] = g[0];
                vec![(*input, dx)]
            }
        }
    }
}
