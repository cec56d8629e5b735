//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the list in reverse and accumulates into the `grad` slot of each
//! [`Parameter`] that was registered with [`Tape::param`].

use super::kernels::{self, ConvDims};
use super::{Parameter, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
        batch: usize,
    },
    Relu(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn last_axis(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.len() / cols, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A free differentiable input; its gradient is available through
    /// [`Tape::gradient`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Registers `param` as slot `index` of the parameter list later passed
    /// to [`Tape::backward`].
    pub fn param(&mut self, index: usize, param: &Parameter) -> Result<Var> {
        self.push(param.value.clone(), Op::Param(index), true, "param")
    }

    pub fn params(&mut self, params: &[Parameter]) -> Result<Vec<Var>> {
        params
            .iter()
            .enumerate()
            .map(|(i, p)| self.param(i, p))
            .collect()
    }

    /// Valid-padding, stride-1 convolution of `(W, H, C)` or `(N, W, H, C)`
    /// input with a `(k, k, C, F)` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let (batch, spatial) = match x.shape() {
            [wd, ht, c] => (None, [*wd, *ht, *c]),
            [n, wd, ht, c] => (Some(*n), [*wd, *ht, *c]),
            s => {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    msg: format!("input must be (W,H,C) or (N,W,H,C), got {s:?}"),
                })
            }
        };
        let [k, k2, cin, f] = match w.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    msg: format!("kernel must be (k,k,C_in,F), got {s:?}"),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("kernel must be square, got {k}x{k2}"),
            });
        }
        if cin != spatial[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![k, k, spatial[2], f],
                got: w.shape().to_vec(),
            });
        }
        if b.shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![f],
                got: b.shape().to_vec(),
            });
        }
        if k > spatial[0] || k > spatial[1] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("kernel {k} larger than input {}x{}", spatial[0], spatial[1]),
            });
        }
        let dims = ConvDims {
            batch: batch.unwrap_or(1),
            width: spatial[0],
            height: spatial[1],
            in_channels: cin,
            kernel: k,
            filters: f,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), b.data(), &dims);
        let shape = match batch {
            Some(n) => vec![n, dims.out_width(), dims.out_height(), f],
            None => vec![dims.out_width(), dims.out_height(), f],
        };
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            needs,
            "conv2d",
        )
    }

    /// `(n)` or `(N, n)` input times an `(n, m)` weight matrix plus bias.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let (batch, n) = match x.shape() {
            [n] => (None, *n),
            [bs, n] => (Some(*bs), *n),
            s => {
                return Err(TensorError::Dimension {
                    op: "dense",
                    msg: format!("input must be (n) or (N,n), got {s:?}"),
                })
            }
        };
        let m = match w.shape() {
            [rows, m] if *rows == n => *m,
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "dense",
                    expected: vec![n, *s.last().unwrap_or(&0)],
                    got: s.to_vec(),
                })
            }
        };
        if b.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                expected: vec![m],
                got: b.shape().to_vec(),
            });
        }
        let bs = batch.unwrap_or(1);
        let out = kernels::dense_forward(x.data(), w.data(), b.data(), bs);
        let shape = match batch {
            Some(bs) => vec![bs, m],
            None => vec![m],
        };
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
                batch: bs,
            },
            needs,
            "dense",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), self.needs(x), "relu")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), self.needs(x), "reshape")
    }

    /// Collapses everything after the leading `batch` axis.
    pub fn flatten(&mut self, x: Var, batched: bool) -> Result<Var> {
        let t = self.value(x);
        let shape = if batched {
            vec![t.shape()[0], t.len() / t.shape()[0]]
        } else {
            vec![t.len()]
        };
        self.reshape(x, &shape)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = last_axis(t);
        let data: Vec<f64> = t.data().chunks_exact(cols).flat_map(super::log_softmax).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::LogSoftmax(x), self.needs(x), "log_softmax")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = last_axis(t);
        let data: Vec<f64> = t.data().chunks_exact(cols).flat_map(super::softmax).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Softmax(x), self.needs(x), "softmax")
    }

    /// Picks `x[r, indices[r]]` from each row of an `(N, A)` tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = last_axis(t);
        if t.rank() != 2 || rows != indices.len() {
            return Err(TensorError::Dimension {
                op: "gather",
                msg: format!("{} indices for input {:?}", indices.len(), t.shape()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Dimension {
                op: "gather",
                msg: format!("index {bad} out of range for {cols} columns"),
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * cols + i])
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        self.push(
            value,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            self.needs(x),
            "gather",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), self.needs(x), "scale")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), self.needs(x), "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), self.needs(x), "square")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { input: x, lo, hi }, self.needs(x), "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), self.needs(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(x), self.needs(x), "mean")
    }

    /// Sums each row of an `(N, A)` tensor into an `(N)` tensor.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = last_axis(t);
        let data = t.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![rows], data)?;
        self.push(value, Op::RowSum(x), self.needs(x), "row_sum")
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "backward called on a value that was not recorded by this tape".into(),
            ));
        }
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        contrib(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let mut gk = vec![0.0; w.len()];
                let mut gb = vec![0.0; dims.filters];
                let mut gx = self.needs(*input).then(|| vec![0.0; x.len()]);
                kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    gd,
                    dims,
                    &mut gk,
                    &mut gb,
                    gx.as_deref_mut(),
                );
                self.accumulate(grads, *kernel, |s| add_into(s, &gk));
                self.accumulate(grads, *bias, |s| add_into(s, &gb));
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, |s| add_into(s, &gx));
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
                batch,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let m = self.value(*bias).len();
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; m];
                let mut gx = self.needs(*input).then(|| vec![0.0; x.len()]);
                kernels::dense_backward(
                    x.data(),
                    w.data(),
                    gd,
                    *batch,
                    &mut gw,
                    &mut gb,
                    gx.as_deref_mut(),
                );
                self.accumulate(grads, *weights, |s| add_into(s, &gw));
                self.accumulate(grads, *bias, |s| add_into(s, &gb));
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, |s| add_into(s, &gx));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &g), &v) in s.iter_mut().zip(gd).zip(xv) {
                        if v > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |s| add_into(s, gd)),
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (_, cols) = last_axis(y);
                self.accumulate(grads, *x, |s| {
                    for ((s, g), y) in s
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let total: f64 = g.iter().sum();
                        for j in 0..cols {
                            s[j] += g[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, cols) = last_axis(y);
                self.accumulate(grads, *x, |s| {
                    for ((s, g), y) in s
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { input, indices } => {
                let (_, cols) = last_axis(self.value(*input));
                self.accumulate(grads, *input, |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        s[r * cols + i] += gd[r];
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, gd));
                self.accumulate(grads, *b, |s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, gd));
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(gd).for_each(|(s, g)| *s -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(gd).zip(bv) {
                        *s += g * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(gd).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for (i, s) in s.iter_mut().enumerate() {
                        if av[i] <= bv[i] {
                            *s += gd[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (i, s) in s.iter_mut().enumerate() {
                        if av[i] > bv[i] {
                            *s += gd[i];
                        }
                    }
                });
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, |s| {
                    s.iter_mut().zip(gd).for_each(|(s, g)| *s += k * g)
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |s| {
                    for ((s, g), y) in s.iter_mut().zip(gd).zip(y) {
                        *s += g * y;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, g), x) in s.iter_mut().zip(gd).zip(xv) {
                        *s += 2.0 * x * g;
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let xv = self.value(*input).data();
                self.accumulate(grads, *input, |s| {
                    for ((s, g), &x) in s.iter_mut().zip(gd).zip(xv) {
                        if x >= *lo && x <= *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).len() as f64;
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::RowSum(x) => {
                let (_, cols) = last_axis(self.value(*x));
                self.accumulate(grads, *x, |s| {
                    for (row, g) in s.chunks_exact_mut(cols).zip(gd) {
                        row.iter_mut().for_each(|s| *s += g);
                    }
                });
            }
        }
        Ok(())
    }

    /// Backpropagates from the scalar `loss`, adding `∂loss/∂p` into the
    /// `grad` of every parameter registered on this tape. Slots are not
    /// zeroed here.
    pub fn backward(&self, loss: Var, params: &mut [Parameter]) -> Result<()> {
        let grads = self.run_backward(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            let Op::Param(index) = node.op else { continue };
            let Some(grad) = grad else { continue };
            let p = params.get_mut(index).ok_or_else(|| {
                TensorError::Usage(format!("parameter slot {index} is not in the given list"))
            })?;
            p.grad.check_same_shape(&grad, "backward")?;
            add_into(p.grad.data_mut(), grad.data());
        }
        Ok(())
    }

    /// `∂loss/∂wrt` for any node; zero when `wrt` does not influence `loss`.
    pub fn gradient(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        if wrt.0 >= self.nodes.len() {
            return Err(TensorError::Usage("unknown variable".into()));
        }
        let mut grads = self.run_backward(loss)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
