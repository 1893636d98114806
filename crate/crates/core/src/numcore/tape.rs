//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! information to route an incoming gradient back to its inputs. Calling
//! [`Tape::backward`] on a scalar walks the nodes in reverse order once.
//!
//! A tape is single-threaded and owned by one forward pass; create a new one
//! per mini-batch.

use statrs::function::gamma::{digamma, ln_gamma};

use super::tensor::Tensor;
use crate::error::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

/// Splits a shape into `(outer, channels, inner)` around a channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ChannelLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            channels: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn per_channel(&self) -> usize {
        self.outer * self.inner
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for c in 0..self.channels {
                let base = (o * self.channels + c) * self.inner;
                for i in 0..self.inner {
                    f(base + i, c);
                }
            }
        }
    }
}

/// Statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RepeatRows { src: Var, times: usize },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SelectTime { x: Var, t: usize },
    Sum(Var),
    Mean(Var),
    GaussianNll { z: Var, mu: Var, sigma: Var },
    NegBinNll { z: Var, mu: Var, alpha: Var },
    Pinball { y: Var, q: Var, levels: Vec<f64> },
    L1 { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar activation, shared by the tape and by tests.
pub fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softplus => softplus(x),
    }
}

/// Inverse of softplus, for initializing biases to a target positive value.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Log-pmf of the negative binomial in mean/shape form: mean `mu`, variance
/// `mu + alpha * mu^2`.
pub fn negbin_log_pmf(z: f64, mu: f64, alpha: f64) -> f64 {
    let r = 1.0 / alpha;
    ln_gamma(z + r) - ln_gamma(z + 1.0) - ln_gamma(r)
        + r * (r / (r + mu)).ln()
        + z * (mu / (r + mu)).ln()
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf tensor; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(NumError::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        self.push("add_row", Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::new(shape, data)?, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", Tensor::new(shape, data)?, Op::AddScalar(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var, NumError> {
        let data = self.value(a).data().iter().map(|&x| activate(kind, x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("activation", Tensor::new(shape, data)?, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumError> {
        self.activation(a, Activation::Softplus)
    }

    /// Columns `start..start+len` of an `[m×n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(NumError::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push("slice_cols", Tensor::new(vec![m, len], out)?, Op::SliceCols { src: a, start }, &[a])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::Usage("concat_cols of nothing".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Repeats each row of `[m×n]` `times` times consecutively, giving `[m·times×n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, NumError> {
        let (m, n) = self.dims2(a, "repeat_rows")?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * times * n);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&src[r * n..(r + 1) * n]);
            }
        }
        self.push("repeat_rows", Tensor::new(vec![m * times, n], out)?, Op::RepeatRows { src: a, times }, &[a])
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `x` is `[C_in×T]` or `[B×C_in×T]`, `w` is `[C_out×C_in×k]`. Tap `j` of the
    /// kernel reads `x` at lag `j·dilation`; samples before the series start are
    /// zero, so the output has the input's length and position `t` never sees
    /// inputs after `t`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var, NumError> {
        if dilation == 0 {
            return Err(NumError::Parameter("dilation must be positive".into()));
        }
        let xs = self.shape(x).to_vec();
        let (batch, cin, len) = match xs.len() {
            2 => (1, xs[0], xs[1]),
            3 => (xs[0], xs[1], xs[2]),
            _ => {
                return Err(NumError::Shape {
                    op: "conv1d_causal",
                    lhs: xs,
                    rhs: self.shape(w).to_vec(),
                })
            }
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || ws[2] == 0 {
            return Err(NumError::Shape {
                op: "conv1d_causal",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(NumError::Shape {
                    op: "conv1d_causal bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                if let Some(b) = bias {
                    let bv = self.nodes[b.0].value.data()[co];
                    orow.iter_mut().for_each(|o| *o = bv);
                }
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for j in 0..k {
                        let wt = wv[(co * cin + ci) * k + j];
                        let lag = j * dilation;
                        if lag >= len || wt == 0.0 {
                            continue;
                        }
                        for (o, xi) in orow[lag..].iter_mut().zip(xrow) {
                            *o += wt * xi;
                        }
                    }
                }
            }
        }
        let mut out_shape = xs;
        let ch_axis = out_shape.len() - 2;
        out_shape[ch_axis] = cout;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv1d_causal",
            Tensor::new(out_shape, out)?,
            Op::Conv1d {
                x,
                w,
                b: bias,
                dilation,
            },
            &inputs,
        )
    }

    fn check_channel_params(&self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<ChannelLayout, NumError> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(NumError::Shape {
                op: "batchnorm",
                lhs: xs.to_vec(),
                rhs: vec![axis],
            });
        }
        let layout = ChannelLayout::of(xs, axis);
        if self.value(gamma).len() != layout.channels || self.value(beta).len() != layout.channels {
            return Err(NumError::Shape {
                op: "batchnorm",
                lhs: xs.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(layout)
    }

    /// Training-mode batch normalization over every axis except `axis`.
    ///
    /// Returns the normalized output and the batch statistics so that the
    /// caller can update running averages.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<(Var, BatchStats), NumError> {
        let layout = self.check_channel_params(x, gamma, beta, axis)?;
        let xv = self.value(x).data();
        let n = layout.per_channel() as f64;
        let mut mean = vec![0.0; layout.channels];
        layout.for_each(|i, c| mean[c] += xv[i]);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; layout.channels];
        layout.for_each(|i, c| var[c] += (xv[i] - mean[c]).powi(2));
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(x, gamma, beta, layout, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            "batchnorm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, NumError> {
        let layout = self.check_channel_params(x, gamma, beta, axis)?;
        if mean.len() != layout.channels || var.len() != layout.channels {
            return Err(NumError::Shape {
                op: "batchnorm_eval",
                lhs: vec![layout.channels],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(x, gamma, beta, layout, mean, &inv_std);
        let shape = self.shape(x).to_vec();
        self.push(
            "batchnorm_eval",
            Tensor::new(shape, out)?,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        layout.for_each(|i, c| {
            xhat[i] = (xv[i] - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        });
        (out, xhat)
    }

    /// Time slice `t` of a `[B×C×T]` tensor, giving `[B×C]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[2] {
            return Err(NumError::Shape {
                op: "select_time",
                lhs: s,
                rhs: vec![t],
            });
        }
        let (b, c, len) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let out = (0..b * c).map(|bc| xv[bc * len + t]).collect();
        self.push("select_time", Tensor::new(vec![b, c], out)?, Op::SelectTime { x, t }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumError::Usage("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push("mean", Tensor::scalar(s / n as f64), Op::Mean(a), &[a])
    }

    /// Mean Gaussian negative log-likelihood of `z` under N(mu, sigma²).
    pub fn gaussian_nll(&mut self, z: Var, mu: Var, sigma: Var) -> Result<Var, NumError> {
        self.same_shape(z, mu, "gaussian_nll")?;
        self.same_shape(z, sigma, "gaussian_nll")?;
        let sv = self.value(sigma).data();
        if let Some(bad) = sv.iter().find(|s| !(**s > 0.0)) {
            return Err(NumError::Domain {
                op: "gaussian_nll",
                detail: format!("sigma must be positive, got {bad}"),
            });
        }
        let n = sv.len() as f64;
        let total: f64 = self
            .value(z)
            .data()
            .iter()
            .zip(self.value(mu).data())
            .zip(sv)
            .map(|((&z, &m), &s)| 0.5 * (LN_2PI + 2.0 * s.ln()) + (z - m).powi(2) / (2.0 * s * s))
            .sum();
        self.push("gaussian_nll", Tensor::scalar(total / n), Op::GaussianNll { z, mu, sigma }, &[mu, sigma, z])
    }

    /// Mean negative binomial negative log-likelihood (mean/shape form).
    ///
    /// `z` must hold non-negative integers and is treated as data (no gradient).
    pub fn negbin_nll(&mut self, z: Var, mu: Var, alpha: Var) -> Result<Var, NumError> {
        self.same_shape(z, mu, "negbin_nll")?;
        self.same_shape(z, alpha, "negbin_nll")?;
        let zv = self.value(z).data();
        if let Some(bad) = zv.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
            return Err(NumError::Domain {
                op: "negbin_nll",
                detail: format!("counts must be non-negative integers, got {bad}"),
            });
        }
        let mv = self.value(mu).data();
        let av = self.value(alpha).data();
        if mv.iter().chain(av).any(|v| !(*v > 0.0)) {
            return Err(NumError::Domain {
                op: "negbin_nll",
                detail: "mu and alpha must be positive".into(),
            });
        }
        let n = zv.len() as f64;
        let total: f64 = zv
            .iter()
            .zip(mv)
            .zip(av)
            .map(|((&z, &m), &a)| -negbin_log_pmf(z, m, a))
            .sum();
        self.push("negbin_nll", Tensor::scalar(total / n), Op::NegBinNll { z, mu, alpha }, &[mu, alpha])
    }

    /// Quantile (pinball) loss: `y` has `N` elements, `q` is `[N×levels]`.
    /// Returns the sum over levels of the mean loss per level.
    pub fn pinball(&mut self, y: Var, q: Var, levels: &[f64]) -> Result<Var, NumError> {
        let n = self.value(y).len();
        let qs = self.shape(q).to_vec();
        if qs != [n, levels.len()] {
            return Err(NumError::Shape {
                op: "pinball",
                lhs: self.shape(y).to_vec(),
                rhs: qs,
            });
        }
        if levels.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(NumError::Domain {
                op: "pinball",
                detail: format!("quantile levels must lie in [0, 1]: {levels:?}"),
            });
        }
        let yv = self.value(y).data();
        let qv = self.value(q).data();
        let nl = levels.len();
        let mut total = 0.0;
        for i in 0..n {
            for (l, &tau) in levels.iter().enumerate() {
                let u = yv[i] - qv[i * nl + l];
                total += if u >= 0.0 { tau * u } else { (tau - 1.0) * u };
            }
        }
        self.push(
            "pinball",
            Tensor::scalar(total / n as f64),
            Op::Pinball {
                y,
                q,
                levels: levels.to_vec(),
            },
            &[y, q],
        )
    }

    /// Mean absolute difference of two same-shaped tensors.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "l1")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push("l1", Tensor::scalar(s / n), Op::L1 { a, b }, &[a, b])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.buf(grads, *a) {
                    // g [m×n] · bᵀ [n×k]
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    // aᵀ [k×m] · g [m×n]
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gbv += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.buf(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = self.shape(*a)[1];
                if let Some(gr) = self.buf(grads, *row) {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Act(a, kind) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if av[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - out[i] * out[i],
                            Activation::Sigmoid => out[i] * (1.0 - out[i]),
                            Activation::Softplus => {
                                if av[i] > 30.0 {
                                    1.0
                                } else {
                                    sigmoid(av[i])
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let (m, n) = (self.shape(*src)[0], self.shape(*src)[1]);
                let len = node.value.shape()[1];
                if let Some(gs) = self.buf(grads, *src) {
                    for r in 0..m {
                        for c in 0..len {
                            gs[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(gp) = self.buf(grads, *p) {
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::RepeatRows { src, times } => {
                let (m, n) = (self.shape(*src)[0], self.shape(*src)[1]);
                if let Some(gs) = self.buf(grads, *src) {
                    for r in 0..m {
                        for t in 0..*times {
                            let orow = (r * times + t) * n;
                            for c in 0..n {
                                gs[r * n + c] += g[orow + c];
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let xs = self.shape(*x);
                let (batch, cin, len) = if xs.len() == 2 {
                    (1, xs[0], xs[1])
                } else {
                    (xs[0], xs[1], xs[2])
                };
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gb) = b.and_then(|b| self.buf(grads, b)) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let s: f64 = g[(bi * cout + co) * len..(bi * cout + co + 1) * len].iter().sum();
                            gb[co] += s;
                        }
                    }
                }
                if let Some(gw) = self.buf(grads, *w) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                            for ci in 0..cin {
                                let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for j in 0..k {
                                    let lag = j * dilation;
                                    if lag >= len {
                                        continue;
                                    }
                                    let s: f64 = grow[lag..].iter().zip(xrow).map(|(a, b)| a * b).sum();
                                    gw[(co * cin + ci) * k + j] += s;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                            for ci in 0..cin {
                                let gxrow = &mut gx[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for j in 0..k {
                                    let lag = j * dilation;
                                    let wt = wv[(co * cin + ci) * k + j];
                                    if lag >= len || wt == 0.0 {
                                        continue;
                                    }
                                    for (gxv, gv) in gxrow.iter_mut().zip(&grow[lag..]) {
                                        *gxv += wt * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = layout.channels;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                layout.for_each(|i, ch| {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                });
                if let Some(gg) = self.buf(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                let n = layout.per_channel() as f64;
                if let Some(gx) = self.buf(grads, *x) {
                    layout.for_each(|i, ch| {
                        gx[i] += gv[ch] * inv_std[ch] / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    });
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.buf(grads, *gamma) {
                    layout.for_each(|i, ch| gg[ch] += g[i] * xhat[i]);
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    layout.for_each(|i, ch| gb[ch] += g[i]);
                }
                if let Some(gx) = self.buf(grads, *x) {
                    layout.for_each(|i, ch| gx[i] += g[i] * gv[ch] * inv_std[ch]);
                }
            }
            Op::SelectTime { x, t } => {
                let len = self.shape(*x)[2];
                if let Some(gx) = self.buf(grads, *x) {
                    for (bc, gv) in g.iter().enumerate() {
                        gx[bc * len + t] += gv;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::GaussianNll { z, mu, sigma } => {
                let zv = self.value(*z).data();
                let mv = self.value(*mu).data();
                let sv = self.value(*sigma).data();
                let scale = g[0] / zv.len() as f64;
                if let Some(gm) = self.buf(grads, *mu) {
                    for i in 0..zv.len() {
                        gm[i] -= scale * (zv[i] - mv[i]) / (sv[i] * sv[i]);
                    }
                }
                if let Some(gz) = self.buf(grads, *z) {
                    for i in 0..zv.len() {
                        gz[i] += scale * (zv[i] - mv[i]) / (sv[i] * sv[i]);
                    }
                }
                if let Some(gs) = self.buf(grads, *sigma) {
                    for i in 0..zv.len() {
                        let r = zv[i] - mv[i];
                        gs[i] += scale * (1.0 / sv[i] - r * r / sv[i].powi(3));
                    }
                }
            }
            Op::NegBinNll { z, mu, alpha } => {
                let zv = self.value(*z).data();
                let mv = self.value(*mu).data();
                let av = self.value(*alpha).data();
                let scale = g[0] / zv.len() as f64;
                if let Some(gm) = self.buf(grads, *mu) {
                    for i in 0..zv.len() {
                        let r = 1.0 / av[i];
                        let dlogp = zv[i] / mv[i] - (zv[i] + r) / (r + mv[i]);
                        gm[i] -= scale * dlogp;
                    }
                }
                if let Some(ga) = self.buf(grads, *alpha) {
                    for i in 0..zv.len() {
                        let (zi, mi, ai) = (zv[i], mv[i], av[i]);
                        let r = 1.0 / ai;
                        let dlogp_dr = digamma(zi + r) - digamma(r) + (r / (r + mi)).ln() + 1.0 - (r + zi) / (r + mi);
                        ga[i] -= scale * dlogp_dr * (-1.0 / (ai * ai));
                    }
                }
            }
            Op::Pinball { y, q, levels } => {
                let yv = self.value(*y).data();
                let qv = self.value(*q).data();
                let nl = levels.len();
                let n = yv.len();
                let scale = g[0] / n as f64;
                let mut dy = vec![0.0; n];
                let mut dq = vec![0.0; n * nl];
                for i in 0..n {
                    for (l, &tau) in levels.iter().enumerate() {
                        let u = yv[i] - qv[i * nl + l];
                        let d = if u > 0.0 {
                            tau
                        } else if u < 0.0 {
                            tau - 1.0
                        } else {
                            0.0
                        };
                        dy[i] += scale * d;
                        dq[i * nl + l] -= scale * d;
                    }
                }
                if let Some(gy) = self.buf(grads, *y) {
                    gy.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                }
                if let Some(gq) = self.buf(grads, *q) {
                    gq.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
                }
            }
            Op::L1 { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = g[0] / av.len() as f64;
                let sign = |x: f64| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..av.len() {
                        ga[i] += scale * sign(av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..av.len() {
                        gb[i] -= scale * sign(av[i] - bv[i]);
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
