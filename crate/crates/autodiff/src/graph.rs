//! Tape of tensor operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and `backward` simply walks the tape from the end.
//! Leaves created with [`Graph::param`] receive gradients; leaves created with
//! [`Graph::constant`] do not, and neither does anything computed only from
//! constants, which lets frozen networks pass gradients through to their inputs
//! without ever materialising gradients for their own weights.

use rand::Rng;

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul, Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistic layers use training behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Upsample2x {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        alpha: T,
    },
    Tanh {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
        temperature: T,
    },
    LogSoftmax {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Offset {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Log {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Columns {
        input: Var,
        start: usize,
    },
    ConcatColumns {
        a: Var,
        b: Var,
    },
    PickColumns {
        input: Var,
        index: Vec<usize>,
    },
    MaxPool2x {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        spatial: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner tape of tensor operations.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`; `None` when the loss does not depend on it through
    /// differentiable parameters.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn expect_rank<T: Element>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(AutodiffError::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_rows<T: Element>(logits: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = 0.0f64;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / temperature).exp();
            total += d.as_f64();
        }
        let inv = T::of(1.0 / total);
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// NHWC cross-correlation with a `[k,k,Cin,Cout]` kernel and zero "same"
    /// padding; output spatial size is `ceil(size / stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", w, 4)?;
        let (xs, ws) = (x.shape(), w.shape());
        if ws[0] != ws[1] || ws[0] % 2 == 0 {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {ws:?}"),
            ));
        }
        if ws[2] != xs[3] {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", xs[3], ws[2]),
            ));
        }
        if stride == 0 {
            return Err(AutodiffError::invalid("conv2d", "stride must be positive"));
        }
        let geom = ConvGeometry::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[3], stride);
        let cols = im2col(&geom, x.data());
        let mut out = vec![T::zero(); geom.patches() * geom.out_c];
        matmul(
            &cols,
            false,
            w.data(),
            false,
            geom.patches(),
            geom.patch_len(),
            geom.out_c,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of an NHWC tensor.
    pub fn upsample_nn2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("upsample_nn2x", x, 4)?;
        let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let src = x.data();
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((b * h + y / 2) * w + xx / 2) * c;
                    let d = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let value = Tensor::new(vec![n, 2 * h, 2 * w, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Upsample2x { input }, rg))
    }

    /// `x` for `x >= 0`, `alpha·x` otherwise. The derivative at zero is 1.
    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        let alpha = T::of(alpha);
        let value = self.value(input).map(|v| if v >= T::zero() { v } else { alpha * v });
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::LeakyRelu { input, alpha }, rg))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.tanh());
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Tanh { input }, rg))
    }

    /// Per-channel batch normalisation over every axis but the last.
    ///
    /// In train mode the batch statistics are used and the returned
    /// [`RunningStats`] hold the moving-average update; the caller decides
    /// whether to commit it. In infer mode the supplied statistics are used and
    /// returned unchanged.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var, RunningStats<T>)> {
        let x = self.value(input);
        let c = x.last_dim();
        if x.rank() < 2 {
            return Err(AutodiffError::shape("batch_norm", "input needs a batch axis"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(v);
            if t.shape() != [c] {
                return Err(AutodiffError::shape(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected [{c}]", t.shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(AutodiffError::shape("batch_norm", "running stats width"));
        }
        let eps = BATCH_NORM_EPS;
        let rows = x.len() / c;
        let (mean, var, new_stats) = match mode {
            Mode::Train => {
                if x.shape()[0] < 2 {
                    return Err(AutodiffError::invalid(
                        "batch_norm",
                        "train mode needs a batch of at least 2",
                    ));
                }
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for row in x.data().chunks(c) {
                    for (j, &v) in row.iter().enumerate() {
                        mean[j] += v.as_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for row in x.data().chunks(c) {
                    for (j, &v) in row.iter().enumerate() {
                        let d = v.as_f64() - mean[j];
                        sq[j] += d * d;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
                let unbiased = rows as f64 / (rows as f64 - 1.0);
                let m = BATCH_NORM_MOMENTUM;
                let new_stats = RunningStats {
                    mean: (0..c)
                        .map(|j| T::of(m * stats.mean[j].as_f64() + (1.0 - m) * mean[j]))
                        .collect(),
                    var: (0..c)
                        .map(|j| {
                            T::of(m * stats.var[j].as_f64() + (1.0 - m) * var[j] * unbiased)
                        })
                        .collect(),
                };
                (mean, var, new_stats)
            }
            Mode::Infer => (
                stats.mean.iter().map(|v| v.as_f64()).collect(),
                stats.var.iter().map(|v| v.as_f64()).collect(),
                stats.clone(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((src, xh), dst) in x
            .data()
            .chunks(c)
            .zip(xhat.chunks_mut(c))
            .zip(out.chunks_mut(c))
        {
            for j in 0..c {
                xh[j] = (src[j] - mean_t[j]) * inv_std[j];
                dst[j] = xh[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        );
        Ok((var, new_stats))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`. Identity in infer
    /// mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::invalid(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(AutodiffError::shape(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul(av.data(), false, bv.data(), false, m, k, n, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = x.last_dim();
        if b.shape() != [c] {
            return Err(AutodiffError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(b.data()) {
                *o = *o + bb;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::AddBias { input, bias }, rg))
    }

    /// Affine layer `input · weights + bias`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(input, weights)?;
        self.add_bias(h, bias)
    }

    /// Row-wise `softmax(logits / temperature)`, max-subtracted.
    pub fn softmax_with_temperature(&mut self, input: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(AutodiffError::invalid(
                "softmax_with_temperature",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let x = self.value(input);
        expect_rank("softmax_with_temperature", x, 2)?;
        let t = T::of(temperature);
        let out = softmax_rows(x.data(), x.shape()[1], t);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            value,
            Op::Softmax {
                input,
                temperature: t,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax at temperature 1.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("log_softmax", x, 2)?;
        let cols = x.shape()[1];
        let mut out = vec![T::zero(); x.len()];
        for (row, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
            let lse = max + T::of(total.ln());
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::LogSoftmax { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op_name, av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, input: Var, amount: f64) -> Result<Var> {
        let amount = T::of(amount);
        let value = self.value(input).map(|v| v + amount);
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Offset { input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(T::of(total)), Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let mean = self.value(input).mean();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(T::of(mean)), Op::Mean { input }, rg))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(AutodiffError::invalid("log", "non-positive input"));
        }
        let value = x.map(|v| v.ln());
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Log { input }, rg))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::invalid("clamp", format!("{lo} > {hi}")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.value(input).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Clamp { input, lo, hi }, rg))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("columns", x, 2)?;
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if len == 0 || start + len > cols {
            return Err(AutodiffError::shape(
                "columns",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in x.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Columns { input, start }, rg))
    }

    /// Concatenates two rank-2 tensors along columns.
    pub fn concat_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("concat_columns", av, 2)?;
        expect_rank("concat_columns", bv, 2)?;
        if av.shape()[0] != bv.shape()[0] {
            return Err(AutodiffError::shape(
                "concat_columns",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (ca, cb) = (av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![av.shape()[0], ca + cb], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatColumns { a, b }, rg))
    }

    /// Picks one column per row: `out[i] = input[i, index[i]]`.
    pub fn pick_columns(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        expect_rank("pick_columns", x, 2)?;
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if index.len() != rows || index.iter().any(|&i| i >= cols) {
            return Err(AutodiffError::shape(
                "pick_columns",
                format!("{} indices for {:?}", index.len(), x.shape()),
            ));
        }
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &c)| x.data()[r * cols + c])
            .collect();
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            value,
            Op::PickColumns {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("max_pool2x", x, 4)?;
        let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::shape(
                "max_pool2x",
                format!("spatial size {h}x{w} is not even"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = x.data();
        let mut out = vec![T::zero(); n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if best == usize::MAX || src[i] > src[best] {
                                best = i;
                            }
                        }
                        let o = ((b * oh + y) * ow + xx) * c + ch;
                        out[o] = src[best];
                        argmax[o] = best;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2x { input, argmax }, rg))
    }

    /// Mean over the spatial axes of an NHWC tensor, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("global_avg_pool", x, 4)?;
        let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let spatial = h * w;
        let mut acc = vec![0.0f64; n * c];
        for (i, &v) in x.data().iter().enumerate() {
            acc[(i / (spatial * c)) * c + i % c] += v.as_f64();
        }
        let out = acc.iter().map(|&s| T::of(s / spatial as f64)).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input, spatial }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|data| Tensor::new(node.value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, delta: Vec<T>) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (m, k, n) = (geom.patches(), geom.patch_len(), geom.out_c);
                if self.wants(*kernel) {
                    let mut dw = vec![T::zero(); k * n];
                    matmul(cols, true, dy, false, k, m, n, &mut dw, false);
                    self.accumulate(grads, *kernel, dw);
                }
                if self.wants(*input) {
                    let w = self.value(*kernel).data();
                    let mut dcols = vec![T::zero(); m * k];
                    matmul(dy, false, w, true, m, n, k, &mut dcols, false);
                    self.accumulate(grads, *input, col2im(geom, &dcols));
                }
            }
            Op::Upsample2x { input } => {
                let xs = self.value(*input).shape();
                let [nb, h, w, c] = [xs[0], xs[1], xs[2], xs[3]];
                let mut dx = vec![T::zero(); nb * h * w * c];
                for b in 0..nb {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((b * 2 * h + yy) * 2 * w + xx) * c;
                            let d = ((b * h + yy / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                dx[d + ch] = dx[d + ch] + dy[s + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::LeakyRelu { input, alpha } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v >= T::zero() { g } else { *alpha * g })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Tanh { input } => {
                let dx = y
                    .iter()
                    .zip(dy)
                    .map(|(&t, &g)| g * (T::one() - t * t))
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (g, xh) in dy.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += g[j].as_f64();
                        sum_dy_xhat[j] += (g[j] * xh[j]).as_f64();
                    }
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, sum_dy.iter().map(|&v| T::of(v)).collect());
                }
                if self.wants(*input) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); xhat.len()];
                    let inv_rows = 1.0 / rows as f64;
                    for ((d, g), xh) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let scale = gm[j] * inv_std[j];
                            d[j] = if *batch_stats {
                                scale
                                    * (g[j]
                                        - T::of(sum_dy[j] * inv_rows)
                                        - xh[j] * T::of(sum_dy_xhat[j] * inv_rows))
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Dropout { input, mask } => {
                let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let mut da = vec![T::zero(); m * k];
                    matmul(dy, false, bv, true, *m, *n, *k, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![T::zero(); k * n];
                    matmul(av, true, dy, false, *k, *m, *n, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias { input, bias } => {
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut acc = vec![0.0f64; c];
                    for row in dy.chunks(c) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g.as_f64();
                        }
                    }
                    self.accumulate(grads, *bias, acc.into_iter().map(T::of).collect());
                }
                if self.wants(*input) {
                    self.accumulate(grads, *input, dy.to_vec());
                }
            }
            Op::Softmax { input, temperature } => {
                let cols = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((d, p), g) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                    let dot: f64 = p.iter().zip(g).map(|(&a, &b)| (a * b).as_f64()).sum();
                    let dot = T::of(dot);
                    for j in 0..cols {
                        d[j] = p[j] * (g[j] - dot) / *temperature;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::LogSoftmax { input } => {
                let cols = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((d, lp), g) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                    let total = T::of(g.iter().map(|v| v.as_f64()).sum::<f64>());
                    for j in 0..cols {
                        d[j] = g[j] - lp[j].exp() * total;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape { input } => self.accumulate(grads, *input, dy.to_vec()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, dy.iter().map(|&g| g * *factor).collect());
            }
            Op::Offset { input } => self.accumulate(grads, *input, dy.to_vec()),
            Op::Sum { input } => {
                let n = self.value(*input).len();
                self.accumulate(grads, *input, vec![dy[0]; n]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).len();
                self.accumulate(grads, *input, vec![dy[0] / T::of(n as f64); n]);
            }
            Op::Log { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, dy.iter().zip(x).map(|(&g, &v)| g / v).collect());
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let dx = dy
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Columns { input, start } => {
                let xs = self.value(*input).shape();
                let (cols, len) = (xs[1], node.value.last_dim());
                let mut dx = vec![T::zero(); xs[0] * cols];
                for (d, g) in dx.chunks_mut(cols).zip(dy.chunks(len)) {
                    d[*start..*start + len].copy_from_slice(g);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatColumns { a, b } => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                if self.wants(*a) {
                    let da = dy.chunks(ca + cb).flat_map(|r| r[..ca].to_vec()).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = dy.chunks(ca + cb).flat_map(|r| r[ca..].to_vec()).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::PickColumns { input, index } => {
                let cols = self.value(*input).last_dim();
                let mut dx = vec![T::zero(); index.len() * cols];
                for (r, (&c, &g)) in index.iter().zip(dy).enumerate() {
                    dx[r * cols + c] = g;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::MaxPool2x { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&i, &g) in argmax.iter().zip(dy) {
                    dx[i] = dx[i] + g;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let xs = self.value(*input).shape();
                let c = xs[3];
                let inv = T::of(1.0 / *spatial as f64);
                let dx = (0..self.value(*input).len())
                    .map(|i| dy[(i / (spatial * c)) * c + i % c] * inv)
                    .collect();
                self.accumulate(grads, *input, dx);
            }
        }
    }
}
