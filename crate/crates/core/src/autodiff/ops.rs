//! Forward and backward rules for every op the network uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::graph::{Graph, Var};

/// Whether stochastic and batch-statistic layers run in training behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Scale of the gradient reversal layer. Always non-negative.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct GrlCoefficient(f64);

impl GrlCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(
                "lambda",
                format!("gradient reversal coefficient must be finite and >= 0, got {lambda}"),
            ));
        }
        Ok(GrlCoefficient(lambda))
    }

    pub const ZERO: GrlCoefficient = GrlCoefficient(0.0);

    pub fn get(self) -> f64 {
        self.0
    }
}

/// How the summed cross-entropy is reduced over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// `-Σ_i y_i · log ŷ_i` over the whole batch.
    Sum,
    /// The sum divided by the batch size.
    Mean,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
            running_var: self.running_var.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        padded: Vec<T>,
        w_kc: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Grl {
        input: Var,
        lambda: T,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
        scale: T,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    DotConst {
        input: Var,
        weights: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    l_in: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    pad: usize,
    l_out: usize,
}

impl ConvGeom {
    fn padded_len(&self) -> usize {
        self.l_in + 2 * self.pad
    }

    /// Rows of the strided patch view spanning the whole padded batch.
    fn full_rows(&self) -> usize {
        self.n * self.padded_len() - self.k + 1
    }
}

/// Splits a `[N, L, C]` or `[L, C]` shape into `(N, L, C, batched)`.
fn sequence_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [l, c] => Ok((1, l, c, false)),
        [n, l, c] => Ok((n, l, c, true)),
        _ => Err(Error::dim(op, format!("expected [L, C] or [N, L, C], got {shape:?}"))),
    }
}

fn softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    // log-sum-exp of the shifted logits
    sum.ln() + max
}

/// Row-wise max-shifted softmax without recording anything.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::dim("softmax", format!("expected [N, K], got {:?}", logits.shape())));
    };
    let mut out = vec![T::zero(); n * k];
    for (row, o) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        softmax_row(row, o);
    }
    Tensor::new(vec![n, k], out)
}

fn check_one_hot<T: Scalar>(targets: &Tensor<T>, n: usize, k: usize) -> Result<()> {
    if targets.shape() != [n, k] {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("targets {:?} vs logits [{n}, {k}]", targets.shape()),
        ));
    }
    for (i, row) in targets.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Contract(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// 1-D convolution with stride 1 over `[N, L, Cin]` (or `[L, Cin]`) inputs.
    ///
    /// `weight` is `[Cout, Cin, K]`; positions outside `[0, L)` read as zero.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (n, l_in, c_in, batched) = sequence_dims("conv1d", self.shape(input))?;
        let &[c_out, w_cin, k] = self.shape(weight) else {
            return Err(Error::dim(
                "conv1d",
                format!("weight must be [Cout, Cin, K], got {:?}", self.shape(weight)),
            ));
        };
        if w_cin != c_in {
            return Err(Error::dim(
                "conv1d",
                format!("weight expects {w_cin} input channels, input has {c_in}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv1d", format!("kernel size {k} must be odd")));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::dim(
                "conv1d",
                format!("bias {:?} vs {c_out} output channels", self.shape(bias)),
            ));
        }
        if l_in + 2 * padding < k {
            return Err(Error::dim(
                "conv1d",
                format!("length {l_in} with padding {padding} is shorter than kernel {k}"),
            ));
        }
        let geom = ConvGeom {
            n,
            l_in,
            c_in,
            k,
            c_out,
            pad: padding,
            l_out: l_in + 2 * padding - k + 1,
        };
        let lp = geom.padded_len();

        let x = self.value(input).data();
        let mut padded = vec![T::zero(); n * lp * c_in];
        for s in 0..n {
            let src = &x[s * l_in * c_in..(s + 1) * l_in * c_in];
            let dst = s * lp * c_in + padding * c_in;
            padded[dst..dst + l_in * c_in].copy_from_slice(src);
        }
        // [K, Cin, Cout] so that row (k·Cin + ci) of the patch matrix meets column co.
        let w = self.value(weight).data();
        let mut w_kc = vec![T::zero(); k * c_in * c_out];
        for co in 0..c_out {
            for ci in 0..c_in {
                for kk in 0..k {
                    w_kc[(kk * c_in + ci) * c_out + co] = w[(co * c_in + ci) * k + kk];
                }
            }
        }

        // Row r of the patch view is padded[r·Cin .. r·Cin + K·Cin]: one GEMM covers
        // the whole batch, and rows that straddle two samples are discarded.
        let rows = geom.full_rows();
        let patches = MatRef {
            data: &padded,
            rows,
            cols: k * c_in,
            row_stride: c_in,
            col_stride: 1,
        };
        let mut full = vec![T::zero(); rows * c_out];
        gemm(
            T::one(),
            patches,
            MatRef::row_major(&w_kc, k * c_in, c_out),
            T::zero(),
            &mut full,
        );

        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * geom.l_out * c_out];
        for s in 0..n {
            for t in 0..geom.l_out {
                let src = &full[(s * lp + t) * c_out..(s * lp + t + 1) * c_out];
                let dst = &mut out[(s * geom.l_out + t) * c_out..(s * geom.l_out + t + 1) * c_out];
                for ((o, &v), &bb) in dst.iter_mut().zip(src).zip(b) {
                    *o = v + bb;
                }
            }
        }
        let shape = if batched {
            vec![n, geom.l_out, c_out]
        } else {
            vec![geom.l_out, c_out]
        };
        let requires_grad = self.any_requires_grad(&[input, weight, bias]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            requires_grad,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                padded,
                w_kc,
            },
        ))
    }

    /// Batch normalization over every axis but the last (channel) one.
    ///
    /// Train mode uses batch statistics and updates `state`; eval mode reads the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("batch_norm", "empty shape"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("{c} channels but gamma {:?}, beta {:?}, state {}", self.shape(gamma), self.shape(beta), state.channels()),
            ));
        }
        let x = self.value(input).data();
        let rows = x.len() / c;
        let train = mode == Mode::Train;
        if train && rows < 2 {
            return Err(Error::dim(
                "batch_norm",
                "train mode needs at least 2 values per channel",
            ));
        }
        let eps = state.eps;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0f64; c];
            for row in x.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0f64; c];
            for row in x.chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (
                state.running_mean.iter().map(|v| v.as_f64()).collect(),
                state.running_var.iter().map(|v| v.as_f64()).collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((row, xh), o) in x.chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            for j in 0..c {
                let h = (row[j] - mean_t[j]) * inv_std[j];
                xh[j] = h;
                o[j] = g[j] * h + b[j];
            }
        }
        if train {
            let m = state.momentum;
            let unbiased = rows as f64 / (rows as f64 - 1.0);
            for j in 0..c {
                let rm = state.running_mean[j].as_f64();
                let rv = state.running_var[j].as_f64();
                state.running_mean[j] = T::from_f64((1.0 - m) * rm + m * mean[j]);
                state.running_var[j] = T::from_f64((1.0 - m) * rv + m * var[j] * unbiased);
            }
        }
        let requires_grad = self.any_requires_grad(&[input, gamma, beta]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            requires_grad,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out: Vec<T> = v.data().iter().map(|&x| if x > T::zero() || x.is_nan() { x } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let requires_grad = self.requires_grad(input);
        Ok(self.push(value, requires_grad, Op::Relu { input }))
    }

    /// Max pooling with window 2 and stride 2 along the length axis.
    ///
    /// An odd trailing element is dropped. Ties route the gradient to the
    /// first position.
    pub fn maxpool1d(&mut self, input: Var) -> Result<Var> {
        let (n, l, c, batched) = sequence_dims("maxpool1d", self.shape(input))?;
        if l < 2 {
            return Err(Error::dim("maxpool1d", format!("length {l} < 2")));
        }
        let lo = l / 2;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * lo * c];
        let mut argmax = vec![0usize; n * lo * c];
        for s in 0..n {
            for t in 0..lo {
                let a = (s * l + 2 * t) * c;
                let b = a + c;
                let o = (s * lo + t) * c;
                for j in 0..c {
                    let (idx, val) = if x[b + j] > x[a + j] || (x[b + j].is_nan() && !x[a + j].is_nan()) {
                        (b + j, x[b + j])
                    } else {
                        (a + j, x[a + j])
                    };
                    out[o + j] = val;
                    argmax[o + j] = idx;
                }
            }
        }
        let shape = if batched { vec![n, lo, c] } else { vec![lo, c] };
        let requires_grad = self.requires_grad(input);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, requires_grad, Op::MaxPool { input, argmax }))
    }

    /// `input · weightᵀ + bias` for `input: [N, F]`, `weight: [O, F]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let &[n, f] = self.shape(input) else {
            return Err(Error::dim("linear", format!("input must be [N, F], got {:?}", self.shape(input))));
        };
        let &[o, wf] = self.shape(weight) else {
            return Err(Error::dim("linear", format!("weight must be [O, F], got {:?}", self.shape(weight))));
        };
        if wf != f {
            return Err(Error::dim("linear", format!("input has {f} features, weight expects {wf}")));
        }
        if self.shape(bias) != [o] {
            return Err(Error::dim("linear", format!("bias {:?} vs {o} outputs", self.shape(bias))));
        }
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            T::one(),
            MatRef::row_major(self.value(input).data(), n, f),
            MatRef::row_major(self.value(weight).data(), o, f).t(),
            T::one(),
            &mut out,
        );
        let requires_grad = self.any_requires_grad(&[input, weight, bias]);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, requires_grad, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout. Returns `input` unchanged in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout rate", format!("{rate} not in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let v = self.value(input);
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let requires_grad = self.requires_grad(input);
        Ok(self.push(value, requires_grad, Op::Dropout { input, mask }))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn gradient_reversal(&mut self, input: Var, lambda: GrlCoefficient) -> Var {
        let value = self.value(input).clone();
        let value = Tensor::new(value.shape().to_vec(), value.into_data()).expect("valid tensor");
        let requires_grad = self.requires_grad(input);
        self.push(
            value,
            requires_grad,
            Op::Grl {
                input,
                lambda: T::from_f64(lambda.get()),
            },
        )
    }

    /// Fused softmax and cross-entropy against one-hot `targets`.
    ///
    /// Returns the scalar loss node and the softmax probabilities.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        reduction: Reduction,
    ) -> Result<(Var, Tensor<T>)> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits must be [N, K], got {:?}", self.shape(logits)),
            ));
        };
        check_one_hot(targets, n, k)?;
        let z = self.value(logits).data();
        let y = targets.data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let lse = softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            for j in 0..k {
                if y[i * k + j] != T::zero() {
                    // -y·log ŷ with log ŷ = z - logsumexp(z)
                    loss -= y[i * k + j].as_f64() * (row[j] - lse).as_f64();
                }
            }
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::from_f64(n as f64),
        };
        let loss = T::from_f64(loss) * scale;
        let probs_t = Tensor::new(vec![n, k], probs.clone())?;
        let requires_grad = self.requires_grad(logits);
        let var = self.push(
            Tensor::scalar(loss),
            requires_grad,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: y.to_vec(),
                scale,
            },
        );
        Ok((var, probs_t))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        let requires_grad = self.requires_grad(input);
        Ok(self.push(value, requires_grad, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let requires_grad = self.any_requires_grad(&[a, b]);
        Ok(self.push(value, requires_grad, Op::Add { a, b }))
    }

    /// Scalar `Σ weights ⊙ input` against constant weights.
    pub fn dot_const(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let v = self.value(input).data();
        if v.len() != weights.len() {
            return Err(Error::dim(
                "dot_const",
                format!("{} weights for {} values", weights.len(), v.len()),
            ));
        }
        let s = v
            .iter()
            .zip(weights)
            .fold(0.0f64, |acc, (&x, &w)| acc + (x * w).as_f64());
        let requires_grad = self.requires_grad(input);
        Ok(self.push(
            Tensor::scalar(T::from_f64(s)),
            requires_grad,
            Op::DotConst {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ones = vec![T::one(); self.value(input).numel()];
        self.dot_const(input, &ones)
    }

    /// Gradient contributions of node `i` given its upstream gradient `g`.
    pub(crate) fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                padded,
                w_kc,
            } => self.conv1d_backward(g, *input, *weight, *bias, geom, padded, w_kc),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += (gr[j] * xr[j]).as_f64();
                        dbeta[j] += gr[j].as_f64();
                    }
                }
                let mut out = Vec::new();
                if wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        // dx = γ/σ · (dy - mean(dy) - x̂·mean(dy·x̂))
                        let m = rows as f64;
                        let mean_dy: Vec<T> = dbeta.iter().map(|&s| T::from_f64(s / m)).collect();
                        let mean_dyx: Vec<T> = dgamma.iter().map(|&s| T::from_f64(s / m)).collect();
                        for ((d, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                d[j] = gam[j] * inv_std[j] * (gr[j] - mean_dy[j] - xr[j] * mean_dyx[j]);
                            }
                        }
                    } else {
                        for (d, gr) in dx.chunks_mut(c).zip(g.chunks(c)) {
                            for j in 0..c {
                                d[j] = gr[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, dgamma.iter().map(|&v| T::from_f64(v)).collect()));
                }
                if wants(*beta) {
                    out.push((*beta, dbeta.iter().map(|&v| T::from_f64(v)).collect()));
                }
                out
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*input, dx)]
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + gv;
                }
                vec![(*input, dx)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                let mut out = Vec::new();
                if wants(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(
                        T::one(),
                        MatRef::row_major(g, n, o),
                        MatRef::row_major(w.data(), o, f),
                        T::zero(),
                        &mut dx,
                    );
                    out.push((*input, dx));
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(
                        T::one(),
                        MatRef::row_major(g, n, o).t(),
                        MatRef::row_major(x.data(), n, f),
                        T::zero(),
                        &mut dw,
                    );
                    out.push((*weight, dw));
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    out.push((*bias, db));
                }
                out
            }
            Op::Dropout { input, mask } => {
                vec![(*input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())]
            }
            Op::Grl { input, lambda } => {
                let neg = -*lambda;
                vec![(*input, g.iter().map(|&g| neg * g).collect())]
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                scale,
            } => {
                let s = g[0] * *scale;
                let dz = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| s * (p - y))
                    .collect();
                vec![(*logits, dz)]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::DotConst { input, weights } => {
                vec![(*input, weights.iter().map(|&w| w * g[0]).collect())]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        g: &[T],
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeom,
        padded: &[T],
        w_kc: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let ConvGeom {
            n,
            l_in,
            c_in,
            k,
            c_out,
            pad,
            l_out,
        } = *geom;
        let lp = geom.padded_len();
        let rows = geom.full_rows();
        let kc = k * c_in;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        // Upstream gradient scattered onto the full (straddling) row set.
        let mut g_full = vec![T::zero(); rows * c_out];
        for s in 0..n {
            for t in 0..l_out {
                let src = &g[(s * l_out + t) * c_out..(s * l_out + t + 1) * c_out];
                g_full[(s * lp + t) * c_out..(s * lp + t + 1) * c_out].copy_from_slice(src);
            }
        }
        let mut out = Vec::new();
        if wants(input) {
            let mut cols = vec![T::zero(); rows * kc];
            gemm(
                T::one(),
                MatRef::row_major(&g_full, rows, c_out),
                MatRef::row_major(w_kc, kc, c_out).t(),
                T::zero(),
                &mut cols,
            );
            // overlap-add the patch gradients back onto the padded signal
            let mut dpad = vec![T::zero(); n * lp * c_in];
            for r in 0..rows {
                let dst = &mut dpad[r * c_in..r * c_in + kc];
                for (d, &v) in dst.iter_mut().zip(&cols[r * kc..(r + 1) * kc]) {
                    *d = *d + v;
                }
            }
            let mut dx = vec![T::zero(); n * l_in * c_in];
            for s in 0..n {
                let src = s * lp * c_in + pad * c_in;
                dx[s * l_in * c_in..(s + 1) * l_in * c_in]
                    .copy_from_slice(&dpad[src..src + l_in * c_in]);
            }
            out.push((input, dx));
        }
        if wants(weight) {
            let patches = MatRef {
                data: padded,
                rows,
                cols: kc,
                row_stride: c_in,
                col_stride: 1,
            };
            let mut dw_kc = vec![T::zero(); kc * c_out];
            gemm(
                T::one(),
                patches.t(),
                MatRef::row_major(&g_full, rows, c_out),
                T::zero(),
                &mut dw_kc,
            );
            let mut dw = vec![T::zero(); c_out * c_in * k];
            for co in 0..c_out {
                for ci in 0..c_in {
                    for kk in 0..k {
                        dw[(co * c_in + ci) * k + kk] = dw_kc[(kk * c_in + ci) * c_out + co];
                    }
                }
            }
            out.push((weight, dw));
        }
        if wants(bias) {
            let mut db = vec![T::zero(); c_out];
            for row in g.chunks(c_out) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
            }
            out.push((bias, db));
        }
        out
    }
}
