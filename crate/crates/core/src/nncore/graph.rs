//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every node that (transitively) depends on a gradient-requiring leaf.
//!
//! Low-level ops panic on shape misuse, the same way `ndarray` does; layers in
//! [`super::layers`] validate their inputs and report [`Error::Shape`].

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{
    Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn, Zip,
};
use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Mish,
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Mish => x * mish_gate(x).0,
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    #[inline]
    fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Mish => {
                let (t, s) = mish_gate(x);
                t + x * s * (T::one() - t * t)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential, using
/// `tanh(ln(1 + n)) = n (n + 2) / (n (n + 2) + 2)` with `n = e^x`.
#[inline]
fn mish_gate<T: Float>(x: T) -> (T, T) {
    if x > T::c(20.0) {
        return (T::one(), sigmoid(x));
    }
    let n = x.exp();
    let q = n * (n + T::c(2.0));
    (q / (q + T::c(2.0)), n / (T::one() + n))
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Act(Activation),
    Exp,
    Square,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, ArrayD<T>),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    BroadcastTime(usize),
    Unary(usize, Unary),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    MeanTime(usize),
    Reshape(usize),
    SwapLast(usize),
    Concat(usize, usize, usize),
    Upsample2(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        cols: Array2<T>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Array3<T>,
        rstd: Array2<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<T>,
        rstd: Array1<T>,
    },
    SinEmbed {
        k: usize,
        freqs: Vec<T>,
    },
    GaussianLogProb {
        target: Array2<T>,
        mean: usize,
        log_std: usize,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass.
pub struct Graph<T: Float> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn d2<T>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a 2-D tensor, got shape {:?}", a.shape()))
}

fn d3<T>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view()
        .into_dimensionality::<Ix3>()
        .unwrap_or_else(|_| panic!("expected a 3-D tensor, got shape {:?}", a.shape()))
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked, used for input gradients.
    pub fn input(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(
            val.len(),
            1,
            "scalar() on tensor of shape {:?}",
            val.shape()
        );
        *val.iter().next().unwrap()
    }

    fn binary_same_shape(&self, a: usize, b: usize, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        self.binary_same_shape(a, b, "minimum");
        let mut v = self.nodes[a].value.clone();
        Zip::from(&mut v)
            .and(&self.nodes[b].value)
            .for_each(|x, &y| *x = if *x <= y { *x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Minimum(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let a = self.idx(a);
        let v = self.nodes[a].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let a = self.idx(a);
        let v = self.nodes[a].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: ArrayD<T>) -> Var {
        let a = self.idx(a);
        assert_eq!(
            self.nodes[a].value.shape(),
            c.shape(),
            "mul_const: shape mismatch"
        );
        let v = &self.nodes[a].value * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let v = d2(&self.nodes[a].value)
            .dot(&d2(&self.nodes[b].value))
            .into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x[n, f] + b[f]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (x, b) = (self.idx(x), self.idx(b));
        let bias = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-D");
        let mut v = d2(&self.nodes[x].value).to_owned();
        assert_eq!(v.ncols(), bias.len(), "add_row_bias: width mismatch");
        v += &bias;
        let rg = self.rg(x) || self.rg(b);
        self.push(v.into_dyn(), Op::AddRowBias(x, b), rg)
    }

    /// `[b, c] -> [b, c, len]` by repetition along a new trailing axis.
    pub fn broadcast_time(&mut self, x: Var, len: usize) -> Var {
        let x = self.idx(x);
        let src = d2(&self.nodes[x].value);
        let (b, c) = src.dim();
        let mut out = Array3::<T>::zeros((b, c, len));
        for ((i, j), &val) in src.indexed_iter() {
            out.slice_mut(ndarray::s![i, j, ..]).fill(val);
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::BroadcastTime(x), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let a = self.idx(a);
        let v = match kind {
            Unary::Act(act) => self.nodes[a].value.mapv(|x| act.apply(x)),
            Unary::Exp => self.nodes[a].value.mapv(|x| x.exp()),
            Unary::Square => self.nodes[a].value.mapv(|x| x * x),
        };
        let rg = self.rg(a);
        self.push(v, Op::Unary(a, kind), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        self.unary(a, Unary::Act(act))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn mish(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Mish)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let s = self.nodes[a].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let n = self.nodes[a].value.len().max(1);
        let s = self.nodes[a].value.sum() / T::c(n as f64);
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a), rg)
    }

    /// Row sums of a 2-D tensor: `[n, f] -> [n]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let v = d2(&self.nodes[a].value).sum_axis(Axis(1)).into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::SumLast(a), rg)
    }

    /// Global average pool over the temporal axis: `[b, c, h] -> [b, c]`.
    pub fn mean_time(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let v = d3(&self.nodes[a].value)
            .mean_axis(Axis(2))
            .expect("empty time axis")
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::MeanTime(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let a = self.idx(a);
        let src = &self.nodes[a].value;
        let v = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", src.shape(), shape));
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Swap the last two axes of a 3-D tensor.
    pub fn swap_last(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let v = d3(&self.nodes[a].value)
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::SwapLast(a), rg)
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let (a, b) = (self.idx(a), self.idx(b));
        let v = ndarray::concatenate(
            Axis(axis),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .expect("concat: incompatible shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Concat(a, b, axis), rg)
    }

    /// Nearest-neighbor upsampling by two along the temporal axis.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let a = self.idx(a);
        let src = d3(&self.nodes[a].value);
        let (b, c, h) = src.dim();
        let mut out = Array3::<T>::zeros((b, c, 2 * h));
        for ((i, j, t), &val) in src.indexed_iter() {
            out[[i, j, 2 * t]] = val;
            out[[i, j, 2 * t + 1]] = val;
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::Upsample2(a), rg)
    }

    /// Temporal convolution with zero padding.
    ///
    /// `x: [b, c_in, h]`, `w: [c_out, c_in, k]`, `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(bias));
        let xv = d3(&self.nodes[xi].value);
        let wv = d3(&self.nodes[wi].value);
        let (b, cin, h) = xv.dim();
        let (cout, wcin, k) = wv.dim();
        assert_eq!(cin, wcin, "conv1d: channel mismatch");
        assert!(stride >= 1 && h + 2 * pad >= k, "conv1d: input too short");
        let hout = (h + 2 * pad - k) / stride + 1;
        let cols = im2col(&xv, k, stride, pad, hout);
        let w2 = wv.to_shape((cout, cin * k)).expect("contiguous weight");
        let out2 = w2.dot(&cols);
        let biasv = self.nodes[bi]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-D");
        let mut out = Array3::<T>::zeros((b, cout, hout));
        {
            let src = out2.as_slice().expect("fresh matmul output is contiguous");
            let dst = out.as_slice_mut().unwrap();
            for co in 0..cout {
                let bc = biasv[co];
                for bb in 0..b {
                    let s = &src[co * b * hout + bb * hout..][..hout];
                    let d = &mut dst[(bb * cout + co) * hout..][..hout];
                    for (d, &v) in d.iter_mut().zip(s) {
                        *d = v + bc;
                    }
                }
            }
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        self.push(
            out.into_dyn(),
            Op::Conv1d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Group normalization over `(channels / groups, time)` per sample.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let xv = d3(&self.nodes[xi].value);
        let (b, c, h) = xv.dim();
        assert!(
            groups >= 1 && c % groups == 0,
            "group_norm: {c} channels not divisible by {groups}"
        );
        let cpg = c / groups;
        let n = T::c((cpg * h) as f64);
        let eps = T::c(eps);
        let gv = self.nodes[gi]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma 1-D");
        let bv = self.nodes[bi]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta 1-D");
        let xc = xv.as_standard_layout();
        let xs = xc.as_slice().unwrap();
        let mut xhat = Array3::<T>::zeros((b, c, h));
        let mut rstd = Array2::<T>::zeros((b, groups));
        let mut out = Array3::<T>::zeros((b, c, h));
        {
            let xh_s = xhat.as_slice_mut().unwrap();
            let out_s = out.as_slice_mut().unwrap();
            let span = cpg * h;
            for bb in 0..b {
                for g in 0..groups {
                    let off = (bb * c + g * cpg) * h;
                    let block = &xs[off..off + span];
                    let mean = block.iter().fold(T::zero(), |a, &v| a + v) / n;
                    let var = block
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / n;
                    let r = T::one() / (var + eps).sqrt();
                    rstd[[bb, g]] = r;
                    for (i, &v) in block.iter().enumerate() {
                        let ci = g * cpg + i / h;
                        let xh = (v - mean) * r;
                        xh_s[off + i] = xh;
                        out_s[off + i] = xh * gv[ci] + bv[ci];
                    }
                }
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Layer normalization over the feature axis of `[n, f]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let xv = d2(&self.nodes[xi].value);
        let (n, f) = xv.dim();
        let nf = T::c(f as f64);
        let eps = T::c(eps);
        let gv = self.nodes[gi]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma 1-D");
        let bv = self.nodes[bi]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta 1-D");
        let mut xhat = Array2::<T>::zeros((n, f));
        let mut rstd = Array1::<T>::zeros(n);
        let mut out = Array2::<T>::zeros((n, f));
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / nf;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..f {
                let xh = (row[j] - mean) * r;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * gv[j] + bv[j];
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Sinusoidal embedding of a batch of (real-valued) diffusion steps:
    /// `[b] -> [b, dim]` with `sin` in the first half and `cos` in the second.
    pub fn sinusoidal_embed(&mut self, k: Var, dim: usize) -> Var {
        assert!(
            dim >= 2 && dim % 2 == 0,
            "sinusoidal_embed: dim must be even"
        );
        let ki = self.idx(k);
        let half = dim / 2;
        let scale = if half > 1 {
            (10000f64).ln() / (half - 1) as f64
        } else {
            0.0
        };
        let freqs: Vec<T> = (0..half).map(|j| T::c((-scale * j as f64).exp())).collect();
        let kv = self.nodes[ki]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("steps must be 1-D");
        let mut out = Array2::<T>::zeros((kv.len(), dim));
        for (i, &kk) in kv.iter().enumerate() {
            for (j, &f) in freqs.iter().enumerate() {
                out[[i, j]] = (kk * f).sin();
                out[[i, half + j]] = (kk * f).cos();
            }
        }
        let rg = self.rg(ki);
        self.push(out.into_dyn(), Op::SinEmbed { k: ki, freqs }, rg)
    }

    /// Diagonal Gaussian log-density of constant `target: [n, d]` under
    /// `N(mean, exp(log_std)^2)`, summed over `d`: result `[n]`.
    pub fn gaussian_log_prob(&mut self, target: Array2<T>, mean: Var, log_std: Var) -> Var {
        let (mi, li) = (self.idx(mean), self.idx(log_std));
        let mv = d2(&self.nodes[mi].value);
        let lv = self.nodes[li]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("log_std 1-D");
        assert_eq!(mv.dim(), target.dim(), "gaussian_log_prob: shape mismatch");
        let half_ln_2pi = T::c(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut out = Array1::<T>::zeros(mv.nrows());
        for i in 0..mv.nrows() {
            let mut acc = T::zero();
            for j in 0..mv.ncols() {
                let z = (target[[i, j]] - mv[[i, j]]) / lv[j].exp();
                acc += T::c(-0.5) * z * z - lv[j] - half_ln_2pi;
            }
            out[i] = acc;
        }
        let rg = self.rg(mi) || self.rg(li);
        self.push(
            out.into_dyn(),
            Op::GaussianLogProb {
                target,
                mean: mi,
                log_std: li,
            },
            rg,
        )
    }

    /// Gradients of `root` (seeded with ones) with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.graph != self.id || root.index >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let seed = ArrayD::from_elem(self.nodes[root.index].value.raw_dim(), T::one());
        self.backward_with(root, seed)
    }

    /// Gradients of `<root, output_grad>`.
    pub fn backward_with(&self, root: Var, output_grad: ArrayD<T>) -> Result<Gradients<T>> {
        if root.graph != self.id || root.index >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        let rv = &self.nodes[root.index].value;
        if rv.shape() != output_grad.shape() {
            return Err(Error::Shape {
                layer: "backward".into(),
                expected: format!("{:?}", rv.shape()),
                got: format!("{:?}", output_grad.shape()),
            });
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(output_grad);
        for i in (0..=root.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |idx: usize, delta: ArrayD<T>| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if nodes[*a].requires_grad {
                    acc(*a, g * &nodes[*b].value);
                }
                if nodes[*b].requires_grad {
                    acc(*b, g * &nodes[*a].value);
                }
            }
            Op::Minimum(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(av)
                    .and(bv)
                    .for_each(|ga, gb, &x, &y| {
                        if x <= y {
                            *gb = T::zero();
                        } else {
                            *ga = T::zero();
                        }
                    });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.mapv(|x| x * c));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::MatMul(a, b) => {
                let g2 = d2(g);
                if nodes[*a].requires_grad {
                    acc(*a, g2.dot(&d2(&nodes[*b].value).t()).into_dyn());
                }
                if nodes[*b].requires_grad {
                    acc(*b, d2(&nodes[*a].value).t().dot(&g2).into_dyn());
                }
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if nodes[*b].requires_grad {
                    acc(*b, d2(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::BroadcastTime(x) => acc(*x, d3(g).sum_axis(Axis(2)).into_dyn()),
            Op::Unary(a, kind) => {
                let x = &nodes[*a].value;
                let y = &nodes[i].value;
                let mut d = g.clone();
                match kind {
                    Unary::Act(act) => Zip::from(&mut d)
                        .and(x)
                        .and(y)
                        .for_each(|d, &x, &y| *d *= act.derivative(x, y)),
                    Unary::Exp => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y),
                    Unary::Square => Zip::from(&mut d).and(x).for_each(|d, &x| *d *= x + x),
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let s = *g.iter().next().unwrap();
                acc(*a, ArrayD::from_elem(nodes[*a].value.raw_dim(), s));
            }
            Op::MeanAll(a) => {
                let n = T::c(nodes[*a].value.len().max(1) as f64);
                let s = *g.iter().next().unwrap() / n;
                acc(*a, ArrayD::from_elem(nodes[*a].value.raw_dim(), s));
            }
            Op::SumLast(a) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let (n, f) = d2(&nodes[*a].value).dim();
                let mut d = Array2::<T>::zeros((n, f));
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row.fill(gv[r]);
                }
                acc(*a, d.into_dyn());
            }
            Op::MeanTime(a) => {
                let g2 = d2(g);
                let (b, c, h) = d3(&nodes[*a].value).dim();
                let inv = T::one() / T::c(h as f64);
                let mut d = Array3::<T>::zeros((b, c, h));
                for ((bb, cc), &val) in g2.indexed_iter() {
                    d.slice_mut(ndarray::s![bb, cc, ..]).fill(val * inv);
                }
                acc(*a, d.into_dyn());
            }
            Op::Reshape(a) => {
                let shape = nodes[*a].value.raw_dim();
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(shape)
                    .expect("reshape grad");
                acc(*a, d);
            }
            Op::SwapLast(a) => {
                let d = d3(g)
                    .permuted_axes([0, 2, 1])
                    .as_standard_layout()
                    .into_owned()
                    .into_dyn();
                acc(*a, d);
            }
            Op::Concat(a, b, axis) => {
                let na = nodes[*a].value.shape()[*axis];
                let ga = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(..na))
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(na..))
                    .to_owned();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Upsample2(a) => {
                let g3 = d3(g);
                let (b, c, h2) = g3.dim();
                let mut d = Array3::<T>::zeros((b, c, h2 / 2));
                for ((bb, cc, t), v) in d.indexed_iter_mut() {
                    *v = g3[[bb, cc, 2 * t]] + g3[[bb, cc, 2 * t + 1]];
                }
                acc(*a, d.into_dyn());
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let g3 = d3(g);
                let (bsz, cout, hout) = g3.dim();
                let g3 = g3.as_standard_layout();
                let src = g3.as_slice().unwrap();
                let mut g2 = Array2::<T>::zeros((cout, bsz * hout));
                {
                    let dst = g2.as_slice_mut().unwrap();
                    for bb in 0..bsz {
                        for co in 0..cout {
                            dst[co * bsz * hout + bb * hout..][..hout]
                                .copy_from_slice(&src[(bb * cout + co) * hout..][..hout]);
                        }
                    }
                }
                let wv = d3(&nodes[*w].value);
                let (_, cin, k) = wv.dim();
                if nodes[*w].requires_grad {
                    let dw = g2.dot(&cols.t());
                    let dw = dw.as_standard_layout().into_owned();
                    acc(
                        *w,
                        dw.into_shape_with_order((cout, cin, k))
                            .expect("contiguous")
                            .into_dyn(),
                    );
                }
                if nodes[*b].requires_grad {
                    acc(*b, g2.sum_axis(Axis(1)).into_dyn());
                }
                if nodes[*x].requires_grad {
                    let w2 = wv.to_shape((cout, cin * k)).unwrap();
                    let dcols = w2.t().dot(&g2);
                    let h = nodes[*x].value.shape()[2];
                    let dx = col2im(&dcols, bsz, cin, h, k, *stride, *pad, hout);
                    acc(*x, dx.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let g3 = d3(g);
                let (b, c, h) = g3.dim();
                let cpg = c / groups;
                let gv = nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                if nodes[*gamma].requires_grad {
                    let mut dg = Array1::<T>::zeros(c);
                    Zip::indexed(&g3)
                        .and(xhat)
                        .for_each(|(_, ci, _), &gg, &xh| dg[ci] += gg * xh);
                    acc(*gamma, dg.into_dyn());
                }
                if nodes[*beta].requires_grad {
                    let db = g3.sum_axis(Axis(2)).sum_axis(Axis(0));
                    acc(*beta, db.into_dyn());
                }
                if nodes[*x].requires_grad {
                    let n = T::c((cpg * h) as f64);
                    let gc = g3.as_standard_layout();
                    let gs = gc.as_slice().unwrap();
                    let xh_s = xhat.as_slice().unwrap();
                    let mut dx = Array3::<T>::zeros((b, c, h));
                    let dst = dx.as_slice_mut().unwrap();
                    let span = cpg * h;
                    for bb in 0..b {
                        for grp in 0..*groups {
                            let r = rstd[[bb, grp]];
                            let off = (bb * c + grp * cpg) * h;
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for i in 0..span {
                                let dxh = gs[off + i] * gv[grp * cpg + i / h];
                                sum_d += dxh;
                                sum_dx += dxh * xh_s[off + i];
                            }
                            for i in 0..span {
                                let dxh = gs[off + i] * gv[grp * cpg + i / h];
                                dst[off + i] = r / n * (n * dxh - sum_d - xh_s[off + i] * sum_dx);
                            }
                        }
                    }
                    acc(*x, dx.into_dyn());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g2 = d2(g);
                let (n, f) = g2.dim();
                let gv = nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                if nodes[*gamma].requires_grad {
                    acc(*gamma, (&g2 * xhat).sum_axis(Axis(0)).into_dyn());
                }
                if nodes[*beta].requires_grad {
                    acc(*beta, g2.sum_axis(Axis(0)).into_dyn());
                }
                if nodes[*x].requires_grad {
                    let nf = T::c(f as f64);
                    let mut dx = Array2::<T>::zeros((n, f));
                    for r in 0..n {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..f {
                            let dxh = g2[[r, j]] * gv[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[[r, j]];
                        }
                        for j in 0..f {
                            let dxh = g2[[r, j]] * gv[j];
                            dx[[r, j]] = rstd[r] / nf * (nf * dxh - sum_d - xhat[[r, j]] * sum_dx);
                        }
                    }
                    acc(*x, dx.into_dyn());
                }
            }
            Op::SinEmbed { k, freqs } => {
                let g2 = d2(g);
                let kv = nodes[*k].value.view().into_dimensionality::<Ix1>().unwrap();
                let half = freqs.len();
                let mut dk = Array1::<T>::zeros(kv.len());
                for (i, &kk) in kv.iter().enumerate() {
                    let mut s = T::zero();
                    for (j, &f) in freqs.iter().enumerate() {
                        s += g2[[i, j]] * f * (kk * f).cos()
                            - g2[[i, half + j]] * f * (kk * f).sin();
                    }
                    dk[i] = s;
                }
                acc(*k, dk.into_dyn());
            }
            Op::GaussianLogProb {
                target,
                mean,
                log_std,
            } => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mv = d2(&nodes[*mean].value);
                let lv = nodes[*log_std]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let (n, d) = mv.dim();
                let mut dm = Array2::<T>::zeros((n, d));
                let mut dl = Array1::<T>::zeros(d);
                for r in 0..n {
                    for j in 0..d {
                        let inv_var = (lv[j] + lv[j]).exp().recip();
                        let diff = target[[r, j]] - mv[[r, j]];
                        dm[[r, j]] = gv[r] * diff * inv_var;
                        dl[j] += gv[r] * (diff * diff * inv_var - T::one());
                    }
                }
                acc(*mean, dm.into_dyn());
                acc(*log_std, dl.into_dyn());
            }
        }
    }
}

/// Output positions `o` whose tap `j` lands inside `[0, h)`, as a half-open range.
fn valid_range(j: usize, stride: usize, pad: usize, h: usize, hout: usize) -> (usize, usize) {
    // o * stride + j - pad in [0, h)
    let lo = if j >= pad {
        0
    } else {
        (pad - j).div_ceil(stride)
    };
    let hi = if h + pad > j {
        ((h + pad - j - 1) / stride + 1).min(hout)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Float>(
    x: &ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
) -> Array2<T> {
    let (b, cin, h) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((cin * k, b * hout));
    let dst = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        for j in 0..k {
            let (lo, hi) = valid_range(j, stride, pad, h, hout);
            let row = &mut dst[(c * k + j) * b * hout..][..b * hout];
            for bb in 0..b {
                let src = &xs[(bb * cin + c) * h..][..h];
                let d = &mut row[bb * hout..][..hout];
                for o in lo..hi {
                    d[o] = src[o * stride + j - pad];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    dcols: &Array2<T>,
    b: usize,
    cin: usize,
    h: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
) -> Array3<T> {
    let mut dx = Array3::<T>::zeros((b, cin, h));
    let dcols = dcols.as_standard_layout();
    let srcs = dcols.as_slice().unwrap();
    let dst = dx.as_slice_mut().unwrap();
    for c in 0..cin {
        for j in 0..k {
            let (lo, hi) = valid_range(j, stride, pad, h, hout);
            let row = &srcs[(c * k + j) * b * hout..][..b * hout];
            for bb in 0..b {
                let s = &row[bb * hout..][..hout];
                let d = &mut dst[(bb * cin + c) * h..][..h];
                for o in lo..hi {
                    d[o * stride + j - pad] += s[o];
                }
            }
        }
    }
    dx
}

/// Result of a backward pass.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}
