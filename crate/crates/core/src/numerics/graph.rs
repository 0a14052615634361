//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and enough of
//! its inputs to run the vector-Jacobian product later. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order and each node is visited once.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_into, matmul_shape};
use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower and upper probability bound applied before binary cross entropy.
pub const PROB_FLOOR: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv { x: Var, w: Var, b: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectCols { a: Var, idx: Vec<usize> },
    Transpose(Var),
    Sum(Var),
    Bce {
        p: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        norm: T,
    },
    BceLogits {
        z: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        norm: T,
    },
}

/// Parameter values are borrowed from the store, never copied.
struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether dropout is active, and its random stream.
enum DropoutState {
    Off,
    On { rate: f64, rng: Box<ChaCha8Rng> },
}

/// A recorded computation over parameters from one [`ParamStore`].
///
/// Confined to a single thread; the parameter store is only read.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p, T>>,
    record: bool,
    dropout: DropoutState,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph that records operations for a later backward pass.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            record: true,
            dropout: DropoutState::Off,
        }
    }

    /// Forward-only graph; `backward` returns no gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(params);
        g.record = false;
        g
    }

    /// Enables dropout with the given rate and seed.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        self.dropout = if rate > 0.0 {
            DropoutState::On {
                rate,
                rng: Box::new(ChaCha8Rng::seed_from_u64(seed)),
            }
        } else {
            DropoutState::Off
        };
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (for checking derivatives w.r.t. data).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push_cow(Cow::Borrowed(&p.value), Op::Param, p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (m, n) = matmul_shape(self.value(a), ta, self.value(b), tb)?;
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            &mut out,
            self.value(a),
            ta,
            self.value(b),
            tb,
            T::one(),
            T::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_col(&self, a: Var, v: Var, what: &str) -> Result<()> {
        let (r, _) = self.dims(a);
        if self.dims(v) != (r, 1) {
            return Err(Error::Dimension(format!(
                "{what}: column of {:?} does not broadcast over {:?}",
                self.dims(v),
                self.dims(a)
            )));
        }
        Ok(())
    }

    /// Adds column vector `v` to every column of `a`.
    pub fn add_col(&mut self, a: Var, v: Var) -> Result<Var> {
        self.check_col(a, v, "add_col")?;
        let (r, c) = self.dims(a);
        let mut out = self.value(a).clone();
        let vv = self.value(v).data();
        let od = out.data_mut();
        for i in 0..r {
            let b = vv[i];
            od[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = *x + b);
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::AddCol(a, v), rg))
    }

    /// Multiplies every column of `a` elementwise by column vector `v`.
    pub fn mul_col(&mut self, a: Var, v: Var) -> Result<Var> {
        self.check_col(a, v, "mul_col")?;
        let (r, c) = self.dims(a);
        let mut out = self.value(a).clone();
        let vv = self.value(v).data();
        let od = out.data_mut();
        for i in 0..r {
            let s = vv[i];
            od[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = *x * s);
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::MulCol(a, v), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, mask: Tensor<T>) -> Result<Var> {
        if mask.dims() != self.dims(a) {
            return Err(Error::Dimension("mul_const shape mismatch".into()));
        }
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, mask), rg))
    }

    /// Inverted dropout; identity when dropout is off.
    pub fn dropout(&mut self, a: Var) -> Var {
        let (rate, rng) = match &mut self.dropout {
            DropoutState::Off => return a,
            DropoutState::On { rate, rng } => (*rate, rng),
        };
        let keep = 1.0 - rate;
        let (r, c) = self.nodes[a.0].value.dims();
        let inv = T::from_f64_lossy(1.0 / keep);
        let mask = Tensor::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < keep {
                inv
            } else {
                T::zero()
            }
        });
        self.mul_const(a, mask).expect("mask built with matching shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Swish(a), rg)
    }

    /// Gated linear unit over rows: `top ⊙ sigmoid(bottom)`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r % 2 != 0 {
            return Err(Error::Dimension(format!("glu needs an even row count, got {r}")));
        }
        let h = r / 2;
        let x = self.value(a).data();
        let data = (0..h * c)
            .map(|i| x[i] * sigmoid(x[h * c + i]))
            .collect();
        let out = Tensor::from_vec(&[h, c], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Glu(a), rg))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each column over its rows, then applies `gain` and `bias`
    /// (both `rows × 1`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (d, m) = self.dims(x);
        if d == 0 {
            return Err(Error::Dimension("layer_norm over zero rows".into()));
        }
        self.check_col(x, gain, "layer_norm gain")?;
        self.check_col(x, bias, "layer_norm bias")?;
        let eps = T::from_f64_lossy(eps);
        let xv = self.value(x);
        let dn = T::from_usize(d).unwrap();
        let mut mean = vec![T::zero(); m];
        for i in 0..d {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu = *mu + xv.get(i, j);
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / dn);
        let mut var = vec![T::zero(); m];
        for i in 0..d {
            for j in 0..m {
                let c = xv.get(i, j) - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        let rstd: Vec<T> = var.iter().map(|&v| (v / dn + eps).sqrt().recip()).collect();
        let xhat = Tensor::from_fn(d, m, |i, j| (xv.get(i, j) - mean[j]) * rstd[j]);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = Tensor::from_fn(d, m, |i, j| xhat.get(i, j) * g[i] + b[i]);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-row 1-D convolution along columns with zero "same" padding.
    ///
    /// `x` is `D × T`, `w` is `D × k` with odd `k`, `b` is `D × 1`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (d, t) = self.dims(x);
        let (wd, k) = self.dims(w);
        if wd != d || k % 2 == 0 {
            return Err(Error::Dimension(format!(
                "depthwise kernel {wd}x{k} for {d} channels (kernel must be odd)"
            )));
        }
        self.check_col(x, b, "depthwise bias")?;
        let half = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Tensor::zeros(&[d, t]);
        for ch in 0..d {
            let xr = &xv.data()[ch * t..(ch + 1) * t];
            let wr = &wv.data()[ch * k..(ch + 1) * k];
            let bias = bv.data()[ch];
            let orow = &mut out.data_mut()[ch * t..(ch + 1) * t];
            for (ti, o) in orow.iter_mut().enumerate() {
                let mut acc = bias;
                for (i, &wi) in wr.iter().enumerate() {
                    let src = ti as isize + i as isize - half as isize;
                    if src >= 0 && (src as usize) < t {
                        acc = acc + wi * xr[src as usize];
                    }
                }
                *o = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::DepthwiseConv { x, w, b }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(&[len, c], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.dims(a);
        if start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let out = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::Dimension("concat_rows column mismatch".into()));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            cols += pc;
        }
        let mut out = Tensor::zeros(&[r, cols]);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let pc = pv.cols();
            for i in 0..r {
                out.data_mut()[i * cols + off..i * cols + off + pc]
                    .copy_from_slice(&pv.data()[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Gathers columns `idx` (repeats allowed).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let c = self.dims(a).1;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!("column {bad} of {c}")));
        }
        let out = self.value(a).select_cols(idx);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::SelectCols {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Binary cross entropy on probabilities clamped to
    /// `[PROB_FLOOR, 1 - PROB_FLOOR]`, summed with optional weights and
    /// divided by `norm`.
    pub fn bce(
        &mut self,
        p: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        norm: f64,
    ) -> Result<Var> {
        self.check_bce(p, &target, &weight)?;
        let norm = T::from_f64_lossy(norm);
        let pv = self.value(p);
        let loss = bce_sum(pv.data(), target.data(), weight.as_ref().map(|w| w.data())) / norm;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target,
                weight,
                norm,
            },
            rg,
        ))
    }

    /// Binary cross entropy of `sigmoid(z)` with the same clamp as [`bce`].
    ///
    /// The loss value equals `bce(sigmoid(z))`. The gradient is
    /// `sigmoid(z) - y` everywhere, so it does not vanish where the clamp
    /// saturates.
    ///
    /// [`bce`]: Graph::bce
    pub fn bce_with_logits(
        &mut self,
        z: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        norm: f64,
    ) -> Result<Var> {
        self.check_bce(z, &target, &weight)?;
        let norm = T::from_f64_lossy(norm);
        let p: Vec<T> = self.value(z).data().iter().map(|&x| sigmoid(x)).collect();
        let loss = bce_sum(&p, target.data(), weight.as_ref().map(|w| w.data())) / norm;
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target,
                weight,
                norm,
            },
            rg,
        ))
    }

    fn check_bce(&self, p: Var, target: &Tensor<T>, weight: &Option<Tensor<T>>) -> Result<()> {
        if target.dims() != self.dims(p)
            || weight.as_ref().is_some_and(|w| w.dims() != self.dims(p))
        {
            return Err(Error::Dimension(format!(
                "bce target {:?} vs prediction {:?}",
                target.dims(),
                self.dims(p)
            )));
        }
        Ok(())
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Backward<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(
                self.nodes[loss.0].value.shape(),
                T::one(),
            ));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut param_grads = vec![None; self.params.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                param_grads[pid] = grads[v.0].clone();
            }
        }
        Backward {
            node_grads: grads,
            params: Gradients::from_vec(param_grads),
        }
    }

    fn backprop_node(&self, node: &Node<'p, T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if want(a) {
                    let ga = slot(grads, a, val(a));
                    if !ta {
                        gemm_into(ga, gout, false, val(b), !tb, T::one(), T::one());
                    } else {
                        gemm_into(ga, val(b), tb, gout, true, T::one(), T::one());
                    }
                }
                if want(b) {
                    let gb = slot(grads, b, val(b));
                    if !tb {
                        gemm_into(gb, val(a), !ta, gout, false, T::one(), T::one());
                    } else {
                        gemm_into(gb, gout, true, val(a), ta, T::one(), T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if want(*b) {
                    slot(grads, *b, val(*b)).add_assign(gout);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if want(*b) {
                    let g = slot(grads, *b, val(*b));
                    for (x, &d) in g.data_mut().iter_mut().zip(gout.data()) {
                        *x = *x - d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let g = slot(grads, *a, val(*a));
                    accumulate_product(g, gout, val(*b));
                }
                if want(*b) {
                    let g = slot(grads, *b, val(*b));
                    accumulate_product(g, gout, val(*a));
                }
            }
            Op::AddCol(a, v) => {
                if want(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if want(*v) {
                    let c = gout.cols();
                    let g = slot(grads, *v, val(*v));
                    for (i, x) in g.data_mut().iter_mut().enumerate() {
                        *x = *x + gout.data()[i * c..(i + 1) * c].iter().copied().sum();
                    }
                }
            }
            Op::MulCol(a, v) => {
                let c = gout.cols();
                if want(*a) {
                    let vv = val(*v).data();
                    let g = slot(grads, *a, val(*a));
                    for (idx, x) in g.data_mut().iter_mut().enumerate() {
                        *x = *x + gout.data()[idx] * vv[idx / c];
                    }
                }
                if want(*v) {
                    let av = val(*a).data();
                    let g = slot(grads, *v, val(*v));
                    for (i, x) in g.data_mut().iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for j in i * c..(i + 1) * c {
                            acc = acc + gout.data()[j] * av[j];
                        }
                        *x = *x + acc;
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    let g = slot(grads, *a, val(*a));
                    for (x, &d) in g.data_mut().iter_mut().zip(gout.data()) {
                        *x = *x + d * *s;
                    }
                }
            }
            Op::MulConst(a, m) => {
                if want(*a) {
                    let g = slot(grads, *a, val(*a));
                    accumulate_product(g, gout, m);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = slot(grads, *a, val(*a));
                for ((x, &d), &s) in g.data_mut().iter_mut().zip(gout.data()).zip(y) {
                    *x = *x + d * s * (T::one() - s);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let g = slot(grads, *a, val(*a));
                for ((x, &d), &t) in g.data_mut().iter_mut().zip(gout.data()).zip(y) {
                    *x = *x + d * (T::one() - t * t);
                }
            }
            Op::Relu(a) => {
                let inp = val(*a).data();
                let g = slot(grads, *a, val(*a));
                for ((x, &d), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(inp) {
                    if v > T::zero() {
                        *x = *x + d;
                    }
                }
            }
            Op::Swish(a) => {
                let inp = val(*a).data();
                let g = slot(grads, *a, val(*a));
                for ((x, &d), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(inp) {
                    let s = sigmoid(v);
                    *x = *x + d * (s + v * s * (T::one() - s));
                }
            }
            Op::Glu(a) => {
                let inp = val(*a).data();
                let hc = gout.len();
                let g = slot(grads, *a, val(*a));
                let gd = g.data_mut();
                for i in 0..hc {
                    let top = inp[i];
                    let s = sigmoid(inp[hc + i]);
                    let d = gout.data()[i];
                    gd[i] = gd[i] + d * s;
                    gd[hc + i] = gd[hc + i] + d * top * s * (T::one() - s);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols().max(1);
                let g = slot(grads, *a, val(*a));
                for ((gr, yr), dr) in g
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(gout.data().chunks(c))
                {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((x, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *x = *x + p * (d - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (d, m) = xhat.dims();
                if want(*gain) {
                    let g = slot(grads, *gain, val(*gain));
                    for i in 0..d {
                        let mut acc = T::zero();
                        for j in 0..m {
                            acc = acc + gout.get(i, j) * xhat.get(i, j);
                        }
                        g.data_mut()[i] = g.data()[i] + acc;
                    }
                }
                if want(*bias) {
                    let g = slot(grads, *bias, val(*bias));
                    for i in 0..d {
                        let acc: T = gout.data()[i * m..(i + 1) * m].iter().copied().sum();
                        g.data_mut()[i] = g.data()[i] + acc;
                    }
                }
                if want(*x) {
                    let gv = val(*gain).data();
                    let dn = T::from_usize(d).unwrap();
                    let mut s1 = vec![T::zero(); m];
                    let mut s2 = vec![T::zero(); m];
                    for i in 0..d {
                        for j in 0..m {
                            let dxh = gout.get(i, j) * gv[i];
                            s1[j] = s1[j] + dxh;
                            s2[j] = s2[j] + dxh * xhat.get(i, j);
                        }
                    }
                    let g = slot(grads, *x, val(*x));
                    for i in 0..d {
                        for j in 0..m {
                            let dxh = gout.get(i, j) * gv[i];
                            let dx = rstd[j] / dn * (dn * dxh - s1[j] - xhat.get(i, j) * s2[j]);
                            let k = i * m + j;
                            g.data_mut()[k] = g.data()[k] + dx;
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (d, t) = val(*x).dims();
                let k = val(*w).cols();
                let half = k / 2;
                if want(*b) {
                    let g = slot(grads, *b, val(*b));
                    for ch in 0..d {
                        let acc: T = gout.data()[ch * t..(ch + 1) * t].iter().copied().sum();
                        g.data_mut()[ch] = g.data()[ch] + acc;
                    }
                }
                if want(*w) {
                    let xv = val(*x).data();
                    let g = slot(grads, *w, val(*w));
                    for ch in 0..d {
                        for i in 0..k {
                            let mut acc = T::zero();
                            for ti in 0..t {
                                let src = ti as isize + i as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    acc = acc + gout.data()[ch * t + ti] * xv[ch * t + src as usize];
                                }
                            }
                            g.data_mut()[ch * k + i] = g.data()[ch * k + i] + acc;
                        }
                    }
                }
                if want(*x) {
                    let wv = val(*w).data();
                    let g = slot(grads, *x, val(*x));
                    for ch in 0..d {
                        for ti in 0..t {
                            let go = gout.data()[ch * t + ti];
                            for i in 0..k {
                                let src = ti as isize + i as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    let s = ch * t + src as usize;
                                    g.data_mut()[s] = g.data()[s] + go * wv[ch * k + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let c = gout.cols();
                let g = slot(grads, *a, val(*a));
                let off = start * c;
                for (x, &d) in g.data_mut()[off..off + gout.len()].iter_mut().zip(gout.data()) {
                    *x = *x + d;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, len) = gout.dims();
                let c = val(*a).cols();
                let g = slot(grads, *a, val(*a));
                for i in 0..r {
                    for j in 0..len {
                        let k = i * c + start + j;
                        g.data_mut()[k] = g.data()[k] + gout.data()[i * len + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if want(p) {
                        let g = slot(grads, p, val(p));
                        for (x, &d) in g.data_mut().iter_mut().zip(&gout.data()[off..off + n]) {
                            *x = *x + d;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = gout.dims();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if want(p) {
                        let g = slot(grads, p, val(p));
                        for i in 0..r {
                            for j in 0..pc {
                                let k = i * pc + j;
                                g.data_mut()[k] = g.data()[k] + gout.data()[i * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SelectCols { a, idx } => {
                let c = val(*a).cols();
                let n = idx.len();
                let r = gout.rows();
                let g = slot(grads, *a, val(*a));
                for i in 0..r {
                    for (j, &src) in idx.iter().enumerate() {
                        let k = i * c + src;
                        g.data_mut()[k] = g.data()[k] + gout.data()[i * n + j];
                    }
                }
            }
            Op::Transpose(a) => {
                let g = slot(grads, *a, val(*a));
                g.add_assign(&gout.transpose());
            }
            Op::Sum(a) => {
                let d = gout.data()[0];
                let g = slot(grads, *a, val(*a));
                g.data_mut().iter_mut().for_each(|x| *x = *x + d);
            }
            Op::Bce {
                p,
                target,
                weight,
                norm,
            } => {
                let scale = gout.data()[0] / *norm;
                let pv = val(*p).data();
                let lo = T::from_f64_lossy(PROB_FLOOR);
                let hi = T::one() - lo;
                let g = slot(grads, *p, val(*p));
                for (k, x) in g.data_mut().iter_mut().enumerate() {
                    let pk = pv[k];
                    if pk < lo || pk > hi {
                        continue;
                    }
                    let y = target.data()[k];
                    let w = weight.as_ref().map_or(T::one(), |w| w.data()[k]);
                    let d = -(y / pk - (T::one() - y) / (T::one() - pk));
                    *x = *x + scale * w * d;
                }
            }
            Op::BceLogits {
                z,
                target,
                weight,
                norm,
            } => {
                let scale = gout.data()[0] / *norm;
                let zv = val(*z).data();
                let g = slot(grads, *z, val(*z));
                for (k, x) in g.data_mut().iter_mut().enumerate() {
                    let y = target.data()[k];
                    let w = weight.as_ref().map_or(T::one(), |w| w.data()[k]);
                    *x = *x + scale * w * (sigmoid(zv[k]) - y);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Backward<T> {
    node_grads: Vec<Option<Tensor<T>>>,
    params: Gradients<T>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient w.r.t. any node, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_param_grads(self) -> Gradients<T> {
        self.params
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
    like: &Tensor<T>,
) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn accumulate_product<T: Scalar>(g: &mut Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) {
    for ((x, &p), &q) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *x = *x + p * q;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Clamped BCE summed over elements.
pub fn bce_sum<T: Scalar>(p: &[T], y: &[T], w: Option<&[T]>) -> T {
    let lo = T::from_f64_lossy(PROB_FLOOR);
    let hi = T::one() - lo;
    let mut acc = T::zero();
    for k in 0..p.len() {
        let pk = p[k].max(lo).min(hi);
        let yk = y[k];
        let term = -(yk * pk.ln() + (T::one() - yk) * (T::one() - pk).ln());
        acc = acc + w.map_or(T::one(), |w| w[k]) * term;
    }
    acc
}
