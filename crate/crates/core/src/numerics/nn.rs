//! Neural building blocks shared by the encoder and attractor modules.

use super::{Graph, Init, ParamId, Scalar, Var};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-8;

/// Affine map `W x + b` applied to every column.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.uniform("weight", out_dim, in_dim, in_dim);
        let bias = Some(init.uniform("bias", out_dim, 1, in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.dims(x).0 != self.in_dim {
            return Err(Error::Dimension(format!(
                "linear expects {} input rows, got {}",
                self.in_dim,
                g.dims(x).0
            )));
        }
        let w = g.param(self.weight);
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_col(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Column-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize) -> Self {
        Self {
            gain: init.constant("gain", dim, 1, 1.0),
            bias: init.zeros("bias", dim, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Scaled dot-product attention with learned projections, split into heads
/// along the feature rows. No positional information is used.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model dimension {dim}"
            )));
        }
        Ok(Self {
            query: Linear::new(&mut init.sub("query"), dim, dim),
            key: Linear::new(&mut init.sub("key"), dim, dim),
            value: Linear::new(&mut init.sub("value"), dim, dim),
            output: Linear::new(&mut init.sub("output"), dim, dim),
            heads,
        })
    }

    /// `q` is `D × m`, `k` and `v` are `D × n`; returns `D × m`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let (dq, m) = g.dims(q);
        let (dk, n) = g.dims(k);
        if g.dims(v) != (dk, n) || dq != dk {
            return Err(Error::Dimension(format!(
                "attention query {:?}, key {:?}, value {:?}",
                g.dims(q),
                g.dims(k),
                g.dims(v)
            )));
        }
        if m == 0 || n == 0 {
            return Err(Error::Dimension("attention over an empty sequence".into()));
        }
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let head_dim = dq / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_rows(qp, h * head_dim, head_dim)?;
            let kh = g.slice_rows(kp, h * head_dim, head_dim)?;
            let vh = g.slice_rows(vp, h * head_dim, head_dim)?;
            // m × n scores, softmax over keys
            let s = g.matmul_t(qh, true, kh, false)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            outs.push(g.matmul_t(vh, false, p, true)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)?
        };
        self.output.forward(g, cat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

/// Two-layer position-wise feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        dim: usize,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        Self {
            inner: Linear::new(&mut init.sub("inner"), dim, hidden),
            outer: Linear::new(&mut init.sub("outer"), hidden, dim),
            activation,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Swish => g.swish(h),
        };
        let h = g.dropout(h);
        self.outer.forward(g, h)
    }
}

/// Single LSTM cell; gate rows are ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_dim: usize, hidden: usize) -> Self {
        let input = init.uniform("input", 4 * hidden, in_dim, hidden);
        let recurrent = init.uniform("recurrent", 4 * hidden, hidden, hidden);
        let bias = init.zeros("bias", 4 * hidden, 1);
        Self {
            input,
            recurrent,
            bias,
            in_dim,
            hidden,
        }
    }

    /// Sets the forget-gate bias rows to `value` (1.0 after construction).
    pub fn set_forget_bias<T: Scalar>(&self, store: &mut super::ParamStore<T>, value: f64) {
        let h = self.hidden;
        let b = store.value_mut(self.bias);
        for i in h..2 * h {
            b.data_mut()[i] = T::from_f64_lossy(value);
        }
    }

    /// `W_ih X + b` for every column of `xs` at once (`4H × T`).
    pub fn project_inputs<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: Var) -> Result<Var> {
        if g.dims(xs).0 != self.in_dim {
            return Err(Error::Dimension(format!(
                "lstm expects {} input rows, got {}",
                self.in_dim,
                g.dims(xs).0
            )));
        }
        let w = g.param(self.input);
        let b = g.param(self.bias);
        let p = g.matmul(w, xs)?;
        g.add_col(p, b)
    }

    /// One step from a pre-projected input column (`4H × 1`).
    pub fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        projected: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        if g.dims(h) != (hd, 1) || g.dims(c) != (hd, 1) {
            return Err(Error::Dimension(format!(
                "lstm state {:?}/{:?}, expected {hd}x1",
                g.dims(h),
                g.dims(c)
            )));
        }
        let wr = g.param(self.recurrent);
        let rec = g.matmul(wr, h)?;
        let gates = g.add(projected, rec)?;
        let i = g.slice_rows(gates, 0, hd)?;
        let f = g.slice_rows(gates, hd, hd)?;
        let cand = g.slice_rows(gates, 2 * hd, hd)?;
        let o = g.slice_rows(gates, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// One step from a raw input column `x` (`in_dim × 1`).
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        if g.dims(x) != (self.in_dim, 1) {
            return Err(Error::Dimension(format!(
                "lstm input {:?}, expected {}x1",
                g.dims(x),
                self.in_dim
            )));
        }
        let p = self.project_inputs(g, x)?;
        self.step_projected(g, p, h, c)
    }
}
