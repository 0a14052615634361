//! Conformer encoder producing framewise embeddings and, optionally, a
//! conversational summary vector from a prepended learnable token.

use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, Init, ParamId, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub use_csv_token: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 23,
            num_blocks: 4,
            model_dim: 256,
            heads: 4,
            ff_dim: 1024,
            conv_kernel: 15,
            use_csv_token: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.heads = {} does not divide encoder.model_dim = {}",
                self.heads, self.model_dim
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder.conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// Encoder output in graph form: `e` is `D × T`, `csv` is `D × 1`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub e: Var,
    pub csv: Option<Var>,
}

/// Encoder output as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T: Scalar> {
    pub e: Tensor<T>,
    pub csv: Option<Tensor<T>>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn from_graph(g: &Graph<'_, T>, enc: Encoded) -> Self {
        Self {
            e: g.value(enc.e).clone(),
            csv: enc.csv.map(|c| g.value(c).clone()),
        }
    }

    /// Re-enters the tensors into `g` as constants.
    pub fn to_graph(&self, g: &mut Graph<'_, T>) -> Encoded {
        Encoded {
            e: g.constant(self.e.clone()),
            csv: self.csv.as_ref().map(|c| g.constant(c.clone())),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.e.cols()
    }
}

/// Pointwise → GLU → depthwise → LN → swish → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub depthwise_norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut init.sub("norm"), dim),
            pointwise_in: Linear::new(&mut init.sub("pointwise_in"), dim, 2 * dim),
            depthwise_weight: init.uniform("depthwise.weight", dim, kernel, kernel),
            depthwise_bias: init.uniform("depthwise.bias", dim, 1, kernel),
            depthwise_norm: LayerNorm::new(&mut init.sub("depthwise_norm"), dim),
            pointwise_out: Linear::new(&mut init.sub("pointwise_out"), dim, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.pointwise_in.forward(g, h)?;
        let h = g.glu(h)?;
        let w = g.param(self.depthwise_weight);
        let b = g.param(self.depthwise_bias);
        let h = g.depthwise_conv(h, w, b)?;
        let h = self.depthwise_norm.forward(g, h)?;
        let h = g.swish(h);
        let h = self.pointwise_out.forward(g, h)?;
        Ok(g.dropout(h))
    }
}

/// Macaron block: ½FF → MHSA → conv → ½FF → LN, residual around each.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1_norm: LayerNorm,
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ff1_norm: LayerNorm::new(&mut init.sub("ff1_norm"), d),
            ff1: FeedForward::new(&mut init.sub("ff1"), d, cfg.ff_dim, Activation::Swish),
            attn_norm: LayerNorm::new(&mut init.sub("attn_norm"), d),
            attn: MultiHeadAttention::new(&mut init.sub("attn"), d, cfg.heads)?,
            conv: ConvModule::new(&mut init.sub("conv"), d, cfg.conv_kernel),
            ff2_norm: LayerNorm::new(&mut init.sub("ff2_norm"), d),
            ff2: FeedForward::new(&mut init.sub("ff2"), d, cfg.ff_dim, Activation::Swish),
            final_norm: LayerNorm::new(&mut init.sub("final_norm"), d),
        })
    }

    fn half_ff<T: Scalar>(
        g: &mut Graph<'_, T>,
        norm: &LayerNorm,
        ff: &FeedForward,
        x: Var,
    ) -> Result<Var> {
        let h = norm.forward(g, x)?;
        let h = ff.forward(g, h)?;
        let h = g.dropout(h);
        let h = g.scale(h, 0.5);
        g.add(x, h)
    }

    /// `h` is `D × (T + 1)` when `csv_column` is set, with the token in
    /// column 0; that column skips the convolution module.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, csv_column: bool) -> Result<Var> {
        let x = Self::half_ff(g, &self.ff1_norm, &self.ff1, h)?;

        let a = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, a, a, a)?;
        let a = g.dropout(a);
        let x = g.add(x, a)?;

        let (d, cols) = g.dims(x);
        let c = if csv_column {
            let frames = g.slice_cols(x, 1, cols - 1)?;
            let c = self.conv.forward(g, frames)?;
            let pad = g.constant(Tensor::zeros(&[d, 1]));
            g.concat_cols(&[pad, c])?
        } else {
            self.conv.forward(g, x)?
        };
        let x = g.add(x, c)?;

        let x = Self::half_ff(g, &self.ff2_norm, &self.ff2, x)?;
        self.final_norm.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub csv_token: Option<ParamId>,
    pub blocks: Vec<ConformerBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(&mut init.sub("input"), cfg.input_dim, cfg.model_dim);
        let csv_token = cfg
            .use_csv_token
            .then(|| init.uniform("csv_token", cfg.model_dim, 1, cfg.model_dim));
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::new(&mut init.sub(&format!("block{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            input,
            csv_token,
            blocks,
        })
    }

    /// `x` is `D' × T`. Returns `E` (`D × T`) and the summary vector.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Encoded> {
        let (rows, t) = g.dims(x);
        if rows != self.config.input_dim {
            return Err(Error::Config(format!(
                "encoder expects {}-dim features, got {rows}",
                self.config.input_dim
            )));
        }
        if t == 0 {
            return Err(Error::Dimension("encoder input has no frames".into()));
        }
        let mut h = self.input.forward(g, x)?;
        if let Some(tok) = self.csv_token {
            let tok = g.param(tok);
            h = g.concat_cols(&[tok, h])?;
        }
        for block in &self.blocks {
            h = block.forward(g, h, self.csv_token.is_some())?;
        }
        if self.csv_token.is_some() {
            Ok(Encoded {
                csv: Some(g.slice_cols(h, 0, 1)?),
                e: g.slice_cols(h, 1, t)?,
            })
        } else {
            Ok(Encoded { e: h, csv: None })
        }
    }
}
