//! Transformer attractors: a combiner mixes the summary vector into learned
//! global embeddings, and a transformer decoder attends to the framewise
//! embeddings to emit all attractors in one pass.

use crate::attractors_eda::AttractorVars;
use crate::error::{Error, Result};
use crate::numerics::nn::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, Init, ParamId, Scalar, Var};

/// How the summary vector conditions the global embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CombinerKind {
    None,
    Add,
    Mult,
    /// Gate `alpha * sigmoid(u)`.
    Amp(f64),
}

impl CombinerKind {
    pub fn needs_csv(self) -> bool {
        !matches!(self, CombinerKind::None)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            CombinerKind::Amp(a) if !(a > 0.0) => Err(Error::Config(format!(
                "amp combiner needs alpha > 0, got {a}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CombinerKind::None => "none",
            CombinerKind::Add => "add",
            CombinerKind::Mult => "mult",
            CombinerKind::Amp(_) => "amp",
        }
    }
}

/// Decoder input `I0` from the summary vector `csv` (`D × 1`) and the
/// global embeddings `global` (`D × (S+1)`).
pub fn combine<T: Scalar>(
    g: &mut Graph<'_, T>,
    csv: Option<Var>,
    global: Var,
    kind: CombinerKind,
) -> Result<Var> {
    kind.validate()?;
    if kind == CombinerKind::None {
        return Ok(global);
    }
    let u = csv.ok_or_else(|| {
        Error::Config(format!("{} combiner needs a summary vector", kind.name()))
    })?;
    match kind {
        CombinerKind::Add => g.add_col(global, u),
        CombinerKind::Mult => g.mul_col(global, u),
        CombinerKind::Amp(alpha) => {
            let s = g.sigmoid(u);
            let gate = g.scale(s, alpha);
            g.mul_col(global, gate)
        }
        CombinerKind::None => unreachable!(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub combiner: CombinerKind,
}

impl Default for TaConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            heads: 4,
            ff_dim: 1024,
            combiner: CombinerKind::Amp(1.0),
        }
    }
}

impl TaConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("ta.num_layers must be at least 1".into()));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "ta.heads = {} does not divide model dimension {dim}",
                self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ta.ff_dim must be positive".into()));
        }
        self.combiner.validate()
    }
}

/// Self-attention over slots, cross-attention into the embeddings, then
/// feed-forward; each followed by residual and layer norm.
#[derive(Clone, Debug)]
pub struct TaDecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl TaDecoderBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, cfg: &TaConfig) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut init.sub("self_attn"), dim, cfg.heads)?,
            self_norm: LayerNorm::new(&mut init.sub("self_norm"), dim),
            cross_attn: MultiHeadAttention::new(&mut init.sub("cross_attn"), dim, cfg.heads)?,
            cross_norm: LayerNorm::new(&mut init.sub("cross_norm"), dim),
            ff: FeedForward::new(&mut init.sub("ff"), dim, cfg.ff_dim, Activation::Relu),
            ff_norm: LayerNorm::new(&mut init.sub("ff_norm"), dim),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, slots: Var, e: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, slots, slots, slots)?;
        let a = g.dropout(a);
        let z = g.add(a, slots)?;
        let z = self.self_norm.forward(g, z)?;

        let c = self.cross_attn.forward(g, z, e, e)?;
        let c = g.dropout(c);
        let z2 = g.add(c, z)?;
        let z2 = self.cross_norm.forward(g, z2)?;

        let f = self.ff.forward(g, z2)?;
        let f = g.dropout(f);
        let out = g.add(f, z2)?;
        self.ff_norm.forward(g, out)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerAttractors {
    pub config: TaConfig,
    /// `D × (S+1)` learned slot embeddings.
    pub global: ParamId,
    pub blocks: Vec<TaDecoderBlock>,
    pub existence: Linear,
    pub dim: usize,
    pub max_speakers: usize,
}

impl TransformerAttractors {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        dim: usize,
        max_speakers: usize,
        cfg: &TaConfig,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        if max_speakers == 0 {
            return Err(Error::Config("max_speakers must be at least 1".into()));
        }
        let global = init.uniform("global", dim, max_speakers + 1, dim);
        let blocks = (0..cfg.num_layers)
            .map(|i| TaDecoderBlock::new(&mut init.sub(&format!("block{i}")), dim, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            global,
            blocks,
            existence: Linear::new(&mut init.sub("existence"), dim, 1),
            dim,
            max_speakers,
        })
    }

    /// Combiner output `I0`.
    pub fn initial_slots<T: Scalar>(&self, g: &mut Graph<'_, T>, csv: Option<Var>) -> Result<Var> {
        let global = g.param(self.global);
        combine(g, csv, global, self.config.combiner)
    }

    /// Decodes from explicit slots `i0` (`D × K`).
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, i0: Var, e: Var) -> Result<AttractorVars> {
        let (d, t) = g.dims(e);
        if d != self.dim || g.dims(i0).0 != self.dim {
            return Err(Error::Config(format!(
                "transformer attractors of dim {} got embeddings {d}x{t} and slots {:?}",
                self.dim,
                g.dims(i0)
            )));
        }
        if t == 0 {
            return Err(Error::Dimension("no frames to attend to".into()));
        }
        let mut slots = i0;
        for block in &self.blocks {
            slots = block.forward(g, slots, e)?;
        }
        let logits = self.existence.forward(g, slots)?;
        Ok(AttractorVars {
            attractors: slots,
            logits,
        })
    }

    /// All `S+1` attractors.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        e: Var,
        csv: Option<Var>,
    ) -> Result<AttractorVars> {
        let i0 = self.initial_slots(g, csv)?;
        self.decode(g, i0, e)
    }
}

/// Length of the longest prefix with existence probability above
/// `threshold`.
pub fn ta_infer_count(existence: &[f64], threshold: f64) -> usize {
    existence.iter().take_while(|&&q| q > threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_rule() {
        assert_eq!(ta_infer_count(&[0.9, 0.8, 0.6, 0.4, 0.2], 0.5), 3);
        assert_eq!(ta_infer_count(&[0.4, 0.9, 0.9, 0.9, 0.9], 0.5), 0);
        assert_eq!(ta_infer_count(&[0.9, 0.3, 0.7, 0.2, 0.1], 0.5), 1);
        assert_eq!(ta_infer_count(&[0.9, 0.5], 0.5), 1);
    }

    #[test]
    fn amp_alpha_must_be_positive() {
        assert!(CombinerKind::Amp(0.0).validate().is_err());
        assert!(CombinerKind::Amp(-1.0).validate().is_err());
        assert!(CombinerKind::Amp(1.0).validate().is_ok());
    }
}
