//! Encoder plus attractor module, assembled from a configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attractors_eda::{frame_order, AttractorSet, AttractorVars, Eda, DEFAULT_HARD_CAP};
use crate::attractors_ta::{ta_infer_count, TaConfig, TransformerAttractors};
use crate::encoder::{EmbeddingMatrix, Encoded, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Init, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttractorKind {
    Eda,
    EdaCsv,
    Ta,
}

impl AttractorKind {
    pub fn name(self) -> &'static str {
        match self {
            AttractorKind::Eda => "eda",
            AttractorKind::EdaCsv => "eda_csv",
            AttractorKind::Ta => "ta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eda" => Ok(AttractorKind::Eda),
            "eda_csv" => Ok(AttractorKind::EdaCsv),
            "ta" => Ok(AttractorKind::Ta),
            other => Err(Error::Config(format!(
                "model.attractor must be eda, eda_csv or ta, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub attractor: AttractorKind,
    /// Attractor slots of the transformer module, excluding the extra one.
    pub max_speakers: usize,
    pub encoder: EncoderConfig,
    pub ta: TaConfig,
    pub eda_hard_cap: usize,
    /// Shuffle frames fed to the EDA encoder LSTM during training.
    pub eda_shuffle: bool,
    /// Dropout rate of every sublayer during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            attractor: AttractorKind::Ta,
            max_speakers: 4,
            encoder: EncoderConfig::default(),
            ta: TaConfig::default(),
            eda_hard_cap: DEFAULT_HARD_CAP,
            eda_shuffle: true,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_speakers == 0 {
            return Err(Error::Config("model.max_speakers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if self.eda_hard_cap == 0 {
            return Err(Error::Config("eda.hard_cap must be at least 1".into()));
        }
        match self.attractor {
            AttractorKind::EdaCsv if !self.encoder.use_csv_token => Err(Error::Config(
                "model.attractor = eda_csv requires encoder.use_csv_token = true".into(),
            )),
            AttractorKind::Ta => {
                self.ta.validate(self.encoder.model_dim)?;
                if self.ta.combiner.needs_csv() && !self.encoder.use_csv_token {
                    return Err(Error::Config(format!(
                        "ta.combiner = {} requires encoder.use_csv_token = true",
                        self.ta.combiner.name()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum AttractorModule {
    Eda(Eda),
    Ta(TransformerAttractors),
}

/// Inference output for one recording.
#[derive(Clone, Debug)]
pub struct Inference<T: Scalar> {
    /// `T × Ŝ` speech activity probabilities.
    pub posteriors: Tensor<f64>,
    pub attractors: AttractorSet<T>,
    pub num_speakers: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub attractor: AttractorModule,
}

impl Model {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let encoder = Encoder::new(&mut init.sub("encoder"), &cfg.encoder)?;
        let d = cfg.encoder.model_dim;
        let attractor = match cfg.attractor {
            AttractorKind::Eda | AttractorKind::EdaCsv => {
                AttractorModule::Eda(Eda::new(&mut init.sub("eda"), d))
            }
            AttractorKind::Ta => AttractorModule::Ta(TransformerAttractors::new(
                &mut init.sub("ta"),
                d,
                cfg.max_speakers,
                &cfg.ta,
            )?),
        };
        if let AttractorModule::Eda(eda) = &attractor {
            eda.init_forget_bias(store);
        }
        Ok(Self {
            config: cfg.clone(),
            encoder,
            attractor,
        })
    }

    /// Fresh parameter store and model.
    pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg, seed)?;
        Ok((store, model))
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Encoded> {
        self.encoder.forward(g, x)
    }

    fn attractor_csv(&self, csv: Option<Var>) -> Option<Var> {
        match (&self.attractor, self.config.attractor) {
            (AttractorModule::Eda(_), AttractorKind::Eda) => None,
            (AttractorModule::Ta(ta), _) if !ta.config.combiner.needs_csv() => None,
            _ => csv,
        }
    }

    /// The first `k` attractors and their existence logits. `order_seed`
    /// drives the EDA frame shuffle when enabled.
    pub fn attractors<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: Encoded,
        k: usize,
        order_seed: Option<u64>,
    ) -> Result<AttractorVars> {
        let csv = self.attractor_csv(enc.csv);
        match &self.attractor {
            AttractorModule::Eda(eda) => {
                let t = g.dims(enc.e).1;
                let order = frame_order(t, order_seed.is_some() && self.config.eda_shuffle, order_seed.unwrap_or(0));
                let state = eda.encode(g, enc.e, &order)?;
                eda.decode(g, state, k, csv)
            }
            AttractorModule::Ta(ta) => {
                let slots = ta.max_speakers + 1;
                if k > slots {
                    return Err(Error::Config(format!(
                        "{k} attractors requested but the transformer module has {slots} slots"
                    )));
                }
                let out = ta.forward(g, enc.e, csv)?;
                if k == slots {
                    return Ok(out);
                }
                Ok(AttractorVars {
                    attractors: g.slice_cols(out.attractors, 0, k)?,
                    logits: g.slice_cols(out.logits, 0, k)?,
                })
            }
        }
    }

    /// Counts speakers and returns the accepted attractors.
    pub fn infer_attractors<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: Encoded,
        exist_threshold: f64,
    ) -> Result<AttractorSet<T>> {
        let csv = self.attractor_csv(enc.csv);
        match &self.attractor {
            AttractorModule::Eda(eda) => {
                let t = g.dims(enc.e).1;
                let state = eda.encode(g, enc.e, &frame_order(t, false, 0))?;
                eda.infer_count(g, state, csv, exist_threshold, self.config.eda_hard_cap)
            }
            AttractorModule::Ta(ta) => {
                let set = ta.forward(g, enc.e, csv)?.to_set(g);
                Ok(set.truncate(ta_infer_count(&set.existence, exist_threshold)))
            }
        }
    }

    /// Full inference on `D' × T` features.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        exist_threshold: f64,
    ) -> Result<Inference<T>> {
        let mut g = Graph::inference(store);
        let x = g.constant(features.clone());
        let enc = self.encode(&mut g, x)?;
        let emb = EmbeddingMatrix::from_graph(&g, enc);
        self.infer_from_embeddings(store, &emb, exist_threshold)
    }

    /// Inference from cached encoder output.
    pub fn infer_from_embeddings<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        emb: &EmbeddingMatrix<T>,
        exist_threshold: f64,
    ) -> Result<Inference<T>> {
        let mut g = Graph::inference(store);
        let enc = emb.to_graph(&mut g);
        let attractors = self.infer_attractors(&mut g, enc, exist_threshold)?;
        let posteriors = posteriors(&attractors.attractors, &emb.e)?;
        Ok(Inference {
            num_speakers: attractors.len(),
            posteriors,
            attractors,
        })
    }
}

/// `sigmoid(Eᵀ A)`: `T × S` probabilities from `D × S` attractors and
/// `D × T` embeddings.
pub fn posteriors<T: Scalar>(attractors: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<f64>> {
    if attractors.rows() != e.rows() {
        return Err(Error::Dimension(format!(
            "attractors have {} rows, embeddings {}",
            attractors.rows(),
            e.rows()
        )));
    }
    let t = e.cols();
    let s = attractors.cols();
    if s == 0 {
        return Ok(Tensor::zeros(&[t, 0]));
    }
    let z = crate::numerics::matmul(e, true, attractors, false)?;
    Ok(Tensor::from_fn(t, s, |i, j| sigmoid(z.get(i, j)).to_f64_lossy()))
}
