//! LSTM encoder-decoder attractors, optionally fed the summary vector as
//! decoder input instead of zeros.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, LstmCell};
use crate::numerics::{sigmoid, Graph, Init, ParamStore, Scalar, Tensor, Var};

/// Default bound on decoding steps at inference.
pub const DEFAULT_HARD_CAP: usize = 20;

/// Attractor columns with their existence probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet<T: Scalar> {
    /// `D × K`.
    pub attractors: Tensor<T>,
    pub existence: Vec<f64>,
}

impl<T: Scalar> AttractorSet<T> {
    pub fn len(&self) -> usize {
        self.existence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.existence.is_empty()
    }

    /// The first `k` attractors.
    pub fn truncate(&self, k: usize) -> Self {
        Self {
            attractors: self.attractors.slice_cols(0, k),
            existence: self.existence[..k].to_vec(),
        }
    }
}

/// Attractors in graph form: `attractors` is `D × K`, `logits` is `1 × K`
/// pre-sigmoid existence scores.
#[derive(Clone, Copy, Debug)]
pub struct AttractorVars {
    pub attractors: Var,
    pub logits: Var,
}

impl AttractorVars {
    pub fn to_set<T: Scalar>(&self, g: &Graph<'_, T>) -> AttractorSet<T> {
        AttractorSet {
            attractors: g.value(self.attractors).clone(),
            existence: g
                .value(self.logits)
                .data()
                .iter()
                .map(|&z| sigmoid(z).to_f64_lossy())
                .collect(),
        }
    }
}

/// Final encoder LSTM state.
#[derive(Clone, Copy, Debug)]
pub struct EdaState {
    pub h: Var,
    pub c: Var,
}

/// Frame order fed to the encoder LSTM: a seeded shuffle, or natural order.
pub fn frame_order(t: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

/// Number of attractors accepted by the EDA stopping rule: `next_q(i)`
/// yields the existence probability of attractor `i`, and decoding stops at
/// the first `q <= threshold` or after `hard_cap` acceptances.
pub fn eda_count<F>(mut next_q: F, threshold: f64, hard_cap: usize) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut n = 0;
    while n < hard_cap {
        if next_q(n)? <= threshold {
            break;
        }
        n += 1;
    }
    Ok(n)
}

#[derive(Clone, Debug)]
pub struct Eda {
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub existence: Linear,
    pub dim: usize,
}

impl Eda {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize) -> Self {
        Self {
            encoder: LstmCell::new(&mut init.sub("encoder"), dim, dim),
            decoder: LstmCell::new(&mut init.sub("decoder"), dim, dim),
            existence: Linear::new(&mut init.sub("existence"), dim, 1),
            dim,
        }
    }

    /// Forget-gate bias of both LSTMs set to 1.
    pub fn init_forget_bias<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.encoder.set_forget_bias(store, 1.0);
        self.decoder.set_forget_bias(store, 1.0);
    }

    /// Runs the encoder LSTM over the columns of `e` in `order`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, e: Var, order: &[usize]) -> Result<EdaState> {
        let (d, t) = g.dims(e);
        if d != self.dim || t == 0 || order.len() != t {
            return Err(Error::Dimension(format!(
                "eda encode over {d}x{t} embeddings with {} ordered frames",
                order.len()
            )));
        }
        let xs = g.select_cols(e, order)?;
        let proj = self.encoder.project_inputs(g, xs)?;
        let mut h = g.constant(Tensor::zeros(&[d, 1]));
        let mut c = g.constant(Tensor::zeros(&[d, 1]));
        for i in 0..t {
            let p = g.slice_cols(proj, i, 1)?;
            (h, c) = self.encoder.step_projected(g, p, h, c)?;
        }
        Ok(EdaState { h, c })
    }

    fn decoder_input<T: Scalar>(&self, g: &mut Graph<'_, T>, csv: Option<Var>) -> Result<Var> {
        let x = match csv {
            Some(u) => u,
            None => g.constant(Tensor::zeros(&[self.dim, 1])),
        };
        self.decoder.project_inputs(g, x)
    }

    /// Exactly `k` decoding steps.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        state: EdaState,
        k: usize,
        csv: Option<Var>,
    ) -> Result<AttractorVars> {
        if k == 0 {
            return Err(Error::Domain("eda decode needs at least one step".into()));
        }
        let p = self.decoder_input(g, csv)?;
        let (mut h, mut c) = (state.h, state.c);
        let mut cols = Vec::with_capacity(k);
        for _ in 0..k {
            (h, c) = self.decoder.step_projected(g, p, h, c)?;
            cols.push(h);
        }
        let attractors = if k == 1 { cols[0] } else { g.concat_cols(&cols)? };
        let logits = self.existence.forward(g, attractors)?;
        Ok(AttractorVars { attractors, logits })
    }

    /// Decodes until the first existence probability `<= threshold` or
    /// until `hard_cap` attractors have been accepted.
    pub fn infer_count<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        state: EdaState,
        csv: Option<Var>,
        threshold: f64,
        hard_cap: usize,
    ) -> Result<AttractorSet<T>> {
        if hard_cap == 0 {
            return Err(Error::Config("eda hard cap must be at least 1".into()));
        }
        let p = self.decoder_input(g, csv)?;
        let (mut h, mut c) = (state.h, state.c);
        let mut cols = Vec::new();
        let mut existence = Vec::new();
        let n = eda_count(
            |_| {
                (h, c) = self.decoder.step_projected(g, p, h, c)?;
                let z = self.existence.forward(g, h)?;
                let q = sigmoid(g.scalar_value(z)).to_f64_lossy();
                cols.push(h);
                existence.push(q);
                Ok(q)
            },
            threshold,
            hard_cap,
        )?;
        cols.truncate(n);
        existence.truncate(n);
        let attractors = if cols.is_empty() {
            Tensor::zeros(&[self.dim, 0])
        } else {
            let data: Vec<Tensor<T>> = cols.iter().map(|&v| g.value(v).clone()).collect();
            Tensor::from_fn(self.dim, data.len(), |i, j| data[j].data()[i])
        };
        Ok(AttractorSet {
            attractors,
            existence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(dim: usize) -> (ParamStore<f64>, Eda) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eda = Eda::new(&mut Init::new(&mut store, &mut rng), dim);
        eda.init_forget_bias(&mut store);
        (store, eda)
    }

    fn embeddings(d: usize, t: usize) -> Tensor<f64> {
        Tensor::from_fn(d, t, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5)
    }

    #[test]
    fn shuffle_matters_only_past_one_frame() {
        let (store, eda) = build(4);
        let state_of = |t: usize, shuffle: bool| {
            let mut g = Graph::inference(&store);
            let e = g.constant(embeddings(4, t));
            let s = eda.encode(&mut g, e, &frame_order(t, shuffle, 5)).unwrap();
            g.value(s.h).clone()
        };
        assert_eq!(state_of(1, true), state_of(1, false));
        assert_eq!(state_of(50, true), state_of(50, true));
        assert!(state_of(50, true).max_abs_diff(&state_of(50, false)) > 1e-6);
    }

    #[test]
    fn decode_shapes_and_zero_csv() {
        let (store, eda) = build(4);
        let mut g = Graph::inference(&store);
        let e = g.constant(embeddings(4, 6));
        let s = eda.encode(&mut g, e, &frame_order(6, false, 0)).unwrap();
        let base = eda.decode(&mut g, s, 3, None).unwrap().to_set(&g);
        assert_eq!(base.attractors.dims(), (4, 3));
        assert_eq!(base.len(), 3);
        let zero = g.constant(Tensor::zeros(&[4, 1]));
        let with_zero = eda.decode(&mut g, s, 3, Some(zero)).unwrap().to_set(&g);
        assert_eq!(base, with_zero);
        let u = g.constant(Tensor::full(&[4, 1], 0.7));
        let with_u = eda.decode(&mut g, s, 3, Some(u)).unwrap().to_set(&g);
        assert!(base.attractors.max_abs_diff(&with_u.attractors) > 1e-6);
    }

    #[test]
    fn stopping_rule() {
        let count = |qs: &[f64], cap| eda_count(|i| Ok(qs[i]), 0.5, cap).unwrap();
        assert_eq!(count(&[0.3], 20), 0);
        assert_eq!(count(&[0.9, 0.8, 0.2], 20), 2);
        assert_eq!(count(&[0.9, 0.5, 0.9], 20), 1);
        assert_eq!(count(&[0.9, 0.9, 0.9, 0.9], 3), 3);
    }

    #[test]
    fn saturated_existence_stops_at_cap() {
        let (mut store, eda) = build(4);
        let b = eda.existence.bias.unwrap();
        store.value_mut(eda.existence.weight).fill(0.0);
        store.value_mut(b).fill(50.0);
        let mut g = Graph::inference(&store);
        let e = g.constant(embeddings(4, 3));
        let s = eda.encode(&mut g, e, &frame_order(3, false, 0)).unwrap();
        let set = eda.infer_count(&mut g, s, None, 0.5, 7).unwrap();
        assert_eq!(set.len(), 7);
        assert_eq!(set.attractors.dims(), (4, 7));
    }

    #[test]
    fn low_existence_stops_immediately() {
        let (mut store, eda) = build(4);
        let b = eda.existence.bias.unwrap();
        store.value_mut(eda.existence.weight).fill(0.0);
        store.value_mut(b).fill((0.3f64 / 0.7).ln());
        let mut g = Graph::inference(&store);
        let e = g.constant(embeddings(4, 3));
        let s = eda.encode(&mut g, e, &frame_order(3, false, 0)).unwrap();
        let set = eda.infer_count(&mut g, s, None, 0.5, 20).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.attractors.dims(), (4, 0));
    }
}
