//! Permutation-invariant diarization loss, existence loss, and the
//! training loop with checkpoint averaging.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assignment::{min_cost_assignment, permutations};
use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::features::{FrameTiming, LabelMatrix, SegmentList};
use crate::model::Model;
use crate::numerics::checkpoint::save_params;
use crate::numerics::{
    bce_sum, matmul, sigmoid, Adam, AdamConfig, Gradients, Graph, ParamStore, Scalar, Tensor, Var,
    PROB_FLOOR,
};
use crate::scoring::{binarize, der_totals, DerTotals, FileScore, InferenceConfig};
use crate::simulator::{speaker_signatures, SyntheticMixture};

/// Largest speaker count searched exhaustively by [`pit_loss`].
pub const EXHAUSTIVE_PIT_LIMIT: usize = 4;

/// Clamps probabilities into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn clamp_posteriors(p: &Tensor<f64>) -> Tensor<f64> {
    p.map(|v| v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PitSearch {
    /// All `S!` permutations; limited to [`EXHAUSTIVE_PIT_LIMIT`] speakers.
    Exhaustive,
    /// Optimal assignment on the per-speaker cost matrix (exact, since the
    /// loss is a sum of per-pair terms).
    Hungarian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    /// Mean binary cross entropy under the best permutation.
    pub loss: f64,
    /// `permutation[j]` is the prediction column matched to label column `j`.
    pub permutation: Vec<usize>,
}

/// `cost[j][k]` = summed BCE of prediction column `k` against label column `j`.
pub fn pit_cost_matrix(p: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    if p.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "posteriors {:?} vs labels {:?}",
            p.dims(),
            y.dims()
        )));
    }
    let s = p.cols();
    Ok((0..s)
        .map(|j| {
            let yj = y.col_vec(j);
            (0..s).map(|k| bce_sum(&p.col_vec(k), &yj, None)).collect()
        })
        .collect())
}

/// Order-independent sum, so relabeling speakers cannot change the result.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Minimum over speaker permutations of the mean BCE over `T · S` terms.
pub fn pit_loss(p: &Tensor<f64>, y: &Tensor<f64>, search: PitSearch) -> Result<PitResult> {
    let cost = pit_cost_matrix(p, y)?;
    let (t, s) = p.dims();
    if s == 0 || t == 0 {
        return Ok(PitResult {
            loss: 0.0,
            permutation: Vec::new(),
        });
    }
    let total = |perm: &[usize]| sorted_sum((0..s).map(|j| cost[j][perm[j]]).collect());
    let permutation = match search {
        PitSearch::Exhaustive => {
            if s > EXHAUSTIVE_PIT_LIMIT {
                return Err(Error::Config(format!(
                    "{s} speakers exceed the exhaustive permutation limit of \
                     {EXHAUSTIVE_PIT_LIMIT}; enable train.pit_hungarian"
                )));
            }
            let mut best: Option<(f64, Vec<usize>)> = None;
            for perm in permutations(s) {
                let v = total(&perm);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, perm));
                }
            }
            best.expect("at least one permutation").1
        }
        PitSearch::Hungarian => min_cost_assignment(&cost)
            .into_iter()
            .map(|k| k.expect("square cost matrix"))
            .collect(),
    };
    Ok(PitResult {
        loss: total(&permutation) / (t * s) as f64,
        permutation,
    })
}

/// Existence targets: `S'` ones followed by one zero.
pub fn existence_targets(num_speakers: usize) -> Vec<f64> {
    let mut l = vec![1.0; num_speakers];
    l.push(0.0);
    l
}

/// Mean BCE between `q` (length `S'+1`) and `[1, …, 1, 0]`.
pub fn exist_loss(q: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Dimension("existence loss needs at least one probability".into()));
    }
    let l = existence_targets(q.len() - 1);
    Ok(bce_sum(q, &l, None) / q.len() as f64)
}

/// `diar + lambda · exist`.
pub fn total_loss(diar: f64, exist: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(diar + lambda * exist)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub diar: f64,
    pub exist: f64,
    pub total: f64,
    pub best_permutation: Vec<usize>,
}

/// Graph nodes of one mixture's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub diar: Var,
    pub exist: Option<Var>,
    pub total: Var,
}

/// PIT diarization term for the first `S'` attractors against `y`
/// (`T × S'`). Returns the loss node and best permutation.
pub fn diarization_term<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Var,
    attractors: Var,
    y: &Tensor<f64>,
    search: PitSearch,
) -> Result<(Var, Vec<usize>)> {
    let (t, s) = y.dims();
    if s == 0 {
        return Ok((g.constant(Tensor::scalar(T::zero())), Vec::new()));
    }
    let a = g.slice_cols(attractors, 0, s)?;
    let z = g.matmul_t(e, true, a, false)?;
    if g.dims(z).0 != t {
        return Err(Error::Dimension(format!(
            "{} embedding frames vs {t} label frames",
            g.dims(z).0
        )));
    }
    let p = g.value(z).map(sigmoid).cast::<f64>();
    let pit = pit_loss(&p, y, search)?;
    let zp = g.select_cols(z, &pit.permutation)?;
    let loss = g.bce_with_logits(zp, y.cast(), None, (t * s) as f64)?;
    Ok((loss, pit.permutation))
}

/// Existence term on attractors recomputed from detached encoder outputs,
/// so its gradient stops at the attractor module input.
pub fn existence_term<T: Scalar>(
    model: &Model,
    g: &mut Graph<'_, T>,
    enc: Encoded,
    num_speakers: usize,
    order_seed: u64,
) -> Result<Var> {
    let cut = Encoded {
        e: g.detach(enc.e),
        csv: enc.csv.map(|c| g.detach(c)),
    };
    let k = num_speakers + 1;
    let attr = model.attractors(g, cut, k, Some(order_seed))?;
    let target = Tensor::from_fn(1, k, |_, j| T::from_f64_lossy(existence_targets(num_speakers)[j]));
    g.bce_with_logits(attr.logits, target, None, k as f64)
}

/// Forward graph of the full training loss for one mixture.
pub fn mixture_loss<T: Scalar>(
    model: &Model,
    g: &mut Graph<'_, T>,
    features: &Tensor<T>,
    y: &Tensor<f64>,
    lambda: f64,
    search: PitSearch,
    order_seed: u64,
) -> Result<(LossVars, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let x = g.constant(features.clone());
    let enc = model.encode(g, x)?;
    let s = y.cols();
    let attr = model.attractors(g, enc, s + 1, Some(order_seed))?;
    let (diar, perm) = diarization_term(g, enc.e, attr.attractors, y, search)?;
    let (exist, exist_value, total) = if lambda > 0.0 {
        let ex = existence_term(model, g, enc, s, order_seed)?;
        let scaled = g.scale(ex, lambda);
        let total = g.add(diar, scaled)?;
        (Some(ex), g.scalar_value(ex).to_f64_lossy(), total)
    } else {
        let q: Vec<f64> = g.value(attr.logits).data().iter().map(|&z| sigmoid(z).to_f64_lossy()).collect();
        (None, exist_loss(&q)?, diar)
    };
    let diar_value = g.scalar_value(diar).to_f64_lossy();
    Ok((
        LossVars { diar, exist, total },
        LossBreakdown {
            diar: diar_value,
            exist: exist_value,
            total: total_loss(diar_value, exist_value, lambda)?,
            best_permutation: perm,
        },
    ))
}

/// A recording prepared for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// `D' × T`.
    pub features: Tensor<f64>,
    pub labels: LabelMatrix,
    pub reference: SegmentList,
}

impl Example {
    pub fn from_mixture(m: &SyntheticMixture) -> Self {
        Self {
            id: m.id.clone(),
            features: m.features.features.clone(),
            labels: m.labels.clone(),
            reference: m.segments.clone(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.features.cols()
    }

    pub fn num_speakers(&self) -> usize {
        self.reference.speakers().len()
    }

    /// Random crop of at most `crop_frames`, keeping the `max_speakers`
    /// most active speakers that are active inside the crop.
    pub fn crop(&self, crop_frames: usize, max_speakers: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
        let t = self.num_frames();
        let (start, len) = if crop_frames > 0 && t > crop_frames {
            (rng.random_range(0..=t - crop_frames), crop_frames)
        } else {
            (0, t)
        };
        let labels = self.labels.crop(start, len).without_silent_speakers();
        let mut order: Vec<usize> = (0..labels.num_speakers()).collect();
        order.sort_by_key(|&s| std::cmp::Reverse(labels.active_frames(s)));
        order.truncate(max_speakers);
        order.sort_unstable();
        (self.features.slice_cols(start, len), labels.labels.select_cols(&order))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub optimizer: AdamConfig,
    pub crop_frames: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Checkpoints averaged into the final model.
    pub average_best: usize,
    pub pit_hungarian: bool,
    /// Apply a fresh random orthogonal rotation to each training crop's
    /// feature space. Valid only for isotropic synthetic features, where
    /// it yields new speaker signatures with unchanged statistics.
    pub rotate_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lambda: 1.0,
            optimizer: AdamConfig::default(),
            crop_frames: 500,
            batch_size: 8,
            grad_clip: 5.0,
            seed: 0,
            average_best: 10,
            pit_hungarian: false,
            rotate_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    fn search(&self) -> PitSearch {
        if self.pit_hungarian {
            PitSearch::Hungarian
        } else {
            PitSearch::Exhaustive
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub diar_loss: f64,
    pub exist_loss: f64,
    pub total_loss: f64,
    pub val_der: Option<f64>,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch\tdiar_loss\texist_loss\ttotal\tval_der";

    pub fn to_line(&self) -> String {
        let der = self.val_der.map_or("-".to_string(), |d| format!("{d:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{der}",
            self.epoch, self.diar_loss, self.exist_loss, self.total_loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub metrics: Vec<EpochMetrics>,
    /// Written checkpoint files with their validation DER.
    pub checkpoints: Vec<(PathBuf, Option<f64>)>,
    /// Mean of the best checkpoints by validation DER, when validated.
    pub averaged: Option<Vec<(String, Tensor<T>)>>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over a simple combination
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one cropped mixture.
/// Haar-distributed `dim × dim` orthogonal matrix.
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let rows = speaker_signatures(dim, dim, rng);
    Tensor::from_fn(dim, dim, |i, j| rows[i][j])
}

fn example_gradients<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    ex: &Example,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Gradients<T>, LossBreakdown)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, y) = ex.crop(cfg.crop_frames, model.config.max_speakers, &mut rng);
    if cfg.rotate_features {
        x = matmul(&random_rotation(x.rows(), &mut rng), false, &x, false)?;
    }
    let mut g = Graph::new(store).with_dropout(model.config.dropout, seed ^ 0xD5);
    let (vars, br) = mixture_loss(model, &mut g, &x.cast(), &y, cfg.lambda, cfg.search(), seed)?;
    if !br.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss on {}", ex.id)));
    }
    Ok((g.backward(vars.total).into_param_grads(), br))
}

/// Posteriors, estimated count and hypothesis segments for one recording.
pub fn hypothesize<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    id: &str,
    features: &Tensor<f64>,
    timing: FrameTiming,
    cfg: &InferenceConfig,
) -> Result<(SegmentList, usize)> {
    let inf = model.infer(store, &features.cast(), cfg.exist_threshold)?;
    let speakers: Vec<String> = (0..inf.num_speakers).map(|s| format!("spk{s}")).collect();
    let labels = LabelMatrix {
        labels: binarize(&inf.posteriors, cfg.diar_threshold),
        timing,
        speakers,
    };
    Ok((labels.to_segments(id, cfg.min_segment_s), inf.num_speakers))
}

/// Scores every example against its reference.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    examples: &[Example],
    cfg: &InferenceConfig,
) -> Result<Vec<FileScore>> {
    examples
        .par_iter()
        .map(|ex| {
            let (hyp, n) = hypothesize(model, store, &ex.id, &ex.features, ex.labels.timing, cfg)?;
            let (totals, _) = der_totals(&ex.reference, &hyp, cfg)?;
            Ok(FileScore {
                file: ex.id.clone(),
                totals,
                ref_speakers: ex.num_speakers(),
                hyp_speakers: n,
            })
        })
        .collect()
}

/// Corpus DER over scored files.
pub fn aggregate_der(scores: &[FileScore]) -> Result<f64> {
    let mut t = DerTotals::default();
    for s in scores {
        t.add(&s.totals);
    }
    Ok(t.report()?.der)
}

/// Parameter-wise mean of the `k` checkpoints with the lowest score.
pub fn average_checkpoints<T: Scalar>(
    checkpoints: &[(Vec<(String, Tensor<T>)>, f64)],
    k: usize,
) -> Result<Vec<(String, Tensor<T>)>> {
    if k == 0 || checkpoints.len() < k {
        return Err(Error::Input(format!(
            "averaging {k} checkpoints but {} available",
            checkpoints.len()
        )));
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by(|&a, &b| checkpoints[a].1.total_cmp(&checkpoints[b].1));
    let chosen = &order[..k];
    let first = &checkpoints[chosen[0]].0;
    let mut out: Vec<(String, Tensor<f64>)> = first.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    for &c in &chosen[1..] {
        let other = &checkpoints[c].0;
        if other.len() != out.len() {
            return Err(Error::Load("checkpoints hold different tensor sets".into()));
        }
        for ((name, acc), (oname, t)) in out.iter_mut().zip(other) {
            if name != oname || acc.shape() != t.shape() {
                return Err(Error::Load(format!("checkpoint tensor {oname} does not match {name}")));
            }
            acc.add_assign(&t.cast());
        }
    }
    let inv = 1.0 / k as f64;
    Ok(out
        .into_iter()
        .map(|(n, mut t)| {
            t.scale_assign(inv);
            (n, t.cast())
        })
        .collect())
}

/// Trains `store` in place. Checkpoints and the metrics log go to `out_dir`
/// when given.
pub fn train<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    infer_cfg: &InferenceConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", EpochMetrics::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut adam = Adam::new(cfg.optimizer.clone(), store);
    let mut outcome = TrainOutcome {
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        averaged: None,
    };
    let mut best: Vec<(Vec<(String, Tensor<T>)>, f64)> = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0)));
        let (mut diar, mut exist, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Gradients<T>, LossBreakdown)>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = mix_seed(cfg.seed, epoch as u64, i as u64 + 1);
                    example_gradients(model, store, &train_set[i], cfg, seed)
                })
                .collect();
            let mut sum = Gradients::empty(store.len());
            for r in results {
                let (grads, br) = r?;
                sum.add(&grads);
                diar += br.diar;
                exist += br.exist;
                total += br.total;
            }
            sum.scale(T::from_f64_lossy(1.0 / batch.len() as f64));
            if !sum.all_finite() {
                return Err(Error::Divergence(format!("non-finite gradient in epoch {epoch}")));
            }
            let norm = sum.global_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                sum.scale(T::from_f64_lossy(cfg.grad_clip / norm));
            }
            store.zero_grad();
            store.accumulate(&sum);
            adam.step(store)?;
        }
        let n = train_set.len() as f64;
        let val_der = if valid_set.is_empty() {
            None
        } else {
            Some(aggregate_der(&evaluate(model, store, valid_set, infer_cfg)?)?)
        };
        let m = EpochMetrics {
            epoch,
            diar_loss: diar / n,
            exist_loss: exist / n,
            total_loss: total / n,
            val_der,
        };
        log::info!("{}", m.to_line());
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", m.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch{epoch:04}.ckpt"));
            save_params(store, &path)?;
            outcome.checkpoints.push((path, val_der));
        }
        if let Some(d) = val_der {
            if cfg.average_best > 0 {
                best.push((store.named_values(), d));
                best.sort_by(|a, b| a.1.total_cmp(&b.1));
                best.truncate(cfg.average_best);
            }
        }
        outcome.metrics.push(m);
    }
    if !best.is_empty() {
        let k = best.len();
        let avg = average_checkpoints(&best, k)?;
        if let Some(dir) = out_dir {
            let mut tmp = store.clone();
            tmp.load_values(&avg)?;
            save_params(&tmp, &dir.join("averaged.ckpt"))?;
        }
        outcome.averaged = Some(avg);
    }
    Ok(outcome)
}
