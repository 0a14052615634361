//! The pipeline behind each `diar` subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::features::{labels_from_segments, read_rttm, write_rttm, FeatureSequence};
use crate::model::{posteriors, AttractorKind, Model, ModelConfig};
use crate::numerics::checkpoint::{load_params, read_tensors, write_tensors};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::scoring::{der_totals, format_score_report, FileScore};
use crate::simulator::make_dataset;
use crate::training::{hypothesize, train, Example, TrainOutcome};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const COUNTS_NAME: &str = "counts.tsv";
pub const CONFIG_NAME: &str = "config.txt";
pub const AVERAGED_NAME: &str = "averaged.ckpt";

/// One mixture of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub rttm: PathBuf,
    pub num_speakers: usize,
}

/// Parses `id features rttm num_speakers` lines. Relative paths are taken
/// relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(perr(format!("expected 4 fields, got {}", f.len())));
        }
        let num_speakers = f[3]
            .parse()
            .map_err(|_| perr(format!("bad speaker count {:?}", f[3])))?;
        out.push(ManifestEntry {
            id: f[0].to_string(),
            features: base.join(f[1]),
            rttm: base.join(f[2]),
            num_speakers,
        });
    }
    Ok(out)
}

/// Writes entries with paths stored as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("# id features rttm num_speakers\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{} {} {} {}",
            e.id,
            e.features.display(),
            e.rttm.display(),
            e.num_speakers
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::from_tensors(read_tensors(path)?)
}

pub fn write_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    write_tensors(path, &f.to_tensors())
}

/// Loads features and reference segments of one manifest entry.
pub fn load_example(entry: &ManifestEntry) -> Result<Example> {
    let seq = read_features(&entry.features)?;
    let reference = read_rttm(&entry.rttm)?;
    let speakers = reference.speakers();
    let labels = labels_from_segments(&reference, seq.timing(), &speakers)?;
    Ok(Example {
        id: entry.id.clone(),
        features: seq.features,
        labels,
        reference,
    })
}

pub fn load_examples(manifest: &Path) -> Result<Vec<Example>> {
    read_manifest(manifest)?.par_iter().map(load_example).collect()
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing key {key}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `sim.n` mixtures under `out_dir` and returns the manifest path.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.sim.validate()?;
    let mixtures = make_dataset(&cfg.sim, cfg.sim_count, cfg.seed)?;
    create_dir(&out_dir.join("features"))?;
    create_dir(&out_dir.join("rttm"))?;
    let entries = mixtures
        .par_iter()
        .map(|m| {
            let feat = PathBuf::from("features").join(format!("{}.feat", m.id));
            let rttm = PathBuf::from("rttm").join(format!("{}.rttm", m.id));
            write_features(&out_dir.join(&feat), &m.features)?;
            write_rttm(&m.segments, &out_dir.join(&rttm))?;
            Ok(ManifestEntry {
                id: m.id.clone(),
                features: feat,
                rttm,
                num_speakers: m.true_num_speakers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(MANIFEST_NAME);
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Trains from `paths.train_manifest`, validating on `paths.valid_manifest`
/// when set. Checkpoints, `metrics.tsv` and the effective config go to
/// `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let train_set = load_examples(required(&cfg.paths.train_manifest, "paths.train_manifest")?)?;
    let valid_set = match &cfg.paths.valid_manifest {
        Some(p) => load_examples(p)?,
        None => Vec::new(),
    };
    create_dir(out_dir)?;
    let cfg_path = out_dir.join(CONFIG_NAME);
    fs::write(&cfg_path, cfg.serialize()).map_err(|e| Error::io(&cfg_path, e))?;
    let (mut store, model) = Model::build::<f32>(&cfg.model, cfg.seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    train(&model, &mut store, &train_set, &valid_set, &tc, &cfg.infer, Some(out_dir))
}

/// Builds the configured model and loads `checkpoint` into it.
pub fn load_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<(ParamStore<f32>, Model)> {
    let (mut store, model) = Model::build::<f32>(cfg, 0)?;
    load_params(&mut store, checkpoint)?;
    Ok((store, model))
}

/// Writes one RTTM per manifest entry plus `counts.tsv`; returns
/// `(id, Ŝ)` pairs in manifest order.
pub fn cmd_infer(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let (store, model) = load_model(&cfg.model, required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let entries = read_manifest(required(&cfg.paths.manifest, "paths.manifest")?)?;
    create_dir(out_dir)?;
    let counts = entries
        .par_iter()
        .map(|e| {
            let seq = read_features(&e.features)?;
            let (hyp, n) = hypothesize(&model, &store, &e.id, &seq.features, seq.timing(), &cfg.infer)?;
            write_rttm(&hyp, &out_dir.join(format!("{}.rttm", e.id)))?;
            Ok((e.id.clone(), n))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::from("id\tnum_speakers\n");
    for (id, n) in &counts {
        let _ = writeln!(s, "{id}\t{n}");
    }
    let path = out_dir.join(COUNTS_NAME);
    fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(counts)
}

/// `(id, Ŝ)` pairs from a counts file; empty when the file is absent.
pub fn read_counts(path: &Path) -> Result<Vec<(String, usize)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut f = l.split('\t');
            match (f.next(), f.next().and_then(|n| n.trim().parse().ok())) {
                (Some(id), Some(n)) => Ok((id.to_string(), n)),
                _ => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected `id<TAB>count`, got {l:?}"),
                }),
            }
        })
        .collect()
}

/// Scores `paths.hyp_dir/{id}.rttm` against the references of
/// `paths.manifest`.
pub fn cmd_score(cfg: &RunConfig) -> Result<(Vec<FileScore>, String)> {
    cfg.infer.validate()?;
    let entries = read_manifest(required(&cfg.paths.manifest, "paths.manifest")?)?;
    let hyp_dir = required(&cfg.paths.hyp_dir, "paths.hyp_dir")?;
    let counts = read_counts(&hyp_dir.join(COUNTS_NAME))?;
    let scores = entries
        .par_iter()
        .map(|e| {
            let reference = read_rttm(&e.rttm)?;
            let mut hyp = read_rttm(&hyp_dir.join(format!("{}.rttm", e.id)))?;
            hyp.recording_id = reference.recording_id.clone();
            let (totals, _) = der_totals(&reference, &hyp, &cfg.infer)?;
            Ok(FileScore {
                file: e.id.clone(),
                totals,
                ref_speakers: e.num_speakers,
                // silent attractors leave no trace in the RTTM
                hyp_speakers: counts
                    .iter()
                    .find(|(id, _)| *id == e.id)
                    .map_or(hyp.speakers().len(), |(_, n)| *n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = format_score_report(&scores)?;
    Ok((scores, report))
}

/// Trainable parameters per top-level module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub attractor: AttractorKind,
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamReport {
    pub fn format(&self) -> String {
        let mut s = format!("# model.attractor = {}\nmodule\tparams\n", self.attractor.name());
        for (m, n) in &self.modules {
            let _ = writeln!(s, "{m}\t{n}");
        }
        let _ = writeln!(s, "total\t{}\t({:.2}M)", self.total, self.total as f64 / 1e6);
        s
    }
}

pub fn cmd_params(model: &ModelConfig) -> Result<ParamReport> {
    let (store, _) = Model::build::<f32>(model, 0)?;
    let mut modules: Vec<(String, usize)> = Vec::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let top = p.name.split('.').next().unwrap_or("").to_string();
        match modules.iter_mut().find(|(m, _)| *m == top) {
            Some((_, n)) => *n += p.value.len(),
            None => modules.push((top, p.value.len())),
        }
    }
    Ok(ParamReport {
        attractor: model.attractor,
        total: store.num_trainable(),
        modules,
    })
}

/// Median seconds per recording at one input length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    pub eda_attractor_s: f64,
    pub ta_attractor_s: f64,
    pub eda_full_s: f64,
    pub ta_full_s: f64,
}

impl BenchRow {
    /// TA throughput over EDA throughput with the encoder output cached.
    pub fn attractor_ratio(&self) -> f64 {
        self.eda_attractor_s / self.ta_attractor_s
    }

    /// TA throughput over EDA throughput for the whole model.
    pub fn full_ratio(&self) -> f64 {
        self.eda_full_s / self.ta_full_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repeats: usize,
    pub num_attractors: usize,
    /// Log-log slopes of time against frames: eda attractor, ta attractor,
    /// eda full, ta full. Absent with fewer than two frame counts.
    pub growth: Option<[f64; 4]>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn format(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        let _ = writeln!(
            s,
            "# median of {} runs, {} attractors decoded, one worker",
            self.repeats, self.num_attractors
        );
        let _ = writeln!(
            s,
            "frames\tmodule\teda_mix_per_s\tta_mix_per_s\tratio_ta_eda"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\tattractor\t{:.3}\t{:.3}\t{:.3}",
                r.frames,
                1.0 / r.eda_attractor_s,
                1.0 / r.ta_attractor_s,
                r.attractor_ratio()
            );
            let _ = writeln!(
                s,
                "{}\tfull\t{:.3}\t{:.3}\t{:.3}",
                r.frames,
                1.0 / r.eda_full_s,
                1.0 / r.ta_full_s,
                r.full_ratio()
            );
        }
        if let Some(g) = self.growth {
            let _ = writeln!(
                s,
                "growth_exponent\teda_attractor={:.3}\tta_attractor={:.3}\teda_full={:.3}\tta_full={:.3}",
                g[0], g[1], g[2], g[3]
            );
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Bencher {
    store: ParamStore<f32>,
    model: Model,
    k: usize,
}

impl Bencher {
    fn attractor_only(&self, emb: &EmbeddingMatrix<f32>) -> Result<Tensor<f64>> {
        let mut g = Graph::inference(&self.store);
        let enc = emb.to_graph(&mut g);
        let a = self.model.attractors(&mut g, enc, self.k, None)?;
        posteriors(g.value(a.attractors), &emb.e)
    }

    fn full(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let enc = self.model.encode(&mut g, xv)?;
        let e = g.value(enc.e).clone();
        let a = self.model.attractors(&mut g, enc, self.k, None)?;
        posteriors(g.value(a.attractors), &e)
    }

    fn embed(&self, x: &Tensor<f32>) -> Result<EmbeddingMatrix<f32>> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let enc = self.model.encode(&mut g, xv)?;
        Ok(EmbeddingMatrix::from_graph(&g, enc))
    }
}

fn timed<F: FnMut() -> Result<Tensor<f64>>>(mut f: F) -> Result<f64> {
    let t0 = Instant::now();
    let out = f()?;
    let dt = t0.elapsed().as_secs_f64();
    std::hint::black_box(out);
    Ok(dt)
}

/// Times EDA against TA built from the configured encoder. Both decode
/// `model.max_speakers + 1` attractors so they do equal work per slot.
/// Runs on a single worker thread.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.model.encoder.validate()?;
    if cfg.bench.repeats == 0 {
        return Err(Error::Config("bench.repeats must be at least 1".into()));
    }
    if cfg.bench.t_values.is_empty() || cfg.bench.t_values.contains(&0) {
        return Err(Error::Config("bench.t_values must list positive frame counts".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| bench_inner(cfg))
}

fn bench_inner(cfg: &RunConfig) -> Result<BenchReport> {
    let mut warnings = Vec::new();
    if cfg.bench.repeats < 5 {
        let w = format!(
            "{} repeats; medians of fewer than 5 runs are unstable",
            cfg.bench.repeats
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    let k = cfg.model.max_speakers + 1;
    let build = |kind: AttractorKind| -> Result<Bencher> {
        let mc = ModelConfig {
            attractor: kind,
            ..cfg.model.clone()
        };
        let (store, model) = Model::build::<f32>(&mc, cfg.seed)?;
        Ok(Bencher { store, model, k })
    };
    let eda = build(AttractorKind::Eda)?;
    let ta = build(AttractorKind::Ta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &t in &cfg.bench.t_values {
        let d = cfg.model.encoder.input_dim;
        let x = Tensor::<f32>::from_fn(d, t, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        let eda_emb = eda.embed(&x)?;
        let ta_emb = ta.embed(&x)?;
        // warm-up
        eda.attractor_only(&eda_emb)?;
        ta.attractor_only(&ta_emb)?;
        eda.full(&x)?;
        ta.full(&x)?;
        let mut times = [(); 4].map(|_| Vec::with_capacity(cfg.bench.repeats));
        for _ in 0..cfg.bench.repeats {
            times[0].push(timed(|| eda.attractor_only(&eda_emb))?);
            times[1].push(timed(|| ta.attractor_only(&ta_emb))?);
            times[2].push(timed(|| eda.full(&x))?);
            times[3].push(timed(|| ta.full(&x))?);
        }
        let [a, b, c, e] = times.map(|mut v| median(&mut v));
        rows.push(BenchRow {
            frames: t,
            eda_attractor_s: a,
            ta_attractor_s: b,
            eda_full_s: c,
            ta_full_s: e,
        });
    }
    let growth = (rows.len() >= 2).then(|| {
        let x: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
        let col = |f: fn(&BenchRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        [
            loglog_slope(&x, &col(|r| r.eda_attractor_s)),
            loglog_slope(&x, &col(|r| r.ta_attractor_s)),
            loglog_slope(&x, &col(|r| r.eda_full_s)),
            loglog_slope(&x, &col(|r| r.ta_full_s)),
        ]
    });
    Ok(BenchReport {
        rows,
        repeats: cfg.bench.repeats,
        num_attractors: k,
        growth,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            id: "mix00000".into(),
            features: "features/mix00000.feat".into(),
            rttm: "rttm/mix00000.rttm".into(),
            num_speakers: 2,
        }];
        let path = dir.path().join("m.tsv");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].features, dir.path().join("features/mix00000.feat"));
        assert_eq!(back[0].num_speakers, 2);
    }
}
