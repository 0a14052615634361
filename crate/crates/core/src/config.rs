//! Flat `key = value` run configuration with dotted section names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attractors_ta::CombinerKind;
use crate::error::{Error, Result};
use crate::model::{AttractorKind, ModelConfig};
use crate::numerics::Schedule;
use crate::scoring::InferenceConfig;
use crate::simulator::SimulationConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub t_values: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t_values: vec![250, 500, 1000, 2000],
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    /// Input manifest for `infer` and reference manifest for `score`.
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub hyp_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub sim: SimulationConfig,
    /// Mixtures written by `simulate`.
    pub sim_count: usize,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            sim: SimulationConfig::default(),
            sim_count: 100,
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Documented keys: name, description.
pub const KEY_REFERENCE: &[(&str, &str)] = &[
    ("seed", "base seed for initialization, simulation and training"),
    ("jobs", "worker threads for simulate, train, infer and score"),
    ("model.attractor", "eda | eda_csv | ta"),
    ("model.max_speakers", "transformer attractor slots S (S+1 are decoded)"),
    ("model.dropout", "dropout rate of every sublayer during training"),
    ("encoder.input_dim", "feature dimension D'"),
    ("encoder.num_blocks", "Conformer blocks"),
    ("encoder.model_dim", "model dimension D"),
    ("encoder.heads", "attention heads"),
    ("encoder.ff_dim", "feed-forward hidden units"),
    ("encoder.conv_kernel", "depthwise convolution kernel (odd)"),
    ("encoder.use_csv_token", "prepend the summary token (true | false)"),
    ("ta.num_layers", "transformer decoder blocks N_D"),
    ("ta.heads", "decoder attention heads"),
    ("ta.ff_dim", "decoder feed-forward hidden units"),
    ("ta.combiner", "none | add | mult | amp"),
    ("ta.alpha", "amplitude of the amp combiner"),
    ("eda.hard_cap", "maximum attractors decoded at inference"),
    ("eda.shuffle", "shuffle frames into the EDA encoder during training"),
    ("epochs", "training epochs"),
    ("lambda", "existence loss weight"),
    ("crop_frames", "training crop length in frames (0 = whole recording)"),
    ("optimizer.mode", "adam-fixed | adam-noam"),
    ("optimizer.lr", "learning rate (noam: base factor)"),
    ("optimizer.warmup", "noam warm-up steps"),
    ("train.batch_size", "mixtures per optimizer step"),
    ("train.grad_clip", "global gradient-norm clip (0 = off)"),
    ("train.average_best", "checkpoints averaged by validation DER"),
    ("train.pit_hungarian", "optimal-assignment PIT instead of exhaustive search"),
    ("train.rotate_features", "random feature-space rotation per crop (synthetic data only)"),
    ("infer.diar_threshold", "speech activity threshold"),
    ("infer.exist_threshold", "attractor existence threshold"),
    ("infer.collar", "scoring collar in seconds"),
    ("infer.min_segment", "drop hypothesis segments shorter than this (seconds)"),
    ("sim.n", "mixtures written by simulate"),
    ("sim.min_speakers", "smallest speaker count"),
    ("sim.max_speakers", "largest speaker count"),
    ("sim.beta.<k>", "mean pause in seconds for k-speaker mixtures"),
    ("sim.duration", "mixture length in seconds"),
    ("sim.feature_dim", "synthetic feature dimension"),
    ("sim.noise_sigma", "synthetic feature noise"),
    ("bench.t_values", "comma-separated frame counts"),
    ("bench.repeats", "timed repeats per measurement"),
    ("paths.train_manifest", "training manifest"),
    ("paths.valid_manifest", "validation manifest"),
    ("paths.manifest", "input manifest for infer, reference manifest for score"),
    ("paths.checkpoint", "checkpoint loaded by infer"),
    ("paths.hyp_dir", "hypothesis RTTM directory for score"),
    ("paths.output_dir", "output directory"),
];

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back exactly
    format!("{v:?}")
}

fn opt_path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl RunConfig {
    /// Every key with its value; unset paths are omitted.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("jobs", self.jobs.to_string());
        put("model.attractor", m.attractor.name().into());
        put("model.max_speakers", m.max_speakers.to_string());
        put("model.dropout", fmt_f64(m.dropout));
        put("encoder.input_dim", e.input_dim.to_string());
        put("encoder.num_blocks", e.num_blocks.to_string());
        put("encoder.model_dim", e.model_dim.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.ff_dim", e.ff_dim.to_string());
        put("encoder.conv_kernel", e.conv_kernel.to_string());
        put("encoder.use_csv_token", e.use_csv_token.to_string());
        put("ta.num_layers", m.ta.num_layers.to_string());
        put("ta.heads", m.ta.heads.to_string());
        put("ta.ff_dim", m.ta.ff_dim.to_string());
        put("ta.combiner", m.ta.combiner.name().into());
        if let CombinerKind::Amp(a) = m.ta.combiner {
            put("ta.alpha", fmt_f64(a));
        }
        put("eda.hard_cap", m.eda_hard_cap.to_string());
        put("eda.shuffle", m.eda_shuffle.to_string());
        put("epochs", t.epochs.to_string());
        put("lambda", fmt_f64(t.lambda));
        put("crop_frames", t.crop_frames.to_string());
        match t.optimizer.schedule {
            Schedule::Fixed => put("optimizer.mode", "adam-fixed".into()),
            Schedule::Noam { warmup } => {
                put("optimizer.mode", "adam-noam".into());
                put("optimizer.warmup", warmup.to_string());
            }
        }
        put("optimizer.lr", fmt_f64(t.optimizer.lr));
        put("train.batch_size", t.batch_size.to_string());
        put("train.grad_clip", fmt_f64(t.grad_clip));
        put("train.average_best", t.average_best.to_string());
        put("train.pit_hungarian", t.pit_hungarian.to_string());
        put("train.rotate_features", t.rotate_features.to_string());
        put("infer.diar_threshold", fmt_f64(self.infer.diar_threshold));
        put("infer.exist_threshold", fmt_f64(self.infer.exist_threshold));
        put("infer.collar", fmt_f64(self.infer.collar_s));
        put("infer.min_segment", fmt_f64(self.infer.min_segment_s));
        put("sim.n", self.sim_count.to_string());
        put("sim.min_speakers", self.sim.min_speakers.to_string());
        put("sim.max_speakers", self.sim.max_speakers.to_string());
        for (k, b) in &self.sim.betas {
            put(&format!("sim.beta.{k}"), fmt_f64(*b));
        }
        put("sim.duration", fmt_f64(self.sim.duration_s));
        put("sim.feature_dim", self.sim.feature_dim.to_string());
        put("sim.noise_sigma", fmt_f64(self.sim.noise_sigma));
        put(
            "bench.t_values",
            self.bench.t_values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("bench.repeats", self.bench.repeats.to_string());
        let p = &self.paths;
        for (k, v) in [
            ("paths.train_manifest", &p.train_manifest),
            ("paths.valid_manifest", &p.valid_manifest),
            ("paths.manifest", &p.manifest),
            ("paths.checkpoint", &p.checkpoint),
            ("paths.hyp_dir", &p.hyp_dir),
            ("paths.output_dir", &p.output_dir),
        ] {
            if let Some(s) = opt_path(v) {
                put(k, s);
            }
        }
        out
    }

    /// `key = value` lines in sorted key order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `text`, starting from defaults. Unknown keys, duplicates and
    /// malformed values are parse errors carrying the line number.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if kv.insert(k.clone(), (i + 1, v)).is_some() {
                return Err(perr(format!("duplicate key {k}")));
            }
        }
        let mut cfg = RunConfig::default();
        // explicit beta entries replace the default table
        if kv.keys().any(|k| k.starts_with("sim.beta.")) {
            cfg.sim.betas.clear();
        }
        let mut alpha = 1.0;
        let mut combiner = cfg.model.ta.combiner.name().to_string();
        let mut mode = "adam-fixed".to_string();
        let mut warmup: Option<u64> = None;
        for (k, (line, v)) in &kv {
            let perr = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: *line,
                msg: format!("{k}: {msg}"),
            };
            let num = |v: &str| v.parse::<usize>().map_err(|_| perr(format!("expected a count, got {v:?}")));
            let real = |v: &str| v.parse::<f64>().map_err(|_| perr(format!("expected a number, got {v:?}")));
            let flag = |v: &str| v.parse::<bool>().map_err(|_| perr(format!("expected true or false, got {v:?}")));
            let path = |v: &str| Ok::<_, Error>(Some(PathBuf::from(v)));
            let m = &mut cfg.model;
            match k.as_str() {
                "seed" => cfg.seed = v.parse().map_err(|_| perr(format!("expected an integer, got {v:?}")))?,
                "jobs" => cfg.jobs = num(v)?,
                "model.attractor" => m.attractor = AttractorKind::parse(v).map_err(|e| perr(e.to_string()))?,
                "model.max_speakers" => m.max_speakers = num(v)?,
                "model.dropout" => m.dropout = real(v)?,
                "encoder.input_dim" => m.encoder.input_dim = num(v)?,
                "encoder.num_blocks" => m.encoder.num_blocks = num(v)?,
                "encoder.model_dim" => m.encoder.model_dim = num(v)?,
                "encoder.heads" => m.encoder.heads = num(v)?,
                "encoder.ff_dim" => m.encoder.ff_dim = num(v)?,
                "encoder.conv_kernel" => m.encoder.conv_kernel = num(v)?,
                "encoder.use_csv_token" => m.encoder.use_csv_token = flag(v)?,
                "ta.num_layers" => m.ta.num_layers = num(v)?,
                "ta.heads" => m.ta.heads = num(v)?,
                "ta.ff_dim" => m.ta.ff_dim = num(v)?,
                "ta.combiner" => combiner = v.clone(),
                "ta.alpha" => alpha = real(v)?,
                "eda.hard_cap" => m.eda_hard_cap = num(v)?,
                "eda.shuffle" => m.eda_shuffle = flag(v)?,
                "epochs" => cfg.train.epochs = num(v)?,
                "lambda" => cfg.train.lambda = real(v)?,
                "crop_frames" => cfg.train.crop_frames = num(v)?,
                "optimizer.mode" => mode = v.clone(),
                "optimizer.lr" => cfg.train.optimizer.lr = real(v)?,
                "optimizer.warmup" => warmup = Some(num(v)? as u64),
                "train.batch_size" => cfg.train.batch_size = num(v)?,
                "train.grad_clip" => cfg.train.grad_clip = real(v)?,
                "train.average_best" => cfg.train.average_best = num(v)?,
                "train.pit_hungarian" => cfg.train.pit_hungarian = flag(v)?,
                "train.rotate_features" => cfg.train.rotate_features = flag(v)?,
                "infer.diar_threshold" => cfg.infer.diar_threshold = real(v)?,
                "infer.exist_threshold" => cfg.infer.exist_threshold = real(v)?,
                "infer.collar" => cfg.infer.collar_s = real(v)?,
                "infer.min_segment" => cfg.infer.min_segment_s = real(v)?,
                "sim.n" => cfg.sim_count = num(v)?,
                "sim.min_speakers" => cfg.sim.min_speakers = num(v)?,
                "sim.max_speakers" => cfg.sim.max_speakers = num(v)?,
                "sim.duration" => cfg.sim.duration_s = real(v)?,
                "sim.feature_dim" => cfg.sim.feature_dim = num(v)?,
                "sim.noise_sigma" => cfg.sim.noise_sigma = real(v)?,
                "bench.t_values" => {
                    cfg.bench.t_values = v
                        .split(',')
                        .map(|s| num(s.trim()))
                        .collect::<Result<_>>()?
                }
                "bench.repeats" => cfg.bench.repeats = num(v)?,
                "paths.train_manifest" => cfg.paths.train_manifest = path(v)?,
                "paths.valid_manifest" => cfg.paths.valid_manifest = path(v)?,
                "paths.manifest" => cfg.paths.manifest = path(v)?,
                "paths.checkpoint" => cfg.paths.checkpoint = path(v)?,
                "paths.hyp_dir" => cfg.paths.hyp_dir = path(v)?,
                "paths.output_dir" => cfg.paths.output_dir = path(v)?,
                other => match other.strip_prefix("sim.beta.") {
                    Some(count) => {
                        let c = count
                            .parse::<usize>()
                            .map_err(|_| perr("speaker count must be an integer".into()))?;
                        cfg.sim.betas.insert(c, real(v)?);
                    }
                    None => return Err(perr("unknown key".into())),
                },
            }
        }
        cfg.model.ta.combiner = match combiner.as_str() {
            "none" => CombinerKind::None,
            "add" => CombinerKind::Add,
            "mult" => CombinerKind::Mult,
            "amp" => CombinerKind::Amp(alpha),
            other => {
                return Err(Error::Config(format!(
                    "ta.combiner must be none, add, mult or amp, got {other:?}"
                )))
            }
        };
        cfg.train.optimizer.schedule = match mode.as_str() {
            "adam-fixed" => Schedule::Fixed,
            "adam-noam" => Schedule::Noam {
                warmup: warmup.unwrap_or(100_000),
            },
            other => {
                return Err(Error::Config(format!(
                    "optimizer.mode must be adam-fixed or adam-noam, got {other:?}"
                )))
            }
        };
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.sim.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.bench.t_values.is_empty() || self.bench.t_values.contains(&0) {
            return Err(Error::Config("bench.t_values must list positive frame counts".into()));
        }
        Ok(())
    }

    /// Table of documented keys with their default values.
    pub fn key_reference() -> String {
        let defaults = RunConfig::default().entries();
        let mut s = String::new();
        for (k, doc) in KEY_REFERENCE {
            let d = defaults.get(*k).cloned().unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{k:<24} {d:<12} {doc}");
        }
        s
    }
}
