//! Run configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionFlags};
use crate::guidance::{GuidanceVariant, PromptTemplate, DEFAULT_PATTERN, DEFAULT_TEXT_DIM};
use crate::losses::OptimConfig;
use crate::metrics::{EvalConfig, Strategy, Task};
use crate::scenegraph::Vocabulary;
use crate::synth::GenConfig;

/// How With Constraints groups predicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintMode {
    /// One argmax per predicate category.
    Category,
    /// One argmax per pair over all predicates.
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    Stub,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub seed: u64,
    pub dim: usize,
    pub path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            seed: 0,
            dim: DEFAULT_TEXT_DIM,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub top_k: usize,
    pub budget: usize,
    pub iou_threshold: f64,
    pub constraints: ConstraintMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            ks: d.ks,
            strategies: d.strategies,
            top_k: d.top_k,
            budget: d.budget,
            iou_threshold: d.iou_threshold,
            constraints: ConstraintMode::Category,
        }
    }
}

impl EvalSettings {
    pub fn for_task(&self, task: Task, vocabulary: &Vocabulary) -> EvalConfig {
        EvalConfig {
            ks: self.ks.clone(),
            strategies: self.strategies.clone(),
            top_k: self.top_k,
            budget: self.budget,
            iou_threshold: self.iou_threshold,
            task,
            constraint_groups: match self.constraints {
                ConstraintMode::Category => vocabulary
                    .category_groups()
                    .into_iter()
                    .map(|(_, ids)| ids)
                    .filter(|ids| !ids.is_empty())
                    .collect(),
                ConstraintMode::Pair => Vec::new(),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Validate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub gen: GenConfig,
    pub fusion: FusionConfig,
    pub flags: FusionFlags,
    pub guidance: GuidanceVariant,
    pub optim: OptimConfig,
    pub eval: EvalSettings,
    pub provider: ProviderConfig,
    pub prompt: String,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            task: Task::PredCls,
            epochs: 30,
            batch_size: 4,
            split: [0.8, 0.1, 0.1],
            eval_every: 0,
            gen: GenConfig::default(),
            fusion: FusionConfig::default(),
            flags: FusionFlags::default(),
            guidance: GuidanceVariant::TemporalDifference,
            optim: OptimConfig::default(),
            eval: EvalSettings::default(),
            provider: ProviderConfig::default(),
            prompt: DEFAULT_PATTERN.to_string(),
            paths: Paths::default(),
        }
    }
}

fn on_off(v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got {v:?}"))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "task" => self.task = Task::parse(v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "split" => {
                let s: Vec<f64> = list(key, v)?;
                self.split = s
                    .try_into()
                    .map_err(|_| Error::Config("split needs three fractions".into()))?;
            }
            "prompt" => self.prompt = v.to_string(),
            "gen.seed" => self.gen.seed = num(key, v)?,
            "gen.num_videos" => self.gen.num_videos = num(key, v)?,
            "gen.frames_per_video" => self.gen.frames_per_video = num(key, v)?,
            "gen.pairs_per_frame" => self.gen.pairs_per_frame = num(key, v)?,
            "gen.entity_classes" => self.gen.entity_class_count = num(key, v)?,
            "gen.predicate_partition" => {
                let p: Vec<usize> = list(key, v)?;
                self.gen.predicate_partition = p
                    .try_into()
                    .map_err(|_| Error::Config("predicate_partition needs three counts".into()))?;
            }
            "gen.change_rate" => self.gen.change_rate = num(key, v)?,
            "gen.change_rate_mix" => {
                self.gen.change_rate_mix = if v.is_empty() { Vec::new() } else { list(key, v)? }
            }
            "gen.subtlety" => self.gen.subtlety = num(key, v)?,
            "gen.pair_dropout" => self.gen.pair_dropout = num(key, v)?,
            "gen.box_jitter" => self.gen.detector_noise.box_jitter = num(key, v)?,
            "gen.class_confusion" => self.gen.detector_noise.class_confusion = num(key, v)?,
            "gen.visual_dim" => self.gen.visual_dim = num(key, v)?,
            "gen.crop_dim" => self.gen.crop_dim = num(key, v)?,
            "fusion.d_model" => self.fusion.d_model = num(key, v)?,
            "fusion.spatial_layers" => self.fusion.spatial_layers = num(key, v)?,
            "fusion.temporal_layers" => self.fusion.temporal_layers = num(key, v)?,
            "fusion.heads" => self.fusion.heads = num(key, v)?,
            "fusion.ff_dim" => self.fusion.ff_dim = num(key, v)?,
            "fusion.dropout" => self.fusion.dropout = num(key, v)?,
            "fusion.max_temporal_positions" => self.fusion.max_temporal_positions = num(key, v)?,
            "fusion.semantic_dim" => self.fusion.semantic_dim = num(key, v)?,
            "ablation.guidance" => self.guidance = GuidanceVariant::parse(v)?,
            "ablation.spatial" => self.flags.spatial = on_off(v)?,
            "ablation.temporal_decoder" => self.flags.temporal_decoder = on_off(v)?,
            "ablation.message_token" => self.flags.message_token = on_off(v)?,
            "optim.lr" => self.optim.learning_rate = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.focal_gamma" => self.optim.focal_gamma = num(key, v)?,
            "optim.focal_alpha" => self.optim.focal_alpha = num(key, v)?,
            "optim.lambda" => self.optim.lambda = if v == "auto" { None } else { Some(num(key, v)?) },
            "eval.ks" => self.eval.ks = list(key, v)?,
            "eval.strategies" => {
                self.eval.strategies = v.split(',').map(|s| Strategy::parse(s.trim())).collect::<Result<_>>()?
            }
            "eval.top_k" => self.eval.top_k = num(key, v)?,
            "eval.budget" => self.eval.budget = num(key, v)?,
            "eval.iou_threshold" => self.eval.iou_threshold = num(key, v)?,
            "eval.constraints" => {
                self.eval.constraints = match v {
                    "category" => ConstraintMode::Category,
                    "pair" => ConstraintMode::Pair,
                    _ => return Err(Error::Config(format!("eval.constraints: expected category or pair, got {v:?}"))),
                }
            }
            "provider.kind" => {
                self.provider.kind = match v {
                    "stub" => ProviderKind::Stub,
                    "file" => ProviderKind::File,
                    _ => return Err(Error::Config(format!("provider.kind: expected stub or file, got {v:?}"))),
                }
            }
            "provider.seed" => self.provider.seed = num(key, v)?,
            "provider.dim" => self.provider.dim = num(key, v)?,
            "provider.path" => self.provider.path = opt_path(v),
            "paths.dataset" => self.paths.dataset = opt_path(v),
            "paths.embeddings" => self.paths.embeddings = opt_path(v),
            "paths.output" => self.paths.output = opt_path(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected key = value"))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key in canonical order; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let g = &self.gen;
        let f = &self.fusion;
        let o = &self.optim;
        let e = &self.eval;
        kv("seed", self.seed.to_string());
        kv("task", self.task.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("split", join(&self.split));
        kv("prompt", self.prompt.clone());
        kv("gen.seed", g.seed.to_string());
        kv("gen.num_videos", g.num_videos.to_string());
        kv("gen.frames_per_video", g.frames_per_video.to_string());
        kv("gen.pairs_per_frame", g.pairs_per_frame.to_string());
        kv("gen.entity_classes", g.entity_class_count.to_string());
        kv("gen.predicate_partition", join(&g.predicate_partition));
        kv("gen.change_rate", g.change_rate.to_string());
        kv("gen.change_rate_mix", join(&g.change_rate_mix));
        kv("gen.subtlety", g.subtlety.to_string());
        kv("gen.pair_dropout", g.pair_dropout.to_string());
        kv("gen.box_jitter", g.detector_noise.box_jitter.to_string());
        kv("gen.class_confusion", g.detector_noise.class_confusion.to_string());
        kv("gen.visual_dim", g.visual_dim.to_string());
        kv("gen.crop_dim", g.crop_dim.to_string());
        kv("fusion.d_model", f.d_model.to_string());
        kv("fusion.spatial_layers", f.spatial_layers.to_string());
        kv("fusion.temporal_layers", f.temporal_layers.to_string());
        kv("fusion.heads", f.heads.to_string());
        kv("fusion.ff_dim", f.ff_dim.to_string());
        kv("fusion.dropout", f.dropout.to_string());
        kv("fusion.max_temporal_positions", f.max_temporal_positions.to_string());
        kv("fusion.semantic_dim", f.semantic_dim.to_string());
        kv("ablation.guidance", self.guidance.name().to_string());
        kv("ablation.spatial", flag(self.flags.spatial).into());
        kv("ablation.temporal_decoder", flag(self.flags.temporal_decoder).into());
        kv("ablation.message_token", flag(self.flags.message_token).into());
        kv("optim.lr", o.learning_rate.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.focal_gamma", o.focal_gamma.to_string());
        kv("optim.focal_alpha", o.focal_alpha.to_string());
        kv("optim.lambda", o.lambda.map_or("auto".to_string(), |l| l.to_string()));
        kv("eval.ks", join(&e.ks));
        kv("eval.strategies", join(&e.strategies));
        kv("eval.top_k", e.top_k.to_string());
        kv("eval.budget", e.budget.to_string());
        kv("eval.iou_threshold", e.iou_threshold.to_string());
        kv(
            "eval.constraints",
            match e.constraints {
                ConstraintMode::Category => "category",
                ConstraintMode::Pair => "pair",
            }
            .into(),
        );
        kv(
            "provider.kind",
            match self.provider.kind {
                ProviderKind::Stub => "stub",
                ProviderKind::File => "file",
            }
            .into(),
        );
        kv("provider.seed", self.provider.seed.to_string());
        kv("provider.dim", self.provider.dim.to_string());
        kv("provider.path", path_or_empty(&self.provider.path));
        kv("paths.dataset", path_or_empty(&self.paths.dataset));
        kv("paths.embeddings", path_or_empty(&self.paths.embeddings));
        kv("paths.output", path_or_empty(&self.paths.output));
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Rejects inconsistent settings before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.fusion.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.split.iter().any(|&r| !(r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be positive and sum to 1".into()));
        }
        if self.provider.kind == ProviderKind::File && self.provider.path.is_none() {
            return Err(Error::Config("provider.kind = file needs provider.path".into()));
        }
        if self.provider.dim == 0 {
            return Err(Error::Config("provider.dim must be positive".into()));
        }
        if self.paths.dataset.is_some() != self.paths.embeddings.is_some() {
            return Err(Error::Config("paths.dataset and paths.embeddings go together".into()));
        }
        if self.gen.frames_per_video > self.fusion.max_temporal_positions && self.flags.temporal_decoder {
            return Err(Error::SequenceTooLong {
                len: self.gen.frames_per_video,
                max: self.fusion.max_temporal_positions,
            });
        }
        PromptTemplate::new(&self.prompt)?;
        self.eval.for_task(self.task, &Vocabulary::default_desk()).validate()
    }
}
