//! Deterministic training, evaluation, ablation, and gradient checking.

mod ablate;
mod config;
mod gradcheck;
mod record;

pub use ablate::{ablate, guidance_variants, difference_variants, module_variants, AblationRow, AblationTable, Variant};
pub use config::{ConstraintMode, EvalSettings, Paths, ProviderConfig, ProviderKind, RunConfig};
pub use gradcheck::{gradcheck, toy_config, GradcheckOutcome, GroupResult};
pub use record::{merge_records, EpochRecord, RunRecord};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::fusion::{Ctx, FusionDims};
use crate::guidance::{FileProvider, GuidanceVariant, PromptTemplate, SentenceEmbedder, StubProvider, TextProvider};
use crate::losses::{total_loss, AdamW};
use crate::metrics::{EvalConfig, RecallReport, Strategy, VideoRecall};
use crate::model::{prepare_video, ModelConfig, PreparedVideo, Tr2Model, VideoEvaluation};
use crate::rng::stream_rng;
use crate::scenegraph::{read_dataset, CropEmbeddings, VideoSample, Vocabulary};
use crate::synth::{generate, simulate_detector, split};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Videos, their crop embeddings, and the vocabulary they index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub videos: Vec<VideoSample>,
    pub embeddings: CropEmbeddings,
}

/// Train / validation / test partitions.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    /// Reads the configured files, or generates the synthetic dataset when
    /// no paths are set; then applies the simulated detector.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let g = &config.gen;
        let vocabulary = g.vocabulary()?;
        let (mut videos, embeddings) = match (&config.paths.dataset, &config.paths.embeddings) {
            (Some(d), Some(e)) => (read_dataset(d, g.entity_class_count)?, CropEmbeddings::read(e)?),
            _ => {
                let ds = generate(g)?;
                (ds.videos, ds.embeddings)
            }
        };
        if videos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        simulate_detector(&mut videos, g.detector_noise, g.entity_class_count, g.seed);
        Ok(Self {
            vocabulary,
            videos,
            embeddings,
        })
    }

    pub fn splits(&self, ratios: [f64; 3], seed: u64) -> Result<Splits> {
        let mut parts = split(&self.videos, &ratios, seed)?.into_iter();
        Ok(Splits {
            train: parts.next().unwrap_or_default(),
            val: parts.next().unwrap_or_default(),
            test: parts.next().unwrap_or_default(),
        })
    }
}

pub fn text_provider(config: &RunConfig) -> Result<TextProvider> {
    Ok(match config.provider.kind {
        ProviderKind::Stub => TextProvider::Stub(StubProvider::new(config.provider.dim, config.provider.seed)),
        ProviderKind::File => {
            let path = config
                .provider
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("provider.path is not set".into()))?;
            let p = FileProvider::read(path)?;
            if p.dim() != config.provider.dim {
                return Err(Error::Config(format!(
                    "embedding table has dim {}, provider.dim is {}",
                    p.dim(),
                    config.provider.dim
                )));
            }
            TextProvider::File(p)
        }
    })
}

pub fn model_config(config: &RunConfig, vocabulary: &Vocabulary) -> ModelConfig {
    ModelConfig {
        fusion: config.fusion.clone(),
        flags: config.flags,
        guidance: config.guidance,
        dims: FusionDims {
            visual_dim: config.gen.visual_dim,
            crop_dim: config.gen.crop_dim,
            num_entity_classes: vocabulary.num_entities(),
        },
        num_predicates: vocabulary.num_predicates(),
        text_dim: config.provider.dim,
    }
}

/// Prepares training inputs, embedding prompted sentences only when the
/// guidance variant needs them.
pub fn prepare_all(
    config: &RunConfig,
    vocabulary: &Vocabulary,
    videos: &[VideoSample],
    embeddings: &CropEmbeddings,
) -> Result<Vec<PreparedVideo>> {
    let template = PromptTemplate::new(&config.prompt)?;
    let needs_text = matches!(config.guidance, GuidanceVariant::TemporalDifference | GuidanceVariant::Direct);
    let provider = if needs_text { Some(text_provider(config)?) } else { None };
    let mut embedder = provider
        .as_ref()
        .map(|p| SentenceEmbedder::new(vocabulary, &template, p));
    videos
        .iter()
        .map(|v| prepare_video(v, embeddings, vocabulary.num_predicates(), config.guidance, embedder.as_mut()))
        .collect()
}

/// Corpus report plus the per-video detail it was pooled from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: RecallReport,
    pub videos: Vec<VideoEvaluation>,
}

impl Evaluation {
    /// Per-video recalls at one strategy and K, for stratification.
    pub fn video_recalls(&self, strategy: Strategy, k_index: usize) -> Vec<VideoRecall> {
        self.videos
            .iter()
            .map(|v| VideoRecall {
                video_id: v.video_id.clone(),
                degree: v.degree,
                frame_recalls: v
                    .recalls
                    .get(&strategy)
                    .map(|frames| frames.iter().map(|r| r[k_index]).collect())
                    .unwrap_or_default(),
            })
            .collect()
    }
}

/// Mean per-frame recall over all counted frames of `videos`.
pub fn evaluate(
    model: &Tr2Model,
    store: &ParamStore,
    videos: &[VideoSample],
    embeddings: &CropEmbeddings,
    config: &EvalConfig,
) -> Result<Evaluation> {
    config.validate()?;
    let per_video = videos
        .iter()
        .map(|v| model.evaluate_video(store, v, embeddings, config))
        .collect::<Result<Vec<_>>>()?;
    let mut report = RecallReport::default();
    for &strategy in &config.strategies {
        let mut sums = vec![0.0; config.ks.len()];
        let mut frames = 0usize;
        for v in &per_video {
            for r in &v.recalls[&strategy] {
                sums.iter_mut().zip(r).for_each(|(s, x)| *s += x);
                frames += 1;
            }
        }
        for (k, s) in config.ks.iter().zip(sums) {
            report.push(config.task, strategy, *k, if frames == 0 { 0.0 } else { s / frames as f64 });
        }
    }
    Ok(Evaluation {
        report,
        videos: per_video,
    })
}

/// Trained parameters with the model structure and the run record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Tr2Model,
    pub store: ParamStore,
    pub record: RunRecord,
    pub eval_config: EvalConfig,
}

/// Trains on the train split, validating on the validation split and
/// reporting the test split at the end.
pub fn train(config: &RunConfig, dataset: &Dataset, label: &str) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let splits = dataset.splits(config.split, config.gen.seed)?;
    if splits.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = &dataset.vocabulary;
    let prepared = prepare_all(config, vocab, &splits.train, &dataset.embeddings)?;
    let (model, mut store) = Tr2Model::build(&model_config(config, vocab), config.seed)?;
    let eval_config = config.eval.for_task(config.task, vocab);
    let lambda = config.optim.lambda_for(config.task);
    let mut opt = AdamW::new(&store);
    let mut record = RunRecord::new(label, config);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut acc = [0.0f64; 4];
        let mut batches = 0usize;
        let mut warnings = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedVideo> = chunk.iter().map(|&i| &prepared[i]).collect();
            let rng = stream_rng(config.seed, &[DROPOUT_STREAM, step as u64]);
            let (grads, parts) = {
                let mut ctx = Ctx::train(&store, rng);
                let obj = model.objective(&mut ctx, &batch, &config.optim, lambda)?;
                let values = [obj.object, obj.relation, obj.guidance, obj.total].map(|v| ctx.value(v).item());
                if !values[3].is_finite() {
                    return Err(Error::NanLoss { step });
                }
                warnings += usize::from(obj.guidance_warning);
                let mut g = ctx.tape.backward(obj.total)?;
                (ctx.params.gradients(&mut g), values)
            };
            opt.step(&mut store, &grads, &config.optim)?;
            acc.iter_mut().zip(parts).for_each(|(a, p)| *a += p);
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let loss = total_loss(acc[0] / n, acc[1] / n, acc[2] / n, lambda)?;
        let last = epoch + 1 == config.epochs;
        let validate = !splits.val.is_empty() && (last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0));
        let validation = if validate {
            Some(evaluate(&model, &store, &splits.val, &dataset.embeddings, &eval_config)?.report)
        } else {
            None
        };
        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            guidance_warnings: warnings,
            validation,
        });
    }
    if !splits.test.is_empty() {
        record.test = Some(evaluate(&model, &store, &splits.test, &dataset.embeddings, &eval_config)?.report);
    }
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        store,
        record,
        eval_config,
    })
}

/// Held-out evaluation of a trained outcome on the test split.
pub fn evaluate_test(config: &RunConfig, dataset: &Dataset, outcome: &TrainOutcome) -> Result<Evaluation> {
    let splits = dataset.splits(config.split, config.gen.seed)?;
    evaluate(&outcome.model, &outcome.store, &splits.test, &dataset.embeddings, &outcome.eval_config)
}

/// Mean of one metric cell over several reports.
pub fn mean_recall(reports: &[&RecallReport], task: crate::metrics::Task, strategy: Strategy, k: usize) -> Option<f64> {
    let values: Vec<f64> = reports.iter().filter_map(|r| r.get(task, strategy, k)).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Groups per-parameter names by their top-level module prefix.
pub fn parameter_groups(store: &ParamStore) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in store.names() {
        let prefix = name.rsplit_once('.').map_or(name, |(p, _)| p);
        groups.entry(prefix.to_string()).or_default().push(name.to_string());
    }
    groups
}
