//! The full relation model: entity head, fusion stack, relation classifier,
//! guidance heads, and the per-video training objective and evaluation.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::{ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{
    Builder, Candidates, Ctx, FusionConfig, FusionDims, FusionFlags, FusionOutput, Linear, RelationFusion, VideoLayout,
};
use crate::guidance::{
    binary_change_term, change_flags, combine_terms, direct_term, temporal_difference_term, GuidanceHead,
    GuidanceVariant, LossTerm, SentenceEmbedder,
};
use crate::losses::{entity_loss, total_on_tape, OptimConfig};
use crate::metrics::{
    ground_truth, match_and_recall, select_predictions, EvalConfig, PairPrediction, Strategy, Task, TripletEntity,
};
use crate::rng::stream_rng;
use crate::scenegraph::{change_degree, CropEmbeddings, VideoSample};

const INIT_STREAM: u64 = 0x1417;

/// Initial positive probability encoded in the relation classifier bias.
pub const PREDICATE_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub flags: FusionFlags,
    pub guidance: GuidanceVariant,
    pub dims: FusionDims,
    pub num_predicates: usize,
    pub text_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Tr2Model {
    pub config: ModelConfig,
    /// Residual correction added to the detector's log class scores.
    pub entity_head: Linear,
    pub fusion: RelationFusion,
    pub classifier: Linear,
    pub guidance: GuidanceHead,
}

impl Tr2Model {
    /// Builds the model with freshly initialized parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, &[INIT_STREAM]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.dims;
        let entity_head = Linear::zeroed(&mut b, "entity.head", d.visual_dim, d.num_entity_classes)?;
        let fusion = RelationFusion::new(&mut b, &config.fusion, config.flags, d)?;
        let feature_dim = 2 * config.fusion.d_model;
        let classifier = Linear::new(&mut b, "relation.classifier", feature_dim, config.num_predicates)?;
        let prior_bias = -((1.0 - PREDICATE_PRIOR) / PREDICATE_PRIOR).ln();
        b.store.get_mut(classifier.bias).data_mut().fill(prior_bias);
        let guidance = GuidanceHead::new(&mut b, config.guidance, feature_dim, config.text_dim)?;
        let model = Self {
            config: config.clone(),
            entity_head,
            fusion,
            classifier,
            guidance,
        };
        Ok((model, store))
    }

    /// Rebuilds the structure and checks that `store` matches it by name and shape.
    pub fn attach(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::build(config, 0)?;
        let names: Vec<&str> = fresh.names().collect();
        let loaded: Vec<&str> = store.names().collect();
        if names != loaded {
            return Err(Error::Checkpoint(format!(
                "parameter names differ from the configured model ({} expected, {} found)",
                names.len(),
                loaded.len()
            )));
        }
        for (a, b) in fresh.tensors().iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape {:?} where {:?} expected",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn entity_logits(&self, ctx: &mut Ctx<'_>, visual: &Tensor, log_scores: &Tensor) -> Result<Var> {
        let x = ctx.tape.constant(visual.clone());
        let prior = ctx.tape.constant(log_scores.clone());
        let correction = self.entity_head.forward(ctx, x)?;
        ctx.tape.add(prior, correction)
    }

    pub fn relation_logits(&self, ctx: &mut Ctx<'_>, layout: &VideoLayout) -> Result<(FusionOutput, Var)> {
        let out = self.fusion.forward(ctx, layout)?;
        let logits = self.classifier.forward(ctx, out.token_augmented)?;
        Ok((out, logits))
    }

    /// Batch objective over whole videos.
    pub fn objective(
        &self,
        ctx: &mut Ctx<'_>,
        batch: &[&PreparedVideo],
        optim: &OptimConfig,
        lambda: f64,
    ) -> Result<Objective> {
        let mut rel_sums = Vec::new();
        let mut rel_count = 0usize;
        let mut ent_sums = Vec::new();
        let mut ent_count = 0usize;
        let mut terms: Vec<LossTerm> = Vec::new();
        for video in batch {
            if !video.entity_targets.is_empty() {
                let logits = self.entity_logits(ctx, &video.entity_visual, &video.entity_log_scores)?;
                ent_sums.push(ctx.tape.cross_entropy_sum(logits, &video.entity_targets)?);
                ent_count += video.entity_targets.len();
            }
            if video.layout.is_empty() {
                continue;
            }
            let (out, logits) = self.relation_logits(ctx, &video.layout)?;
            rel_sums.push(ctx.tape.focal_loss_sum(
                logits,
                &video.relation_targets,
                optim.focal_alpha,
                optim.focal_gamma,
            )?);
            rel_count += video.relation_targets.len();
            let e_r = out.token_augmented;
            let term = match self.config.guidance {
                GuidanceVariant::None => None,
                GuidanceVariant::TemporalDifference => {
                    let p = self.guidance.projection.as_ref().expect("projection exists for this variant");
                    temporal_difference_term(ctx, p, e_r, &video.transitions, &video.teacher)?
                }
                GuidanceVariant::Direct => {
                    let p = self.guidance.projection.as_ref().expect("projection exists for this variant");
                    direct_term(ctx, p, e_r, &video.teacher)?
                }
                GuidanceVariant::Binary => {
                    let h = self.guidance.binary.as_ref().expect("binary head exists for this variant");
                    binary_change_term(ctx, h, e_r, &video.transitions, &video.change_flags)?
                }
            };
            terms.extend(term);
        }
        let relation = mean_of(ctx, &rel_sums, rel_count);
        let (object, entity_warning) = if ent_count == 0 {
            entity_loss(&mut ctx.tape, None, &[])?
        } else {
            (mean_of(ctx, &ent_sums, ent_count), false)
        };
        let (guidance, guidance_warning) = match self.config.guidance {
            GuidanceVariant::None => (ctx.tape.constant(Tensor::scalar(0.0)), false),
            _ => combine_terms(ctx, &terms)?,
        };
        let total = total_on_tape(&mut ctx.tape, object, relation, guidance, lambda)?;
        Ok(Objective {
            total,
            object,
            relation,
            guidance,
            entity_warning,
            guidance_warning,
        })
    }

    /// Per-frame recalls for one video under every configured strategy.
    pub fn evaluate_video(
        &self,
        store: &ParamStore,
        video: &VideoSample,
        embeddings: &CropEmbeddings,
        config: &EvalConfig,
    ) -> Result<VideoEvaluation> {
        let task = config.task;
        let mut ctx = Ctx::eval(store);
        let mut predicted: HashMap<(usize, u32), (usize, f64)> = HashMap::new();
        if task != Task::PredCls {
            let (visual, log_scores, _) = entity_inputs(video)?;
            let logits = self.entity_logits(&mut ctx, &visual, &log_scores)?;
            let probs = ctx.tape.softmax(logits);
            let probs = ctx.value(probs);
            let mut row = 0;
            for (pos, frame) in video.frames.iter().enumerate() {
                for e in &frame.entities {
                    let p = probs.row(row);
                    let best = crate::scenegraph::argmax(p);
                    predicted.insert((pos, e.instance_id), (best, p[best]));
                    row += 1;
                }
            }
        }
        let class_of = |pos: usize, e: &crate::scenegraph::EntityInstance| match task {
            Task::PredCls => e.class_id,
            _ => predicted[&(pos, e.instance_id)].0,
        };
        let candidates = if task == Task::SgDet {
            Candidates::Detected
        } else {
            Candidates::Labeled
        };
        let layout = VideoLayout::build(video, embeddings, candidates, class_of)?;
        let scores: Option<Tensor> = if layout.is_empty() {
            None
        } else {
            let (_, logits) = self.relation_logits(&mut ctx, &layout)?;
            let s = ctx.tape.sigmoid(logits);
            Some(ctx.value(s).clone())
        };
        let mut per_frame: Vec<Vec<PairPrediction>> = vec![Vec::new(); video.frames.len()];
        if let Some(scores) = &scores {
            for (i, row) in layout.rows.iter().enumerate() {
                let frame = &video.frames[row.frame_pos];
                let endpoint = |id: u32, class: usize| {
                    let e = frame.entity(id).expect("validated endpoint");
                    let bbox = if task == Task::SgDet { e.detected_box } else { e.bbox };
                    let score = match task {
                        Task::PredCls => 1.0,
                        _ => predicted[&(row.frame_pos, id)].1,
                    };
                    (
                        TripletEntity {
                            instance_id: id,
                            class_id: class,
                            bbox,
                        },
                        score,
                    )
                };
                let (subject, subject_score) = endpoint(row.pair.subject, row.subject_class);
                let (object, object_score) = endpoint(row.pair.object, row.object_class);
                per_frame[row.frame_pos].push(PairPrediction {
                    subject,
                    object,
                    subject_score,
                    object_score,
                    predicate_scores: scores.row(i).to_vec(),
                });
            }
        }
        let mut recalls = BTreeMap::new();
        for &strategy in &config.strategies {
            let mut frames = Vec::new();
            for (pos, frame) in video.frames.iter().enumerate() {
                let preds = select_predictions(&per_frame[pos], strategy, config);
                if let Some(r) = match_and_recall(&preds, &ground_truth(frame), task, config) {
                    frames.push(r);
                }
            }
            recalls.insert(strategy, frames);
        }
        Ok(VideoEvaluation {
            video_id: video.video_id.clone(),
            degree: change_degree(video),
            skipped_frames: layout.skipped_frames.len(),
            recalls,
        })
    }
}

fn mean_of(ctx: &mut Ctx<'_>, sums: &[Var], count: usize) -> Var {
    if sums.is_empty() || count == 0 {
        return ctx.tape.constant(Tensor::scalar(0.0));
    }
    let stacked = ctx.tape.concat_rows(sums).expect("scalar sums stack");
    let total = ctx.tape.sum(stacked);
    ctx.tape.scale(total, 1.0 / count as f64)
}

/// Recorded loss components of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub object: Var,
    pub relation: Var,
    pub guidance: Var,
    pub entity_warning: bool,
    pub guidance_warning: bool,
}

/// Per-frame recalls (counted frames only) for each strategy; each frame
/// holds one value per configured K.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEvaluation {
    pub video_id: String,
    pub degree: f64,
    pub skipped_frames: usize,
    pub recalls: BTreeMap<Strategy, Vec<Vec<f64>>>,
}

/// Training inputs of one video, computed once.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub layout: VideoLayout,
    /// Row-major `[rows, predicates]` 0/1 targets.
    pub relation_targets: Vec<f64>,
    pub teacher: Vec<Option<Vec<f64>>>,
    pub transitions: Vec<(usize, usize)>,
    pub change_flags: Vec<f64>,
    pub entity_visual: Tensor,
    pub entity_log_scores: Tensor,
    pub entity_targets: Vec<usize>,
}

/// Visual features, clamped log detector scores, and ground-truth classes
/// for every entity of every frame.
fn entity_inputs(video: &VideoSample) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let mut visual = Vec::new();
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for frame in &video.frames {
        for e in &frame.entities {
            visual.push(e.visual_feature.clone());
            scores.push(
                e.class_scores
                    .iter()
                    .map(|p| p.max(crate::autograd::LOG_CLAMP).ln())
                    .collect::<Vec<f64>>(),
            );
            targets.push(e.class_id);
        }
    }
    Ok((Tensor::from_rows(&visual)?, Tensor::from_rows(&scores)?, targets))
}

/// Builds the labeled layout (ground-truth classes), multi-hot targets, and
/// the guidance inputs required by `variant`.
pub fn prepare_video(
    video: &VideoSample,
    embeddings: &CropEmbeddings,
    num_predicates: usize,
    variant: GuidanceVariant,
    embedder: Option<&mut SentenceEmbedder<'_>>,
) -> Result<PreparedVideo> {
    let layout = VideoLayout::build(video, embeddings, Candidates::Labeled, |_, e| e.class_id)?;
    let mut relation_targets = vec![0.0; layout.len() * num_predicates];
    for (i, row) in layout.rows.iter().enumerate() {
        for &p in row.labels.iter().flatten() {
            if p >= num_predicates {
                return Err(Error::InvalidArgument(format!("predicate {p} outside vocabulary")));
            }
            relation_targets[i * num_predicates + p] = 1.0;
        }
    }
    let transitions = layout.labeled_transitions();
    let teacher = match (variant, embedder) {
        (GuidanceVariant::TemporalDifference | GuidanceVariant::Direct, Some(emb)) => {
            let classes: HashMap<u32, usize> = video
                .frames
                .iter()
                .flat_map(|f| f.entities.iter().map(|e| (e.instance_id, e.class_id)))
                .collect();
            emb.targets(&layout, &classes)?
        }
        (GuidanceVariant::TemporalDifference | GuidanceVariant::Direct, None) => {
            return Err(Error::Config("text guidance needs an embedding provider".into()))
        }
        _ => vec![None; layout.len()],
    };
    let flags = change_flags(&layout, &transitions);
    let (entity_visual, entity_log_scores, entity_targets) = entity_inputs(video)?;
    Ok(PreparedVideo {
        layout,
        relation_targets,
        teacher,
        transitions,
        change_flags: flags,
        entity_visual,
        entity_log_scores,
        entity_targets,
    })
}
