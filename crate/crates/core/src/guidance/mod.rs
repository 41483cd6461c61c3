//! Cross-modality guidance: prompted relation sentences, their text
//! embeddings, and the losses that align relation features with them.

mod prompt;
mod provider;

pub use prompt::{build_prompt, PromptTemplate, DEFAULT_PATTERN};
pub use provider::{
    embed_text, EmbeddingSource, FileProvider, StubProvider, TextEmbedding, TextProvider, DEFAULT_TEXT_DIM,
};

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{Builder, Ctx, Linear, VideoLayout};
use crate::scenegraph::{FrameGraph, PairKey, Vocabulary};

/// Which guidance objective is attached to the relation features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidanceVariant {
    /// No guidance.
    None,
    /// Align temporal differences of projected features and text embeddings.
    TemporalDifference,
    /// Align projected features and text embeddings frame by frame.
    Direct,
    /// Classify from the feature difference whether the labels changed.
    Binary,
}

impl GuidanceVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TemporalDifference => "eq2",
            Self::Direct => "eq4",
            Self::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "eq2" => Self::TemporalDifference,
            "eq4" => Self::Direct,
            "binary" => Self::Binary,
            other => return Err(Error::Config(format!("unknown guidance variant {other:?}"))),
        })
    }
}

/// Prompted-sentence embeddings with a per-sentence cache.
pub struct SentenceEmbedder<'a> {
    vocabulary: &'a Vocabulary,
    template: &'a PromptTemplate,
    provider: &'a TextProvider,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> SentenceEmbedder<'a> {
    pub fn new(vocabulary: &'a Vocabulary, template: &'a PromptTemplate, provider: &'a TextProvider) -> Self {
        Self {
            vocabulary,
            template,
            provider,
            cache: HashMap::new(),
        }
    }

    pub fn sentence(&self, subject_class: usize, predicate: usize, object_class: usize) -> Result<String> {
        self.template.build(
            self.vocabulary.entity_name(subject_class),
            &self.vocabulary.predicate(predicate).surface_form,
            self.vocabulary.entity_name(object_class),
        )
    }

    fn embed(&mut self, sentence: String) -> Result<&[f64]> {
        if !self.cache.contains_key(&sentence) {
            let e = embed_text(&sentence, self.provider)?;
            self.cache.insert(sentence.clone(), e.values);
        }
        Ok(&self.cache[&sentence])
    }

    /// Mean embedding over one sentence per label.
    pub fn labels_embedding(
        &mut self,
        subject_class: usize,
        object_class: usize,
        labels: &BTreeSet<usize>,
    ) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.provider.dim()];
        for &p in labels {
            let s = self.sentence(subject_class, p, object_class)?;
            for (a, v) in acc.iter_mut().zip(self.embed(s)?) {
                *a += v;
            }
        }
        let n = labels.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Teacher target for every labeled row of a layout, `None` elsewhere.
    /// Sentences use ground-truth entity classes.
    pub fn targets(&mut self, layout: &VideoLayout, gt_classes: &HashMap<u32, usize>) -> Result<Vec<Option<Vec<f64>>>> {
        layout
            .rows
            .iter()
            .map(|r| match &r.labels {
                Some(l) => self
                    .labels_embedding(gt_classes[&r.pair.subject], gt_classes[&r.pair.object], l)
                    .map(Some),
                None => Ok(None),
            })
            .collect()
    }
}

/// `e_s` for a pair in a frame; `None` when the pair is unlabeled there.
pub fn pair_sentence_embedding(
    frame: &FrameGraph,
    pair: PairKey,
    vocabulary: &Vocabulary,
    template: &PromptTemplate,
    provider: &TextProvider,
) -> Result<Option<Vec<f64>>> {
    let Some(edge) = frame.edge(pair) else { return Ok(None) };
    let class = |id| {
        frame
            .entity(id)
            .map(|e| e.class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no entity {id} in frame {}", frame.frame_index)))
    };
    let mut embedder = SentenceEmbedder::new(vocabulary, template, provider);
    embedder
        .labels_embedding(class(pair.subject)?, class(pair.object)?, &edge.labels)
        .map(Some)
}

/// Learned maps from relation-feature space used by the guidance losses.
#[derive(Clone, Debug)]
pub struct GuidanceHead {
    pub variant: GuidanceVariant,
    /// Affine map from `e_r` to text-embedding space.
    pub projection: Option<Linear>,
    /// Affine + sigmoid change classifier.
    pub binary: Option<Linear>,
}

impl GuidanceHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, variant: GuidanceVariant, feature_dim: usize, text_dim: usize) -> Result<Self> {
        let projection = match variant {
            GuidanceVariant::TemporalDifference | GuidanceVariant::Direct => {
                Some(Linear::new(b, "guidance.projection", feature_dim, text_dim)?)
            }
            _ => None,
        };
        let binary = match variant {
            GuidanceVariant::Binary => Some(Linear::new(b, "guidance.binary", feature_dim, 1)?),
            _ => None,
        };
        Ok(Self {
            variant,
            projection,
            binary,
        })
    }
}

/// A loss numerator with the number of units it will be averaged over.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub sum: Var,
    pub units: usize,
}

/// Batch mean of several terms; zero (with `true` warning flag) when empty.
pub fn combine_terms(ctx: &mut Ctx<'_>, terms: &[LossTerm]) -> Result<(Var, bool)> {
    let units: usize = terms.iter().map(|t| t.units).sum();
    if units == 0 {
        return Ok((ctx.tape.constant(Tensor::scalar(0.0)), true));
    }
    let sums: Vec<Var> = terms.iter().map(|t| t.sum).collect();
    let stacked = ctx.tape.concat_rows(&sums)?;
    let total = ctx.tape.sum(stacked);
    Ok((ctx.tape.scale(total, 1.0 / units as f64), false))
}

fn teacher_rows(rows: &[usize], teacher: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &r in rows {
        let t = teacher[r]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("row {r} has no teacher embedding")))?;
        out.extend_from_slice(t);
    }
    Ok(out)
}

/// Feature difference `e_r[t] - e_r[t-1]` for each transition.
fn feature_differences(ctx: &mut Ctx<'_>, features: Var, transitions: &[(usize, usize)]) -> Result<Var> {
    let prev: Vec<Option<usize>> = transitions.iter().map(|&(p, _)| Some(p)).collect();
    let cur: Vec<Option<usize>> = transitions.iter().map(|&(_, c)| Some(c)).collect();
    let a = ctx.tape.gather_rows(features, &cur)?;
    let b = ctx.tape.gather_rows(features, &prev)?;
    ctx.tape.sub(a, b)
}

fn squared_error_sum(ctx: &mut Ctx<'_>, pred: Var, target: Vec<f64>) -> Result<Var> {
    let shape = ctx.value(pred).shape().to_vec();
    let t = ctx.tape.constant(Tensor::new(shape, target)?);
    let e = ctx.tape.sub(pred, t)?;
    let sq = ctx.tape.mul(e, e)?;
    Ok(ctx.tape.sum(sq))
}

/// Temporal-difference guidance numerator for one video.
///
/// Each transition contributes the mean over embedding entries of
/// `((P e_r[t] - P e_r[t-1]) - (e_s[t] - e_s[t-1]))^2`; the affine offset of
/// `P` cancels in the difference.
pub fn temporal_difference_term(
    ctx: &mut Ctx<'_>,
    projection: &Linear,
    features: Var,
    transitions: &[(usize, usize)],
    teacher: &[Option<Vec<f64>>],
) -> Result<Option<LossTerm>> {
    if transitions.is_empty() {
        return Ok(None);
    }
    let diff = feature_differences(ctx, features, transitions)?;
    let w = ctx.p(projection.weight);
    let projected = ctx.tape.matmul(diff, w)?;
    let cur: Vec<usize> = transitions.iter().map(|&(_, c)| c).collect();
    let prev: Vec<usize> = transitions.iter().map(|&(p, _)| p).collect();
    let target: Vec<f64> = teacher_rows(&cur, teacher)?
        .iter()
        .zip(teacher_rows(&prev, teacher)?)
        .map(|(a, b)| a - b)
        .collect();
    let dim = ctx.value(projected).cols();
    let sse = squared_error_sum(ctx, projected, target)?;
    Ok(Some(LossTerm {
        sum: ctx.tape.scale(sse, 1.0 / dim as f64),
        units: transitions.len(),
    }))
}

/// Direct (per-frame) guidance numerator: mean squared error between
/// `P e_r[t]` and `e_s[t]` for each labeled row.
pub fn direct_term(
    ctx: &mut Ctx<'_>,
    projection: &Linear,
    features: Var,
    teacher: &[Option<Vec<f64>>],
) -> Result<Option<LossTerm>> {
    let rows: Vec<usize> = (0..teacher.len()).filter(|&r| teacher[r].is_some()).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
    let x = ctx.tape.gather_rows(features, &idx)?;
    let projected = projection.forward(ctx, x)?;
    let dim = ctx.value(projected).cols();
    let sse = squared_error_sum(ctx, projected, teacher_rows(&rows, teacher)?)?;
    Ok(Some(LossTerm {
        sum: ctx.tape.scale(sse, 1.0 / dim as f64),
        units: rows.len(),
    }))
}

/// Binary change-classification numerator: BCE of `sigmoid(head(e_r[t] - e_r[t-1]))`
/// against `flags` (1 when the pair's label set changed).
pub fn binary_change_term(
    ctx: &mut Ctx<'_>,
    head: &Linear,
    features: Var,
    transitions: &[(usize, usize)],
    flags: &[f64],
) -> Result<Option<LossTerm>> {
    if transitions.is_empty() {
        return Ok(None);
    }
    let diff = feature_differences(ctx, features, transitions)?;
    let logits = head.forward(ctx, diff)?;
    let sum = ctx.tape.binary_cross_entropy_sum(logits, flags)?;
    Ok(Some(LossTerm {
        sum,
        units: transitions.len(),
    }))
}

/// Change flags for a layout's labeled transitions.
pub fn change_flags(layout: &VideoLayout, transitions: &[(usize, usize)]) -> Vec<f64> {
    transitions
        .iter()
        .map(|&(p, c)| f64::from(layout.rows[p].labels != layout.rows[c].labels))
        .collect()
}
