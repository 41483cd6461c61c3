//! Recall@K under the three task protocols and three predicate-selection
//! strategies, plus change-degree stratified reporting.

mod report;
mod strata;

pub use report::{RecallEntry, RecallReport, RECALL_HEADER};
pub use strata::{strata, stratified_eval, Stratum, StratumRow, VideoRecall, STRATA_HEADER};

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::scenegraph::{iou, BoundingBox, FrameGraph, PairKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    PredCls,
    SgCls,
    SgDet,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PredCls, Task::SgCls, Task::SgDet];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            "sgdet" => Ok(Task::SgDet),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
            Task::SgDet => "sgdet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    WithConstraints,
    NoConstraints,
    TopK,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::WithConstraints, Strategy::NoConstraints, Strategy::TopK];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "with_constraints" => Ok(Strategy::WithConstraints),
            "no_constraints" => Ok(Strategy::NoConstraints),
            "top_k" => Ok(Strategy::TopK),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::WithConstraints => "with_constraints",
            Strategy::NoConstraints => "no_constraints",
            Strategy::TopK => "top_k",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub top_k: usize,
    pub budget: usize,
    pub iou_threshold: f64,
    pub task: Task,
    /// Predicate groups that each get one argmax under With Constraints.
    /// Empty means one group holding every predicate.
    pub constraint_groups: Vec<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20, 50],
            strategies: Strategy::ALL.to_vec(),
            top_k: 6,
            budget: 100,
            iou_threshold: 0.5,
            task: Task::PredCls,
            constraint_groups: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.windows(2).any(|w| w[0] >= w[1]) || self.ks[0] == 0 {
            return Err(Error::Config("K list must be positive and strictly ascending".into()));
        }
        if self.top_k == 0 || self.budget == 0 {
            return Err(Error::Config("top_k and budget must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("IoU threshold {} outside [0,1]", self.iou_threshold)));
        }
        Ok(())
    }
}

/// One endpoint of a predicted or ground-truth triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletEntity {
    pub instance_id: u32,
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTriplet {
    pub subject: TripletEntity,
    pub object: TripletEntity,
    pub predicate: usize,
    pub score: f64,
}

impl ScoredTriplet {
    pub fn pair(&self) -> PairKey {
        PairKey::new(self.subject.instance_id, self.object.instance_id)
    }
}

/// Model output for one candidate pair in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub subject: TripletEntity,
    pub object: TripletEntity,
    pub subject_score: f64,
    pub object_score: f64,
    pub predicate_scores: Vec<f64>,
}

impl PairPrediction {
    pub fn pair(&self) -> PairKey {
        PairKey::new(self.subject.instance_id, self.object.instance_id)
    }

    fn triplet(&self, predicate: usize) -> ScoredTriplet {
        ScoredTriplet {
            subject: self.subject,
            object: self.object,
            predicate,
            score: self.subject_score * self.object_score * self.predicate_scores[predicate],
        }
    }
}

/// Score descending, then pair key and predicate ascending.
fn canonical(a: &ScoredTriplet, b: &ScoredTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.pair().cmp(&b.pair()))
        .then_with(|| a.predicate.cmp(&b.predicate))
}

/// Predicate indices sorted by score descending, ties by index.
fn ranked(scores: &[f64], among: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = among.filter(|&p| p < scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scored triplets for one frame under a selection strategy, in canonical order.
pub fn select_predictions(pairs: &[PairPrediction], strategy: Strategy, config: &EvalConfig) -> Vec<ScoredTriplet> {
    let mut out = Vec::new();
    for p in pairs {
        let n = p.predicate_scores.len();
        match strategy {
            Strategy::WithConstraints => {
                if config.constraint_groups.is_empty() {
                    if let Some(&best) = ranked(&p.predicate_scores, 0..n).first() {
                        out.push(p.triplet(best));
                    }
                } else {
                    for group in &config.constraint_groups {
                        if let Some(&best) = ranked(&p.predicate_scores, group.iter().copied()).first() {
                            out.push(p.triplet(best));
                        }
                    }
                }
            }
            Strategy::NoConstraints => out.extend((0..n).map(|j| p.triplet(j))),
            Strategy::TopK => out.extend(
                ranked(&p.predicate_scores, 0..n)
                    .into_iter()
                    .take(config.top_k)
                    .map(|j| p.triplet(j)),
            ),
        }
    }
    out.sort_by(canonical);
    if strategy == Strategy::NoConstraints {
        out.truncate(config.budget);
    }
    out
}

/// Ground-truth triplets of a frame: every label of every edge.
pub fn ground_truth(frame: &FrameGraph) -> Vec<ScoredTriplet> {
    let mut out = Vec::new();
    for e in &frame.edges {
        let (Some(s), Some(o)) = (frame.entity(e.subject_id), frame.entity(e.object_id)) else { continue };
        let subject = TripletEntity {
            instance_id: s.instance_id,
            class_id: s.class_id,
            bbox: s.bbox,
        };
        let object = TripletEntity {
            instance_id: o.instance_id,
            class_id: o.class_id,
            bbox: o.bbox,
        };
        for &p in &e.labels {
            out.push(ScoredTriplet {
                subject,
                object,
                predicate: p,
                score: 1.0,
            });
        }
    }
    out
}

/// Whether a prediction may be credited with a ground-truth triplet.
pub fn hits(pred: &ScoredTriplet, gt: &ScoredTriplet, task: Task, iou_threshold: f64) -> bool {
    if pred.predicate != gt.predicate {
        return false;
    }
    match task {
        Task::PredCls => pred.pair() == gt.pair(),
        Task::SgCls => {
            pred.pair() == gt.pair()
                && pred.subject.class_id == gt.subject.class_id
                && pred.object.class_id == gt.object.class_id
        }
        Task::SgDet => {
            pred.subject.class_id == gt.subject.class_id
                && pred.object.class_id == gt.object.class_id
                && iou(&pred.subject.bbox, &gt.subject.bbox) >= iou_threshold
                && iou(&pred.object.bbox, &gt.object.bbox) >= iou_threshold
        }
    }
}

/// Largest one-to-one assignment of predictions to ground truth.
///
/// Predictions are visited in list order; each one takes a free triplet
/// when it can, and otherwise displaces an earlier match only when the
/// displaced prediction can move to another free triplet.
pub fn matched_count(predictions: &[ScoredTriplet], gt: &[ScoredTriplet], task: Task, iou_threshold: f64) -> usize {
    let adj: Vec<Vec<usize>> = predictions
        .iter()
        .map(|p| (0..gt.len()).filter(|&g| hits(p, &gt[g], task, iou_threshold)).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut count = 0;
    for p in 0..predictions.len() {
        let mut seen = vec![false; gt.len()];
        if augment(p, &adj, &mut owner, &mut seen) {
            count += 1;
        }
    }
    count
}

fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        match owner[g] {
            None => {
                owner[g] = Some(p);
                return true;
            }
            Some(q) => {
                if augment(q, adj, owner, seen) {
                    owner[g] = Some(p);
                    return true;
                }
            }
        }
    }
    false
}

/// Per-frame recall at each K; `None` when the frame has no ground truth.
pub fn match_and_recall(
    predictions: &[ScoredTriplet],
    gt: &[ScoredTriplet],
    task: Task,
    config: &EvalConfig,
) -> Option<Vec<f64>> {
    if gt.is_empty() {
        return None;
    }
    Some(
        config
            .ks
            .iter()
            .map(|&k| {
                let top = &predictions[..k.min(predictions.len())];
                matched_count(top, gt, task, config.iou_threshold) as f64 / gt.len() as f64
            })
            .collect(),
    )
}
