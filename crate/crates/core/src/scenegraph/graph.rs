use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::geometry::BoundingBox;
use crate::error::{Error, Result};

/// Ordered (subject, object) instance pair; the identity of a relation track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub subject: u32,
    pub object: u32,
}

impl PairKey {
    pub fn new(subject: u32, object: u32) -> Self {
        Self { subject, object }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityInstance {
    pub instance_id: u32,
    pub class_id: usize,
    /// Ground-truth box.
    pub bbox: BoundingBox,
    /// Box reported by the (simulated) detector; equals `bbox` without noise.
    pub detected_box: BoundingBox,
    /// Detector class distribution.
    pub class_scores: Vec<f64>,
    pub visual_feature: Vec<f64>,
}

impl EntityInstance {
    /// Instance with a noiseless detection: one-hot scores, detected box = ground truth.
    pub fn exact(
        instance_id: u32,
        class_id: usize,
        bbox: BoundingBox,
        num_classes: usize,
        visual_feature: Vec<f64>,
    ) -> Self {
        let mut class_scores = vec![0.0; num_classes];
        if class_id < num_classes {
            class_scores[class_id] = 1.0;
        }
        Self {
            instance_id,
            class_id,
            bbox,
            detected_box: bbox,
            class_scores,
            visual_feature,
        }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_scores)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.class_scores.iter().sum();
        if self.class_scores.iter().any(|&s| s < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class scores of instance {} are not a distribution",
                self.instance_id
            )));
        }
        Ok(())
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationEdge {
    pub subject_id: u32,
    pub object_id: u32,
    pub labels: BTreeSet<usize>,
}

impl RelationEdge {
    pub fn new(subject_id: u32, object_id: u32, labels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            subject_id,
            object_id,
            labels: labels.into_iter().collect(),
        }
    }

    pub fn key(&self) -> PairKey {
        PairKey::new(self.subject_id, self.object_id)
    }
}

/// One annotated frame `G_t = (V_t, E_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGraph {
    pub frame_index: usize,
    pub entities: Vec<EntityInstance>,
    pub edges: Vec<RelationEdge>,
}

impl FrameGraph {
    pub fn entity(&self, instance_id: u32) -> Option<&EntityInstance> {
        self.entities.iter().find(|e| e.instance_id == instance_id)
    }

    pub fn edge(&self, key: PairKey) -> Option<&RelationEdge> {
        self.edges.iter().find(|e| e.key() == key)
    }

    /// Labels per pair, ordered by pair key.
    pub fn label_map(&self) -> BTreeMap<PairKey, &BTreeSet<usize>> {
        self.edges.iter().map(|e| (e.key(), &e.labels)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entities {
            if !ids.insert(e.instance_id) {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: duplicate instance {}",
                    self.frame_index, e.instance_id
                )));
            }
        }
        let mut pairs = HashSet::new();
        for edge in &self.edges {
            if edge.subject_id == edge.object_id {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: self relation on {}",
                    self.frame_index, edge.subject_id
                )));
            }
            if !ids.contains(&edge.subject_id) || !ids.contains(&edge.object_id) {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: edge ({}, {}) references a missing entity",
                    self.frame_index, edge.subject_id, edge.object_id
                )));
            }
            if edge.labels.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: edge ({}, {}) has no labels",
                    self.frame_index, edge.subject_id, edge.object_id
                )));
            }
            if !pairs.insert(edge.key()) {
                return Err(Error::InvalidArgument(format!(
                    "frame {}: duplicate edge ({}, {})",
                    self.frame_index, edge.subject_id, edge.object_id
                )));
            }
        }
        Ok(())
    }
}

/// A labeled video `G = {G_t}`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub frames: Vec<FrameGraph>,
}

impl VideoSample {
    pub fn new(video_id: impl Into<String>, frames: Vec<FrameGraph>) -> Result<Self> {
        let v = Self {
            video_id: video_id.into(),
            frames,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument(format!("video {} has no frames", self.video_id)));
        }
        if self.video_id.is_empty() || self.video_id.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad video id {:?}", self.video_id)));
        }
        for w in self.frames.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::InvalidArgument(format!(
                    "video {}: frame indices not increasing",
                    self.video_id
                )));
            }
        }
        let mut classes = BTreeMap::new();
        for f in &self.frames {
            f.validate()?;
            for e in &f.entities {
                if *classes.entry(e.instance_id).or_insert(e.class_id) != e.class_id {
                    return Err(Error::InvalidArgument(format!(
                        "video {}: instance {} changes class",
                        self.video_id, e.instance_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Whether the labeled relations of frame `t` differ from frame `t - 1`.
    pub fn transition_changed(&self, t: usize) -> bool {
        self.frames[t - 1].label_map() != self.frames[t].label_map()
    }
}

/// Fraction of adjacent frame transitions whose relation annotations differ.
///
/// A transition counts as changed when a pair present in both frames has a
/// different label set, or when a pair appears or disappears.
pub fn change_degree(video: &VideoSample) -> f64 {
    let t = video.frames.len();
    if t < 2 {
        return 0.0;
    }
    let changed = (1..t).filter(|&i| video.transition_changed(i)).count();
    changed as f64 / (t - 1) as f64
}
