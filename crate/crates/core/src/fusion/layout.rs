//! Row layout of one video's pair-frames and the pair/frame regrouping.

use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::{AttentionMask, Tensor};
use crate::error::{Error, Result};
use crate::scenegraph::{CropEmbeddings, EntityInstance, PairKey, VideoSample};

/// Which pairs become relation candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Candidates {
    /// Ground-truth labeled pairs (training, PredCls, SgCls).
    Labeled,
    /// Every (person, other) pair among detections (SgDet).
    Detected,
}

/// One candidate pair in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    /// Position of the frame within the video, used as the temporal position.
    pub frame_pos: usize,
    pub pair: PairKey,
    pub subject_class: usize,
    pub object_class: usize,
    /// Ground-truth labels when the pair is annotated in this frame.
    pub labels: Option<BTreeSet<usize>>,
}

/// Rows ordered by frame, then pair key, plus the constant input features.
#[derive(Clone, Debug)]
pub struct VideoLayout {
    pub video_id: String,
    pub num_frames: usize,
    pub rows: Vec<PairRow>,
    /// `[rows, 2 * visual_dim + crop_dim]`: subject visual, object visual, crop.
    pub features: Tensor,
    /// Frame positions with no candidate pair.
    pub skipped_frames: Vec<usize>,
}

/// Regroups per-frame items into per-pair sequences of `(frame position, item)`.
pub fn rearrange_by_pair<T: Clone>(frames: &[Vec<(PairKey, T)>]) -> BTreeMap<PairKey, Vec<(usize, T)>> {
    let mut out: BTreeMap<PairKey, Vec<(usize, T)>> = BTreeMap::new();
    for (pos, items) in frames.iter().enumerate() {
        for (pair, item) in items {
            out.entry(*pair).or_default().push((pos, item.clone()));
        }
    }
    out
}

/// Inverse of [`rearrange_by_pair`]; items in each frame come back in pair-key order.
pub fn rearrange_by_frame<T: Clone>(
    sequences: &BTreeMap<PairKey, Vec<(usize, T)>>,
    num_frames: usize,
) -> Vec<Vec<(PairKey, T)>> {
    let mut frames = vec![Vec::new(); num_frames];
    for (pair, seq) in sequences {
        for (pos, item) in seq {
            frames[*pos].push((*pair, item.clone()));
        }
    }
    for f in &mut frames {
        f.sort_by_key(|(p, _)| *p);
    }
    frames
}

impl VideoLayout {
    /// Collects candidate rows for a video.
    ///
    /// `class_of(frame_pos, entity)` supplies the class used for each entity
    /// (ground truth or a prediction). With [`Candidates::Detected`] a
    /// subject is any entity whose class is 0 (person).
    pub fn build(
        video: &VideoSample,
        embeddings: &CropEmbeddings,
        candidates: Candidates,
        class_of: impl Fn(usize, &EntityInstance) -> usize,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut feats = Vec::new();
        let mut skipped = Vec::new();
        let crop_dim = embeddings.dim();
        for (pos, frame) in video.frames.iter().enumerate() {
            let labeled = frame.label_map();
            let mut keys: Vec<PairKey> = match candidates {
                Candidates::Labeled => labeled.keys().copied().collect(),
                Candidates::Detected => {
                    let mut keys = Vec::new();
                    for s in &frame.entities {
                        if class_of(pos, s) != 0 {
                            continue;
                        }
                        for o in &frame.entities {
                            if o.instance_id != s.instance_id {
                                keys.push(PairKey::new(s.instance_id, o.instance_id));
                            }
                        }
                    }
                    keys
                }
            };
            keys.sort();
            if keys.is_empty() {
                skipped.push(pos);
            }
            for key in keys {
                let subject = frame.entity(key.subject).expect("validated endpoint");
                let object = frame.entity(key.object).expect("validated endpoint");
                let labels = labeled.get(&key).map(|l| (*l).clone());
                let crop = match embeddings.get(&video.video_id, frame.frame_index, key) {
                    Some(c) => c.to_vec(),
                    None if labels.is_none() => vec![0.0; crop_dim],
                    None => {
                        return Err(Error::MissingEmbedding {
                            video: video.video_id.clone(),
                            frame: frame.frame_index,
                            subject: key.subject,
                            object: key.object,
                        })
                    }
                };
                feats.extend_from_slice(&subject.visual_feature);
                feats.extend_from_slice(&object.visual_feature);
                feats.extend_from_slice(&crop);
                rows.push(PairRow {
                    frame_pos: pos,
                    pair: key,
                    subject_class: class_of(pos, subject),
                    object_class: class_of(pos, object),
                    labels,
                });
            }
        }
        let width = if rows.is_empty() { 1 } else { feats.len() / rows.len() };
        let features = if rows.is_empty() {
            Tensor::zeros(vec![1, width])
        } else {
            Tensor::new(vec![rows.len(), width], feats)?
        };
        Ok(Self {
            video_id: video.video_id.clone(),
            num_frames: video.frames.len(),
            rows,
            features,
            skipped_frames: skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices regrouped pair-major: for each pair, its rows in time order.
    pub fn pair_major_order(&self) -> Vec<usize> {
        let frames = self.frame_grouped_rows();
        rearrange_by_pair(&frames)
            .into_values()
            .flat_map(|seq| seq.into_iter().map(|(_, row)| row))
            .collect()
    }

    fn frame_grouped_rows(&self) -> Vec<Vec<(PairKey, usize)>> {
        let mut frames = vec![Vec::new(); self.num_frames];
        for (i, r) in self.rows.iter().enumerate() {
            frames[r.frame_pos].push((r.pair, i));
        }
        frames
    }

    /// For every row, the row holding the same pair's previous observation.
    pub fn previous_in_pair(&self) -> Vec<Option<usize>> {
        let mut prev = vec![None; self.rows.len()];
        for seq in rearrange_by_pair(&self.frame_grouped_rows()).values() {
            for w in seq.windows(2) {
                prev[w[1].1] = Some(w[0].1);
            }
        }
        prev
    }

    /// Rows may attend to rows of the same frame.
    pub fn spatial_mask(&self) -> AttentionMask {
        let n = self.rows.len();
        AttentionMask::from_fn(n, n, |i, j| self.rows[i].frame_pos == self.rows[j].frame_pos)
    }

    /// Causal mask in pair-major order: same pair, not later in time.
    pub fn temporal_mask(&self, order: &[usize]) -> AttentionMask {
        let n = order.len();
        AttentionMask::from_fn(n, n, |i, j| {
            let (a, b) = (&self.rows[order[i]], &self.rows[order[j]]);
            a.pair == b.pair && b.frame_pos <= a.frame_pos
        })
    }

    /// Video-adjacent transitions `(row at t-1, row at t)` where the pair is
    /// labeled in both frames.
    pub fn labeled_transitions(&self) -> Vec<(usize, usize)> {
        let mut index: BTreeMap<(usize, PairKey), usize> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.labels.is_some() {
                index.insert((r.frame_pos, r.pair), i);
            }
        }
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.labels.is_none() || r.frame_pos == 0 {
                continue;
            }
            if let Some(&p) = index.get(&(r.frame_pos - 1, r.pair)) {
                out.push((p, i));
            }
        }
        out
    }
}
