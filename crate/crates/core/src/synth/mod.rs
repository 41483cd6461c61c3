//! Seeded generator of synthetic dynamic scene graphs.
//!
//! Each video has one person (instance 0) related to `pairs_per_frame`
//! objects. Every pair holds exactly one active predicate per category; on
//! each frame transition a category switches to a different predicate with
//! probability `change_rate`. Features are class/predicate prototypes plus
//! Gaussian noise, so labels are recoverable but get harder as `subtlety`
//! grows.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, string_stream};
use crate::scenegraph::{
    round_to_file_precision, BoundingBox, CropEmbeddings, EntityInstance, FrameGraph, PairKey,
    RelationEdge, VideoSample, Vocabulary,
};

const WORLD_STREAM: u64 = 0x5749_4f52_4c44;
const VIDEO_STREAM: u64 = 0x5649_4445_4f;
const DETECTOR_STREAM: u64 = 0x4445_5445_4354;

/// Detector simulation applied on top of ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorNoise {
    /// Std-dev of box corner jitter, relative to box size.
    pub box_jitter: f64,
    /// Probability that the top-scoring class is wrong.
    pub class_confusion: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            box_jitter: 0.05,
            class_confusion: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub pairs_per_frame: usize,
    pub entity_class_count: usize,
    /// Predicate counts for (attention, spatial, contacting).
    pub predicate_partition: [usize; 3],
    /// Per-category switch probability per frame transition.
    pub change_rate: f64,
    /// When non-empty, video `i` uses `change_rate_mix[i % len]` instead.
    pub change_rate_mix: Vec<f64>,
    /// Feature noise std-dev relative to unit prototype separation.
    pub subtlety: f64,
    pub detector_noise: DetectorNoise,
    /// Probability that an object (and its pair) is absent from a frame.
    pub pair_dropout: f64,
    pub visual_dim: usize,
    pub crop_dim: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_videos: 100,
            frames_per_video: 8,
            pairs_per_frame: 3,
            entity_class_count: 36,
            predicate_partition: [3, 6, 17],
            change_rate: 0.3,
            change_rate_mix: Vec::new(),
            subtlety: 0.3,
            detector_noise: DetectorNoise::default(),
            pair_dropout: 0.0,
            visual_dim: 16,
            crop_dim: 32,
        }
    }
}

fn prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} is not a probability")))
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("pairs_per_frame", self.pairs_per_frame),
            ("visual_dim", self.visual_dim),
            ("crop_dim", self.crop_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.entity_class_count < self.pairs_per_frame + 1 {
            return Err(Error::Config(
                "need more entity classes than objects per frame".into(),
            ));
        }
        if self.predicate_partition.iter().sum::<usize>() == 0 {
            return Err(Error::Config("no predicates".into()));
        }
        prob("change_rate", self.change_rate)?;
        for &r in &self.change_rate_mix {
            prob("change_rate_mix", r)?;
        }
        prob("pair_dropout", self.pair_dropout)?;
        prob("detector_noise.class_confusion", self.detector_noise.class_confusion)?;
        if !(self.subtlety >= 0.0) || !(self.detector_noise.box_jitter >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::sized(self.entity_class_count, self.predicate_partition)
    }

    pub fn change_rate_for(&self, video_index: usize) -> f64 {
        if self.change_rate_mix.is_empty() {
            self.change_rate
        } else {
            self.change_rate_mix[video_index % self.change_rate_mix.len()]
        }
    }
}

/// Shared class and predicate prototypes, derived from the seed alone.
#[derive(Clone, Debug)]
pub struct Prototypes {
    /// Per entity class, in visual-feature space.
    pub entity_visual: Vec<Vec<f64>>,
    /// Per entity class, in crop-embedding space.
    pub entity_crop: Vec<Vec<f64>>,
    /// Per predicate, in crop-embedding space.
    pub predicate_crop: Vec<Vec<f64>>,
}

/// Random direction scaled so that two independent prototypes sit at
/// distance close to 1.
fn prototype(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm * std::f64::consts::FRAC_1_SQRT_2).collect()
}

impl Prototypes {
    pub fn new(config: &GenConfig) -> Self {
        let mut rng = stream_rng(config.seed, &[WORLD_STREAM]);
        let n_pred: usize = config.predicate_partition.iter().sum();
        let entity_visual = (0..config.entity_class_count)
            .map(|_| prototype(&mut rng, config.visual_dim))
            .collect();
        let entity_crop = (0..config.entity_class_count)
            .map(|_| prototype(&mut rng, config.crop_dim))
            .collect();
        let predicate_crop = (0..n_pred).map(|_| prototype(&mut rng, config.crop_dim)).collect();
        Self {
            entity_visual,
            entity_crop,
            predicate_crop,
        }
    }

    /// Noiseless crop embedding for a (subject, predicates, object) triple.
    pub fn crop(&self, subject: usize, labels: impl IntoIterator<Item = usize>, object: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.entity_crop[subject]
            .iter()
            .zip(&self.entity_crop[object])
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        for p in labels {
            v.iter_mut().zip(&self.predicate_crop[p]).for_each(|(o, x)| *o += x);
        }
        v
    }
}

/// Generated videos with their crop embeddings.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub vocabulary: Vocabulary,
    pub videos: Vec<VideoSample>,
    pub embeddings: CropEmbeddings,
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            let n: f64 = StandardNormal.sample(rng);
            round_to_file_precision(b + sigma * n)
        })
        .collect()
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    let w = w.clamp(0.02, 0.98);
    let h = h.clamp(0.02, 0.98);
    let x1 = (cx - w / 2.0).clamp(0.0, 1.0 - w);
    let y1 = (cy - h / 2.0).clamp(0.0, 1.0 - h);
    let r = round_to_file_precision;
    let (x1, y1, x2, y2) = (r(x1), r(y1), r(x1 + w), r(y1 + h));
    BoundingBox::new(x1, y1, x2.max(x1 + 1e-6).min(1.0), y2.max(y1 + 1e-6).min(1.0))
        .expect("clamped box is valid")
}

/// Box trajectory: random start and a constant drift with small wobble.
struct Track {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Track {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cx: rng.random_range(0.2..0.8),
            cy: rng.random_range(0.2..0.8),
            w: rng.random_range(0.1..0.4),
            h: rng.random_range(0.1..0.4),
            vx: rng.random_range(-0.02..0.02),
            vy: rng.random_range(-0.02..0.02),
        }
    }

    fn step(&mut self) {
        self.cx = (self.cx + self.vx).clamp(0.1, 0.9);
        self.cy = (self.cy + self.vy).clamp(0.1, 0.9);
    }

    fn bbox(&self) -> BoundingBox {
        clamp_box(self.cx, self.cy, self.w, self.h)
    }
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:05}")
}

/// Generates one video from its own `(seed, index)` stream.
fn generate_video(
    config: &GenConfig,
    vocab: &Vocabulary,
    protos: &Prototypes,
    index: usize,
    embeddings: &mut CropEmbeddings,
) -> Result<VideoSample> {
    let mut rng = stream_rng(config.seed, &[VIDEO_STREAM, index as u64]);
    let id = video_id(index);
    let groups = vocab.category_groups();
    let rate = config.change_rate_for(index);

    let mut object_classes: Vec<usize> = (1..config.entity_class_count).collect();
    object_classes.shuffle(&mut rng);
    object_classes.truncate(config.pairs_per_frame);

    let mut tracks: Vec<Track> = (0..=config.pairs_per_frame).map(|_| Track::random(&mut rng)).collect();
    // active predicate per pair per category
    let mut state: Vec<Vec<usize>> = object_classes
        .iter()
        .map(|_| groups.iter().map(|(_, ids)| ids[rng.random_range(0..ids.len())]).collect())
        .collect();

    let mut frames = Vec::with_capacity(config.frames_per_video);
    for t in 0..config.frames_per_video {
        if t > 0 {
            for pair_state in &mut state {
                for (slot, (_, ids)) in pair_state.iter_mut().zip(&groups) {
                    if ids.len() > 1 && rng.random::<f64>() < rate {
                        let others: Vec<usize> = ids.iter().copied().filter(|p| p != slot).collect();
                        *slot = others[rng.random_range(0..others.len())];
                    }
                }
            }
            tracks.iter_mut().for_each(Track::step);
        }
        let mut entities = vec![EntityInstance::exact(
            0,
            0,
            tracks[0].bbox(),
            config.entity_class_count,
            noisy(&mut rng, &protos.entity_visual[0], config.subtlety),
        )];
        let mut edges = Vec::new();
        for (k, &class) in object_classes.iter().enumerate() {
            // draw unconditionally so dropout does not shift the stream
            let present = rng.random::<f64>() >= config.pair_dropout;
            let visual = noisy(&mut rng, &protos.entity_visual[class], config.subtlety);
            let crop = noisy(&mut rng, &protos.crop(0, state[k].iter().copied(), class), config.subtlety);
            if !present {
                continue;
            }
            let instance = (k + 1) as u32;
            entities.push(EntityInstance::exact(
                instance,
                class,
                tracks[k + 1].bbox(),
                config.entity_class_count,
                visual,
            ));
            edges.push(RelationEdge::new(0, instance, state[k].iter().copied()));
            embeddings.insert(&id, t, PairKey::new(0, instance), crop)?;
        }
        frames.push(FrameGraph {
            frame_index: t,
            entities,
            edges,
        });
    }
    VideoSample::new(id, frames)
}

/// Generates the full dataset. Same config, same bytes.
pub fn generate(config: &GenConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let vocabulary = config.vocabulary()?;
    let protos = Prototypes::new(config);
    let mut embeddings = CropEmbeddings::new(config.crop_dim);
    let videos = (0..config.num_videos)
        .map(|i| generate_video(config, &vocabulary, &protos, i, &mut embeddings))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        vocabulary,
        videos,
        embeddings,
    })
}

/// Fills `detected_box` and `class_scores` with simulated detector output.
///
/// Deterministic in `(seed, video id, frame index, instance id)`.
pub fn simulate_detector(videos: &mut [VideoSample], noise: DetectorNoise, num_classes: usize, seed: u64) {
    for video in videos {
        let vid = string_stream(&video.video_id);
        for frame in &mut video.frames {
            for e in &mut frame.entities {
                let mut rng = stream_rng(
                    seed,
                    &[DETECTOR_STREAM, vid, frame.frame_index as u64, u64::from(e.instance_id)],
                );
                let b = e.bbox;
                let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
                let mut jitter = |scale: f64| -> f64 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n * noise.box_jitter * scale
                };
                let (dx, dy, dw, dh) = (jitter(w), jitter(h), jitter(w), jitter(h));
                e.detected_box = clamp_box(
                    (b.x1 + b.x2) / 2.0 + dx,
                    (b.y1 + b.y2) / 2.0 + dy,
                    w + dw,
                    h + dh,
                );
                let top = if num_classes > 1 && rng.random::<f64>() < noise.class_confusion {
                    let wrong = rng.random_range(0..num_classes - 1);
                    if wrong >= e.class_id {
                        wrong + 1
                    } else {
                        wrong
                    }
                } else {
                    e.class_id
                };
                let confidence: f64 = rng.random_range(0.5..0.95);
                let rest = if num_classes > 1 {
                    (1.0 - confidence) / (num_classes - 1) as f64
                } else {
                    0.0
                };
                let mut scores = vec![rest; num_classes];
                scores[top] = if num_classes > 1 { confidence } else { 1.0 };
                let total: f64 = scores.iter().sum();
                e.class_scores = scores.into_iter().map(|s| s / total).collect();
            }
        }
    }
}

/// Deterministic shuffled partition into `ratios.len()` parts.
pub fn split<T: Clone>(items: &[T], ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidArgument("split ratios must be positive".into()));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split ratios must sum to 1".into()));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[0x53504c4954]));
    let mut sizes: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut used = 0;
    for &r in &ratios[..ratios.len() - 1] {
        let s = ((n as f64 * r).round() as usize).min(n - used);
        sizes.push(s);
        used += s;
    }
    sizes.push(n - used);
    let mut parts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for s in sizes {
        let mut idx = order[offset..offset + s].to_vec();
        idx.sort_unstable();
        parts.push(idx.into_iter().map(|i| items[i].clone()).collect());
        offset += s;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{change_degree, write_dataset};
    use std::collections::BTreeSet;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            num_videos: 6,
            frames_per_video: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(write_dataset(&a.videos), write_dataset(&b.videos));
        assert_eq!(a.embeddings.to_text(), b.embeddings.to_text());
        let c = generate(&small(4)).unwrap();
        assert_ne!(write_dataset(&a.videos), write_dataset(&c.videos));
    }

    #[test]
    fn zero_change_rate_is_static() {
        let cfg = GenConfig {
            change_rate: 0.0,
            num_videos: 20,
            ..small(1)
        };
        for v in generate(&cfg).unwrap().videos {
            assert_eq!(change_degree(&v), 0.0);
        }
    }

    #[test]
    fn full_change_rate_changes_nearly_always() {
        let cfg = GenConfig {
            change_rate: 1.0,
            num_videos: 100,
            ..small(2)
        };
        let videos = generate(&cfg).unwrap().videos;
        let mean = videos.iter().map(change_degree).sum::<f64>() / videos.len() as f64;
        assert!(mean > 0.9, "{mean}");
    }

    #[test]
    fn one_predicate_per_category() {
        let ds = generate(&small(5)).unwrap();
        let groups = ds.vocabulary.category_groups();
        for v in &ds.videos {
            for f in &v.frames {
                for e in &f.edges {
                    for (_, ids) in &groups {
                        assert_eq!(e.labels.iter().filter(|l| ids.contains(l)).count(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn values_survive_file_precision() {
        let ds = generate(&small(9)).unwrap();
        let text = write_dataset(&ds.videos);
        let back = crate::scenegraph::parse_dataset(&text, "gen", 36).unwrap();
        assert_eq!(back, ds.videos);
        let emb = CropEmbeddings::parse(&ds.embeddings.to_text(), "emb").unwrap();
        assert_eq!(emb, ds.embeddings);
    }

    #[test]
    fn dropout_removes_pairs() {
        let cfg = GenConfig {
            pair_dropout: 0.5,
            num_videos: 10,
            ..small(11)
        };
        let ds = generate(&cfg).unwrap();
        let counts: BTreeSet<usize> = ds.videos.iter().flat_map(|v| v.frames.iter().map(|f| f.edges.len())).collect();
        assert!(counts.len() > 1);
        for v in &ds.videos {
            for f in &v.frames {
                for e in &f.edges {
                    assert!(ds.embeddings.get(&v.video_id, f.frame_index, e.key()).is_some());
                }
            }
        }
    }

    #[test]
    fn detector_is_deterministic_and_valid() {
        let mut a = generate(&small(1)).unwrap().videos;
        let mut b = a.clone();
        simulate_detector(&mut a, DetectorNoise { box_jitter: 0.1, class_confusion: 0.5 }, 36, 4);
        simulate_detector(&mut b, DetectorNoise { box_jitter: 0.1, class_confusion: 0.5 }, 36, 4);
        assert_eq!(a, b);
        let mut wrong = 0;
        for v in &a {
            v.validate().unwrap();
            for f in &v.frames {
                for e in &f.entities {
                    e.validate().unwrap();
                    wrong += usize::from(e.predicted_class() != e.class_id);
                }
            }
        }
        assert!(wrong > 0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&GenConfig { change_rate: 1.5, ..small(1) }).is_err());
        assert!(generate(&GenConfig { num_videos: 0, ..small(1) }).is_err());
        assert!(generate(&GenConfig { subtlety: -1.0, ..small(1) }).is_err());
    }

    #[test]
    fn split_sizes_and_coverage() {
        let items: Vec<usize> = (0..10).collect();
        let parts = split(&items, &[0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 1, 1]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(parts, split(&items, &[0.8, 0.1, 0.1], 3).unwrap());
        assert!(split::<usize>(&[], &[1.0], 3).is_err());
        assert!(split(&items, &[0.5, 0.4], 3).is_err());
    }
}
