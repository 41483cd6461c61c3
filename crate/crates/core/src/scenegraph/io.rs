//! Line-oriented dataset and crop-embedding files.
//!
//! Dataset:
//! ```text
//! #video <id> <T>
//! #frame <t>
//! E <instance_id> <class_id> <x1> <y1> <x2> <y2> <feature...>
//! R <subject_id> <object_id> <pred,pred,...>
//! ```
//! Embeddings: `dim <d>` then `<video_id> <t> <subject_id> <object_id> <values...>`.
//! Floats are written with 9 significant digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use super::geometry::BoundingBox;
use super::graph::{EntityInstance, FrameGraph, PairKey, RelationEdge, VideoSample};
use crate::error::{Error, Result};

/// Formats with 9 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds to the precision the text formats store.
pub fn round_to_file_precision(v: f64) -> f64 {
    fmt_f64(v).parse().expect("formatted float parses")
}

pub fn write_dataset(videos: &[VideoSample]) -> String {
    let mut out = String::new();
    for v in videos {
        writeln!(out, "#video {} {}", v.video_id, v.frames.len()).unwrap();
        for f in &v.frames {
            writeln!(out, "#frame {}", f.frame_index).unwrap();
            for e in &f.entities {
                write!(out, "E {} {}", e.instance_id, e.class_id).unwrap();
                for c in e.bbox.as_array().iter().chain(&e.visual_feature) {
                    write!(out, " {}", fmt_f64(*c)).unwrap();
                }
                out.push('\n');
            }
            for r in &f.edges {
                let labels: Vec<String> = r.labels.iter().map(usize::to_string).collect();
                writeln!(out, "R {} {} {}", r.subject_id, r.object_id, labels.join(",")).unwrap();
            }
        }
    }
    out
}

fn parse_num<T: std::str::FromStr>(tok: &str, what: &str, src: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(src, line, format!("bad {what} {tok:?}")))
}

/// Parses a dataset file. `num_classes` sizes the one-hot detector scores.
pub fn parse_dataset(text: &str, source: &str, num_classes: usize) -> Result<Vec<VideoSample>> {
    struct Pending {
        id: String,
        declared: usize,
        frames: Vec<FrameGraph>,
        line: usize,
    }
    let mut videos = Vec::new();
    let mut current: Option<Pending> = None;
    let mut feature_dim: Option<usize> = None;

    let finish = |p: Pending, videos: &mut Vec<VideoSample>| -> Result<()> {
        if p.frames.len() != p.declared {
            return Err(Error::parse(
                source,
                p.line,
                format!("video {} declares {} frames, found {}", p.id, p.declared, p.frames.len()),
            ));
        }
        let v = VideoSample::new(p.id, p.frames).map_err(|e| Error::parse(source, p.line, e.to_string()))?;
        videos.push(v);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let Some(&head) = toks.first() else { continue };
        match head {
            "#video" => {
                if toks.len() != 3 {
                    return Err(Error::parse(source, ln, "expected `#video <id> <T>`"));
                }
                if let Some(p) = current.take() {
                    finish(p, &mut videos)?;
                }
                let declared: usize = parse_num(toks[2], "frame count", source, ln)?;
                current = Some(Pending {
                    id: toks[1].to_string(),
                    declared,
                    frames: Vec::new(),
                    line: ln,
                });
            }
            "#frame" => {
                let p = current
                    .as_mut()
                    .ok_or_else(|| Error::parse(source, ln, "#frame outside a video"))?;
                if toks.len() != 2 {
                    return Err(Error::parse(source, ln, "expected `#frame <t>`"));
                }
                p.frames.push(FrameGraph {
                    frame_index: parse_num(toks[1], "frame index", source, ln)?,
                    entities: Vec::new(),
                    edges: Vec::new(),
                });
            }
            "E" => {
                let frame = current
                    .as_mut()
                    .and_then(|p| p.frames.last_mut())
                    .ok_or_else(|| Error::parse(source, ln, "entity outside a frame"))?;
                if toks.len() < 8 {
                    return Err(Error::parse(source, ln, "entity line needs id, class, box, features"));
                }
                let id: u32 = parse_num(toks[1], "instance id", source, ln)?;
                let class: usize = parse_num(toks[2], "class id", source, ln)?;
                if class >= num_classes {
                    return Err(Error::parse(source, ln, format!("class {class} out of range")));
                }
                let nums = toks[3..]
                    .iter()
                    .map(|t| {
                        let v: f64 = parse_num(t, "number", source, ln)?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::parse(source, ln, "non-finite number"))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let bbox = BoundingBox::new(nums[0], nums[1], nums[2], nums[3])
                    .map_err(|e| Error::parse(source, ln, e.to_string()))?;
                let feature = nums[4..].to_vec();
                match feature_dim {
                    None => feature_dim = Some(feature.len()),
                    Some(d) if d != feature.len() => {
                        return Err(Error::parse(
                            source,
                            ln,
                            format!("feature dim {} differs from {d}", feature.len()),
                        ))
                    }
                    _ => {}
                }
                frame
                    .entities
                    .push(EntityInstance::exact(id, class, bbox, num_classes, feature));
            }
            "R" => {
                let frame = current
                    .as_mut()
                    .and_then(|p| p.frames.last_mut())
                    .ok_or_else(|| Error::parse(source, ln, "relation outside a frame"))?;
                if toks.len() != 4 {
                    return Err(Error::parse(source, ln, "expected `R <subj> <obj> <preds>`"));
                }
                let labels = toks[3]
                    .split(',')
                    .map(|t| parse_num(t, "predicate id", source, ln))
                    .collect::<Result<BTreeSet<usize>>>()?;
                frame.edges.push(RelationEdge {
                    subject_id: parse_num(toks[1], "subject id", source, ln)?,
                    object_id: parse_num(toks[2], "object id", source, ln)?,
                    labels,
                });
            }
            other => return Err(Error::parse(source, ln, format!("unknown record {other:?}"))),
        }
    }
    if let Some(p) = current.take() {
        finish(p, &mut videos)?;
    }
    Ok(videos)
}

pub fn read_dataset(path: &Path, num_classes: usize) -> Result<Vec<VideoSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), num_classes)
}

/// Cropped-region embeddings keyed by (video, frame index, pair).
#[derive(Clone, Debug, PartialEq)]
pub struct CropEmbeddings {
    dim: usize,
    table: BTreeMap<String, BTreeMap<(usize, PairKey), Vec<f64>>>,
}

impl CropEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, video: &str, frame: usize, pair: PairKey, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding has {} values, expected {}",
                values.len(),
                self.dim
            )));
        }
        self.table
            .entry(video.to_string())
            .or_default()
            .insert((frame, pair), values);
        Ok(())
    }

    pub fn get(&self, video: &str, frame: usize, pair: PairKey) -> Option<&[f64]> {
        self.table.get(video)?.get(&(frame, pair)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.table.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy holding only the listed videos.
    pub fn subset<'a>(&self, videos: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new(self.dim);
        for v in videos {
            if let Some(t) = self.table.get(v) {
                out.table.insert(v.to_string(), t.clone());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim {}\n", self.dim);
        for (video, rows) in &self.table {
            for ((t, pair), values) in rows {
                write!(out, "{video} {t} {} {}", pair.subject, pair.object).unwrap();
                for v in values {
                    write!(out, " {}", fmt_f64(*v)).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 1, "missing `dim` header"))?;
        let dim = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["dim", d] => parse_num::<usize>(d, "dimension", source, 1)?,
            _ => return Err(Error::parse(source, 1, "expected `dim <d>`")),
        };
        let mut out = Self::new(dim);
        for (i, line) in lines {
            let ln = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 + dim {
                return Err(Error::parse(
                    source,
                    ln,
                    format!("expected {} fields, found {}", 4 + dim, toks.len()),
                ));
            }
            let frame = parse_num(toks[1], "frame index", source, ln)?;
            let pair = PairKey::new(
                parse_num(toks[2], "subject id", source, ln)?,
                parse_num(toks[3], "object id", source, ln)?,
            );
            let values = toks[4..]
                .iter()
                .map(|t| parse_num(t, "number", source, ln))
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(source, ln, "non-finite number"));
            }
            out.insert(toks[0], frame, pair, values)?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
