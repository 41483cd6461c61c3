//! Frame-level scene graph types, box geometry, and dataset files.

mod geometry;
mod graph;
mod io;
mod vocab;

pub use geometry::{iou, union_box, BoundingBox};
pub use graph::{change_degree, EntityInstance, FrameGraph, PairKey, RelationEdge, VideoSample};
pub(crate) use graph::argmax;
pub use io::{
    fmt_f64, parse_dataset, read_dataset, round_to_file_precision, write_dataset, CropEmbeddings,
};
pub use vocab::{Predicate, PredicateCategory, Vocabulary};
