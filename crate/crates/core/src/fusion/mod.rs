//! Relation representation pipeline: input assembly, intra-frame spatial
//! encoder, per-pair causal temporal decoder, and the short-term message
//! token that gates the previous observation into the current feature.

mod layers;
mod layout;

pub use layers::{Builder, Ctx, LayerNorm, Linear, SelfAttention, TransformerLayer};
pub use layout::{rearrange_by_frame, rearrange_by_pair, Candidates, PairRow, VideoLayout};

use rand::Rng;

use crate::autograd::{uniform, ParamId, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_temporal_positions: usize,
    /// Width of the learned entity-class embeddings fed into assembly.
    pub semantic_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            spatial_layers: 1,
            temporal_layers: 3,
            heads: 8,
            ff_dim: 128,
            dropout: 0.1,
            max_temporal_positions: 64,
            semantic_dim: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ff_dim == 0 || self.semantic_dim == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::HeadCount {
                heads: self.heads,
                dim: self.d_model,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_temporal_positions == 0 {
            return Err(Error::Config("max_temporal_positions must be positive".into()));
        }
        Ok(())
    }
}

/// Which fusion stages are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionFlags {
    pub spatial: bool,
    pub temporal_decoder: bool,
    pub message_token: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        Self {
            spatial: true,
            temporal_decoder: true,
            message_token: true,
        }
    }
}

/// Input widths the fusion stack is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub visual_dim: usize,
    pub crop_dim: usize,
    pub num_entity_classes: usize,
}

/// Feed-forward gate `g`: hidden ReLU layer then a sigmoid per entry.
#[derive(Clone, Debug)]
pub struct MessageGate {
    pub hidden: Linear,
    pub out: Linear,
}

impl MessageGate {
    pub fn forward(&self, ctx: &mut Ctx<'_>, current: Var, previous: Var) -> Result<Var> {
        let x = ctx.tape.concat_cols(&[current, previous])?;
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let z = self.out.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(z))
    }
}

#[derive(Clone, Debug)]
pub struct RelationFusion {
    pub config: FusionConfig,
    pub flags: FusionFlags,
    pub class_embedding: ParamId,
    pub input_projection: Linear,
    pub spatial: Vec<TransformerLayer>,
    pub temporal_position: Option<ParamId>,
    pub temporal: Vec<TransformerLayer>,
    pub gate: Option<MessageGate>,
}

/// Per-row features after each stage, rows in the layout's canonical order.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub assembled: Var,
    pub fused: Var,
    pub token_augmented: Var,
    pub gate: Option<Var>,
}

impl RelationFusion {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        config: &FusionConfig,
        flags: FusionFlags,
        dims: FusionDims,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let table = uniform(b.rng, vec![dims.num_entity_classes, config.semantic_dim], 0.5);
        let class_embedding = b.add("fusion.class_embedding", table)?;
        let in_dim = 2 * dims.visual_dim + dims.crop_dim + 2 * config.semantic_dim;
        let input_projection = Linear::new(b, "fusion.input", in_dim, d)?;
        let spatial = if flags.spatial {
            (0..config.spatial_layers)
                .map(|i| {
                    TransformerLayer::new(b, &format!("fusion.spatial.{i}"), d, config.heads, config.ff_dim, config.dropout)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (temporal_position, temporal) = if flags.temporal_decoder {
            let table = uniform(b.rng, vec![config.max_temporal_positions, d], 0.1);
            let pos = b.add("fusion.temporal.position", table)?;
            let layers = (0..config.temporal_layers)
                .map(|i| {
                    TransformerLayer::new(b, &format!("fusion.temporal.{i}"), d, config.heads, config.ff_dim, config.dropout)
                })
                .collect::<Result<_>>()?;
            (Some(pos), layers)
        } else {
            (None, Vec::new())
        };
        let gate = if flags.message_token {
            Some(MessageGate {
                hidden: Linear::new(b, "fusion.gate.hidden", 2 * d, d)?,
                out: Linear::new(b, "fusion.gate.out", d, d)?,
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            flags,
            class_embedding,
            input_projection,
            spatial,
            temporal_position,
            temporal,
            gate,
        })
    }

    /// Projects `concat(subject visual, object visual, crop, subject class
    /// embedding, object class embedding)` to `d_model` for every row.
    pub fn assemble(&self, ctx: &mut Ctx<'_>, layout: &VideoLayout) -> Result<Var> {
        let feats = ctx.tape.constant(layout.features.clone());
        let table = ctx.p(self.class_embedding);
        let subj: Vec<Option<usize>> = layout.rows.iter().map(|r| Some(r.subject_class)).collect();
        let obj: Vec<Option<usize>> = layout.rows.iter().map(|r| Some(r.object_class)).collect();
        let se = ctx.tape.gather_rows(table, &subj)?;
        let oe = ctx.tape.gather_rows(table, &obj)?;
        let x = ctx.tape.concat_cols(&[feats, se, oe])?;
        self.input_projection.forward(ctx, x)
    }

    /// Self-attention among the relations of each frame; no position embedding.
    pub fn spatial_encode(&self, ctx: &mut Ctx<'_>, x: Var, layout: &VideoLayout) -> Result<Var> {
        if self.spatial.is_empty() {
            return Ok(x);
        }
        let mask = layout.spatial_mask();
        let mut h = x;
        for layer in &self.spatial {
            h = layer.forward(ctx, h, Some(&mask))?;
        }
        Ok(h)
    }

    /// Per-pair causal decoding with temporal position embeddings.
    ///
    /// Rows are regrouped pair-major, decoded, and returned in frame-major order.
    pub fn temporal_decode(&self, ctx: &mut Ctx<'_>, x: Var, layout: &VideoLayout) -> Result<Var> {
        let Some(pos_id) = self.temporal_position else { return Ok(x) };
        let max = self.config.max_temporal_positions;
        if layout.num_frames > max {
            return Err(Error::SequenceTooLong {
                len: layout.num_frames,
                max,
            });
        }
        let order = layout.pair_major_order();
        let mut inverse = vec![0; order.len()];
        for (k, &r) in order.iter().enumerate() {
            inverse[r] = k;
        }
        let gather: Vec<Option<usize>> = order.iter().map(|&r| Some(r)).collect();
        let seq = ctx.tape.gather_rows(x, &gather)?;
        let table = ctx.p(pos_id);
        let positions: Vec<Option<usize>> = order.iter().map(|&r| Some(layout.rows[r].frame_pos)).collect();
        let pe = ctx.tape.gather_rows(table, &positions)?;
        let mut h = ctx.tape.add(seq, pe)?;
        let mask = layout.temporal_mask(&order);
        for layer in &self.temporal {
            h = layer.forward(ctx, h, Some(&mask))?;
        }
        let back: Vec<Option<usize>> = inverse.into_iter().map(Some).collect();
        ctx.tape.gather_rows(h, &back)
    }

    /// `e_r = concat(e_f, e_prev * g(concat(e_f, e_prev)))` where `e_prev` is
    /// the pair's previous observation, or zeros at its first frame.
    ///
    /// Without the message token the second half is all zeros.
    pub fn message_fuse(&self, ctx: &mut Ctx<'_>, fused: Var, layout: &VideoLayout) -> Result<(Var, Option<Var>)> {
        let prev = layout.previous_in_pair();
        match &self.gate {
            Some(gate) => {
                let previous = ctx.tape.gather_rows(fused, &prev)?;
                let m = gate.forward(ctx, fused, previous)?;
                let gated = ctx.tape.mul(previous, m)?;
                Ok((ctx.tape.concat_cols(&[fused, gated])?, Some(m)))
            }
            None => {
                let zeros = ctx
                    .tape
                    .constant(crate::autograd::Tensor::zeros(ctx.value(fused).shape().to_vec()));
                Ok((ctx.tape.concat_cols(&[fused, zeros])?, None))
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, layout: &VideoLayout) -> Result<FusionOutput> {
        let assembled = self.assemble(ctx, layout)?;
        let s = self.spatial_encode(ctx, assembled, layout)?;
        let fused = self.temporal_decode(ctx, s, layout)?;
        let (token_augmented, gate) = self.message_fuse(ctx, fused, layout)?;
        Ok(FusionOutput {
            assembled,
            fused,
            token_augmented,
            gate,
        })
    }
}
