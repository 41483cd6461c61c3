use std::fmt::Write as _;

use super::{train, Dataset, RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::fusion::FusionFlags;
use crate::guidance::GuidanceVariant;
use crate::metrics::{RecallReport, Strategy};

/// A named combination of ablation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub guidance: GuidanceVariant,
    pub flags: FusionFlags,
}

impl Variant {
    pub fn new(name: &str, guidance: GuidanceVariant, spatial: bool, decoder: bool, token: bool) -> Self {
        Self {
            name: name.to_string(),
            guidance,
            flags: FusionFlags {
                spatial,
                temporal_decoder: decoder,
                message_token: token,
            },
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            guidance: self.guidance,
            flags: self.flags,
            ..base.clone()
        }
    }
}

/// No guidance, binary change guidance, text guidance (full stack).
pub fn guidance_variants() -> Vec<Variant> {
    vec![
        Variant::new("TR2-", GuidanceVariant::None, true, true, true),
        Variant::new("TR2bin", GuidanceVariant::Binary, true, true, true),
        Variant::new("TR2", GuidanceVariant::TemporalDifference, true, true, true),
    ]
}

/// Per-frame guidance versus temporal-difference guidance.
pub fn difference_variants() -> Vec<Variant> {
    vec![
        Variant::new("direct", GuidanceVariant::Direct, true, true, true),
        Variant::new("temporal_difference", GuidanceVariant::TemporalDifference, true, true, true),
    ]
}

/// Spatial and temporal module rows, base row first.
pub fn module_variants() -> Vec<Variant> {
    let g = GuidanceVariant::TemporalDifference;
    vec![
        Variant::new("-/-", g, false, false, false),
        Variant::new("-/decoder+token", g, false, true, true),
        Variant::new("spatial/-", g, true, false, false),
        Variant::new("spatial/decoder", g, true, true, false),
        Variant::new("spatial/token", g, true, false, true),
        Variant::new("spatial/decoder+token", g, true, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub records: Vec<RunRecord>,
    /// Mean held-out recall at each K.
    pub recall: Vec<f64>,
    /// `recall` minus the first row's recall.
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub ks: Vec<usize>,
    pub strategy: Strategy,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    /// `variant,R@K...,delta@K...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for k in &self.ks {
            let _ = write!(s, ",R@{k}");
        }
        for k in &self.ks {
            let _ = write!(s, ",delta@{k}");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.variant.name);
            for v in r.recall.iter().chain(&r.delta) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

fn held_out(record: &RunRecord) -> Option<&RecallReport> {
    record.test.as_ref().or_else(|| record.final_validation())
}

/// Trains every variant with every seed and tabulates mean held-out recall
/// for the configured task under `strategy`.
pub fn ablate(base: &RunConfig, dataset: &Dataset, variants: &[Variant], seeds: &[u64], strategy: Strategy) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let ks = base.eval.ks.clone();
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in variants {
        let mut records = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig { seed, ..v.apply(base) };
            records.push(train(&cfg, dataset, &v.name)?.record);
        }
        let recall: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let vals: Vec<f64> = records
                    .iter()
                    .filter_map(|r| held_out(r).and_then(|rep| rep.get(base.task, strategy, k)))
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect();
        rows.push(AblationRow {
            variant: v.clone(),
            records,
            recall,
            delta: Vec::new(),
        });
    }
    let base_recall = rows[0].recall.clone();
    for r in &mut rows {
        r.delta = r.recall.iter().zip(&base_recall).map(|(a, b)| a - b).collect();
    }
    Ok(AblationTable { ks, strategy, rows })
}
