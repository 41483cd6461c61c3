use std::fmt::Write as _;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{RecallReport, Strategy, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    /// Batches where no guidance transition contributed.
    pub guidance_warnings: usize,
    pub validation: Option<RecallReport>,
}

/// Everything a training run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub task: Task,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<RecallReport>,
    pub wall_seconds: f64,
}

fn push_report(s: &mut String, prefix: &str, r: &RecallReport) {
    for e in &r.entries {
        let _ = writeln!(s, "{prefix} {} {} {} {:.17e}", e.task, e.strategy, e.k, e.recall);
    }
}

impl RunRecord {
    pub fn new(label: &str, config: &RunConfig) -> Self {
        Self {
            label: label.to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            task: config.task,
            epochs: Vec::new(),
            test: None,
            wall_seconds: 0.0,
        }
    }

    /// Loss curve of one component, one value per epoch.
    pub fn relation_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.relation).collect()
    }

    pub fn final_validation(&self) -> Option<&RecallReport> {
        self.epochs.iter().rev().find_map(|e| e.validation.as_ref())
    }

    /// Line-oriented text form. Wall time is the only field that varies
    /// between identical runs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label {}", self.label);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "task {}", self.task);
        let _ = writeln!(s, "wall_seconds {:.3}", self.wall_seconds);
        for e in &self.epochs {
            let l = &e.loss;
            let _ = writeln!(
                s,
                "epoch {} {:.17e} {:.17e} {:.17e} {:.17e} {} {}",
                e.epoch, l.object, l.relation, l.guidance, l.lambda, e.guidance_warnings, l.total
            );
            if let Some(r) = &e.validation {
                push_report(&mut s, &format!("val {}", e.epoch), r);
            }
        }
        if let Some(r) = &self.test {
            push_report(&mut s, "test", r);
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut rec = RunRecord {
            label: String::new(),
            seed: 0,
            config_hash: String::new(),
            task: Task::PredCls,
            epochs: Vec::new(),
            test: None,
            wall_seconds: 0.0,
        };
        for (i, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::parse(source, i + 1, m.to_string());
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let recall = |f: &[&str]| -> Result<(Task, Strategy, usize, f64)> {
                if f.len() != 4 {
                    return Err(bad("expected task strategy K recall"));
                }
                Ok((
                    Task::parse(f[0])?,
                    Strategy::parse(f[1])?,
                    f[2].parse().map_err(|_| bad("bad K"))?,
                    num(f[3])?,
                ))
            };
            match f.first().copied() {
                None => {}
                Some("label") => rec.label = line["label".len()..].trim().to_string(),
                Some("seed") => rec.seed = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad seed"))?,
                Some("config_hash") => rec.config_hash = f.get(1).unwrap_or(&"").to_string(),
                Some("task") => rec.task = Task::parse(f.get(1).unwrap_or(&""))?,
                Some("wall_seconds") => rec.wall_seconds = num(f.get(1).unwrap_or(&""))?,
                Some("epoch") if f.len() == 8 => {
                    let (o, r, g, l) = (num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?);
                    rec.epochs.push(EpochRecord {
                        epoch: f[1].parse().map_err(|_| bad("bad epoch"))?,
                        loss: total_loss(o, r, g, l)?,
                        guidance_warnings: f[6].parse().map_err(|_| bad("bad warning count"))?,
                        validation: None,
                    });
                }
                Some("val") if f.len() >= 2 => {
                    let epoch: usize = f[1].parse().map_err(|_| bad("bad epoch"))?;
                    let (t, st, k, v) = recall(&f[2..])?;
                    let e = rec
                        .epochs
                        .iter_mut()
                        .find(|e| e.epoch == epoch)
                        .ok_or_else(|| bad("validation before its epoch line"))?;
                    e.validation.get_or_insert_with(RecallReport::default).push(t, st, k, v);
                }
                Some("test") => {
                    let (t, st, k, v) = recall(&f[1..])?;
                    rec.test.get_or_insert_with(RecallReport::default).push(t, st, k, v);
                }
                Some(other) => return Err(bad(&format!("unknown record line {other:?}"))),
            }
        }
        Ok(rec)
    }
}

pub const MERGED_HEADER: &str = "run,seed,config_hash,split,task,strategy,K,recall";

/// One CSV over several runs: test recall when present, otherwise the
/// final validation recall.
pub fn merge_records(records: &[RunRecord]) -> String {
    let mut s = format!("{MERGED_HEADER}\n");
    for r in records {
        let (split, report) = match (&r.test, r.final_validation()) {
            (Some(t), _) => ("test", t),
            (None, Some(v)) => ("val", v),
            (None, None) => continue,
        };
        for e in &report.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6}",
                r.label, r.seed, r.config_hash, split, e.task, e.strategy, e.k, e.recall
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut rec = RunRecord::new("tr2", &RunConfig::default());
        let mut rep = RecallReport::default();
        rep.push(Task::PredCls, Strategy::WithConstraints, 10, 0.123456789);
        rec.epochs.push(EpochRecord {
            epoch: 1,
            loss: total_loss(0.5, 0.25, 0.125, 0.0).unwrap(),
            guidance_warnings: 2,
            validation: Some(rep.clone()),
        });
        rec.test = Some(rep);
        rec.wall_seconds = 1.5;
        let back = RunRecord::parse(&rec.to_text(), "rec").unwrap();
        assert_eq!(back, rec);
        assert!(merge_records(&[back]).lines().nth(1).unwrap().starts_with("tr2,7,"));
    }
}
