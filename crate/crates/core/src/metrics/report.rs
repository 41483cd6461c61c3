use std::collections::BTreeMap;

use super::{Strategy, Task};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallEntry {
    pub task: Task,
    pub strategy: Strategy,
    pub k: usize,
    pub recall: f64,
}

/// Mean per-frame recall per task, strategy and K.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecallReport {
    pub entries: Vec<RecallEntry>,
}

pub const RECALL_HEADER: &str = "task,strategy,K,recall";

impl RecallReport {
    pub fn push(&mut self, task: Task, strategy: Strategy, k: usize, recall: f64) {
        self.entries.push(RecallEntry { task, strategy, k, recall });
    }

    pub fn get(&self, task: Task, strategy: Strategy, k: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.strategy == strategy && e.k == k)
            .map(|e| e.recall)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RECALL_HEADER}\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{:.6}\n", e.task, e.strategy, e.k, e.recall));
        }
        s
    }

    pub fn parse_csv(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == RECALL_HEADER => {}
            _ => return Err(Error::parse(source, 1, format!("expected header {RECALL_HEADER:?}"))),
        }
        let mut report = Self::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::parse(source, i + 1, "expected 4 fields"));
            }
            let task = Task::parse(f[0]).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
            let strategy = Strategy::parse(f[1]).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
            let k = f[2].parse().map_err(|_| Error::parse(source, i + 1, "bad K"))?;
            let recall = f[3].parse().map_err(|_| Error::parse(source, i + 1, "bad recall"))?;
            report.push(task, strategy, k, recall);
        }
        Ok(report)
    }

    /// Entry-wise mean over reports sharing the same cells.
    pub fn mean(reports: &[RecallReport]) -> RecallReport {
        let mut acc: BTreeMap<(Task, Strategy, usize), (f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for r in reports {
            for e in &r.entries {
                let key = (e.task, e.strategy, e.k);
                let slot = acc.entry(key).or_insert_with(|| {
                    order.push(key);
                    (0.0, 0)
                });
                slot.0 += e.recall;
                slot.1 += 1;
            }
        }
        let mut out = RecallReport::default();
        for key in order {
            let (s, n) = acc[&key];
            out.push(key.0, key.1, key.2, s / n as f64);
        }
        out
    }
}
