use std::collections::BTreeMap;

/// Per-frame recalls of one video at a fixed task, strategy and K.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecall {
    pub video_id: String,
    pub degree: f64,
    pub frame_recalls: Vec<f64>,
}

/// A group of videos: the most-changing `upper` fraction of the dataset,
/// or (with `upper == 0`) every video whose change degree is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub upper: f64,
    pub members: Vec<String>,
}

impl Stratum {
    pub fn is_zero_change(&self) -> bool {
        self.upper == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratumRow {
    pub stratum: Stratum,
    pub recall: f64,
    pub baseline_recall: Option<f64>,
    pub gain: Option<f64>,
}

pub const STRATA_HEADER: &str = "stratum_upper,recall,baseline_recall,gain";

impl StratumRow {
    pub fn to_csv(rows: &[StratumRow]) -> String {
        let mut s = format!("{STRATA_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in rows {
            s.push_str(&format!(
                "{:.2},{:.6},{},{}\n",
                r.stratum.upper,
                r.recall,
                opt(r.baseline_recall),
                opt(r.gain)
            ));
        }
        s
    }
}

/// Strata over videos sorted by change degree, most-changing first.
///
/// Non-zero videos form cumulative strata at each tenth of the dataset;
/// zero-degree videos form one extra stratum. Ties sort by video id.
pub fn strata(videos: &[VideoRecall]) -> Vec<Stratum> {
    let n = videos.len();
    let mut changing: Vec<&VideoRecall> = videos.iter().filter(|v| v.degree > 0.0).collect();
    changing.sort_by(|a, b| b.degree.total_cmp(&a.degree).then_with(|| a.video_id.cmp(&b.video_id)));
    let mut out = Vec::new();
    let mut last = 0;
    for decile in 1..=10 {
        let upper = decile as f64 / 10.0;
        let count = ((upper * n as f64).ceil() as usize).min(changing.len());
        if count > last {
            out.push(Stratum {
                upper,
                members: changing[..count].iter().map(|v| v.video_id.clone()).collect(),
            });
            last = count;
        }
    }
    let mut zero: Vec<String> = videos
        .iter()
        .filter(|v| v.degree <= 0.0)
        .map(|v| v.video_id.clone())
        .collect();
    if !zero.is_empty() {
        zero.sort();
        out.push(Stratum {
            upper: 0.0,
            members: zero,
        });
    }
    out
}

fn pooled(members: &[String], index: &BTreeMap<&str, &VideoRecall>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for m in members {
        if let Some(v) = index.get(m.as_str()) {
            s += v.frame_recalls.iter().sum::<f64>();
            n += v.frame_recalls.len();
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Recall per stratum (mean over the member videos' counted frames) and,
/// when a baseline is given, its recall and the gain over it.
pub fn stratified_eval(model: &[VideoRecall], baseline: Option<&[VideoRecall]>) -> Vec<StratumRow> {
    let index: BTreeMap<&str, &VideoRecall> = model.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let base_index: Option<BTreeMap<&str, &VideoRecall>> =
        baseline.map(|b| b.iter().map(|v| (v.video_id.as_str(), v)).collect());
    strata(model)
        .into_iter()
        .map(|stratum| {
            let recall = pooled(&stratum.members, &index);
            let baseline_recall = base_index.as_ref().map(|b| pooled(&stratum.members, b));
            StratumRow {
                gain: baseline_recall.map(|b| recall - b),
                recall,
                baseline_recall,
                stratum,
            }
        })
        .collect()
}
