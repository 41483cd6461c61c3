mod common;

use common::{boxes, brute_force, compare, entity};
use tr2::metrics::{match_and_recall, strata, stratified_eval, EvalConfig, ScoredTriplet, Task, VideoRecall};

#[test]
fn matcher_agrees_with_exhaustive_search() {
    let (discrepancies, compared) = compare(1000, 2024);
    assert_eq!(discrepancies, 0, "{discrepancies} of {compared} recall values differ");
}

#[test]
fn five_truths_two_hits() {
    let bx = boxes();
    let person = entity(0, 0, bx[0]);
    let gt: Vec<ScoredTriplet> = (0..5)
        .map(|p| ScoredTriplet {
            subject: person,
            object: entity(1, 1, bx[2]),
            predicate: p,
            score: 1.0,
        })
        .collect();
    let mut preds = vec![gt[1], gt[3]];
    for p in 5..13 {
        preds.push(ScoredTriplet { predicate: p, ..gt[0] });
    }
    let cfg = EvalConfig {
        ks: vec![10],
        ..EvalConfig::default()
    };
    let r = match_and_recall(&preds, &gt, Task::PredCls, &cfg).unwrap();
    assert_eq!(r, vec![0.4]);
    assert_eq!(brute_force(&preds, &gt, Task::PredCls, 0.5), 2);
}

fn video(id: &str, degree: f64) -> VideoRecall {
    VideoRecall {
        video_id: id.into(),
        degree,
        frame_recalls: vec![degree, 1.0 - degree],
    }
}

#[test]
fn strata_follow_hand_sort() {
    let degrees = [0.5, 0.1, 0.9, 0.0, 0.3, 0.7, 0.0, 0.2, 0.8, 0.6];
    let videos: Vec<VideoRecall> = degrees.iter().enumerate().map(|(i, &d)| video(&format!("v{i}"), d)).collect();
    let by_hand = ["v2", "v8", "v5", "v9", "v0", "v4", "v7", "v1"];
    let got = strata(&videos);
    assert_eq!(got.len(), 9);
    for (i, s) in got[..8].iter().enumerate() {
        assert!((s.upper - (i + 1) as f64 / 10.0).abs() < 1e-12);
        assert_eq!(s.members, by_hand[..=i].to_vec());
    }
    assert!(got[8].is_zero_change());
    assert_eq!(got[8].members, vec!["v3", "v6"]);
}

#[test]
fn single_video_stratum_is_corpus_recall() {
    let v = vec![video("only", 0.25)];
    let rows = stratified_eval(&v, None);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].recall, 0.5);
    assert_eq!(rows[0].gain, None);
}
