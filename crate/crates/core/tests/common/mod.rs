//! Random matcher instances and an exhaustive matching oracle.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tr2::metrics::{hits, match_and_recall, select_predictions, EvalConfig, PairPrediction, ScoredTriplet, Strategy, Task, TripletEntity};
use tr2::scenegraph::BoundingBox;

pub fn boxes() -> Vec<BoundingBox> {
    vec![
        BoundingBox::new(0.0, 0.0, 0.4, 0.4).unwrap(),
        BoundingBox::new(0.05, 0.05, 0.45, 0.45).unwrap(),
        BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap(),
        BoundingBox::new(0.1, 0.5, 0.3, 0.95).unwrap(),
    ]
}

pub struct Instance {
    pub gt: Vec<ScoredTriplet>,
    pub pairs: Vec<PairPrediction>,
    pub groups: Vec<Vec<usize>>,
}

pub fn entity(id: u32, class: usize, bbox: BoundingBox) -> TripletEntity {
    TripletEntity {
        instance_id: id,
        class_id: class,
        bbox,
    }
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let bx = boxes();
    let num_pairs = rng.random_range(1..=4);
    let num_predicates = rng.random_range(1..=5);
    let person = entity(0, 0, bx[rng.random_range(0..bx.len())]);
    let mut gt = Vec::new();
    let mut pairs = Vec::new();
    for o in 1..=num_pairs as u32 {
        let object = entity(o, rng.random_range(1..3), bx[rng.random_range(0..bx.len())]);
        let mut labels: Vec<usize> = (0..num_predicates).filter(|_| rng.random_bool(0.5)).collect();
        if labels.is_empty() {
            labels.push(rng.random_range(0..num_predicates));
        }
        for p in labels {
            gt.push(ScoredTriplet {
                subject: person,
                object,
                predicate: p,
                score: 1.0,
            });
        }
        let predicted_object = entity(
            o,
            if rng.random_bool(0.7) { object.class_id } else { rng.random_range(1..3) },
            if rng.random_bool(0.6) { object.bbox } else { bx[rng.random_range(0..bx.len())] },
        );
        pairs.push(PairPrediction {
            subject: person,
            object: predicted_object,
            subject_score: 1.0,
            object_score: rng.random_range(0.2..1.0),
            predicate_scores: (0..num_predicates).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect(),
        });
    }
    let mut order: Vec<usize> = (0..num_predicates).collect();
    order.shuffle(rng);
    let groups = match rng.random_range(0..3) {
        0 => Vec::new(),
        _ => {
            let cuts = rng.random_range(1..=num_predicates);
            let mut gs = vec![Vec::new(); cuts];
            for (i, p) in order.into_iter().enumerate() {
                gs[i % cuts].push(p);
            }
            gs
        }
    };
    Instance { gt, pairs, groups }
}

/// Best one-to-one assignment, exhaustively over each ground-truth triplet's
/// choice of an unused prediction (or none).
pub fn brute_force(preds: &[ScoredTriplet], gt: &[ScoredTriplet], task: Task, thr: f64) -> usize {
    fn go(
        g: usize,
        used: u64,
        preds: &[ScoredTriplet],
        gt: &[ScoredTriplet],
        task: Task,
        thr: f64,
        memo: &mut HashMap<(usize, u64), usize>,
    ) -> usize {
        if g == gt.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(g, used)) {
            return v;
        }
        let mut best = go(g + 1, used, preds, gt, task, thr, memo);
        for (p, pred) in preds.iter().enumerate() {
            if used & (1 << p) == 0 && hits(pred, &gt[g], task, thr) {
                best = best.max(1 + go(g + 1, used | (1 << p), preds, gt, task, thr, memo));
            }
        }
        memo.insert((g, used), best);
        best
    }
    go(0, 0, preds, gt, task, thr, &mut HashMap::new())
}

/// Compares the matcher with the oracle on `n` random instances over every
/// task and strategy; returns `(discrepancies, compared)`.
pub fn compare(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut discrepancies = 0;
    let mut compared = 0;
    for _ in 0..n {
        let inst = instance(&mut rng);
        for task in Task::ALL {
            for strategy in Strategy::ALL {
                let cfg = EvalConfig {
                    ks: vec![1, 2, 5, 10, 20],
                    task,
                    top_k: 2,
                    budget: 7,
                    constraint_groups: inst.groups.clone(),
                    ..EvalConfig::default()
                };
                let preds = select_predictions(&inst.pairs, strategy, &cfg);
                let got = match_and_recall(&preds, &inst.gt, task, &cfg).unwrap();
                for (k, r) in cfg.ks.iter().zip(got) {
                    let top = &preds[..(*k).min(preds.len())];
                    let want = brute_force(top, &inst.gt, task, cfg.iou_threshold) as f64 / inst.gt.len() as f64;
                    compared += 1;
                    if r != want {
                        discrepancies += 1;
                    }
                }
            }
        }
    }
    (discrepancies, compared)
}
