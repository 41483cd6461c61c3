use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tr2::autograd::{ParamStore, Tape, Tensor};
use tr2::fusion::{Builder, Ctx, Linear};
use tr2::guidance::{
    binary_change_term, combine_terms, direct_term, embed_text, temporal_difference_term, PromptTemplate,
    SentenceEmbedder, StubProvider, TextProvider, DEFAULT_PATTERN,
};
use tr2::losses::{entity_loss, relation_loss};
use tr2::scenegraph::Vocabulary;

fn set(store: &mut ParamStore, id: tr2::autograd::ParamId, data: Vec<f64>) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::new(shape, data).unwrap().requiring_grad();
}

fn head(store: &mut ParamStore, fan_in: usize, fan_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> Linear {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = {
        let mut b = Builder { store, rng: &mut rng };
        Linear::new(&mut b, "head", fan_in, fan_out).unwrap()
    };
    set(store, lin.weight, weight);
    set(store, lin.bias, bias);
    lin
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

enum Kind {
    Difference,
    Direct,
}

fn guidance_value(kind: Kind, store: &ParamStore, lin: &Linear, features: Tensor, transitions: &[(usize, usize)], teacher: &[Option<Vec<f64>>]) -> f64 {
    let mut ctx = Ctx::eval(store);
    let f = ctx.tape.constant(features);
    let term = match kind {
        Kind::Difference => temporal_difference_term(&mut ctx, lin, f, transitions, teacher).unwrap(),
        Kind::Direct => direct_term(&mut ctx, lin, f, teacher).unwrap(),
    };
    let (loss, warn) = combine_terms(&mut ctx, &term.into_iter().collect::<Vec<_>>()).unwrap();
    assert!(!warn);
    ctx.value(loss).item()
}

#[test]
fn scalar_difference_example() {
    let mut store = ParamStore::new();
    let lin = head(&mut store, 1, 1, vec![1.0], vec![0.0]);
    let features = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
    let teacher = vec![Some(vec![0.0]), Some(vec![1.0])];
    let v = guidance_value(Kind::Difference, &store, &lin, features, &[(0, 1)], &teacher);
    assert_eq!(v, 1.0);
}

#[test]
fn scalar_direct_example() {
    let mut store = ParamStore::new();
    let lin = head(&mut store, 1, 1, vec![1.0], vec![0.0]);
    let v = guidance_value(Kind::Direct, &store, &lin, Tensor::new(vec![1, 1], vec![2.0]).unwrap(), &[], &[Some(vec![1.0])]);
    assert_eq!(v, 1.0);
}

#[test]
fn matching_targets_give_zero() {
    let mut store = ParamStore::new();
    let lin = head(&mut store, 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
    let features = Tensor::new(vec![2, 2], vec![0.5, -1.0, 1.5, 2.0]).unwrap();
    let teacher = vec![Some(vec![0.5, -1.0]), Some(vec![1.5, 2.0])];
    assert_eq!(guidance_value(Kind::Difference, &store, &lin, features.clone(), &[(0, 1)], &teacher), 0.0);
    assert_eq!(guidance_value(Kind::Direct, &store, &lin, features, &[], &teacher), 0.0);
}

#[test]
fn constant_shift_separates_difference_from_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (rows, feat, text) = (5, 4, 3);
    let mut store = ParamStore::new();
    let lin = head(&mut store, feat, text, random(&mut rng, feat * text), random(&mut rng, text));
    let features = Tensor::new(vec![rows, feat], random(&mut rng, rows * feat)).unwrap();
    let transitions: Vec<(usize, usize)> = (1..rows).map(|t| (t - 1, t)).collect();
    let teacher: Vec<Option<Vec<f64>>> = (0..rows).map(|_| Some(random(&mut rng, text))).collect();
    let shift = random(&mut rng, text);
    let shifted: Vec<Option<Vec<f64>>> = teacher
        .iter()
        .map(|t| t.as_ref().map(|v| v.iter().zip(&shift).map(|(a, b)| a + b).collect()))
        .collect();
    let d0 = guidance_value(Kind::Difference, &store, &lin, features.clone(), &transitions, &teacher);
    let d1 = guidance_value(Kind::Difference, &store, &lin, features.clone(), &transitions, &shifted);
    assert!((d0 - d1).abs() <= 1e-12, "{d0} vs {d1}");
    let e0 = guidance_value(Kind::Direct, &store, &lin, features.clone(), &transitions, &teacher);
    let e1 = guidance_value(Kind::Direct, &store, &lin, features, &transitions, &shifted);
    assert!((e0 - e1).abs() > 1e-6, "direct loss ignored the shift");
}

fn bce_value(store: &ParamStore, lin: &Linear, features: Tensor, transitions: &[(usize, usize)], flags: &[f64]) -> f64 {
    let mut ctx = Ctx::eval(store);
    let f = ctx.tape.constant(features);
    let term = binary_change_term(&mut ctx, lin, f, transitions, flags).unwrap().unwrap();
    let (loss, _) = combine_terms(&mut ctx, &[term]).unwrap();
    ctx.value(loss).item()
}

#[test]
fn binary_change_loss_cases() {
    let transitions = [(0, 1), (1, 2), (2, 3)];
    let features = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 3.0]).unwrap();
    let flags = [1.0, 0.0, 1.0];

    let mut store = ParamStore::new();
    let half = head(&mut store, 1, 1, vec![0.0], vec![0.0]);
    assert!((bce_value(&store, &half, features.clone(), &transitions, &flags) - 2f64.ln()).abs() < 1e-15);

    let mut store = ParamStore::new();
    let sharp = head(&mut store, 1, 1, vec![1e4], vec![-10.0]);
    assert!(bce_value(&store, &sharp, features.clone(), &transitions, &flags) < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
    let mut store = ParamStore::new();
    let lin = head(&mut store, 1, 1, vec![w], vec![b]);
    let x = features.data();
    let hand: f64 = transitions
        .iter()
        .zip(flags)
        .map(|(&(p, c), y)| {
            let prob = 1.0 / (1.0 + (-(w * (x[c] - x[p]) + b)).exp());
            -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln())
        })
        .sum::<f64>()
        / 3.0;
    assert!((bce_value(&store, &lin, features, &transitions, &flags) - hand).abs() < 1e-12);
}

#[test]
fn no_transitions_yields_warning() {
    let mut store = ParamStore::new();
    let lin = head(&mut store, 1, 1, vec![1.0], vec![0.0]);
    let mut ctx = Ctx::eval(&store);
    let f = ctx.tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    assert!(temporal_difference_term(&mut ctx, &lin, f, &[], &[Some(vec![0.0])]).unwrap().is_none());
    let (loss, warn) = combine_terms(&mut ctx, &[]).unwrap();
    assert!(warn);
    assert_eq!(ctx.value(loss).item(), 0.0);
}

#[test]
fn multi_label_embedding_is_entrywise_mean() {
    let vocab = Vocabulary::default_desk();
    let template = PromptTemplate::new(DEFAULT_PATTERN).unwrap();
    let provider = TextProvider::Stub(StubProvider::new(16, 5));
    let mut emb = SentenceEmbedder::new(&vocab, &template, &provider);
    let labels = BTreeSet::from([1, 4]);
    let mean = emb.labels_embedding(0, 3, &labels).unwrap();
    let parts: Vec<Vec<f64>> = labels
        .iter()
        .map(|&p| embed_text(&emb.sentence(0, p, 3).unwrap(), &provider).unwrap().values)
        .collect();
    for (i, m) in mean.iter().enumerate() {
        assert!((m - (parts[0][i] + parts[1][i]) / 2.0).abs() < 1e-15);
    }
    let single = emb.labels_embedding(0, 3, &BTreeSet::from([4])).unwrap();
    assert_eq!(single, parts[1]);
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn focal_oracle(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            let (pt, at) = if y == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.max(1e-12).ln()
        })
        .sum();
    total / logits.len() as f64
}

fn relation_value(logits: &[f64], rows: usize, targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![rows, logits.len() / rows], logits.to_vec()).unwrap());
    let v = relation_loss(&mut tape, l, targets, alpha, gamma).unwrap();
    tape.value(v).item()
}

#[test]
fn focal_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, 8).iter().map(|v| v * 3.0).collect::<Vec<_>>();
    let targets: Vec<f64> = (0..8).map(|_| f64::from(rng.random_bool(0.4))).collect();
    let got = relation_value(&logits, 2, &targets, 0.25, 2.0);
    assert!((got - focal_oracle(&logits, &targets, 0.25, 2.0)).abs() < 1e-14);
}

#[test]
fn focal_without_focusing_is_half_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = random(&mut rng, 6);
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let bce: f64 = logits
        .iter()
        .zip(&targets)
        .map(|(&z, &y)| -(y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln()))
        .sum::<f64>()
        / 6.0;
    assert!((relation_value(&logits, 3, &targets, 0.5, 0.0) - 0.5 * bce).abs() < 1e-14);
}

#[test]
fn confident_correct_relations_cost_nothing() {
    let targets = [1.0, 0.0, 0.0, 1.0];
    let logits: Vec<f64> = targets.iter().map(|&y| if y == 1.0 { 30.0 } else { -30.0 }).collect();
    assert!(relation_value(&logits, 1, &targets, 0.25, 2.0) < 1e-6);
}

#[test]
fn entity_loss_matches_hand_softmax() {
    let logits: [f64; 6] = [0.3, -1.2, 2.0, 1.0, 0.0, -0.5];
    let targets = [2, 0];
    let hand: f64 = logits
        .chunks(3)
        .zip(targets)
        .map(|(row, y)| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![2, 3], logits.to_vec()).unwrap());
    let (v, _) = entity_loss(&mut tape, Some(l), &targets).unwrap();
    assert!((tape.value(v).item() - hand).abs() < 1e-14);

    let mut tape = Tape::new();
    let saturated = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1e6, 0.0]).unwrap());
    let (v, _) = entity_loss(&mut tape, Some(saturated), &[1]).unwrap();
    assert!(tape.value(v).item() < 1e-12);
}
