use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tr2::autograd::{ParamStore, Tensor};
use tr2::fusion::{Builder, Ctx, FusionConfig, FusionDims, FusionFlags, PairRow, RelationFusion, VideoLayout};
use tr2::scenegraph::PairKey;

type Mat = Vec<Vec<f64>>;

const VISUAL: usize = 2;
const CROP: usize = 3;

fn config() -> FusionConfig {
    FusionConfig {
        d_model: 4,
        spatial_layers: 1,
        temporal_layers: 2,
        heads: 2,
        ff_dim: 6,
        dropout: 0.0,
        max_temporal_positions: 4,
        semantic_dim: 2,
    }
}

fn dims() -> FusionDims {
    FusionDims {
        visual_dim: VISUAL,
        crop_dim: CROP,
        num_entity_classes: 5,
    }
}

fn build(flags: FusionFlags, seed: u64) -> (RelationFusion, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fusion = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        RelationFusion::new(&mut b, &config(), flags, dims()).unwrap()
    };
    // Move norms and biases off their initial values.
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") {
            let t = store.get(id);
            let data = t.data().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
            *store.get_mut(id) = Tensor::new(t.shape().to_vec(), data).unwrap().requiring_grad();
        }
    }
    (fusion, store)
}

/// Pair (0,1) in frames 0..3, pair (0,2) in frames 0 and 2, pair (0,3) in frame 1.
fn layout(seed: u64) -> VideoLayout {
    let spec: [(usize, u32, usize); 6] = [(0, 1, 1), (0, 2, 2), (1, 1, 1), (1, 3, 4), (2, 1, 1), (2, 2, 2)];
    let rows: Vec<PairRow> = spec
        .iter()
        .map(|&(f, o, oc)| PairRow {
            frame_pos: f,
            pair: PairKey::new(0, o),
            subject_class: 0,
            object_class: oc,
            labels: Some(BTreeSet::from([0])),
        })
        .collect();
    let width = 2 * VISUAL + CROP;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows.len() * width).map(|_| r.random_range(-1.0..1.0)).collect();
    VideoLayout {
        video_id: "v".into(),
        num_frames: 3,
        features: Tensor::new(vec![rows.len(), width], data).unwrap(),
        rows,
        skipped_frames: Vec::new(),
    }
}

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).clone()
}

fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|j| b.data()[j] + (0..fan_in).map(|i| row[i] * w.data()[i * fan_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

/// Multi-head attention by explicit loops; `allowed(i, j)` gates each score.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&j, e) in keys.iter().zip(&exps) {
                for c in 0..dh {
                    out[i][h * dh + c] += e / z * v[j][h * dh + c];
                }
            }
        }
    }
    out
}

fn transformer(store: &ParamStore, name: &str, x: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = linear(store, &format!("{name}.attn.query"), x);
    let k = linear(store, &format!("{name}.attn.key"), x);
    let v = linear(store, &format!("{name}.attn.value"), x);
    let a = attention(&q, &k, &v, config().heads, allowed);
    let a = linear(store, &format!("{name}.attn.output"), &a);
    let h = layer_norm(store, &format!("{name}.norm1"), &add(x, &a));
    let f = relu(&linear(store, &format!("{name}.ff_in"), &h));
    let f = linear(store, &format!("{name}.ff_out"), &f);
    layer_norm(store, &format!("{name}.norm2"), &add(&h, &f))
}

fn assert_close(got: &Tensor, want: &Mat, tol: f64, what: &str) {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    assert_eq!(got.len(), flat.len(), "{what}: size");
    for (i, (a, b)) in got.data().iter().zip(&flat).enumerate() {
        assert!((a - b).abs() <= tol, "{what}[{i}]: {a} vs {b}");
    }
}

#[test]
fn self_attention_matches_scalar_loops() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut tape = tr2::autograd::Tape::new();
    let x = tape.constant(Tensor::from_rows(&eye).unwrap());
    let out = tape.attention(x, x, x, 1, None).unwrap();
    let want = attention(&eye, &eye, &eye, 1, &|_, _| true);
    assert_close(tape.value(out), &want, 1e-14, "identity attention");
    let e = (1f64 / 2f64.sqrt()).exp();
    assert!((want[0][0] - e / (e + 1.0)).abs() < 1e-15);
}

#[test]
fn assemble_is_projection_of_known_concatenation() {
    let (fusion, store) = build(FusionFlags::default(), 1);
    let lay = layout(2);
    let mut ctx = Ctx::eval(&store);
    let got = fusion.assemble(&mut ctx, &lay).unwrap();
    let table = param(&store, "fusion.class_embedding");
    let concat: Mat = lay
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut v = lay.features.row(i).to_vec();
            v.extend_from_slice(table.row(r.subject_class));
            v.extend_from_slice(table.row(r.object_class));
            v
        })
        .collect();
    assert_close(ctx.value(got), &linear(&store, "fusion.input", &concat), 1e-12, "assemble");
}

#[test]
fn spatial_encoder_matches_per_frame_transformer() {
    let (fusion, store) = build(FusionFlags::default(), 3);
    let lay = layout(4);
    let mut ctx = Ctx::eval(&store);
    let x = fusion.assemble(&mut ctx, &lay).unwrap();
    let input = to_mat(ctx.value(x));
    let got = fusion.spatial_encode(&mut ctx, x, &lay).unwrap();
    let mut want = vec![Vec::new(); lay.len()];
    for f in 0..lay.num_frames {
        let idx: Vec<usize> = (0..lay.len()).filter(|&i| lay.rows[i].frame_pos == f).collect();
        let sub: Mat = idx.iter().map(|&i| input[i].clone()).collect();
        let out = transformer(&store, "fusion.spatial.0", &sub, &|_, _| true);
        for (k, &i) in idx.iter().enumerate() {
            want[i] = out[k].clone();
        }
    }
    assert_close(ctx.value(got), &want, 1e-12, "spatial");
}

#[test]
fn temporal_decoder_matches_per_pair_causal_oracle() {
    let (fusion, store) = build(FusionFlags::default(), 5);
    let lay = layout(6);
    let mut ctx = Ctx::eval(&store);
    let x = fusion.assemble(&mut ctx, &lay).unwrap();
    let input = to_mat(ctx.value(x));
    let got = fusion.temporal_decode(&mut ctx, x, &lay).unwrap();
    let pos = param(&store, "fusion.temporal.position");
    let pairs: BTreeSet<PairKey> = lay.rows.iter().map(|r| r.pair).collect();
    let mut want = vec![Vec::new(); lay.len()];
    for p in pairs {
        let idx: Vec<usize> = (0..lay.len()).filter(|&i| lay.rows[i].pair == p).collect();
        let mut h: Mat = idx
            .iter()
            .map(|&i| input[i].iter().zip(pos.row(lay.rows[i].frame_pos)).map(|(a, b)| a + b).collect())
            .collect();
        for l in 0..config().temporal_layers {
            h = transformer(&store, &format!("fusion.temporal.{l}"), &h, &|i, j| j <= i);
        }
        for (k, &i) in idx.iter().enumerate() {
            want[i] = h[k].clone();
        }
    }
    assert_close(ctx.value(got), &want, 1e-12, "temporal");
}

#[test]
fn message_fuse_matches_direct_formula() {
    let (fusion, store) = build(FusionFlags::default(), 7);
    let lay = layout(8);
    let mut ctx = Ctx::eval(&store);
    let out = fusion.forward(&mut ctx, &lay).unwrap();
    let fused = to_mat(ctx.value(out.fused));
    let d = config().d_model;
    let prev = lay.previous_in_pair();
    let gate_in: Mat = fused
        .iter()
        .zip(&prev)
        .map(|(f, p)| {
            let mut v = f.clone();
            v.extend(p.map_or(vec![0.0; d], |j| fused[j].clone()));
            v
        })
        .collect();
    let hidden = relu(&linear(&store, "fusion.gate.hidden", &gate_in));
    let z = linear(&store, "fusion.gate.out", &hidden);
    let m: Mat = z.iter().map(|r| r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).collect();
    let want: Mat = (0..lay.len())
        .map(|i| {
            let mut v = fused[i].clone();
            v.extend((0..d).map(|c| gate_in[i][d + c] * m[i][c]));
            v
        })
        .collect();
    assert_close(ctx.value(out.token_augmented), &want, 1e-12, "message fuse");
    let gate = ctx.value(out.gate.unwrap());
    assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    let e_r = ctx.value(out.token_augmented);
    for (i, p) in prev.iter().enumerate() {
        if p.is_none() {
            assert!(e_r.row(i)[d..].iter().all(|&v| v == 0.0), "row {i} is a first frame");
        }
    }
}

#[test]
fn zero_gate_gives_zero_second_half() {
    let (fusion, mut store) = build(FusionFlags::default(), 9);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).starts_with("fusion.gate.out") {
            let fill = if store.name(id).ends_with("bias") { -800.0 } else { 0.0 };
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::full(shape, fill).requiring_grad();
        }
    }
    let lay = layout(10);
    let mut ctx = Ctx::eval(&store);
    let out = fusion.forward(&mut ctx, &lay).unwrap();
    let e_r = ctx.value(out.token_augmented);
    let d = config().d_model;
    for i in 0..lay.len() {
        assert!(e_r.row(i)[d..].iter().all(|&v| v == 0.0));
        assert_eq!(&e_r.row(i)[..d], ctx.value(out.fused).row(i));
    }
}

fn perturb_row(lay: &VideoLayout, row: usize) -> VideoLayout {
    let mut out = lay.clone();
    let width = lay.features.cols();
    let mut data = lay.features.data().to_vec();
    for v in &mut data[row * width..(row + 1) * width] {
        *v += 0.7;
    }
    out.features = Tensor::new(lay.features.shape().to_vec(), data).unwrap();
    out
}

fn forward_rows(fusion: &RelationFusion, store: &ParamStore, lay: &VideoLayout) -> Mat {
    let mut ctx = Ctx::eval(store);
    let out = fusion.forward(&mut ctx, lay).unwrap();
    to_mat(ctx.value(out.token_augmented))
}

#[test]
fn all_stages_off_is_an_independent_per_row_classifier() {
    let flags = FusionFlags {
        spatial: false,
        temporal_decoder: false,
        message_token: false,
    };
    let (fusion, store) = build(flags, 11);
    assert!(store.names().all(|n| n.starts_with("fusion.input") || n == "fusion.class_embedding"));
    let lay = layout(12);
    let base = forward_rows(&fusion, &store, &lay);
    for target in 0..lay.len() {
        let moved = forward_rows(&fusion, &store, &perturb_row(&lay, target));
        for i in 0..lay.len() {
            assert_eq!(moved[i] != base[i], i == target, "perturbing row {target} affected row {i}");
        }
    }
}

#[test]
fn later_frames_never_influence_earlier_ones() {
    let (fusion, store) = build(FusionFlags::default(), 13);
    let lay = layout(14);
    let base = forward_rows(&fusion, &store, &lay);
    for target in 0..lay.len() {
        let moved = forward_rows(&fusion, &store, &perturb_row(&lay, target));
        let t = lay.rows[target].frame_pos;
        for i in 0..lay.len() {
            if lay.rows[i].frame_pos < t {
                assert_eq!(moved[i], base[i], "row {target} leaked into earlier row {i}");
            }
        }
        assert_ne!(moved[target], base[target]);
    }
}
