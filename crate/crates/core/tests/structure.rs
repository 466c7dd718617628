//! Structural identities of the attention, local-branch and fusion modules.

use dalg_core::attention::{mhsa, window_merge_average, window_partition, MhsaParams, WindowLayout};
use dalg_core::backbone::Backbone;
use dalg_core::config::{FusionConfig, LocalBranchConfig};
use dalg_core::fusion::FusionModule;
use dalg_core::local::{spatial_attention, LocalBranch, SpatialAttnParams};
use dalg_core::{FusionKind, Graph, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-std..std);
        }
    }
}

fn round_trip(batch: usize, h: usize, w: usize, window: usize, stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64((h * 31 + w * 7 + window * 3 + stride) as u64);
    let layout = WindowLayout::new(batch, h, w, window, stride).unwrap();
    let x = uniform(&[batch, h, w, 5], &mut rng);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xn = g.constant(x.clone()).unwrap();
    let win = window_partition(&mut g, xn, &layout).unwrap();
    let back = window_merge_average(&mut g, win, &layout).unwrap();
    g.value(back).max_abs_diff(&x).unwrap()
}

#[test]
fn partition_then_merge_reconstructs_the_map() {
    // divisible, overlapping, and padded extents
    for &(h, w, win, stride) in &[(4, 4, 2, 2), (4, 4, 2, 1), (8, 8, 4, 2), (7, 5, 3, 2), (6, 5, 3, 2), (5, 9, 4, 3), (6, 6, 4, 4)] {
        let err = round_trip(2, h, w, win, stride);
        assert!(err < 1e-12, "{h}x{w} window {win} stride {stride}: {err:e}");
    }
    assert!(WindowLayout::new(1, 6, 5, 3, 2).unwrap().has_padding());
}

#[test]
fn local_merge_without_attention_sees_f2() {
    // the branch's own layout, with the block stack skipped
    let cfg = LocalBranchConfig {
        enabled: true,
        use_win_msa: true,
        use_spatial: true,
        window_size: 4,
        window_stride: 3,
        n_blocks: 1,
        n_heads: 1,
        window_channel_dim: 4,
        out_dim: 8,
        ffn_hidden: 4,
        rel_pos_bias: false,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lb = LocalBranch::new(&mut store, &mut rng, &cfg).unwrap();
    let layout = lb.layout(1, 6, 6).unwrap();
    assert!(layout.has_padding());
    let x = uniform(&[1, 6, 6, 4], &mut rng);
    let mut g = Graph::new(&store);
    let xn = g.constant(x.clone()).unwrap();
    let win = window_partition(&mut g, xn, &layout).unwrap();
    let back = window_merge_average(&mut g, win, &layout).unwrap();
    assert!(g.value(back).max_abs_diff(&x).unwrap() < 1e-12);
}

fn fusion_cfg(stages: usize) -> FusionConfig {
    FusionConfig {
        kind: FusionKind::CrossAttention,
        stages,
        n_heads: 2,
        dim: 8,
        ffn_hidden: 12,
        normalize_output: true,
        pre_norm: false,
    }
}

#[test]
fn zero_ffn_fusion_is_normalised_global_vector() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fm = FusionModule::new(&mut store, &mut rng, &fusion_cfg(2)).unwrap();
    perturb(&mut store, 0.5, &mut rng);
    for st in &fm.stages {
        for id in [st.ffn.fc2.w, st.ffn.fc2.b.unwrap()] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let f_g = uniform(&[3, 8], &mut rng);
    let f_l = uniform(&[3, 2, 2, 8], &mut rng);
    let mut g = Graph::new(&store);
    let fg = g.constant(f_g).unwrap();
    let fl = g.constant(f_l).unwrap();
    let pooled = g.mean(fl, &[1, 2]).unwrap();
    let fused = fm.fuse(&mut g, fg, Some((fl, pooled))).unwrap();
    let direct = g.l2_normalize(fg).unwrap();
    assert_eq!(g.value(fused).data(), g.value(direct).data());
}

#[test]
fn one_stage_equals_truncated_two_stage_stack() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let two = FusionModule::new(&mut store, &mut rng, &fusion_cfg(2)).unwrap();
    perturb(&mut store, 0.3, &mut rng);
    let mut one = two.clone();
    one.stages.truncate(1);
    one.cfg.stages = 1;
    let f_g = uniform(&[2, 8], &mut rng);
    let f_l = uniform(&[2, 3, 3, 8], &mut rng);
    let mut g = Graph::new(&store);
    let fg = g.constant(f_g).unwrap();
    let fl = g.constant(f_l).unwrap();
    let a = two.cross_stack(&mut g, fg, fl, 1).unwrap();
    let pooled = g.mean(fl, &[1, 2]).unwrap();
    let b = one.fuse(&mut g, fg, Some((fl, pooled))).unwrap();
    let a = g.l2_normalize(a).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

/// Moves the spatial positions of every item of `[B, H, W, C]` by `perm`.
fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (hw, c) = (s[1] * s[2], s[3]);
    let mut out = t.clone();
    for b in 0..s[0] {
        for (dst, &src) in perm.iter().enumerate() {
            let d = (b * hw + dst) * c;
            let sidx = (b * hw + src) * c;
            out.data_mut()[d..d + c].copy_from_slice(&t.data()[sidx..sidx + c]);
        }
    }
    out
}

#[test]
fn fusion_ignores_the_order_of_local_positions() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fm = FusionModule::new(&mut store, &mut rng, &fusion_cfg(2)).unwrap();
    perturb(&mut store, 0.5, &mut rng);
    for _ in 0..50 {
        let f_g = uniform(&[2, 8], &mut rng);
        let f_l = uniform(&[2, 3, 3, 8], &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let run = |f_l: Tensor| {
            let mut g = Graph::new(&store);
            let fg = g.constant(f_g.clone()).unwrap();
            let fl = g.constant(f_l).unwrap();
            let pooled = g.mean(fl, &[1, 2]).unwrap();
            let f = fm.fuse(&mut g, fg, Some((fl, pooled))).unwrap();
            g.value(f).clone()
        };
        let d = run(f_l.clone()).max_abs_diff(&run(permute_positions(&f_l, &perm))).unwrap();
        assert!(d < 1e-10, "{d:e}");
    }
}

#[test]
fn spatial_attention_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..100 {
        let mut store = ParamStore::new();
        let p = SpatialAttnParams::new(&mut store, &mut rng, "sa", 6).unwrap();
        let scale = if draw % 2 == 0 { 1.0 } else { 10.0 };
        perturb(&mut store, scale, &mut rng);
        let f_r = uniform(&[2, 3, 3, 6], &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(f_r).unwrap();
        let s = spatial_attention(&mut g, x, &p).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v > 0.0), "draw {draw}");
    }
}

#[test]
fn toy_shapes_follow_the_contract() {
    let cfg = ModelConfig::toy();
    let model = dalg_core::DalgModel::new(&cfg, 0).unwrap();
    let x = uniform(&[2, 32, 32, 3], &mut ChaCha8Rng::seed_from_u64(7));
    let mut g = Graph::new(&model.store);
    let xn = g.constant(x).unwrap();
    let out = model.forward(&mut g, xn, dalg_core::StopGradient::Both).unwrap();
    assert_eq!(g.shape(out.backbone.f2), &[2, 4, 4, 64]);
    assert_eq!(g.shape(out.local.unwrap().f_l), &[2, 2, 2, 128]);
    assert_eq!(g.shape(out.f), &[2, 128]);
    let paper = ModelConfig::paper();
    assert_eq!(paper.backbone.dims[2] * 2, paper.descriptor_dim());
    assert_eq!(paper.local.window_channel_dim * 2, paper.local.out_dim);
    paper.validate().unwrap();
}

#[test]
fn backbone_items_are_independent() {
    let cfg = ModelConfig::toy();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bb = Backbone::new(&mut store, &mut rng, &cfg.backbone).unwrap();
    let a = uniform(&[1, 32, 32, 3], &mut rng);
    let b = uniform(&[1, 32, 32, 3], &mut rng);
    let both = Tensor::stack(&[a.reshape(&[32, 32, 3]).unwrap(), b.reshape(&[32, 32, 3]).unwrap()]).unwrap();
    let run = |x: &Tensor| {
        let mut g = Graph::new(&store);
        let xn = g.constant(x.clone()).unwrap();
        let out = bb.forward(&mut g, xn).unwrap();
        g.value(out.f_g).clone()
    };
    let alone = run(&both.rows(0, 1).unwrap());
    let joint = run(&both).rows(0, 1).unwrap();
    assert!(alone.max_abs_diff(&joint).unwrap() < 1e-12);
}

fn mhsa_setup(seed: u64) -> (ParamStore, MhsaParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = MhsaParams::new(&mut store, &mut rng, "attn", 6, 3).unwrap();
    perturb(&mut store, 0.5, &mut rng);
    (store, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mhsa_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7) {
        let (store, p) = mhsa_setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = uniform(&[n, 6], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::new(vec![n, 6], perm.iter().flat_map(|&i| x.data()[i * 6..i * 6 + 6].to_vec()).collect()).unwrap();
        let run = |x: Tensor| {
            let mut g = Graph::new(&store);
            let xn = g.constant(x).unwrap();
            let y = mhsa(&mut g, xn, 1, n, &p, None).unwrap();
            g.value(y).clone()
        };
        let y = run(x);
        let py = run(px);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..6 {
                prop_assert!((py.data()[dst * 6 + c] - y.data()[src * 6 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        spread in 0.1f64..200.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect()).unwrap();
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || rng.random_bool(0.7)).collect();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xn = g.constant(x).unwrap();
        for m in [None, Some(mask.as_slice())] {
            let y = g.masked_softmax(xn, m).unwrap();
            for (r, row) in g.value(y).data().chunks(cols).enumerate() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                if let Some(m) = m {
                    for (c, &v) in row.iter().enumerate() {
                        if !m[r * cols + c] {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }
}
