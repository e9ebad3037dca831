mod common;

use common::{normal, rng};
use proptest::prelude::*;
use pumba::autodiff::Tape;
use pumba::params::ParamStore;
use pumba::ssm::{bidirectional_fuse, selective_scan, Discretization};
use pumba::tensor::{depthwise_conv1d, layer_norm, matmul, reverse_rows, silu_scalar};
use pumba::vim::{
    class_index, embed_and_insert_cls, patchify, unpatchify, EncoderDims, ImageEncoder, PatchGrid, VimBlock,
    LAYER_NORM_EPS,
};
use pumba::Tensor;

const RULE: Discretization = Discretization::Euler;

fn dims() -> EncoderDims {
    EncoderDims {
        embed_dim: 8,
        depth: 2,
        expand: 2,
        state_dim: 4,
        conv_width: 4,
    }
}

/// Randomises every parameter so no path is accidentally trivial.
fn randomise(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let noise = normal(t.shape(), &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
}

/// One block written out with the standalone tensor functions.
fn block_by_hand(block: &VimBlock, store: &ParamStore<f64>, u: &Tensor<f64>) -> Tensor<f64> {
    let d = block.inner;
    let n = layer_norm(u, store.get(block.norm_g), store.get(block.norm_b), LAYER_NORM_EPS).unwrap();
    let xz = matmul(&n, store.get(block.in_proj)).unwrap();
    let (t, _) = xz.dims2();
    let x = Tensor::from_fn([t, d], |i| xz.data()[(i / d) * 2 * d + i % d]);
    let z = Tensor::from_fn([t, d], |i| xz.data()[(i / d) * 2 * d + d + i % d]);
    let path = |dir: usize, input: &Tensor<f64>| {
        let ids = &block.dirs[dir];
        let conv = depthwise_conv1d(input, store.get(ids.conv_w), store.get(ids.conv_b)).unwrap();
        let xc = conv.map(silu_scalar);
        selective_scan(&xc, &ids.ssm_params(store, RULE)).unwrap()
    };
    let y_fwd = path(0, &x);
    let y_bwd = reverse_rows(&path(1, &reverse_rows(&x)));
    let fused = bidirectional_fuse(&y_fwd, &y_bwd, &z).unwrap();
    let out = matmul(&fused, store.get(block.out_proj)).unwrap();
    u.zip_map(&out, "residual", |a, b| a + b).unwrap()
}

#[test]
fn stacked_blocks_match_hand_unrolled_composition() {
    for seed in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(seed);
        let b1 = VimBlock::new(&mut store, "b1", &dims(), &mut r);
        let b2 = VimBlock::new(&mut store, "b2", &dims(), &mut r);
        randomise(&mut store, seed);
        let u = normal(&[9, 8], &mut r);
        let lib = b2.apply(&store, &b1.apply(&store, &u, RULE).unwrap(), RULE).unwrap();
        let hand = block_by_hand(&b2, &store, &block_by_hand(&b1, &store, &u));
        assert!(lib.max_abs_diff(&hand) <= 1e-6, "seed {seed}: {}", lib.max_abs_diff(&hand));
    }
}

#[test]
fn zeroed_block_passes_input_through() {
    let mut store = ParamStore::<f32>::new();
    let block = VimBlock::new(&mut store, "b", &dims(), &mut rng(0));
    store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    let u = normal(&[7, 8], &mut rng(1)).cast::<f32>();
    assert_eq!(block.apply(&store, &u, RULE).unwrap(), u);
}

#[test]
fn single_token_directions_contribute_equally() {
    let mut store = ParamStore::<f64>::new();
    let block = VimBlock::new(&mut store, "b", &dims(), &mut rng(2));
    randomise(&mut store, 2);
    let (f, b) = (block.dirs[0].clone(), block.dirs[1].clone());
    for (src, dst) in [
        (f.conv_w, b.conv_w),
        (f.conv_b, b.conv_b),
        (f.w_b, b.w_b),
        (f.w_c, b.w_c),
        (f.w_delta, b.w_delta),
        (f.b_delta, b.b_delta),
        (f.a_log, b.a_log),
        (f.d_skip, b.d_skip),
    ] {
        *store.get_mut(dst) = store.get(src).clone();
    }
    let x = normal(&[1, block.inner], &mut rng(3));
    let run = |dir: usize| {
        let ids = &block.dirs[dir];
        let conv = depthwise_conv1d(&x, store.get(ids.conv_w), store.get(ids.conv_b)).unwrap();
        selective_scan(&conv.map(silu_scalar), &ids.ssm_params(&store, RULE)).unwrap()
    };
    assert_eq!(run(0), reverse_rows(&run(1)));
}

#[test]
fn class_token_position_and_length() {
    for p in [1usize, 4, 16, 64] {
        let m = 3;
        let patches = Tensor::<f32>::ones([p, 2]);
        let seq = embed_and_insert_cls(
            &patches,
            &Tensor::ones([2, m]),
            &Tensor::zeros([m]),
            &Tensor::full([m], -1.0),
            &Tensor::zeros([p + 1, m]),
        )
        .unwrap();
        assert_eq!(seq.class_index, p / 2);
        assert_eq!(class_index(p), p / 2);
        assert_eq!(seq.embeddings.dims2(), (p + 1, m));
        for r in 0..=p {
            let want = if r == p / 2 { -1.0 } else { 2.0 };
            assert!(seq.embeddings.row_slice(r).iter().all(|&v| v == want));
        }
    }
}

#[test]
fn zero_embedding_inputs_give_zero_sequence() {
    let seq = embed_and_insert_cls(
        &Tensor::<f32>::zeros([64, 5]),
        &Tensor::zeros([5, 4]),
        &Tensor::zeros([4]),
        &Tensor::zeros([4]),
        &Tensor::zeros([65, 4]),
    )
    .unwrap();
    assert_eq!((seq.embeddings.dims2(), seq.class_index), ((65, 4), 32));
    assert!(seq.embeddings.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_counts_follow_the_grid() {
    let grid = PatchGrid::new(32, 4, 13).unwrap();
    assert_eq!((grid.tokens(), grid.patch_width()), (64, 13 * 16));
    let img = normal(&[2, 6, 6], &mut rng(5)).cast::<f32>();
    let whole = patchify(&img, 6).unwrap();
    assert_eq!(whole.shape(), [1, 72]);
    assert_eq!(whole.data(), img.data());
}

proptest! {
    #[test]
    fn unpatchify_inverts_patchify(n in 1usize..4, side in 1usize..5, l in 1usize..5, seed in 0u64..500) {
        let a = side * l;
        let img = normal(&[n, a, a], &mut rng(seed)).cast::<f32>();
        let grid = PatchGrid::new(a, l, n).unwrap();
        let patches = patchify(&img, l).unwrap();
        prop_assert_eq!(patches.dims2(), (side * side, n * l * l));
        prop_assert_eq!(unpatchify(&patches, grid).unwrap(), img);
    }
}

fn encoder(seed: u64) -> (ImageEncoder, ParamStore<f32>) {
    let mut store = ParamStore::<f32>::new();
    let grid = PatchGrid::new(8, 2, 3).unwrap();
    let enc = ImageEncoder::new(&mut store, "enc", grid, &dims(), &mut rng(seed));
    (enc, store)
}

#[test]
fn encoding_is_deterministic_and_sensitive() {
    let (enc, store) = encoder(1);
    let img = normal(&[3, 8, 8], &mut rng(2)).cast::<f32>();
    let e = enc.encode(&store, &img, RULE).unwrap();
    assert_eq!(e.shape(), [8]);
    let again = enc.encode(&store, &img, RULE).unwrap();
    assert!(e.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let permuted = Tensor::from_fn([3, 8, 8], |i| img.data()[((i / 64 + 1) % 3) * 64 + i % 64]);
    let ep = enc.encode(&store, &permuted, RULE).unwrap();
    assert!(ep.max_abs_diff(&e) > 1e-3, "channel permutation moved {}", ep.max_abs_diff(&e));

    // swap the top-left and bottom-right 2×2 patches
    let mut swapped = img.clone();
    for c in 0..3 {
        for dy in 0..2 {
            for dx in 0..2 {
                let p = c * 64 + dy * 8 + dx;
                let q = c * 64 + (6 + dy) * 8 + 6 + dx;
                swapped.data_mut().swap(p, q);
            }
        }
    }
    let es = enc.encode(&store, &swapped, RULE).unwrap();
    assert!(es.max_abs_diff(&e) > 1e-4);
}

#[test]
fn every_parameter_receives_gradient() {
    let (enc, store) = encoder(3);
    let store = store.cast::<f64>();
    let img = normal(&[3, 8, 8], &mut rng(4));
    let head = normal(&[1, 8], &mut rng(5));
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape, true);
    let (cls, _) = enc.forward(&mut tape, &p, &img, RULE).unwrap();
    let h = tape.constant(head);
    let prod = tape.mul(cls, h).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    for (id, name, _) in store.iter() {
        let g = grads.wrt(p.var(id));
        assert!(g.max_abs() > 0.0, "{name} has no gradient");
    }
}
