#![allow(clippy::needless_range_loop)]

mod common;

use kdvlp::autograd::Graph;
use kdvlp::corpus::Image;
use kdvlp::encoder::{
    assemble_sequence, image_to_chw, sine_position_2d, text_embed, visual_embed, visual_embed_var, EncoderDims,
    EncoderParams, JointSequence, SequenceLayout, VisualGrid,
};
use kdvlp::fusion::{
    attention_map, attention_row, pool_phrase, pool_region, transformer_forward, FusionParams, HeadSelect,
};
use kdvlp::knowledge::BinaryMask;
use kdvlp::params::ParamStore;
use kdvlp::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder(d: usize, rng: &mut ChaCha8Rng) -> (ParamStore, EncoderParams) {
    let mut store = ParamStore::new();
    let dims = EncoderDims {
        in_channels: 3,
        conv_channels: [4, 6, 8],
        d,
        d_word: d,
        vocab_size: 12,
        max_text_len: 8,
        use_segments: true,
    };
    let p = EncoderParams::init(&mut store, &dims, rng);
    (store, p)
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(y, x, c, rng.random_range(0.0..1.0));
            }
        }
    }
    img
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn grid_of_a_64_pixel_image_is_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (store, p) = encoder(8, &mut rng);
    let mut g = Graph::new(&store);
    let v = visual_embed(&mut g, &random_image(64, 64, &mut rng), &p).unwrap();
    assert_eq!(v.grid_shape, (4, 4));
    assert_eq!(g.value(v.features).shape(), (16, 8));
}

#[test]
fn zero_image_gives_identical_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (store, p) = encoder(8, &mut rng);
    let mut g = Graph::new(&store);
    let v = visual_embed(&mut g, &Image::new(64, 64, 3), &p).unwrap();
    let f = g.value(v.features);
    for r in 1..f.rows() {
        assert_eq!(f.row(r), f.row(0));
    }
}

#[test]
fn pixel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (store, p) = encoder(8, &mut rng);
    let img = random_image(32, 32, &mut rng);
    let chw = image_to_chw(&img);
    let mean_out = |x: &Mat| {
        let mut g = Graph::new(&store);
        let input = g.input(x.clone());
        let v = visual_embed_var(&mut g, input, 32, 32, &p).unwrap();
        let f = g.value(v.features);
        f.sum() / f.len() as f64
    };
    let mut g = Graph::new(&store);
    let input = g.input(chw.clone());
    let v = visual_embed_var(&mut g, input, 32, 32, &p).unwrap();
    let n = g.value(v.features).len() as f64;
    let s = g.sum(v.features);
    let loss = g.scale(s, 1.0 / n);
    let grads = g.backward(loss, 1.0);
    let analytic = grads.get(input).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for _ in 0..40 {
        let k = rng.random_range(0..chw.len());
        let mut up = chw.clone();
        up.data_mut()[k] += h;
        let mut down = chw.clone();
        down.data_mut()[k] -= h;
        let num = (mean_out(&up) - mean_out(&down)) / (2.0 * h);
        let a = analytic.data()[k];
        if a.abs().max(num.abs()) < 1e-9 {
            continue;
        }
        assert!(common::rel_err(a, num) < 1e-4, "pixel {k}: {a} vs {num}");
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn sine_positions_are_pairwise_distinct_on_8x8() {
    let m = sine_position_2d((8, 8), 16).unwrap();
    for a in 0..64 {
        for b in a + 1..64 {
            let dist = m.row(a).iter().zip(m.row(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(dist > 1e-6, "cells {a} and {b}");
        }
    }
    let one = sine_position_2d((1, 1), 16).unwrap();
    assert_eq!(one.row(0), m.row(0));
    assert_eq!(sine_position_2d((8, 8), 16).unwrap(), m);
}

fn assembled(
    store: &ParamStore,
    p: &EncoderParams,
    features: &Mat,
    ids: &[usize],
) -> Mat {
    let mut g = Graph::new(store);
    let visual = VisualGrid {
        features: g.constant(features.clone()),
        grid_shape: (4, 4),
        positions: sine_position_2d((4, 4), p.d).unwrap(),
    };
    let text = text_embed(&mut g, ids, p).unwrap();
    let seq = assemble_sequence(&mut g, &visual, &text, p, None).unwrap();
    g.value(seq.tokens).clone()
}

#[test]
fn sixteen_cells_and_four_words_make_22_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, p) = encoder(8, &mut rng);
    let t = assembled(&store, &p, &random_mat(16, 8, &mut rng), &[5, 6, 7, 8]);
    assert_eq!(t.rows(), 22);
    let layout = SequenceLayout { visual_len: 16, text_len: 4 };
    assert_eq!(layout.cls(), 21);
}

#[test]
fn swapping_cells_swaps_content_but_not_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, p) = encoder(8, &mut rng);
    let f = random_mat(16, 8, &mut rng);
    let (i, j) = (3, 10);
    let mut swapped = f.clone();
    swapped.row_mut(i).copy_from_slice(f.row(j));
    swapped.row_mut(j).copy_from_slice(f.row(i));
    let a = assembled(&store, &p, &f, &[5, 6]);
    let b = assembled(&store, &p, &swapped, &[5, 6]);
    let pos = sine_position_2d((4, 4), 8).unwrap();
    for r in 0..a.rows() {
        if r == i || r == j {
            let other = if r == i { j } else { i };
            for c in 0..8 {
                let want = a.get(other, c) - pos.get(other, c) + pos.get(r, c);
                assert!((b.get(r, c) - want).abs() < 1e-12);
            }
        } else {
            assert_eq!(a.row(r), b.row(r));
        }
    }
}

#[test]
fn zero_content_leaves_positions_segments_and_specials() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, p) = encoder(8, &mut rng);
    for id in [p.word_embeddings, p.sep_content, p.cls_content] {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let ids = [5, 6, 7];
    let t = assembled(&store, &p, &Mat::zeros(16, 8), &ids);
    let pos = sine_position_2d((4, 4), 8).unwrap();
    let seg = store.value(p.segments.unwrap()).clone();
    let text_pos = store.value(p.text_positions);
    let layout = SequenceLayout { visual_len: 16, text_len: 3 };
    for c in 0..8 {
        for r in layout.visual() {
            assert!((t.get(r, c) - (pos.get(r, c) + seg.get(0, c))).abs() < 1e-12);
        }
        let sep = store.value(p.sep_position).get(0, c) + seg.get(1, c);
        assert!((t.get(layout.sep(), c) - sep).abs() < 1e-12);
        for (k, r) in layout.words().enumerate() {
            assert!((t.get(r, c) - (text_pos.get(k, c) + seg.get(1, c))).abs() < 1e-12);
        }
        let cls = store.value(p.cls_position).get(0, c) + seg.get(1, c);
        assert!((t.get(layout.cls(), c) - cls).abs() < 1e-12);
    }
}

fn fusion(layers: usize, heads: usize, d: usize, rng: &mut ChaCha8Rng) -> (ParamStore, FusionParams) {
    let mut store = ParamStore::new();
    let p = FusionParams::init(&mut store, layers, heads, d, 2 * d, rng).unwrap();
    (store, p)
}

fn sequence(g: &mut Graph<'_>, tokens: Mat, visual: usize, text: usize, input: bool) -> JointSequence {
    let layout = SequenceLayout { visual_len: visual, text_len: text };
    let tokens = if input { g.input(tokens) } else { g.constant(tokens) };
    let mut segments = vec![0u8; visual];
    segments.resize(layout.len(), 1);
    let side = (visual as f64).sqrt() as usize;
    JointSequence { tokens, segments, layout, grid_shape: (side, visual / side) }
}

fn oracle_layer_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for c in 0..row.len() {
            out.set(r, c, (row[c] - mean) / (var + 1e-5).sqrt());
        }
    }
    out
}

#[test]
fn zero_weight_layer_reduces_to_final_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut store, p) = fusion(1, 2, 8, &mut rng);
    let b = &p.blocks[0];
    for lin in [&b.qkv, &b.out, &b.ff_in, &b.ff_out] {
        for id in [lin.weight, lin.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let x = random_mat(9 + 6 + 2, 8, &mut rng);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, x.clone(), 9, 6, false);
    let out = transformer_forward(&mut g, &seq, &p, true).unwrap();
    assert!(g.value(out.all).max_abs_diff(&oracle_layer_norm(&x)) < 1e-12);
    let att = &out.attentions.as_ref().unwrap()[0][0];
    let n = x.rows() as f64;
    assert!(att.data().iter().all(|&a| (a - 1.0 / n).abs() < 1e-15));
    let map = attention_map(&out, 2, 0, HeadSelect::Head(1)).unwrap();
    assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn output_shape_equals_input_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..5);
        let (store, p) = fusion(rng.random_range(1..4), heads, d, &mut rng);
        let (l, t) = ([1, 4, 9][rng.random_range(0..3)], rng.random_range(1..7));
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, random_mat(l + t + 2, d, &mut rng), l, t, false);
        let out = transformer_forward(&mut g, &seq, &p, false).unwrap();
        assert_eq!(g.value(out.all).shape(), (l + t + 2, d));
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (store, p) = fusion(2, 2, 16, &mut rng);
    let x = random_mat(17, 16, &mut rng);
    let readout = random_mat(17, 16, &mut rng);
    let eval = |x: &Mat| {
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, x.clone(), 9, 6, false);
        let out = transformer_forward(&mut g, &seq, &p, false).unwrap();
        g.value(out.all).data().iter().zip(readout.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, x.clone(), 9, 6, true);
    let out = transformer_forward(&mut g, &seq, &p, false).unwrap();
    let r = g.constant(readout.clone());
    let prod = g.mul(out.all, r);
    let loss = g.sum(prod);
    let analytic = g.backward(loss, 1.0).get(seq.tokens).unwrap().clone();
    let h = 1e-5;
    for _ in 0..40 {
        let k = rng.random_range(0..x.len());
        let mut up = x.clone();
        up.data_mut()[k] += h;
        let mut down = x.clone();
        down.data_mut()[k] -= h;
        let num = (eval(&up) - eval(&down)) / (2.0 * h);
        assert!(common::rel_err(analytic.data()[k], num) < 1e-4, "{k}: {} vs {num}", analytic.data()[k]);
    }
}

#[test]
fn permuting_visual_tokens_permutes_states_and_keeps_cls() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (store, p) = fusion(2, 4, 16, &mut rng);
    let x = random_mat(9 + 4 + 2, 16, &mut rng);
    let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
    let mut xp = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        xp.row_mut(dst).copy_from_slice(x.row(src));
    }
    let run = |x: &Mat| {
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, x.clone(), 9, 4, false);
        let out = transformer_forward(&mut g, &seq, &p, false).unwrap();
        (g.value(out.h_v).clone(), g.value(out.h_cls).clone())
    };
    let (hv, cls) = run(&x);
    let (hvp, clsp) = run(&xp);
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((hvp.get(dst, c) - hv.get(src, c)).abs() < 1e-9);
        }
    }
    assert!(cls.max_abs_diff(&clsp) < 1e-9);
}

#[test]
fn pooling_matches_explicit_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let store = ParamStore::new();
    let h = random_mat(36, 6, &mut rng);
    let (r, c0) = (rng.random_range(0..6), rng.random_range(0..2));
    let active: Vec<usize> = (c0..c0 + 5).map(|c| r * 6 + c).collect();
    let mut flat = vec![false; 36];
    for &a in &active {
        flat[a] = true;
    }
    let mask = BinaryMask::new(flat, (6, 6)).unwrap();
    let mut g = Graph::new(&store);
    let hv = g.constant(h.clone());
    let pooled = pool_region(&mut g, hv, &mask).unwrap();
    for c in 0..6 {
        let want = active.iter().map(|&a| h.get(a, c)).sum::<f64>() / 5.0;
        assert!((g.value(pooled).get(0, c) - want).abs() < 1e-12);
    }
    let phrase = pool_phrase(&mut g, hv, (2, 5)).unwrap();
    for c in 0..6 {
        let want = (h.get(2, c) + h.get(3, c) + h.get(4, c)) / 3.0;
        assert!((g.value(phrase).get(0, c) - want).abs() < 1e-12);
    }
    assert!(pool_phrase(&mut g, hv, (3, 3)).is_err());
}

#[test]
fn exported_map_argmax_matches_raw_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, p) = fusion(2, 2, 16, &mut rng);
    let mut g = Graph::new(&store);
    let seq = sequence(&mut g, random_mat(16 + 5 + 2, 16, &mut rng).map(|v| 3.0 * v), 16, 5, false);
    let out = transformer_forward(&mut g, &seq, &p, true).unwrap();
    let argmax = |m: &Mat| {
        let d = m.data();
        (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b })
    };
    for w in 0..5 {
        for layer in 0..2 {
            for head in [HeadSelect::Head(0), HeadSelect::Head(1), HeadSelect::Mean] {
                let raw = attention_row(&out, w, layer, head).unwrap();
                assert!(raw.sum() <= 1.0 + 1e-12);
                let map = attention_map(&out, w, layer, head).unwrap();
                assert_eq!(argmax(&map), argmax(&raw));
                assert!((map.data()[argmax(&map)] - 1.0).abs() < 1e-12);
            }
        }
    }
}
