#![allow(clippy::needless_range_loop)]

mod common;

use kdvlp::autograd::Graph;
use kdvlp::corpus::{generate_synthetic, SyntheticSceneSpec};
use kdvlp::params::ParamGrads;
use kdvlp::pretext::{compute_loss, omvm_loss, pra_loss, PretextBatch};
use kdvlp::{Mat, Model, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn linear(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    (0..w.cols()).map(|j| b.get(0, j) + (0..x.len()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

fn mlp(model: &Model, head: &kdvlp::model::MlpHead, x: &[f64]) -> Vec<f64> {
    let s = &model.store;
    let h: Vec<f64> = linear(x, s.value(head.hidden.weight), s.value(head.hidden.bias)).into_iter().map(gelu).collect();
    linear(&h, s.value(head.out.weight), s.value(head.out.bias))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn mean_rows(m: &Mat, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let rows: Vec<usize> = rows.collect();
    (0..m.cols()).map(|c| rows.iter().map(|&r| m.get(r, c)).sum::<f64>() / rows.len() as f64).collect()
}

#[test]
fn omvm_loss_matches_scalar_trace() {
    let spec = SyntheticSceneSpec {
        image_size: 32,
        objects_per_image: (2, 2),
        caption_templates: vec!["a {0} and a {1} .".into()],
        ..SyntheticSceneSpec::default()
    };
    let corpus = generate_synthetic(&spec, 3, 17).unwrap();
    let config = common::tiny_config();
    let model = common::model_for(&corpus, &config);
    assert_eq!(model.dims.grid_shape(), (2, 2));
    let prepared = common::prepared(&corpus, &config);
    let batch = PretextBatch::matched(Task::Omvm, vec![1]);
    let out = omvm_loss(&model, &prepared, &batch, &mut ChaCha8Rng::seed_from_u64(42), None).unwrap();

    let e = &prepared.examples[1];
    assert_eq!(e.masks.len(), 2);
    let seed: u64 = ChaCha8Rng::seed_from_u64(42).random();
    let u: f64 = ChaCha8Rng::seed_from_u64(seed).random();
    let n = if u < e.masking[0] { 0 } else { 1 };
    assert_eq!(out.report.masked_objects, vec![vec![n]]);

    let mut g = Graph::new(&model.store);
    let enc = model.encode(&mut g, prepared.image(1), &e.token_ids, Some(e.masks[n].flat()), false).unwrap();
    let h_v = g.value(enc.states.h_v).clone();
    let pooled = mean_rows(&h_v, e.masks[n].active_cells());
    let logits = mlp(&model, &model.heads.mrc, &pooled);
    let ce = -log_softmax(&logits)[e.categories[n]];
    let pred = mlp(&model, &model.heads.mrfr, &pooled);
    let f = &e.roi_features[n];
    let mse = pred.iter().zip(f).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / f.len() as f64;
    let want = ce + config.lambda * mse;
    assert!((out.report.loss - want).abs() < 1e-10, "{} vs {want}", out.report.loss);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn pra_loss_matches_scalar_kl() {
    let corpus = common::tiny_corpus(2, 3);
    let config = common::tiny_config();
    let model = common::model_for(&corpus, &config);
    let prepared = common::prepared(&corpus, &config);
    let e = &prepared.examples[0];
    assert_eq!((e.phrases.len(), e.masks.len()), (2, 3));
    let out = pra_loss(&model, &prepared, &PretextBatch::matched(Task::Pra, vec![0]), None).unwrap();

    let mut g = Graph::new(&model.store);
    let enc = model.encode(&mut g, prepared.image(0), &e.token_ids, None, false).unwrap();
    let (h_v, h_w) = (g.value(enc.states.h_v).clone(), g.value(enc.states.h_w).clone());
    let target = e.similarity.as_ref().unwrap().row_softmax();
    let mut total = 0.0;
    for (z, ph) in e.phrases.iter().enumerate() {
        let p = mean_rows(&h_w, ph.start..ph.end);
        let row: Vec<f64> = e.masks.iter().map(|m| cosine(&p, &mean_rows(&h_v, m.active_cells()))).collect();
        let log_q = log_softmax(&row);
        total += (0..row.len()).map(|n| log_q[n].exp() * (log_q[n] - target.get(z, n).ln())).sum::<f64>();
    }
    let want = total / e.phrases.len() as f64;
    assert!((out.report.loss - want).abs() < 1e-10, "{} vs {want}", out.report.loss);
}

#[test]
fn kl_rows_matches_hand_values() {
    let store = kdvlp::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let logits = Mat::from_rows(&[vec![0.5, -0.2, 0.1], vec![1.0, 0.0, -1.0]]);
    let target = Mat::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]);
    let l = g.constant(logits.clone());
    let t = g.constant(target.clone());
    let forward = g.kl_rows(l, t, false);
    let reverse = g.kl_rows(l, t, true);
    let (mut want_f, mut want_r) = (0.0, 0.0);
    for r in 0..2 {
        let q = log_softmax(logits.row(r));
        for n in 0..3 {
            let p = target.get(r, n);
            want_f += q[n].exp() * (q[n] - p.ln()) / 2.0;
            want_r += p * (p.ln() - q[n]) / 2.0;
        }
    }
    assert!((g.value(forward).item() - want_f).abs() < 1e-14);
    assert!((g.value(reverse).item() - want_r).abs() < 1e-14);
}

#[test]
fn single_proposal_pra_is_zero() {
    let spec = SyntheticSceneSpec {
        objects_per_image: (1, 1),
        caption_templates: vec!["a {0} .".into()],
        ..SyntheticSceneSpec::default()
    };
    let corpus = generate_synthetic(&spec, 4, 2).unwrap();
    let config = common::tiny_config();
    let model = common::model_for(&corpus, &config);
    let prepared = common::prepared(&corpus, &config);
    let out = pra_loss(&model, &prepared, &PretextBatch::matched(Task::Pra, vec![0, 1, 2, 3]), Some(1.0)).unwrap();
    assert_eq!(out.report.pairs, 4);
    assert!(out.report.loss.abs() < 1e-12);
}

#[test]
fn loss_limits() {
    let store = kdvlp::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let confident = g.constant(Mat::row_vector(vec![0.0, 800.0, 0.0]));
    let ce = g.cross_entropy(confident, &[1]);
    assert!(g.value(ce).item() < 1e-12);
    let exact = g.constant(Mat::row_vector(vec![0.25, -1.5]));
    let mse = g.mse_const(exact, Mat::row_vector(vec![0.25, -1.5]));
    assert_eq!(g.value(mse).item(), 0.0);
    let sure = g.constant(Mat::scalar(60.0));
    let bce = g.bce_logits(sure, &[1.0]);
    assert!(g.value(bce).item() < 1e-20);
}

fn untouched(model: &Model, grads: &ParamGrads, prefixes: &[&str]) {
    for (id, p) in model.store.iter() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            assert!(grads.get(id).is_none_or(|g| g.sq_norm() == 0.0), "{} received a gradient", p.name);
        }
    }
}

fn touched(model: &Model, grads: &ParamGrads, name: &str) -> bool {
    grads.get(model.store.find(name).unwrap()).is_some_and(|g| g.sq_norm() > 0.0)
}

#[test]
fn tasks_only_reach_their_own_heads() {
    let corpus = common::tiny_corpus(8, 4);
    let config = common::tiny_config();
    let model = common::model_for(&corpus, &config);
    let prepared = common::prepared(&corpus, &config);
    let grads = |task: Task| {
        let batch = PretextBatch::matched(task, (0..8).collect());
        compute_loss(&model, &prepared, &batch, &mut ChaCha8Rng::seed_from_u64(1), Some(1.0)).unwrap().grads.unwrap()
    };
    let itm = grads(Task::Itm);
    untouched(&model, &itm, &["heads.mlm", "heads.mrc", "heads.mrfr", "heads.visual_mask", "heads.cell_regression"]);
    assert!(touched(&model, &itm, "heads.itm.weight"));

    let mlm = grads(Task::Mlm);
    untouched(&model, &mlm, &["heads.itm", "heads.mrc", "heads.mrfr", "heads.visual_mask", "heads.cell_regression"]);
    assert!(touched(&model, &mlm, "heads.mlm.weight"));

    let omvm = grads(Task::Omvm);
    untouched(&model, &omvm, &["heads.itm", "heads.mlm", "heads.cell_regression"]);
    assert!(touched(&model, &omvm, "heads.visual_mask"));
    assert!(touched(&model, &omvm, "backbone.conv0.weight"));

    let pra = grads(Task::Pra);
    untouched(&model, &pra, &["heads."]);
    assert!(touched(&model, &pra, "backbone.conv0.weight"));
}
