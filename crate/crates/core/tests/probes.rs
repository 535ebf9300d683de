mod common;

use kdvlp::corpus::{generate_synthetic, SyntheticSceneSpec};
use kdvlp::probe::{
    alignment_from_rows, feature_cache, probe_alignment, probe_retrieval, retrieval_from_scores, run_ablation,
    standard_cells,
};
use kdvlp::{Mat, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn untrained_retrieval_is_at_chance() {
    let corpus = generate_synthetic(&common::tiny_spec(), 600, 31).unwrap();
    let config = common::tiny_config();
    let model = common::model_for(&corpus, &config);
    let prepared = common::prepared(&corpus, &config);
    let features = feature_cache(&model, &prepared).unwrap();
    let r = probe_retrieval(&model, &prepared, &features, 100, 3).unwrap();
    assert_eq!(r.queries, 600);
    let (p, n) = (0.01, r.queries as f64);
    let sigma = (p * (1.0 - p) / n).sqrt();
    for v in [r.image_to_text_r1, r.text_to_image_r1] {
        assert!((v - p).abs() <= 3.0 * sigma, "R@1 {v}");
    }
    assert!(probe_retrieval(&model, &prepared, &features, 1, 3).is_err());
    assert_eq!(probe_retrieval(&model, &prepared, &features, 100, 3).unwrap(), r);
}

/// Mean accuracy over eight initializations, against the spread between them.
#[test]
fn untrained_alignment_is_at_chance() {
    let corpus = generate_synthetic(&SyntheticSceneSpec::default(), 400, 32).unwrap();
    let mut accuracies = Vec::new();
    let mut chance = 0.0;
    for seed in 0..8 {
        let config = TrainConfig { seed, ..common::tiny_config() };
        let model = common::model_for(&corpus, &config);
        let prepared = common::prepared(&corpus, &config);
        let features = feature_cache(&model, &prepared).unwrap();
        let a = probe_alignment(&model, &prepared, &features).unwrap();
        let mut expected = 0.0;
        for e in &prepared.examples {
            expected += e.planted.iter().filter(|x| x.is_some()).count() as f64 / e.masks.len() as f64;
        }
        chance = expected / a.count as f64;
        accuracies.push(a.accuracy);
    }
    let k = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / k;
    let sd = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    assert!((mean - chance).abs() <= 3.0 * sd / k.sqrt(), "{accuracies:?} vs chance {chance}");
}

#[test]
fn planted_one_hot_embeddings_align_perfectly() {
    let rows: Vec<(Vec<f64>, usize)> = (0..30)
        .map(|i| {
            let n = 2 + i % 3;
            let target = i % n;
            let row = (0..n).map(|k| if k == target { 1.0 } else { 0.0 }).collect();
            (row, target)
        })
        .collect();
    let a = alignment_from_rows(&rows, 0);
    assert_eq!(a.accuracy, 1.0);
    assert_eq!(a.mean_rank, 1.0);
}

#[test]
fn shuffling_the_pool_keeps_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20;
    let scores = Mat::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut shuffled = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            shuffled.set(i, j, scores.get(perm[i], perm[j]));
        }
    }
    let (a, b) = (retrieval_from_scores(vec![scores]).unwrap(), retrieval_from_scores(vec![shuffled]).unwrap());
    assert_eq!(
        (a.image_to_text_r1, a.image_to_text_r5, a.image_to_text_r10, a.text_to_image_r1, a.text_to_image_r5, a.text_to_image_r10),
        (b.image_to_text_r1, b.image_to_text_r5, b.image_to_text_r10, b.text_to_image_r1, b.text_to_image_r5, b.text_to_image_r10),
    );
}

#[test]
fn ablation_table_has_five_rows_with_shared_initial_losses() {
    let train = common::tiny_corpus(16, 33);
    let eval = common::tiny_corpus(8, 34);
    let base = TrainConfig { total_steps: 3, ..common::tiny_config() };
    let table = run_ablation(&train, &eval, &base, &standard_cells(), 4, 0).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert_eq!(table.to_text().lines().count(), 6);
    for task in ["itm", "mlm"] {
        let first = table.rows[0].initial_losses[task];
        assert!(table.rows.iter().all(|r| r.initial_losses[task] == first), "{task}");
    }
    assert_eq!(table.rows[3].initial_losses["omvm"], table.rows[4].initial_losses["omvm"]);
}
