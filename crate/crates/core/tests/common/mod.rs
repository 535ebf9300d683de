#![allow(dead_code)]

use kdvlp::params::{ParamGrads, ParamId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use kdvlp::corpus::{generate_synthetic, Corpus, SyntheticSceneSpec};
use kdvlp::encoder::build_vocab;
use kdvlp::model::{Model, ModelDims};
use kdvlp::pretext::{make_embedder, prepare_corpus, PreparedCorpus};
use kdvlp::TrainConfig;

/// 48x48 scenes (a 3x3 grid), three objects each, captions naming two of them:
/// L = 9, T = 6, N = 3, |P| = 2.
pub fn tiny_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        image_size: 48,
        grid_cells: 3,
        objects_per_image: (3, 3),
        caption_templates: vec!["a {0} and a {1} .".into()],
        ..SyntheticSceneSpec::default()
    }
}

pub fn tiny_corpus(count: usize, seed: u64) -> Corpus {
    generate_synthetic(&tiny_spec(), count, seed).unwrap()
}

pub fn vocab_for(corpus: &Corpus) -> kdvlp::Vocabulary {
    build_vocab(corpus.pairs.iter().map(|p| p.caption.as_str()), 1)
}

pub fn model_for(corpus: &Corpus, config: &TrainConfig) -> Model {
    let vocab = vocab_for(corpus);
    Model::new(config, ModelDims::for_corpus(corpus, vocab.len()).unwrap()).unwrap()
}

pub fn prepared<'c>(corpus: &'c Corpus, config: &TrainConfig) -> PreparedCorpus<'c> {
    let vocab = vocab_for(corpus);
    let embedder = make_embedder(config).unwrap();
    prepare_corpus(corpus, &vocab, embedder.as_ref(), config).unwrap()
}

/// d = 16, two layers: small enough for finite-difference checks.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        total_steps: 20,
        batch_size: 4,
        decay_steps: vec![],
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        d_word: 16,
        conv_channels: [4, 8, 8],
        embed_dim: 16,
        ..TrainConfig::default()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Compares `analytic` against central differences of `loss` at `picks`
/// randomly chosen scalars among parameters that receive a gradient.
/// Returns the largest relative error.
/// Adds N(0, scale) to every parameter, moving away from ReLU kinks at zero.
pub fn jitter(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

pub fn finite_difference_check(
    model: &Model,
    analytic: &ParamGrads,
    loss: impl Fn(&Model) -> f64,
    picks: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let touched: Vec<ParamId> = analytic.iter().filter(|(_, g)| g.is_some()).map(|(id, _)| id).collect();
    assert!(!touched.is_empty());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let id = touched[rng.random_range(0..touched.len())];
        let k = rng.random_range(0..model.store.value(id).len());
        let a = analytic.get(id).unwrap().data()[k];
        let mut probe = model.clone();
        probe.store.value_mut(id).data_mut()[k] += h;
        let up = loss(&probe);
        probe.store.value_mut(id).data_mut()[k] -= 2.0 * h;
        let down = loss(&probe);
        let n = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(a, n));
    }
    worst
}
