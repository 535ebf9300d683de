//! The four pretext objectives and the vision-modeling ablation variants.
//!
//! Every loss is a batch mean over contributing pairs. Pairs are evaluated in
//! parallel, each with its own rng stream seeded sequentially from the caller's
//! rng, and their results are reduced in batch order, so outputs do not depend
//! on the thread count.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{MvmVariant, NegativeSource, TrainConfig};
use crate::corpus::{extract_from_tokens, Corpus, PhraseSpan};
use crate::encoder::{tokenize, tokenize_words, Vocabulary, MASK, SPECIALS};
use crate::error::{Error, Result};
use crate::fusion::{pool_phrase, pool_region};
use crate::knowledge::{
    hash_embedder, masking_distribution, phrase_label_similarity, rasterize_mask, uniform_distribution, BinaryMask,
    FileEmbedder, SimilarityMatrix, TextEmbedder,
};
use crate::model::Model;
use crate::params::ParamGrads;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Omvm,
    Pra,
    Mlm,
    Itm,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Omvm, Task::Pra, Task::Mlm, Task::Itm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Omvm => "omvm",
            Task::Pra => "pra",
            Task::Mlm => "mlm",
            Task::Itm => "itm",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || total <= 0.0 {
        return Err(Error::Validation("categorical weights must be non-negative with a positive sum".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

pub fn sample_task<R: Rng + ?Sized>(weights: &[f64; 4], rng: &mut R) -> Result<Task> {
    sample_categorical(weights, rng)
        .map(|i| Task::ALL[i])
        .map_err(|_| Error::Config("task weights must be non-negative with a positive sum".into()))
}

pub fn make_embedder(config: &TrainConfig) -> Result<Box<dyn TextEmbedder>> {
    Ok(match &config.embeddings_path {
        Some(p) => Box::new(FileEmbedder::load(Path::new(p))?),
        None => Box::new(hash_embedder(config.embed_dim, config.embed_seed)?),
    })
}

/// Everything about one pair that does not depend on model parameters.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    /// Token ids, truncated to the model's text positions.
    pub token_ids: Vec<usize>,
    /// Noun phrases lying entirely within the kept tokens.
    pub phrases: Vec<PhraseSpan>,
    pub masks: Vec<BinaryMask>,
    pub categories: Vec<usize>,
    pub roi_features: Vec<Vec<f64>>,
    /// `None` when the pair has no phrases or no proposals.
    pub similarity: Option<SimilarityMatrix>,
    /// Knowledge-guided masking distribution over proposals (uniform without phrases).
    pub masking: Vec<f64>,
    /// Per phrase, the unique proposal whose category name equals the phrase.
    pub planted: Vec<Option<usize>>,
    /// Two captions with equal keys describe the same content.
    pub text_key: Vec<String>,
}

pub struct PreparedCorpus<'c> {
    pub corpus: &'c Corpus,
    pub vocab: Vocabulary,
    pub examples: Vec<PreparedExample>,
}

impl<'c> PreparedCorpus<'c> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image(&self, index: usize) -> &crate::corpus::Image {
        &self.corpus.pairs[index].pixels
    }
}

pub fn prepare_corpus<'c>(
    corpus: &'c Corpus,
    vocab: &Vocabulary,
    embedder: &dyn TextEmbedder,
    config: &TrainConfig,
) -> Result<PreparedCorpus<'c>> {
    let examples = corpus
        .pairs
        .par_iter()
        .map(|pair| {
            let mut token_ids = tokenize(&pair.caption, vocab)?;
            token_ids.truncate(config.max_text_len);
            let words = tokenize_words(&pair.caption);
            let phrases: Vec<PhraseSpan> = extract_from_tokens(&words, &corpus.meta.lexicon)
                .into_iter()
                .filter(|p| p.end <= token_ids.len())
                .collect();
            let ann = corpus.annotation(pair);
            let img = &pair.pixels;
            let grid = crate::encoder::grid_shape_for(img.height, img.width)?;
            let masks = ann
                .proposals
                .iter()
                .map(|p| rasterize_mask(&p.bbox, (img.height, img.width), grid))
                .collect::<Result<Vec<_>>>()?;
            let similarity = if phrases.is_empty() || ann.proposals.is_empty() {
                None
            } else {
                Some(phrase_label_similarity(&phrases, &ann.proposals, embedder, config.tau)?)
            };
            let masking = match &similarity {
                Some(s) => masking_distribution(s),
                None if ann.proposals.is_empty() => Vec::new(),
                None => uniform_distribution(ann.proposals.len()),
            };
            let planted = phrases
                .iter()
                .map(|ph| {
                    let hits: Vec<usize> = ann
                        .proposals
                        .iter()
                        .enumerate()
                        .filter(|(_, o)| tokenize_words(&o.category_name).join(" ") == ph.text)
                        .map(|(n, _)| n)
                        .collect();
                    (hits.len() == 1).then(|| hits[0])
                })
                .collect();
            let text_key = if phrases.is_empty() {
                token_ids.iter().map(|i| i.to_string()).collect()
            } else {
                phrases.iter().map(|p| p.text.clone()).collect()
            };
            Ok(PreparedExample {
                token_ids,
                phrases,
                masks,
                categories: ann.proposals.iter().map(|p| p.category_id).collect(),
                roi_features: ann.proposals.iter().map(|p| p.roi_feature.clone()).collect(),
                similarity,
                masking,
                planted,
                text_key,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCorpus { corpus, vocab: vocab.clone(), examples })
}

/// One optimization unit: a task and the pairs it is computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextBatch {
    pub task: Task,
    /// Corpus indices of the images (and, outside ITM, of the captions).
    pub indices: Vec<usize>,
    /// Corpus index of the caption paired with each image.
    pub text_source: Vec<usize>,
    /// 1 for matched pairs, 0 for ITM negatives.
    pub itm_labels: Vec<f64>,
}

impl PretextBatch {
    pub fn matched(task: Task, indices: Vec<usize>) -> Self {
        let n = indices.len();
        Self { task, text_source: indices.clone(), indices, itm_labels: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Builds a batch; for ITM each caption is swapped with probability
/// `itm_neg_rate` for one whose content differs, sourced from the batch or the
/// whole corpus.
pub fn build_batch<R: Rng + ?Sized>(
    prepared: &PreparedCorpus<'_>,
    task: Task,
    indices: Vec<usize>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PretextBatch> {
    let mut batch = PretextBatch::matched(task, indices);
    if task != Task::Itm {
        return Ok(batch);
    }
    if batch.len() < 2 {
        return Err(Error::Task("image-text matching needs a batch of at least 2 pairs".into()));
    }
    for i in 0..batch.len() {
        if rng.random::<f64>() >= config.itm_neg_rate {
            continue;
        }
        let own = &prepared.examples[batch.indices[i]].text_key;
        let replacement = match config.itm_negatives {
            NegativeSource::Batch => {
                let candidates: Vec<usize> = batch
                    .indices
                    .iter()
                    .enumerate()
                    .filter(|&(j, &idx)| j != i && &prepared.examples[idx].text_key != own)
                    .map(|(_, &idx)| idx)
                    .collect();
                if candidates.is_empty() {
                    corpus_negative(prepared, own, rng)
                } else {
                    Some(candidates[rng.random_range(0..candidates.len())])
                }
            }
            NegativeSource::Corpus => corpus_negative(prepared, own, rng),
        };
        if let Some(t) = replacement {
            batch.text_source[i] = t;
            batch.itm_labels[i] = 0.0;
        }
    }
    Ok(batch)
}

fn corpus_negative<R: Rng + ?Sized>(prepared: &PreparedCorpus<'_>, own: &[String], rng: &mut R) -> Option<usize> {
    for _ in 0..64 {
        let j = rng.random_range(0..prepared.len());
        if prepared.examples[j].text_key != own {
            return Some(j);
        }
    }
    let candidates: Vec<usize> = (0..prepared.len()).filter(|&j| prepared.examples[j].text_key != own).collect();
    (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
}

/// How a selected token is corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmMasking {
    pub input_ids: Vec<usize>,
    pub selected: Vec<usize>,
    pub corruptions: Vec<Corruption>,
}

/// Selects each token with probability `rate` (one forced when none is) and
/// corrupts selections 80/10/10 into `[mask]` / a random non-special token /
/// unchanged.
pub fn mlm_masking<R: Rng + ?Sized>(ids: &[usize], vocab_size: usize, rate: f64, rng: &mut R) -> MlmMasking {
    let mut selected: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if selected.is_empty() && !ids.is_empty() {
        selected.push(rng.random_range(0..ids.len()));
    }
    let mut input_ids = ids.to_vec();
    let mut corruptions = Vec::with_capacity(selected.len());
    for &s in &selected {
        let u = rng.random::<f64>();
        let kind = if u < 0.8 {
            input_ids[s] = MASK;
            Corruption::Mask
        } else if u < 0.9 {
            input_ids[s] = if vocab_size > SPECIALS.len() { rng.random_range(SPECIALS.len()..vocab_size) } else { MASK };
            Corruption::Random
        } else {
            Corruption::Keep
        };
        corruptions.push(kind);
    }
    MlmMasking { input_ids, selected, corruptions }
}

/// Each item independently with probability `rate`, one forced uniformly when none is.
pub fn bernoulli_subset<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    let mut chosen: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < rate).collect();
    if chosen.is_empty() && n > 0 {
        chosen.push(rng.random_range(0..n));
    }
    chosen
}

/// Per-step record written to the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub task: String,
    pub loss: f64,
    pub pairs: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrc_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrfr_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pra_kl: Option<f64>,
    /// Per contributing pair, the masked proposal indices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_objects: Vec<Vec<usize>>,
    /// Per contributing pair, the masked token positions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_tokens: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_backbone: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_transformer: Option<f64>,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Combines equally weighted micro-batch reports of one step.
    pub fn merge(parts: &[LossReport]) -> LossReport {
        let mut out = parts.first().cloned().unwrap_or_default();
        if parts.len() <= 1 {
            return out;
        }
        out.loss = parts.iter().map(|p| p.loss).sum::<f64>() / parts.len() as f64;
        out.pairs = parts.iter().map(|p| p.pairs).sum();
        out.skipped = parts.iter().map(|p| p.skipped).sum();
        let avg = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
            let (s, w) = parts
                .iter()
                .filter_map(|p| f(p).map(|v| (v * p.pairs as f64, p.pairs as f64)))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            (w > 0.0).then(|| s / w)
        };
        out.mrc_accuracy = avg(|p| p.mrc_accuracy);
        out.mrfr_mse = avg(|p| p.mrfr_mse);
        out.cell_mse = avg(|p| p.cell_mse);
        out.mlm_accuracy = avg(|p| p.mlm_accuracy);
        out.itm_accuracy = avg(|p| p.itm_accuracy);
        out.pra_kl = avg(|p| p.pra_kl);
        out.masked_objects = parts.iter().flat_map(|p| p.masked_objects.clone()).collect();
        out.masked_tokens = parts.iter().flat_map(|p| p.masked_tokens.clone()).collect();
        out
    }
}

/// A loss evaluation: the report and, when requested, parameter gradients.
pub struct LossOutput {
    pub report: LossReport,
    pub grads: Option<ParamGrads>,
}

#[derive(Default)]
struct PairStats {
    correct: usize,
    total: usize,
    mse: Option<f64>,
    kl: Option<f64>,
    masked_objects: Vec<usize>,
    masked_tokens: Vec<usize>,
}

struct PairResult {
    loss: f64,
    stats: PairStats,
    grads: Option<ParamGrads>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `f` on every contributing position and reduces in order.
/// `grad_scale` multiplies the batch-mean gradient (e.g. `1 / accum_steps`).
fn run_pairs<F>(
    model: &Model,
    batch: &PretextBatch,
    contributes: impl Fn(usize) -> bool,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
    name: &str,
    f: F,
) -> Result<LossOutput>
where
    F: Fn(&mut Graph<'_>, usize, &mut ChaCha8Rng) -> Result<(Var, PairStats)> + Sync,
{
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
    let active: Vec<usize> = (0..batch.len()).filter(|&i| contributes(i)).collect();
    if active.is_empty() {
        return Err(Error::Task(format!("{name}: no pair in the batch can contribute")));
    }
    let n = active.len() as f64;
    let results = active
        .par_iter()
        .map(|&i| {
            let mut pair_rng = ChaCha8Rng::seed_from_u64(seeds[i]);
            let mut g = Graph::new(&model.store);
            let (loss, stats) = f(&mut g, i, &mut pair_rng)?;
            let value = g.value(loss).item();
            let grads = grad_scale.map(|s| {
                let back = g.backward(loss, 1.0);
                let mut pg = ParamGrads::new(model.store.len());
                back.accumulate_params(&g, &mut pg, s / n);
                pg
            });
            Ok(PairResult { loss: value, stats, grads })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = LossReport {
        task: name.to_string(),
        pairs: active.len(),
        skipped: batch.len() - active.len(),
        ..Default::default()
    };
    let mut grads = grad_scale.map(|_| ParamGrads::new(model.store.len()));
    let (mut correct, mut total) = (0, 0);
    let (mut mse, mut mse_n, mut kl, mut kl_n) = (0.0, 0, 0.0, 0);
    for r in results {
        report.loss += r.loss / n;
        correct += r.stats.correct;
        total += r.stats.total;
        if let Some(m) = r.stats.mse {
            mse += m;
            mse_n += 1;
        }
        if let Some(k) = r.stats.kl {
            kl += k;
            kl_n += 1;
        }
        if !r.stats.masked_objects.is_empty() {
            report.masked_objects.push(r.stats.masked_objects);
        }
        if !r.stats.masked_tokens.is_empty() {
            report.masked_tokens.push(r.stats.masked_tokens);
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.merge(g, 1.0);
        }
    }
    let accuracy = (total > 0).then(|| correct as f64 / total as f64);
    match name {
        "omvm" | "random_mvm" => {
            report.mrc_accuracy = accuracy;
            report.mrfr_mse = (mse_n > 0).then(|| mse / mse_n as f64);
        }
        "standard_mvm" => report.cell_mse = (mse_n > 0).then(|| mse / mse_n as f64),
        "mlm" => report.mlm_accuracy = accuracy,
        "itm" => report.itm_accuracy = accuracy,
        "pra" => report.pra_kl = (kl_n > 0).then(|| kl / kl_n as f64),
        _ => {}
    }
    if !(report.loss.is_finite() && report.loss >= 0.0) {
        log::warn!("{name} loss {} is not a finite non-negative number", report.loss);
    }
    Ok(LossOutput { report, grads })
}

/// Dispatches on the batch task; the vision-modeling slot follows `mvm_variant`.
pub fn compute_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    match batch.task {
        Task::Omvm => match model.config.mvm_variant {
            MvmVariant::Omvm => omvm_loss(model, prepared, batch, rng, grad_scale),
            MvmVariant::RandomMvm => random_mvm_loss(model, prepared, batch, rng, grad_scale),
            MvmVariant::StandardMvm => standard_mvm_loss(model, prepared, batch, rng, grad_scale),
        },
        Task::Pra => pra_loss(model, prepared, batch, grad_scale),
        Task::Mlm => mlm_loss(model, prepared, batch, rng, grad_scale),
        Task::Itm => itm_loss(model, prepared, batch, rng, grad_scale),
    }
}

fn classification_and_regression(
    model: &Model,
    g: &mut Graph<'_>,
    pooled: Var,
    category: usize,
    roi: &[f64],
) -> (Var, bool, f64) {
    let logits = model.heads.mrc.forward(g, pooled);
    let correct = argmax(g.value(logits).row(0)) == category;
    let l_mrc = g.cross_entropy(logits, &[category]);
    let pred = model.heads.mrfr.forward(g, pooled);
    let l_mrfr = g.mse_const(pred, Mat::row_vector(roi.to_vec()));
    let mse = g.value(l_mrfr).item();
    let weighted = g.scale(l_mrfr, model.config.lambda);
    (g.add(l_mrc, weighted), correct, mse)
}

/// Knowledge-guided object masking: one proposal per pair drawn from its
/// masking distribution; its cells are masked, pooled, classified and regressed.
pub fn omvm_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    let ex = &prepared.examples;
    run_pairs(
        model,
        batch,
        |i| batch.itm_labels[i] == 1.0 && !ex[batch.indices[i]].masks.is_empty(),
        rng,
        grad_scale,
        "omvm",
        |g, i, r| {
            let e = &ex[batch.indices[i]];
            let n = sample_categorical(&e.masking, r)?;
            let mask = &e.masks[n];
            let enc = model.encode(g, prepared.image(batch.indices[i]), &e.token_ids, Some(mask.flat()), false)?;
            let pooled = pool_region(g, enc.states.h_v, mask)?;
            let (loss, correct, mse) = classification_and_regression(model, g, pooled, e.categories[n], &e.roi_features[n]);
            let stats =
                PairStats { correct: correct as usize, total: 1, mse: Some(mse), masked_objects: vec![n], ..Default::default() };
            Ok((loss, stats))
        },
    )
}

/// Proposals masked independently at `random_mvm_rate` (at least one) with the
/// same targets as OMVM, averaged over the selected proposals.
pub fn random_mvm_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    let ex = &prepared.examples;
    let rate = model.config.random_mvm_rate;
    run_pairs(
        model,
        batch,
        |i| batch.itm_labels[i] == 1.0 && !ex[batch.indices[i]].masks.is_empty(),
        rng,
        grad_scale,
        "random_mvm",
        |g, i, r| {
            let e = &ex[batch.indices[i]];
            let chosen = bernoulli_subset(e.masks.len(), rate, r);
            let mut union = vec![false; e.masks[0].len()];
            for &n in &chosen {
                for c in e.masks[n].active_cells() {
                    union[c] = true;
                }
            }
            let enc = model.encode(g, prepared.image(batch.indices[i]), &e.token_ids, Some(&union), false)?;
            let mut losses = Vec::with_capacity(chosen.len());
            let (mut correct, mut mse) = (0, 0.0);
            for &n in &chosen {
                let pooled = pool_region(g, enc.states.h_v, &e.masks[n])?;
                let (l, c, m) = classification_and_regression(model, g, pooled, e.categories[n], &e.roi_features[n]);
                losses.push(l);
                correct += c as usize;
                mse += m;
            }
            let stacked = g.concat_rows(&losses);
            let total = g.sum(stacked);
            let loss = g.scale(total, 1.0 / chosen.len() as f64);
            let stats = PairStats {
                correct,
                total: chosen.len(),
                mse: Some(mse / chosen.len() as f64),
                masked_objects: chosen,
                ..Default::default()
            };
            Ok((loss, stats))
        },
    )
}

/// Grid cells masked at `standard_mvm_rate` (at least one); each masked cell's
/// final state regresses its own detached backbone feature.
pub fn standard_mvm_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    let ex = &prepared.examples;
    let rate = model.config.standard_mvm_rate;
    let (gh, gw) = model.dims.grid_shape();
    run_pairs(model, batch, |i| batch.itm_labels[i] == 1.0, rng, grad_scale, "standard_mvm", |g, i, r| {
        let e = &ex[batch.indices[i]];
        let cells = bernoulli_subset(gh * gw, rate, r);
        let mut flags = vec![false; gh * gw];
        for &c in &cells {
            flags[c] = true;
        }
        let enc = model.encode(g, prepared.image(batch.indices[i]), &e.token_ids, Some(&flags), false)?;
        let features = g.value(enc.visual.features);
        let target = Mat::from_rows(&cells.iter().map(|&c| features.row(c).to_vec()).collect::<Vec<_>>());
        let rows = g.gather(enc.states.h_v, &cells);
        let pred = model.heads.cell_regression.forward(g, rows);
        let loss = g.mse_const(pred, target);
        let mse = g.value(loss).item();
        Ok((loss, PairStats { mse: Some(mse), masked_objects: cells, ..Default::default() }))
    })
}

/// Cross-modal similarity logits `cos(pool_phrase(H_W, p_z), pool_region(H_V, m_n))`, `|P| x N`.
pub fn cross_modal_similarity(
    g: &mut Graph<'_>,
    h_v: Var,
    h_w: Var,
    phrases: &[PhraseSpan],
    masks: &[BinaryMask],
) -> Result<Var> {
    let p = phrases.iter().map(|ph| pool_phrase(g, h_w, (ph.start, ph.end))).collect::<Result<Vec<_>>>()?;
    let r = masks.iter().map(|m| pool_region(g, h_v, m)).collect::<Result<Vec<_>>>()?;
    let p = g.concat_rows(&p);
    let r = g.concat_rows(&r);
    let pn = g.normalize_rows(p);
    let rn = g.normalize_rows(r);
    Ok(g.matmul_t(pn, false, rn, true))
}

/// Phrase-region alignment: mean over phrases of the KL between the model's
/// cross-modal similarity softmax and the external phrase-label softmax.
pub fn pra_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    let ex = &prepared.examples;
    let reverse = model.config.pra_kl_reverse;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    run_pairs(
        model,
        batch,
        |i| batch.itm_labels[i] == 1.0 && ex[batch.indices[i]].similarity.is_some(),
        &mut unused,
        grad_scale,
        "pra",
        |g, i, _| {
            let e = &ex[batch.indices[i]];
            let sim = e.similarity.as_ref().expect("filtered");
            let enc = model.encode(g, prepared.image(batch.indices[i]), &e.token_ids, None, false)?;
            let logits = cross_modal_similarity(g, enc.states.h_v, enc.states.h_w, &e.phrases, &e.masks)?;
            let target = g.constant(sim.row_softmax().clone());
            let loss = g.kl_rows(logits, target, reverse);
            let kl = g.value(loss).item();
            Ok((loss, PairStats { kl: Some(kl), ..Default::default() }))
        },
    )
}

pub fn mlm_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    let ex = &prepared.examples;
    let vocab_size = model.dims.vocab_size;
    let rate = model.config.mask_rate;
    run_pairs(model, batch, |i| batch.itm_labels[i] == 1.0, rng, grad_scale, "mlm", |g, i, r| {
        let e = &ex[batch.indices[i]];
        let m = mlm_masking(&e.token_ids, vocab_size, rate, r);
        let enc = model.encode(g, prepared.image(batch.indices[i]), &m.input_ids, None, false)?;
        let rows = g.gather(enc.states.h_w, &m.selected);
        let logits = model.heads.mlm.forward(g, rows);
        let targets: Vec<usize> = m.selected.iter().map(|&s| e.token_ids[s]).collect();
        let lv = g.value(logits);
        let correct = targets.iter().enumerate().filter(|&(r, &t)| argmax(lv.row(r)) == t).count();
        let loss = g.cross_entropy(logits, &targets);
        Ok((loss, PairStats { correct, total: targets.len(), masked_tokens: m.selected, ..Default::default() }))
    })
}

pub fn itm_loss(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    batch: &PretextBatch,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<LossOutput> {
    if batch.len() < 2 {
        return Err(Error::Task("image-text matching needs a batch of at least 2 pairs".into()));
    }
    let ex = &prepared.examples;
    run_pairs(model, batch, |_| true, rng, grad_scale, "itm", |g, i, _| {
        let ids = &ex[batch.text_source[i]].token_ids;
        let enc = model.encode(g, prepared.image(batch.indices[i]), ids, None, false)?;
        let logit = model.itm_logit(g, &enc.states);
        let y = batch.itm_labels[i];
        let correct = (g.value(logit).item() > 0.0) == (y == 1.0);
        let loss = g.bce_logits(logit, &[y]);
        Ok((loss, PairStats { correct: correct as usize, total: 1, ..Default::default() }))
    })
}

/// Number of pairs per task that can contribute, for diagnostics.
pub fn coverage(prepared: &PreparedCorpus<'_>) -> HashMap<&'static str, usize> {
    let mut out = HashMap::new();
    out.insert("with_proposals", prepared.examples.iter().filter(|e| !e.masks.is_empty()).count());
    out.insert("with_phrases", prepared.examples.iter().filter(|e| e.similarity.is_some()).count());
    out
}
