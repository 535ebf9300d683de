//! Evaluation of pretrained representations: held-out task accuracy, ITM-based
//! retrieval, phrase-region alignment against planted ground truth, and the
//! pretext-task ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{MvmVariant, TrainConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pretext::{
    compute_loss, cross_modal_similarity, make_embedder, mlm_masking, prepare_corpus, PreparedCorpus, PretextBatch,
    Task,
};
use crate::tensor::Mat;
use crate::trainer::{train, Checkpoint, TrainOptions};

/// Backbone features of every pair's image, computed once for read-only probes.
pub fn feature_cache(model: &Model, prepared: &PreparedCorpus<'_>) -> Result<Vec<Mat>> {
    (0..prepared.len()).into_par_iter().map(|i| model.visual_features(prepared.image(i))).collect()
}

fn itm_score(model: &Model, features: &Mat, ids: &[usize]) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let enc = model.encode_cached(&mut g, features, ids, None, false)?;
    let logit = model.itm_logit(&mut g, &enc.states);
    Ok(g.value(logit).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Accuracy over one matched and one mismatched caption per image.
    pub itm_accuracy: f64,
    pub itm_examples: usize,
    pub mlm_accuracy: f64,
    pub mlm_tokens: usize,
}

/// Held-out ITM and MLM accuracy with seeded negatives and masks.
pub fn evaluate_tasks(model: &Model, prepared: &PreparedCorpus<'_>, features: &[Mat], seed: u64) -> Result<TaskMetrics> {
    let n = prepared.len();
    if n < 2 {
        return Err(Error::Validation("task evaluation needs at least 2 pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(Option<usize>, u64)> = (0..n)
        .map(|i| {
            let own = &prepared.examples[i].text_key;
            let candidates: Vec<usize> = (0..n).filter(|&j| &prepared.examples[j].text_key != own).collect();
            let neg = (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())]);
            (neg, rng.random())
        })
        .collect();
    let per_pair = (0..n)
        .into_par_iter()
        .map(|i| {
            let ex = &prepared.examples[i];
            let (neg, mseed) = plan[i];
            let mut itm = ((itm_score(model, &features[i], &ex.token_ids)? > 0.0) as usize, 1);
            if let Some(j) = neg {
                itm.0 += (itm_score(model, &features[i], &prepared.examples[j].token_ids)? <= 0.0) as usize;
                itm.1 += 1;
            }
            let mut r = ChaCha8Rng::seed_from_u64(mseed);
            let m = mlm_masking(&ex.token_ids, model.dims.vocab_size, model.config.mask_rate, &mut r);
            let mut g = Graph::new(&model.store);
            let enc = model.encode_cached(&mut g, &features[i], &m.input_ids, None, false)?;
            let rows = g.gather(enc.states.h_w, &m.selected);
            let logits = model.heads.mlm.forward(&mut g, rows);
            let lv = g.value(logits);
            let correct = m
                .selected
                .iter()
                .enumerate()
                .filter(|&(r, &s)| {
                    let row = lv.row(r);
                    let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    best == ex.token_ids[s]
                })
                .count();
            Ok((itm, (correct, m.selected.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut ic, mut it, mut mc, mut mt) = (0, 0, 0, 0);
    for ((a, b), (c, d)) in per_pair {
        ic += a;
        it += b;
        mc += c;
        mt += d;
    }
    Ok(TaskMetrics {
        itm_accuracy: ic as f64 / it as f64,
        itm_examples: it,
        mlm_accuracy: mc as f64 / mt.max(1) as f64,
        mlm_tokens: mt,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub image_to_text_r1: f64,
    pub image_to_text_r5: f64,
    pub image_to_text_r10: f64,
    pub text_to_image_r1: f64,
    pub text_to_image_r5: f64,
    pub text_to_image_r10: f64,
    pub pool_size: usize,
    pub queries: usize,
    /// Per pool, `scores[i][j]` = ITM logit of image `i` with caption `j`.
    #[serde(skip)]
    pub scores: Vec<Mat>,
}

/// 0-based rank of `target` among `scores`, descending, ties by lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < target)).count()
}

/// Recall@{1,5,10} in both directions for square score blocks whose diagonal holds the true pairs.
pub fn retrieval_from_scores(scores: Vec<Mat>) -> Result<RetrievalResult> {
    let pool = scores.first().map(|m| m.rows()).unwrap_or(0);
    if pool < 2 || scores.iter().any(|m| m.shape() != (pool, pool)) {
        return Err(Error::Shape("retrieval needs square score blocks of size >= 2".into()));
    }
    let mut hits = [[0usize; 3]; 2];
    for m in &scores {
        let t = m.transpose();
        for q in 0..pool {
            for (dir, block) in [m, &t].iter().enumerate() {
                let r = rank_of(block.row(q), q);
                for (k, cut) in [1, 5, 10].iter().enumerate() {
                    hits[dir][k] += (r < *cut) as usize;
                }
            }
        }
    }
    let queries = pool * scores.len();
    let f = |h: usize| h as f64 / queries as f64;
    Ok(RetrievalResult {
        image_to_text_r1: f(hits[0][0]),
        image_to_text_r5: f(hits[0][1]),
        image_to_text_r10: f(hits[0][2]),
        text_to_image_r1: f(hits[1][0]),
        text_to_image_r5: f(hits[1][1]),
        text_to_image_r10: f(hits[1][2]),
        pool_size: pool,
        queries,
        scores,
    })
}

/// Shuffles the corpus with `seed`, splits it into pools of `pool_size` (a
/// short remainder is dropped) and ranks every pool candidate by its ITM logit.
pub fn probe_retrieval(
    model: &Model,
    prepared: &PreparedCorpus<'_>,
    features: &[Mat],
    pool_size: usize,
    seed: u64,
) -> Result<RetrievalResult> {
    if pool_size < 2 {
        return Err(Error::Validation(format!("pool size {pool_size} < 2")));
    }
    if prepared.len() < pool_size {
        return Err(Error::Validation(format!("{} pairs cannot fill a pool of {pool_size}", prepared.len())));
    }
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let blocks: Vec<&[usize]> = order.chunks_exact(pool_size).collect();
    let mut scores = Vec::with_capacity(blocks.len());
    for block in blocks {
        let cells: Vec<f64> = (0..pool_size * pool_size)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (block[k / pool_size], block[k % pool_size]);
                itm_score(model, &features[i], &prepared.examples[j].token_ids)
            })
            .collect::<Result<_>>()?;
        scores.push(Mat::from_vec(pool_size, pool_size, cells));
    }
    retrieval_from_scores(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Fraction of phrases whose most similar region is the planted object.
    pub accuracy: f64,
    /// Mean 1-based rank of the planted object.
    pub mean_rank: f64,
    /// Phrases scored.
    pub count: usize,
    /// Pairs without phrases or proposals.
    pub skipped_pairs: usize,
}

/// Scores every phrase's cross-modal similarity row against its planted proposal.
pub fn alignment_from_rows(rows: &[(Vec<f64>, usize)], skipped_pairs: usize) -> AlignmentResult {
    let count = rows.len();
    let (mut hits, mut rank_sum) = (0, 0);
    for (row, gt) in rows {
        let r = rank_of(row, *gt);
        hits += (r == 0) as usize;
        rank_sum += r + 1;
    }
    AlignmentResult {
        accuracy: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
        mean_rank: if count == 0 { 0.0 } else { rank_sum as f64 / count as f64 },
        count,
        skipped_pairs,
    }
}

pub fn probe_alignment(model: &Model, prepared: &PreparedCorpus<'_>, features: &[Mat]) -> Result<AlignmentResult> {
    let per_pair = (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let ex = &prepared.examples[i];
            if ex.similarity.is_none() || !ex.planted.iter().any(Option::is_some) {
                return Ok(None);
            }
            let mut g = Graph::new(&model.store);
            let enc = model.encode_cached(&mut g, &features[i], &ex.token_ids, None, false)?;
            let s = cross_modal_similarity(&mut g, enc.states.h_v, enc.states.h_w, &ex.phrases, &ex.masks)?;
            let s = g.value(s);
            Ok(Some(
                ex.planted
                    .iter()
                    .enumerate()
                    .filter_map(|(z, gt)| gt.map(|gt| (s.row(z).to_vec(), gt)))
                    .collect::<Vec<_>>(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = per_pair.iter().filter(|p| p.is_none()).count();
    let rows: Vec<(Vec<f64>, usize)> = per_pair.into_iter().flatten().flatten().collect();
    Ok(alignment_from_rows(&rows, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub tasks: TaskMetrics,
    pub retrieval: RetrievalResult,
    pub alignment: AlignmentResult,
}

/// All probes of a checkpoint on `eval`, using the checkpoint's vocabulary.
pub fn probe_checkpoint(ckpt: &Checkpoint, eval: &Corpus, pool_size: usize, seed: u64) -> Result<ProbeReport> {
    let model = ckpt.model()?;
    let embedder = make_embedder(&ckpt.config)?;
    let prepared = prepare_corpus(eval, &ckpt.vocab, embedder.as_ref(), &ckpt.config)?;
    let features = feature_cache(&model, &prepared)?;
    Ok(ProbeReport {
        tasks: evaluate_tasks(&model, &prepared, &features, seed)?,
        retrieval: probe_retrieval(&model, &prepared, &features, pool_size, seed)?,
        alignment: probe_alignment(&model, &prepared, &features)?,
    })
}

/// One ablation configuration: which tasks are sampled and which vision-modeling variant fills that slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub task_weights: [f64; 4],
    pub mvm_variant: MvmVariant,
}

impl AblationCell {
    /// Parses a comma list over `itm, mlm, pra, omvm, random_mvm, standard_mvm`;
    /// selected tasks are sampled uniformly.
    pub fn from_tasks(spec: &str) -> Result<Self> {
        let mut weights = [0.0; 4];
        let mut variant = MvmVariant::Omvm;
        let mut vision = 0;
        let mut names = Vec::new();
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let name = raw.to_ascii_lowercase();
            let slot = match name.as_str() {
                "itm" => Task::Itm,
                "mlm" => Task::Mlm,
                "pra" => Task::Pra,
                "omvm" | "random_mvm" | "standard_mvm" => {
                    vision += 1;
                    variant = match name.as_str() {
                        "omvm" => MvmVariant::Omvm,
                        "random_mvm" => MvmVariant::RandomMvm,
                        _ => MvmVariant::StandardMvm,
                    };
                    Task::Omvm
                }
                other => return Err(Error::Config(format!("unknown task {other:?}"))),
            };
            if weights[slot.index()] > 0.0 {
                return Err(Error::Config(format!("task {name} listed twice")));
            }
            weights[slot.index()] = 1.0;
            names.push(name.to_uppercase());
        }
        if vision > 1 {
            return Err(Error::Config("at most one vision-modeling variant per cell".into()));
        }
        if names.is_empty() {
            return Err(Error::Config("empty task list".into()));
        }
        Ok(Self { name: names.join("+"), task_weights: weights, mvm_variant: variant })
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { task_weights: self.task_weights, mvm_variant: self.mvm_variant, ..base.clone() }
    }
}

/// The five rows of the pretext-task ablation.
pub fn standard_cells() -> Vec<AblationCell> {
    ["itm,mlm", "itm,mlm,standard_mvm", "itm,mlm,random_mvm", "itm,mlm,omvm", "itm,mlm,omvm,pra"]
        .iter()
        .map(|s| AblationCell::from_tasks(s).expect("valid cell"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Loss of each enabled task at initialization on a shared batch.
    pub initial_losses: BTreeMap<String, f64>,
    pub probe: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.cell.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
            "tasks", "align", "rank", "IR@1", "TR@1", "ITM", "MLM"
        );
        for r in &self.rows {
            let p = &r.probe;
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.3}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
                r.cell.name,
                p.alignment.accuracy,
                p.alignment.mean_rank,
                p.retrieval.text_to_image_r1,
                p.retrieval.image_to_text_r1,
                p.tasks.itm_accuracy,
                p.tasks.mlm_accuracy,
            );
        }
        out
    }
}

/// Step-0 loss of each task enabled in `config`, on one batch drawn from `seed`.
pub fn initial_losses(model: &Model, prepared: &PreparedCorpus<'_>, seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.config.batch_size.max(2).min(prepared.len());
    let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..prepared.len())).collect();
    for task in Task::ALL {
        if model.config.task_weights[task.index()] <= 0.0 {
            continue;
        }
        let batch = PretextBatch::matched(task, indices.clone());
        let mut task_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let out_loss = compute_loss(model, prepared, &batch, &mut task_rng, None)?;
        out.insert(out_loss.report.task, out_loss.report.loss);
    }
    Ok(out)
}

/// Probes a trained cell and records its step-0 losses.
pub fn ablation_row(
    cell: &AblationCell,
    train_corpus: &Corpus,
    eval: &Corpus,
    checkpoint: &Checkpoint,
    pool_size: usize,
    probe_seed: u64,
) -> Result<AblationRow> {
    let config = &checkpoint.config;
    let model = Model::new(config, checkpoint.dims)?;
    let embedder = make_embedder(config)?;
    let prepared = prepare_corpus(train_corpus, &checkpoint.vocab, embedder.as_ref(), config)?;
    let initial_losses = initial_losses(&model, &prepared, probe_seed)?;
    let probe = probe_checkpoint(checkpoint, eval, pool_size, probe_seed)?;
    Ok(AblationRow { cell: cell.clone(), initial_losses, probe })
}

/// Trains every cell from the same seed on the same data for the same number
/// of steps and probes each result on `eval`.
pub fn run_ablation(
    train_corpus: &Corpus,
    eval: &Corpus,
    base: &TrainConfig,
    cells: &[AblationCell],
    pool_size: usize,
    probe_seed: u64,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let config = cell.apply(base);
        config.validate()?;
        log::info!("ablation cell {}", cell.name);
        let outcome = train(train_corpus, &config, TrainOptions::default())?;
        rows.push(ablation_row(cell, train_corpus, eval, &outcome.checkpoint, pool_size, probe_seed)?);
    }
    Ok(AblationTable { rows })
}
