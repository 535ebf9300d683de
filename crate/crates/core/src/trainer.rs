//! Pretraining loop: task sampling, two-group optimization, step decay,
//! checkpoints and metrics.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::corpus::Corpus;
use crate::encoder::{build_vocab, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::params::{Group, ParamGrads, ParamId, ParamStore};
use crate::pretext::{build_batch, compute_loss, make_embedder, prepare_corpus, sample_task, LossReport, Task};
use crate::tensor::Mat;

/// Learning rates `(backbone, transformer)` at `step`: base rates times
/// `decay_factor` per passed decay step, times an optional linear warmup.
pub fn lr_at(step: usize, config: &TrainConfig) -> (f64, f64) {
    let passed = config.decay_steps.iter().filter(|&&s| s <= step).count();
    let mut factor = config.decay_factor.powi(passed as i32);
    if config.warmup_steps > 0 && step < config.warmup_steps {
        factor *= (step + 1) as f64 / config.warmup_steps as f64;
    }
    (config.lr_backbone * factor, config.lr_transformer * factor)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub backbone: Vec<ParamId>,
    pub transformer: Vec<ParamId>,
}

impl ParamGroups {
    pub fn group_of(&self, id: ParamId) -> Option<Group> {
        if self.backbone.contains(&id) {
            Some(Group::Backbone)
        } else if self.transformer.contains(&id) {
            Some(Group::Transformer)
        } else {
            None
        }
    }
}

pub fn build_param_groups(store: &ParamStore) -> Result<ParamGroups> {
    let mut groups = ParamGroups { backbone: Vec::new(), transformer: Vec::new() };
    let mut orphans = Vec::new();
    for (id, p) in store.iter() {
        match p.group {
            Some(Group::Backbone) => groups.backbone.push(id),
            Some(Group::Transformer) => groups.transformer.push(id),
            None => orphans.push(p.name.clone()),
        }
    }
    if orphans.is_empty() {
        Ok(groups)
    } else {
        Err(Error::Config(format!("parameters without an optimizer group: {}", orphans.join(", "))))
    }
}

/// Momentum SGD state for the backbone and AdamW moments for the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: Vec<Option<Mat>>,
    pub adam_m: Vec<Option<Mat>>,
    pub adam_v: Vec<Option<Mat>>,
    pub adam_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { momentum: vec![None; n], adam_m: vec![None; n], adam_v: vec![None; n], adam_steps: vec![0; n] }
    }

    /// One update. Parameters without a gradient are left untouched, state included.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        groups: &ParamGroups,
        grads: &ParamGrads,
        lr: (f64, f64),
        config: &TrainConfig,
    ) {
        for &id in &groups.backbone {
            let Some(g) = grads.get(id) else { continue };
            let buf = match self.momentum[id.0].take() {
                Some(mut b) => {
                    b.scale_in_place(config.momentum);
                    b.add_assign(g);
                    b
                }
                None => g.clone(),
            };
            store.value_mut(id).add_scaled(&buf, -lr.0);
            self.momentum[id.0] = Some(buf);
        }
        let (b1, b2) = (config.beta1, config.beta2);
        for &id in &groups.transformer {
            let Some(g) = grads.get(id) else { continue };
            let decay = store.get(id).decay;
            let m = self.adam_m[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.adam_v[id.0].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            self.adam_steps[id.0] += 1;
            let t = self.adam_steps[id.0] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = store.value_mut(id).data_mut();
            for (((pk, gk), mk), vk) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                if decay {
                    *pk *= 1.0 - lr.1 * config.weight_decay;
                }
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *pk -= lr.1 * mhat / (vhat.sqrt() + config.adam_eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub dims: ModelDims,
    /// Completed optimization steps.
    pub step: usize,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

const MAGIC: &[u8; 8] = b"KDVLPCKP";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn opt_mat(&mut self, m: &Option<Mat>) {
        match m {
            Some(m) => {
                self.u8(1);
                self.mat(m);
            }
            None => self.u8(0),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("implausible length {n} at byte {}", self.pos)));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
    fn mat(&mut self) -> Result<Mat> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows.checked_mul(cols).filter(|n| n * 8 <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("implausible matrix shape {rows}x{cols}"))
        })?;
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Mat::from_vec(rows, cols, data))
    }
    fn opt_mat(&mut self) -> Result<Option<Mat>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.mat()?)),
            t => Err(Error::Checkpoint(format!("bad optional tag {t}"))),
        }
    }
}

impl Checkpoint {
    /// Little-endian binary encoding with a trailing SHA-256 of the body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_json());
        w.str(&self.config_hash);
        w.u64(self.vocab.len() as u64);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        let d = &self.dims;
        for v in [d.vocab_size, d.k_cat, d.d_o, d.image_height, d.image_width, d.channels] {
            w.u64(v as u64);
        }
        w.u64(self.step as u64);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for (id, p) in self.params.iter() {
            w.str(&p.name);
            w.u8(p.group.map_or(0, Group::code));
            w.u8(p.decay as u8);
            w.mat(&p.value);
            w.opt_mat(&self.optimizer.momentum[id.0]);
            w.opt_mat(&self.optimizer.adam_m[id.0]);
            w.opt_mat(&self.optimizer.adam_v[id.0]);
            w.u64(self.optimizer.adam_steps[id.0]);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = TrainConfig::from_json(&r.str()?)?;
        let config_hash = r.str()?;
        let nv = r.len()?;
        let tokens = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens)?;
        let mut dv = [0usize; 6];
        for v in &mut dv {
            *v = r.u64()? as usize;
        }
        let dims = ModelDims {
            vocab_size: dv[0],
            k_cat: dv[1],
            d_o: dv[2],
            image_height: dv[3],
            image_width: dv[4],
            channels: dv[5],
        };
        let step = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let np = r.len()?;
        let mut params = ParamStore::new();
        let mut optimizer = OptimizerState::new(np);
        for i in 0..np {
            let name = r.str()?;
            let code = r.u8()?;
            let group = match code {
                0 => None,
                c => Some(Group::from_code(c).ok_or_else(|| Error::Checkpoint(format!("bad group code {c}")))?),
            };
            let decay = r.u8()? != 0;
            let value = r.mat()?;
            params.add(name, value, group, decay);
            optimizer.momentum[i] = r.opt_mat()?;
            optimizer.adam_m[i] = r.opt_mat()?;
            optimizer.adam_v[i] = r.opt_mat()?;
            optimizer.adam_steps[i] = r.u64()?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, config_hash, vocab, dims, step, rng: RngState { seed, stream, word_pos }, params, optimizer })
    }

    /// Warns and returns false when the stored config hash differs from `config`'s.
    pub fn check_config(&self, config: &TrainConfig) -> bool {
        let ok = self.config_hash == config.hash();
        if !ok {
            log::warn!("checkpoint config hash {} differs from the current config {}", self.config_hash, config.hash());
        }
        ok
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.dims)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `metrics.jsonl`, `timing.jsonl` and checkpoints go.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<usize>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossReport>,
}

struct Logs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self { metrics: open("metrics.jsonl")?, timing: open("timing.jsonl")? })
    }
}

/// Runs pretraining. Each step samples one task, draws `batch_size *
/// grad_accum_steps` pairs uniformly with replacement, accumulates the
/// micro-batch gradients (each scaled by `1 / grad_accum_steps`) and applies
/// one update per optimizer group.
pub fn train(corpus: &Corpus, config: &TrainConfig, options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("cannot train on an empty corpus".into()));
    }
    if config.task_weights[Task::Itm.index()] > 0.0 && config.batch_size < 2 {
        return Err(Error::Config("image-text matching needs batch_size >= 2".into()));
    }
    let (vocab, mut model, mut optimizer, mut rng, start) = match &options.resume {
        Some(ckpt) => {
            ckpt.check_config(config);
            let dims = ModelDims::for_corpus(corpus, ckpt.vocab.len())?;
            if dims != ckpt.dims {
                return Err(Error::Shape(format!("checkpoint dims {:?} do not match the corpus {dims:?}", ckpt.dims)));
            }
            let mut model = Model::new(config, dims)?;
            model.load_params(&ckpt.params)?;
            (ckpt.vocab.clone(), model, ckpt.optimizer.clone(), ckpt.rng.restore(), ckpt.step)
        }
        None => {
            let vocab = build_vocab(corpus.pairs.iter().map(|p| p.caption.as_str()), config.vocab_min_count);
            let dims = ModelDims::for_corpus(corpus, vocab.len())?;
            let model = Model::new(config, dims)?;
            let n = model.store.len();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            (vocab, model, OptimizerState::new(n), rng, 0)
        }
    };
    let groups = build_param_groups(&model.store)?;
    let embedder = make_embedder(config)?;
    let prepared = prepare_corpus(corpus, &vocab, embedder.as_ref(), config)?;
    let end = options.stop_at.unwrap_or(config.total_steps).min(config.total_steps).max(start);
    let mut logs = match &options.out_dir {
        Some(dir) => Some(Logs::open(dir, options.resume.is_some())?),
        None => None,
    };
    let snapshot = |model: &Model, optimizer: &OptimizerState, rng: &ChaCha8Rng, step: usize| Checkpoint {
        config: config.clone(),
        config_hash: config.hash(),
        vocab: vocab.clone(),
        dims: model.dims,
        step,
        rng: RngState::capture(rng),
        params: model.store.clone(),
        optimizer: optimizer.clone(),
    };

    let accum = config.grad_accum_steps;
    let mut log = Vec::with_capacity(end - start);
    let t0 = Instant::now();
    for step in start..end {
        let lr = lr_at(step, config);
        let task = sample_task(&config.task_weights, &mut rng)?;
        let indices: Vec<usize> = (0..config.batch_size * accum).map(|_| rng.random_range(0..corpus.len())).collect();
        let mut grads = ParamGrads::new(model.store.len());
        let mut parts = Vec::with_capacity(accum);
        for chunk in indices.chunks(config.batch_size) {
            let batch = build_batch(&prepared, task, chunk.to_vec(), config, &mut rng)?;
            match compute_loss(&model, &prepared, &batch, &mut rng, Some(1.0 / accum as f64)) {
                Ok(out) => {
                    if let Some(g) = &out.grads {
                        grads.merge(g, 1.0);
                    }
                    parts.push(out.report);
                }
                Err(Error::Task(msg)) => {
                    log::debug!("step {step}: {msg}");
                    parts.push(LossReport { task: task.to_string(), skipped: batch.len(), ..Default::default() });
                }
                Err(e) => return Err(e),
            }
        }
        let mut report = LossReport::merge(&parts);
        report.step = Some(step);
        report.lr_backbone = Some(lr.0);
        report.lr_transformer = Some(lr.1);
        if !report.loss.is_finite() {
            if let Some(dir) = &options.out_dir {
                let path = dir.join(format!("diagnostic-step{step:06}.ckpt"));
                save_checkpoint(&snapshot(&model, &optimizer, &rng, step), &path)?;
                log::error!("non-finite loss; diagnostic checkpoint written to {}", path.display());
            }
            return Err(Error::NonFiniteLoss { step, task: report.task, loss: report.loss });
        }
        optimizer.apply(&mut model.store, &groups, &grads, lr, config);
        if let Some(l) = logs.as_mut() {
            writeln!(l.metrics, "{}", report.to_json_line()).map_err(|e| Error::io("metrics.jsonl", e))?;
            writeln!(l.timing, "{{\"step\":{step},\"wall_seconds\":{:.6}}}", t0.elapsed().as_secs_f64())
                .map_err(|e| Error::io("timing.jsonl", e))?;
        }
        if step % 100 == 0 {
            log::info!("step {step} {} loss {:.4}", report.task, report.loss);
        }
        log.push(report);
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < end {
            if let Some(dir) = &options.out_dir {
                save_checkpoint(&snapshot(&model, &optimizer, &rng, done), &dir.join(format!("step-{done:06}.ckpt")))?;
            }
        }
    }
    if let Some(l) = logs.as_mut() {
        l.metrics.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        l.timing.flush().map_err(|e| Error::io("timing.jsonl", e))?;
    }
    let checkpoint = snapshot(&model, &optimizer, &rng, end);
    if let Some(dir) = &options.out_dir {
        save_checkpoint(&checkpoint, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), (1e-2, 1e-4));
        let scaled = TrainConfig { total_steps: 600, decay_steps: vec![200, 400], ..c.clone() };
        let (b, t) = lr_at(250, &scaled);
        assert!((b - 1e-3).abs() < 1e-15 && (t - 1e-5).abs() < 1e-18);
        let (b, _) = lr_at(450, &scaled);
        assert!((b - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn orphan_parameter_is_reported() {
        let mut store = ParamStore::new();
        store.add("loose", Mat::zeros(1, 1), None, false);
        let err = build_param_groups(&store).unwrap_err();
        assert!(err.to_string().contains("loose"));
    }

    #[test]
    fn rng_state_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(1);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
