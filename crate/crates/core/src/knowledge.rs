//! Quantities derived from external object knowledge: region masks on the
//! feature grid, phrase-label similarities in a language-embedding space, and
//! the knowledge-guided masking distribution over proposals.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::{BBox, ObjectProposal, PhraseSpan};
use crate::encoder::tokenize_words;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Flattened binary mask over an `h x w` feature grid (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    flat: Vec<bool>,
    grid_shape: (usize, usize),
}

impl BinaryMask {
    /// Fails unless `flat` is a non-empty filled axis-aligned rectangle.
    pub fn new(flat: Vec<bool>, grid_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = grid_shape;
        if flat.len() != h * w {
            return Err(Error::Shape(format!("mask of length {} for a {h}x{w} grid", flat.len())));
        }
        let on: Vec<(usize, usize)> = (0..h * w).filter(|&i| flat[i]).map(|i| (i / w, i % w)).collect();
        if on.is_empty() {
            return Err(Error::Validation("binary mask has no active cell".into()));
        }
        let (r0, r1) = (on.iter().map(|c| c.0).min().unwrap(), on.iter().map(|c| c.0).max().unwrap());
        let (c0, c1) = (on.iter().map(|c| c.1).min().unwrap(), on.iter().map(|c| c.1).max().unwrap());
        if on.len() != (r1 - r0 + 1) * (c1 - c0 + 1) {
            return Err(Error::Validation("binary mask is not a filled rectangle".into()));
        }
        Ok(Self { flat, grid_shape })
    }

    pub fn flat(&self) -> &[bool] {
        &self.flat
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid_shape
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn active(&self) -> usize {
        self.flat.iter().filter(|&&b| b).count()
    }

    pub fn active_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.flat.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// `1/count` on active cells, 0 elsewhere.
    pub fn mean_weights(&self) -> Vec<f64> {
        let n = self.active() as f64;
        self.flat.iter().map(|&b| if b { 1.0 / n } else { 0.0 }).collect()
    }
}

/// Cell `(i, j)` is active iff its center, in pixel coordinates, lies inside
/// the closed box. If no center qualifies, the cell holding the box center is
/// used, so the result is never empty.
pub fn rasterize_mask(bbox: &BBox, image_size: (usize, usize), grid_shape: (usize, usize)) -> Result<BinaryMask> {
    let (img_h, img_w) = image_size;
    let (h, w) = grid_shape;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("grid {h}x{w} has no cells")));
    }
    bbox.validate(img_h, img_w)?;
    let cell_h = img_h as f64 / h as f64;
    let cell_w = img_w as f64 / w as f64;
    let mut flat = vec![false; h * w];
    let mut any = false;
    for i in 0..h {
        let cy = (i as f64 + 0.5) * cell_h;
        if cy < bbox.y1 || cy > bbox.y2 {
            continue;
        }
        for j in 0..w {
            let cx = (j as f64 + 0.5) * cell_w;
            if cx >= bbox.x1 && cx <= bbox.x2 {
                flat[i * w + j] = true;
                any = true;
            }
        }
    }
    if !any {
        let bx = 0.5 * (bbox.x1 + bbox.x2);
        let by = 0.5 * (bbox.y1 + bbox.y2);
        let j = ((bx / cell_w) as usize).min(w - 1);
        let i = ((by / cell_h) as usize).min(h - 1);
        flat[i * w + j] = true;
    }
    Ok(BinaryMask { flat, grid_shape })
}

/// Maps text to unit vectors in a fixed embedding space.
pub trait TextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Embedding("cannot normalize a zero or non-finite vector".into()));
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

/// Deterministic stand-in for a pretrained language embedding.
///
/// Token vector: the first 8 bytes of `SHA-256(seed as u64 LE || token UTF-8)`
/// seed a ChaCha8 stream from which `d_e` standard normals are drawn, then the
/// vector is L2-normalized. A multi-token phrase embeds as the normalized mean
/// of its token vectors.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

pub fn hash_embedder(d_e: usize, seed: u64) -> Result<HashEmbedder> {
    if d_e < 4 {
        return Err(Error::Embedding(format!("embedding dimension {d_e} < 4")));
    }
    Ok(HashEmbedder { dim: d_e, seed, name: format!("hash-d{d_e}-s{seed}") })
}

impl HashEmbedder {
    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let stream_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize_words(text);
        if tokens.is_empty() {
            return Err(Error::Embedding("cannot embed an empty string".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(normalize(self.token_vector(t))?) {
                *a += v;
            }
        }
        normalize(acc)
    }
}

/// Pretrained embeddings from a text file: a header line with `d_e`, then
/// `token v1 v2 ...` lines. Unknown tokens are skipped; a phrase with no known
/// token is an error.
#[derive(Clone, Debug)]
pub struct FileEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    name: String,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Embedding("empty embedding file".into()))?;
        let dim: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::Embedding(format!("bad embedding header {header:?}")))?;
        let mut table = HashMap::new();
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_lowercase();
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Embedding(format!("line {}: {e}", i + 1)))?;
            if values.len() != dim {
                return Err(Error::Embedding(format!("line {}: {} values, expected {dim}", i + 1, values.len())));
            }
            table.insert(token, values);
        }
        Ok(Self { dim, table, name: format!("file:{}", path.display()) })
    }
}

impl TextEmbedder for FileEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize_words(text);
        if tokens.is_empty() {
            return Err(Error::Embedding("cannot embed an empty string".into()));
        }
        let mut acc = vec![0.0; self.dim];
        let mut found = 0;
        for t in &tokens {
            if let Some(v) = self.table.get(t) {
                for (a, x) in acc.iter_mut().zip(normalize(v.clone())?) {
                    *a += x;
                }
                found += 1;
            }
        }
        if found == 0 {
            return Err(Error::Embedding(format!("no token of {text:?} in the embedding table")));
        }
        normalize(acc)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `|P| x N` phrase-label cosine similarities and their row softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    raw: Mat,
    row_softmax: Mat,
}

impl SimilarityMatrix {
    pub fn from_raw(raw: Mat, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("softmax temperature {temperature} must be positive")));
        }
        let scaled = raw.map(|x| x / temperature);
        let row_softmax = crate::autograd::softmax_rows(&scaled);
        Ok(Self { raw, row_softmax })
    }

    pub fn raw(&self) -> &Mat {
        &self.raw
    }

    pub fn row_softmax(&self) -> &Mat {
        &self.row_softmax
    }

    pub fn phrases(&self) -> usize {
        self.raw.rows()
    }

    pub fn proposals(&self) -> usize {
        self.raw.cols()
    }
}

/// `raw[z][n] = cos(E(phrase_z), E(category_name_n))`, softmax at `temperature`.
pub fn phrase_label_similarity(
    phrases: &[PhraseSpan],
    proposals: &[ObjectProposal],
    embedder: &dyn TextEmbedder,
    temperature: f64,
) -> Result<SimilarityMatrix> {
    if phrases.is_empty() || proposals.is_empty() {
        return Err(Error::Validation(format!(
            "similarity needs at least one phrase and one proposal (got {} x {})",
            phrases.len(),
            proposals.len()
        )));
    }
    let p_emb: Vec<Vec<f64>> = phrases.iter().map(|p| embedder.embed(&p.text)).collect::<Result<_>>()?;
    let mut label_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for o in proposals {
        if !label_cache.contains_key(o.category_name.as_str()) {
            label_cache.insert(&o.category_name, embedder.embed(&o.category_name)?);
        }
    }
    let mut raw = Mat::zeros(phrases.len(), proposals.len());
    for (z, pe) in p_emb.iter().enumerate() {
        for (n, o) in proposals.iter().enumerate() {
            raw.set(z, n, cosine(pe, &label_cache[o.category_name.as_str()]).clamp(-1.0, 1.0));
        }
    }
    SimilarityMatrix::from_raw(raw, temperature)
}

/// `p(n) = mean_z row_softmax[z][n]`: pick a phrase uniformly, then a proposal
/// from its softmax row.
pub fn masking_distribution(sim: &SimilarityMatrix) -> Vec<f64> {
    let s = sim.row_softmax();
    let mut p = vec![0.0; s.cols()];
    for z in 0..s.rows() {
        for (acc, v) in p.iter_mut().zip(s.row(z)) {
            *acc += v;
        }
    }
    let nz = s.rows() as f64;
    for v in &mut p {
        *v /= nz;
    }
    p
}

/// Uniform distribution for pairs without phrases.
pub fn uniform_distribution(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
