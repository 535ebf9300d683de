//! Image-text-annotation corpora: the on-disk format, validation, and the
//! synthetic scene generator whose phrase-to-object alignment is known exactly.
//!
//! Layout of a corpus root:
//!
//! ```text
//! meta.json          {"d_o": .., "k_cat": .., "lexicon": [..]}
//! pairs.jsonl        {"image_id", "caption", "annotation_id", "image_path"}
//! annotations.jsonl  {"annotation_id", "proposals": [{"box", "category_id", "category_name", "roi_feature"}]}
//! images/*.bin       u32 LE height, u32 LE width, then H*W*C f64 LE (HWC order)
//! ```
//!
//! `roi_feature` is base64 of the little-endian f64 array.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::tokenize_words;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PROPOSALS: usize = 36;
const MIN_IMAGE_SIDE: usize = 16;

/// Dense H x W x C image with values in [0, 1], stored in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::Validation(format!(
                "image {}x{} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.data.len() != self.height * self.width * self.channels {
            return Err(Error::Validation("image buffer does not match its shape".into()));
        }
        if let Some(v) = self.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Blob encoding: u32 LE height, u32 LE width, then f64 LE samples.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 8);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Validation("image blob shorter than its header".into()));
        }
        let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        let cells = height * width;
        if cells == 0 || !body.len().is_multiple_of(8) || !(body.len() / 8).is_multiple_of(cells) {
            return Err(Error::Validation(format!("image blob size {} inconsistent with {height}x{width}", bytes.len())));
        }
        let channels = body.len() / 8 / cells;
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { height, width, channels, data })
    }
}

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 <= self.x2
            && self.x2 <= width as f64
            && 0.0 <= self.y1
            && self.y1 <= self.y2
            && self.y2 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("box {self:?} invalid for a {height}x{width} image")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal {
    pub bbox: BBox,
    pub category_id: usize,
    pub category_name: String,
    pub roi_feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorAnnotation {
    pub annotation_id: String,
    pub proposals: Vec<ObjectProposal>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTextPair {
    pub image_id: String,
    pub pixels: Arc<Image>,
    pub caption: String,
    pub annotation_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub d_o: usize,
    pub k_cat: usize,
    pub lexicon: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub pairs: Vec<ImageTextPair>,
    pub annotations: BTreeMap<String, DetectorAnnotation>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn annotation(&self, pair: &ImageTextPair) -> &DetectorAnnotation {
        &self.annotations[&pair.annotation_id]
    }

    /// Checks every invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        for ann in self.annotations.values() {
            for p in &ann.proposals {
                if p.category_id >= self.meta.k_cat {
                    return Err(Error::Validation(format!(
                        "{}: category id {} outside [0, {})",
                        ann.annotation_id, p.category_id, self.meta.k_cat
                    )));
                }
                if p.roi_feature.len() != self.meta.d_o {
                    return Err(Error::Validation(format!(
                        "{}: roi feature dimension {} != d_o {}",
                        ann.annotation_id,
                        p.roi_feature.len(),
                        self.meta.d_o
                    )));
                }
                if p.roi_feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("{}: non-finite roi feature", ann.annotation_id)));
                }
            }
        }
        for pair in &self.pairs {
            pair.pixels.validate()?;
            if tokenize_words(&pair.caption).is_empty() {
                return Err(Error::Validation(format!("{}: empty caption", pair.image_id)));
            }
            let ann = self.annotations.get(&pair.annotation_id).ok_or_else(|| {
                Error::Integrity(format!("pair {} references unknown annotation {}", pair.image_id, pair.annotation_id))
            })?;
            for p in &ann.proposals {
                p.bbox.validate(pair.pixels.height, pair.pixels.width)?;
            }
        }
        Ok(())
    }

    /// Sub-corpus holding the given pair indices.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let pairs: Vec<_> = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let annotations =
            pairs.iter().map(|p| (p.annotation_id.clone(), self.annotations[&p.annotation_id].clone())).collect();
        Corpus { meta: self.meta.clone(), pairs, annotations }
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    image_id: String,
    caption: String,
    annotation_id: String,
    image_path: String,
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    category_id: usize,
    category_name: String,
    roi_feature: String,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    annotation_id: String,
    proposals: Vec<ProposalRecord>,
}

fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    load_corpus_with(root, DEFAULT_MAX_PROPOSALS)
}

/// Loads and validates a corpus, keeping at most `max_proposals` proposals per annotation.
pub fn load_corpus_with(root: &Path, max_proposals: usize) -> Result<Corpus> {
    let meta_path = root.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&meta_text)?;

    let ann_path = root.join("annotations.jsonl");
    let mut annotations = BTreeMap::new();
    for (line_no, line) in read_lines(&ann_path)? {
        let malformed = |msg: String| Error::Malformed { file: "annotations.jsonl".into(), line: line_no, msg };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let mut proposals = Vec::with_capacity(rec.proposals.len());
        for p in rec.proposals {
            let roi_feature = decode_f64s(&p.roi_feature).map_err(malformed)?;
            let [x1, y1, x2, y2] = p.bbox;
            proposals.push(ObjectProposal {
                bbox: BBox::new(x1, y1, x2, y2),
                category_id: p.category_id,
                category_name: p.category_name,
                roi_feature,
            });
        }
        if proposals.len() > max_proposals {
            log::warn!("{}: keeping {max_proposals} of {} proposals", rec.annotation_id, proposals.len());
            proposals.truncate(max_proposals);
        }
        let id = rec.annotation_id.clone();
        if annotations.insert(id.clone(), DetectorAnnotation { annotation_id: id.clone(), proposals }).is_some() {
            return Err(malformed(format!("duplicate annotation id {id}")));
        }
    }

    let pairs_path = root.join("pairs.jsonl");
    let mut images: BTreeMap<String, Arc<Image>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (line_no, line) in read_lines(&pairs_path)? {
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed { file: "pairs.jsonl".into(), line: line_no, msg: e.to_string() })?;
        if !annotations.contains_key(&rec.annotation_id) {
            return Err(Error::Integrity(format!(
                "pairs.jsonl:{line_no}: annotation {} does not exist",
                rec.annotation_id
            )));
        }
        let pixels = match images.get(&rec.image_path) {
            Some(img) => img.clone(),
            None => {
                let path = root.join(&rec.image_path);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let img = Arc::new(Image::from_blob(&bytes)?);
                images.insert(rec.image_path.clone(), img.clone());
                img
            }
        };
        pairs.push(ImageTextPair { image_id: rec.image_id, pixels, caption: rec.caption, annotation_id: rec.annotation_id });
    }

    let corpus = Corpus { meta, pairs, annotations };
    corpus.validate()?;
    Ok(corpus)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn blob_name(image_id: &str) -> String {
    let safe: String =
        image_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("images/{safe}.bin")
}

/// Writes `corpus` under `root`; pairs sharing an `image_id` share one blob.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    write_file(&root.join("meta.json"), serde_json::to_string_pretty(&corpus.meta)?.as_bytes())?;

    let mut written = BTreeSet::new();
    let mut pairs_out = String::new();
    for pair in &corpus.pairs {
        let rel = blob_name(&pair.image_id);
        if written.insert(rel.clone()) {
            write_file(&root.join(&rel), &pair.pixels.to_blob())?;
        }
        let rec = PairRecord {
            image_id: pair.image_id.clone(),
            caption: pair.caption.clone(),
            annotation_id: pair.annotation_id.clone(),
            image_path: rel,
        };
        pairs_out.push_str(&serde_json::to_string(&rec)?);
        pairs_out.push('\n');
    }
    write_file(&root.join("pairs.jsonl"), pairs_out.as_bytes())?;

    let mut ann_out = String::new();
    for ann in corpus.annotations.values() {
        let rec = AnnotationRecord {
            annotation_id: ann.annotation_id.clone(),
            proposals: ann
                .proposals
                .iter()
                .map(|p| ProposalRecord {
                    bbox: [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2],
                    category_id: p.category_id,
                    category_name: p.category_name.clone(),
                    roi_feature: encode_f64s(&p.roi_feature),
                })
                .collect(),
        };
        ann_out.push_str(&serde_json::to_string(&rec)?);
        ann_out.push('\n');
    }
    write_file(&root.join("annotations.jsonl"), ann_out.as_bytes())
}

/// Files making up a saved corpus, relative to its root, in a stable order.
pub fn corpus_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![PathBuf::from("meta.json"), PathBuf::from("pairs.jsonl"), PathBuf::from("annotations.jsonl")];
    let images = root.join("images");
    if images.is_dir() {
        let mut blobs: Vec<PathBuf> = fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok())
            .map(|e| PathBuf::from("images").join(e.file_name()))
            .collect();
        blobs.sort();
        files.extend(blobs);
    }
    Ok(files)
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Bar,
    Frame,
}

impl Shape {
    /// Whether local coordinates `(u, v)` in `[0, 1]^2` fall on the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            Shape::Square => true,
            Shape::Circle => du * du + dv * dv <= 0.25,
            Shape::Triangle => 2.0 * du.abs() <= v,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::Ring => {
                let r2 = du * du + dv * dv;
                (0.09..=0.25).contains(&r2)
            }
            Shape::Bar => dv.abs() <= 0.25,
            Shape::Frame => du.abs() >= 0.3 || dv.abs() >= 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub color: [f64; 3],
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// The image is split into `grid_cells x grid_cells` slots, one object per slot.
    pub grid_cells: usize,
    pub categories: Vec<CategorySpec>,
    /// Inclusive range of objects drawn per image.
    pub objects_per_image: (usize, usize),
    /// Templates with `{0}`, `{1}`, ... category slots.
    pub caption_templates: Vec<String>,
    /// Std-dev of the Gaussian noise added to roi features.
    pub noise_sigma: f64,
    /// Object side as a fraction of the slot side, inclusive range.
    pub object_scale: (f64, f64),
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        let cat = |name: &str, color: [f64; 3], shape| CategorySpec { name: name.into(), color, shape };
        Self {
            image_size: 64,
            grid_cells: 2,
            categories: vec![
                cat("square", [0.9, 0.1, 0.1], Shape::Square),
                cat("circle", [0.1, 0.3, 0.95], Shape::Circle),
                cat("triangle", [0.1, 0.85, 0.2], Shape::Triangle),
                cat("diamond", [0.95, 0.85, 0.1], Shape::Diamond),
                cat("cross", [0.85, 0.1, 0.85], Shape::Cross),
                cat("ring", [0.1, 0.9, 0.9], Shape::Ring),
                cat("bar", [1.0, 0.55, 0.05], Shape::Bar),
                cat("frame", [0.95, 0.95, 0.95], Shape::Frame),
            ],
            objects_per_image: (2, 4),
            caption_templates: vec![
                "a {0} and a {1} .".into(),
                "there is a {0} next to a {1} .".into(),
                "a {0} , a {1} and a {2} .".into(),
                "there is a {0} , a {1} and a {2} .".into(),
                "a {0} , a {1} , a {2} and a {3} .".into(),
                "there is a {0} , a {1} , a {2} and a {3} .".into(),
            ],
            noise_sigma: 0.05,
            object_scale: (0.55, 0.9),
        }
    }
}

/// Number of distinct `{i}` slots in a template; slots must be `0..n` exactly.
pub fn template_slots(template: &str) -> Result<usize> {
    let mut seen = BTreeSet::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated slot in template {template:?}")))?;
        let inner = &rest[open + 1..open + close];
        let idx: usize =
            inner.parse().map_err(|_| Error::Config(format!("slot {{{inner}}} in template {template:?} is not an index")))?;
        seen.insert(idx);
        rest = &rest[open + close + 1..];
    }
    let n = seen.len();
    if seen.iter().copied().ne(0..n) {
        return Err(Error::Config(format!("template {template:?} slots are not contiguous from 0")));
    }
    Ok(n)
}

fn fill_template(template: &str, names: &[&str]) -> String {
    let mut out = template.to_string();
    for (i, n) in names.iter().enumerate() {
        out = out.replace(&format!("{{{i}}}"), n);
    }
    out
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.categories {
            let toks = tokenize_words(&c.name);
            if toks.len() != 1 || toks[0] != c.name.to_lowercase() {
                return Err(Error::Config(format!("category name {:?} is not a single lexicon token", c.name)));
            }
            if !names.insert(c.name.to_lowercase()) {
                return Err(Error::Config(format!("duplicate category {:?}", c.name)));
            }
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects_per_image range ({lo}, {hi}) is empty")));
        }
        if self.grid_cells == 0 || self.image_size / self.grid_cells < 4 {
            return Err(Error::Config("grid_cells leaves slots smaller than 4 pixels".into()));
        }
        let (s_lo, s_hi) = self.object_scale;
        if !(0.0 < s_lo && s_lo <= s_hi && s_hi <= 1.0) {
            return Err(Error::Config(format!("object_scale ({s_lo}, {s_hi}) outside (0, 1]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        for t in &self.caption_templates {
            template_slots(t)?;
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.to_lowercase()).collect()
    }

    pub fn roi_dim(&self) -> usize {
        self.categories.len() + 4
    }
}

struct SceneObject {
    slot: usize,
    category: usize,
    bbox: BBox,
}

/// Generates `count` synthetic pairs. Each image draws its own sub-stream of
/// the seeded generator, so output does not depend on thread count.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, count: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Generation("count must be at least 1".into()));
    }
    let slots = spec.grid_cells * spec.grid_cells;
    let (_, max_objects) = spec.objects_per_image;
    if max_objects > slots {
        return Err(Error::Generation(format!(
            "{max_objects} objects per image do not fit in {slots} non-overlapping slots"
        )));
    }
    if max_objects > spec.categories.len() {
        return Err(Error::Generation(format!(
            "{max_objects} objects per image need that many distinct categories, only {} defined",
            spec.categories.len()
        )));
    }
    let template_sizes: Vec<usize> = spec.caption_templates.iter().map(|t| template_slots(t)).collect::<Result<_>>()?;
    for k in spec.objects_per_image.0..=max_objects {
        if !template_sizes.iter().any(|&n| (1..=k).contains(&n)) {
            return Err(Error::Generation(format!("no caption template can describe {k} objects")));
        }
    }

    let generated: Vec<(ImageTextPair, DetectorAnnotation)> =
        (0..count).into_par_iter().map(|i| generate_one(spec, &template_sizes, seed, i)).collect();

    let meta = CorpusMeta { d_o: spec.roi_dim(), k_cat: spec.categories.len(), lexicon: spec.lexicon() };
    let mut pairs = Vec::with_capacity(count);
    let mut annotations = BTreeMap::new();
    for (pair, ann) in generated {
        annotations.insert(ann.annotation_id.clone(), ann);
        pairs.push(pair);
    }
    Ok(Corpus { meta, pairs, annotations })
}

fn generate_one(
    spec: &SyntheticSceneSpec,
    template_sizes: &[usize],
    seed: u64,
    index: usize,
) -> (ImageTextPair, DetectorAnnotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let size = spec.image_size;
    let slot_side = size / spec.grid_cells;
    let n_slots = spec.grid_cells * spec.grid_cells;
    let k = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);

    let mut slot_ids: Vec<usize> = (0..n_slots).collect();
    slot_ids.shuffle(&mut rng);
    let mut cat_ids: Vec<usize> = (0..spec.categories.len()).collect();
    cat_ids.shuffle(&mut rng);

    let mut objects: Vec<SceneObject> = slot_ids[..k]
        .iter()
        .zip(&cat_ids[..k])
        .map(|(&slot, &category)| {
            let lo = ((spec.object_scale.0 * slot_side as f64).round() as usize).max(2);
            let hi = ((spec.object_scale.1 * slot_side as f64).round() as usize).clamp(lo, slot_side);
            let side = rng.random_range(lo..=hi);
            let ox = rng.random_range(0..=slot_side - side);
            let oy = rng.random_range(0..=slot_side - side);
            let (sx, sy) = ((slot % spec.grid_cells) * slot_side, (slot / spec.grid_cells) * slot_side);
            let x1 = (sx + ox) as f64;
            let y1 = (sy + oy) as f64;
            SceneObject { slot, category, bbox: BBox::new(x1, y1, x1 + side as f64, y1 + side as f64) }
        })
        .collect();
    // Reading order: captions list objects by slot, row-major.
    objects.sort_by_key(|o| o.slot);

    let mut image = Image::new(size, size, 3);
    for obj in &objects {
        let cat = &spec.categories[obj.category];
        let b = obj.bbox;
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                let u = (x as f64 + 0.5 - b.x1) / (b.x2 - b.x1);
                let v = (y as f64 + 0.5 - b.y1) / (b.y2 - b.y1);
                if cat.shape.covers(u, v) {
                    for c in 0..3 {
                        image.set(y, x, c, cat.color[c]);
                    }
                }
            }
        }
    }

    let exact: Vec<usize> = (0..template_sizes.len()).filter(|&t| template_sizes[t] == k).collect();
    let candidates: Vec<usize> = if exact.is_empty() {
        (0..template_sizes.len()).filter(|&t| (1..k).contains(&template_sizes[t])).collect()
    } else {
        exact
    };
    let t = *candidates.choose(&mut rng).expect("validated template coverage");
    let m = template_sizes[t];
    let mut mentioned: Vec<usize> = rand::seq::index::sample(&mut rng, k, m).into_vec();
    mentioned.sort_unstable();
    let names: Vec<&str> = mentioned.iter().map(|&o| spec.categories[objects[o].category].name.as_str()).collect();
    let caption = fill_template(&spec.caption_templates[t], &names);

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let k_cat = spec.categories.len();
    let proposals = objects
        .iter()
        .map(|o| {
            let mut f = vec![0.0; k_cat + 4];
            f[o.category] = 1.0;
            f[k_cat] = o.bbox.x1 / size as f64;
            f[k_cat + 1] = o.bbox.y1 / size as f64;
            f[k_cat + 2] = o.bbox.x2 / size as f64;
            f[k_cat + 3] = o.bbox.y2 / size as f64;
            if spec.noise_sigma > 0.0 {
                for v in &mut f {
                    *v += noise.sample(&mut rng);
                }
            }
            ObjectProposal {
                bbox: o.bbox,
                category_id: o.category,
                category_name: spec.categories[o.category].name.to_lowercase(),
                roi_feature: f,
            }
        })
        .collect();

    let image_id = format!("syn{seed}-{index:06}");
    let annotation_id = format!("ann{seed}-{index:06}");
    (
        ImageTextPair { image_id, pixels: Arc::new(image), caption, annotation_id: annotation_id.clone() },
        DetectorAnnotation { annotation_id, proposals },
    )
}

/// A noun phrase located in a caption's token sequence: tokens `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Left-to-right greedy longest match of lexicon entries over the caption's
/// tokens, case-insensitive. Spans never overlap.
pub fn extract_noun_phrases(caption: &str, lexicon: &[String]) -> Vec<PhraseSpan> {
    extract_from_tokens(&tokenize_words(caption), lexicon)
}

pub fn extract_from_tokens(tokens: &[String], lexicon: &[String]) -> Vec<PhraseSpan> {
    let mut entries: Vec<Vec<String>> =
        lexicon.iter().map(|e| tokenize_words(e)).filter(|t| !t.is_empty()).collect();
    entries.sort_by_key(|e| std::cmp::Reverse(e.len()));
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = entries.iter().find(|e| i + e.len() <= tokens.len() && tokens[i..i + e.len()] == e[..]);
        match hit {
            Some(e) => {
                spans.push(PhraseSpan { start: i, end: i + e.len(), text: e.join(" ") });
                i += e.len();
            }
            None => i += 1,
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn phrases_in_example_caption() {
        let spans = extract_noun_phrases("a red circle near a blue square", &lex(&["circle", "square"]));
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end, spans[0].text.as_str()), (2, 3, "circle"));
        assert_eq!((spans[1].start, spans[1].end, spans[1].text.as_str()), (6, 7, "square"));
    }

    #[test]
    fn phrases_absent_and_repeated() {
        assert!(extract_noun_phrases("nothing to see here", &lex(&["circle"])).is_empty());
        let spans = extract_noun_phrases("Circle beside a CIRCLE.", &lex(&["circle"]));
        assert_eq!(spans.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn longest_entry_wins() {
        let spans = extract_noun_phrases("a traffic light and a light", &lex(&["light", "traffic light"]));
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (1, 3));
        assert_eq!((spans[1].start, spans[1].end), (5, 6));
    }

    #[test]
    fn single_object_scene_is_forced() {
        let spec = SyntheticSceneSpec {
            categories: vec![CategorySpec { name: "circle".into(), color: [1.0, 0.0, 0.0], shape: Shape::Circle }],
            objects_per_image: (1, 1),
            caption_templates: vec!["a {0} .".into()],
            ..Default::default()
        };
        let c = generate_synthetic(&spec, 1, 3).unwrap();
        let pair = &c.pairs[0];
        assert!(pair.caption.contains("circle"));
        let ann = c.annotation(pair);
        assert_eq!(ann.proposals.len(), 1);
        let b = ann.proposals[0].bbox;
        // drawn pixels lie inside the box and touch it
        let img = &pair.pixels;
        let mut xs = (usize::MAX, 0);
        let mut ys = (usize::MAX, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.get(y, x, 0) > 0.0 {
                    xs = (xs.0.min(x), xs.1.max(x));
                    ys = (ys.0.min(y), ys.1.max(y));
                }
            }
        }
        assert!(xs.0 as f64 >= b.x1 && (xs.1 + 1) as f64 <= b.x2);
        assert!(ys.0 as f64 >= b.y1 && (ys.1 + 1) as f64 <= b.y2);
        c.validate().unwrap();
    }

    #[test]
    fn too_many_objects_is_a_generation_error() {
        let spec = SyntheticSceneSpec { objects_per_image: (2, 5), ..Default::default() };
        assert!(matches!(generate_synthetic(&spec, 1, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn template_slot_parsing() {
        assert_eq!(template_slots("a {0} and a {1}").unwrap(), 2);
        assert!(template_slots("a {1}").is_err());
        assert!(template_slots("a {x}").is_err());
        assert_eq!(template_slots("no slots").unwrap(), 0);
    }

    #[test]
    fn blob_rejects_bad_sizes() {
        assert!(Image::from_blob(&[0, 0, 0]).is_err());
        let mut img = Image::new(16, 16, 3);
        img.set(0, 0, 2, 0.5);
        let back = Image::from_blob(&img.to_blob()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn captions_mention_present_categories_only() {
        let spec = SyntheticSceneSpec::default();
        let c = generate_synthetic(&spec, 50, 11).unwrap();
        let lexicon = spec.lexicon();
        for pair in &c.pairs {
            let ann = c.annotation(pair);
            let phrases = extract_noun_phrases(&pair.caption, &lexicon);
            assert!(!phrases.is_empty());
            for p in phrases {
                let hits = ann.proposals.iter().filter(|o| o.category_name == p.text).count();
                assert_eq!(hits, 1, "{} in {:?}", p.text, pair.caption);
            }
        }
    }
}
