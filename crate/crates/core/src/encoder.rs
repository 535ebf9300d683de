//! Visual and linguistic embeddings and assembly of the joint input sequence
//! `{V, [sep], W, [cls]}`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Mat;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const SEP: usize = 3;
pub const CLS: usize = 4;
pub const SPECIALS: [&str; 5] = ["[pad]", "[unk]", "[mask]", "[sep]", "[cls]"];

/// Total downsampling of [`visual_embed`]: three stride-2 stages and a 2x2 pool.
pub const VISUAL_STRIDE: usize = 16;

/// Lowercases and splits on whitespace; every punctuation character is its own token.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && ch.is_ascii() && !ch.is_whitespace()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Validation("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One `token id` pair per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{t} {i}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let malformed =
                || Error::Malformed { file: path.display().to_string(), line: n + 1, msg: format!("{line:?}") };
            let (tok, id) = line.rsplit_once(' ').ok_or_else(malformed)?;
            let id: usize = id.parse().map_err(|_| malformed())?;
            entries.insert(id, tok.to_string());
        }
        if entries.keys().copied().ne(0..entries.len()) {
            return Err(Error::Validation("vocabulary ids are not dense".into()));
        }
        Self::from_tokens(entries.into_values().collect())
    }
}

/// Frequency-cutoff vocabulary; ties broken alphabetically, specials first.
pub fn build_vocab<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for t in tokenize_words(c) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str())).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)).collect();
    Vocabulary::from_tokens(tokens).expect("specials are distinct")
}

pub fn tokenize(caption: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let words = tokenize_words(caption);
    if words.is_empty() {
        return Err(Error::Validation("cannot tokenize an empty caption".into()));
    }
    Ok(words.iter().map(|w| vocab.id(w)).collect())
}

/// 2-D sine positions: the first `d/2` channels encode the row index and the
/// last `d/2` the column index, each as interleaved `(sin, cos)` pairs over
/// frequencies `10000^(-2k/(d/2))`. Rows are cells in row-major order.
pub fn sine_position_2d(grid_shape: (usize, usize), d: usize) -> Result<Mat> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Shape(format!("2-D sine positions need d divisible by 4, got {d}")));
    }
    let (h, w) = grid_shape;
    let half = d / 2;
    let mut out = Mat::zeros(h * w, d);
    for i in 0..h {
        for j in 0..w {
            let row = out.row_mut(i * w + j);
            for k in 0..half / 2 {
                let freq = 10000f64.powf(-(2.0 * k as f64) / half as f64);
                row[2 * k] = (i as f64 * freq).sin();
                row[2 * k + 1] = (i as f64 * freq).cos();
                row[half + 2 * k] = (j as f64 * freq).sin();
                row[half + 2 * k + 1] = (j as f64 * freq).cos();
            }
        }
    }
    Ok(out)
}

/// Convolutional backbone and all embedding tables.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub conv: [(ParamId, ParamId); 3],
    pub proj: (ParamId, ParamId),
    pub word_embeddings: ParamId,
    pub word_proj: Option<ParamId>,
    pub text_positions: ParamId,
    pub sep_content: ParamId,
    pub cls_content: ParamId,
    pub sep_position: ParamId,
    pub cls_position: ParamId,
    pub segments: Option<ParamId>,
    pub in_channels: usize,
    pub d: usize,
}

pub struct EncoderDims {
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub d: usize,
    pub d_word: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub use_segments: bool,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dims: &EncoderDims, rng: &mut R) -> Self {
        let mut c_in = dims.in_channels;
        let conv = std::array::from_fn(|s| {
            let c_out = dims.conv_channels[s];
            let fan_in = c_in * 9;
            let w = store.add_normal(
                format!("backbone.conv{s}.weight"),
                c_out,
                fan_in,
                (2.0 / fan_in as f64).sqrt(),
                Group::Backbone,
                false,
                rng,
            );
            let b = store.add_const(format!("backbone.conv{s}.bias"), c_out, 1, 0.0, Group::Backbone);
            c_in = c_out;
            (w, b)
        });
        let c3 = dims.conv_channels[2];
        let proj = (
            store.add_normal("backbone.proj.weight", dims.d, c3, (1.0 / c3 as f64).sqrt(), Group::Backbone, false, rng),
            store.add_const("backbone.proj.bias", dims.d, 1, 0.0, Group::Backbone),
        );
        let t = Group::Transformer;
        let word_embeddings = store.add_normal("text.word_embeddings", dims.vocab_size, dims.d_word, 1.0, t, false, rng);
        let word_proj = (dims.d_word != dims.d).then(|| {
            store.add_normal("text.proj", dims.d_word, dims.d, (1.0 / dims.d_word as f64).sqrt(), t, true, rng)
        });
        let text_positions = store.add_normal("text.positions", dims.max_text_len, dims.d, 0.5, t, false, rng);
        let sep_content = store.add_normal("special.sep", 1, dims.d, 1.0, t, false, rng);
        let cls_content = store.add_normal("special.cls", 1, dims.d, 1.0, t, false, rng);
        let sep_position = store.add_normal("special.sep_position", 1, dims.d, 0.5, t, false, rng);
        let cls_position = store.add_normal("special.cls_position", 1, dims.d, 0.5, t, false, rng);
        let segments = dims.use_segments.then(|| store.add_normal("segments", 2, dims.d, 0.5, t, false, rng));
        Self {
            conv,
            proj,
            word_embeddings,
            word_proj,
            text_positions,
            sep_content,
            cls_content,
            sep_position,
            cls_position,
            segments,
            in_channels: dims.in_channels,
            d: dims.d,
        }
    }

    pub fn max_text_len(&self, store: &ParamStore) -> usize {
        store.value(self.text_positions).rows()
    }
}

/// Projected grid features plus their (not yet added) sine positions.
pub struct VisualGrid {
    /// `L x d` content features.
    pub features: Var,
    pub grid_shape: (usize, usize),
    /// `L x d` sine positions.
    pub positions: Mat,
}

impl VisualGrid {
    pub fn len(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn grid_shape_for(height: usize, width: usize) -> Result<(usize, usize)> {
    if !height.is_multiple_of(VISUAL_STRIDE) || !width.is_multiple_of(VISUAL_STRIDE) || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "image {height}x{width} is not divisible by the backbone stride {VISUAL_STRIDE}"
        )));
    }
    Ok((height / VISUAL_STRIDE, width / VISUAL_STRIDE))
}

/// Image as a `(C, H*W)` matrix.
pub fn image_to_chw(image: &Image) -> Mat {
    let mut m = Mat::zeros(image.channels, image.height * image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..image.channels {
                m.set(c, y * image.width + x, image.get(y, x, c));
            }
        }
    }
    m
}

/// Three stride-2 3x3 conv+ReLU stages, a 1x1 projection to `d`, then 2x2
/// stride-2 max pooling: an `(H/16) x (W/16)` grid of `d`-vectors.
pub fn visual_embed(g: &mut Graph<'_>, image: &Image, params: &EncoderParams) -> Result<VisualGrid> {
    let input = g.constant(image_to_chw(image));
    visual_embed_var(g, input, image.height, image.width, params)
}

/// [`visual_embed`] over an already-placed `(C, H*W)` input node.
pub fn visual_embed_var(
    g: &mut Graph<'_>,
    input: Var,
    height: usize,
    width: usize,
    params: &EncoderParams,
) -> Result<VisualGrid> {
    let grid_shape = grid_shape_for(height, width)?;
    if g.value(input).rows() != params.in_channels {
        return Err(Error::Shape(format!(
            "image has {} channels, backbone expects {}",
            g.value(input).rows(),
            params.in_channels
        )));
    }
    let (mut x, mut h, mut w, mut c) = (input, height, width, params.in_channels);
    for &(wid, bid) in &params.conv {
        let geom = ConvGeometry { channels: c, height: h, width: w, kernel: 3, stride: 2, pad: 1 };
        let cols = g.im2col(x, geom);
        let wv = g.param(wid);
        let y = g.matmul(wv, cols);
        let b = g.param(bid);
        let y = g.add_col(y, b);
        x = g.relu(y);
        c = g.value(wv).rows();
        h = geom.out_height();
        w = geom.out_width();
    }
    let pw = g.param(params.proj.0);
    let y = g.matmul(pw, x);
    let pb = g.param(params.proj.1);
    let y = g.add_col(y, pb);
    let pooled = g.max_pool2(y, h, w);
    let features = g.transpose(pooled);
    let positions = sine_position_2d(grid_shape, params.d)?;
    Ok(VisualGrid { features, grid_shape, positions })
}

/// Word ids with their content embeddings (projected to `d`) and index positions.
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub embeddings: Var,
    pub positions: Var,
}

pub fn text_embed(g: &mut Graph<'_>, ids: &[usize], params: &EncoderParams) -> Result<TokenSequence> {
    if ids.is_empty() {
        return Err(Error::Validation("token sequence must not be empty".into()));
    }
    let max_len = params.max_text_len(g.store());
    if ids.len() > max_len {
        return Err(Error::Shape(format!("{} tokens exceed the {max_len} text positions", ids.len())));
    }
    let table = g.param(params.word_embeddings);
    if let Some(&bad) = ids.iter().find(|&&i| i >= g.value(table).rows()) {
        return Err(Error::Index(format!("token id {bad} outside the vocabulary")));
    }
    let mut emb = g.gather(table, ids);
    if let Some(p) = params.word_proj {
        let pv = g.param(p);
        emb = g.matmul(emb, pv);
    }
    let pos_table = g.param(params.text_positions);
    let positions = g.slice_rows(pos_table, 0, ids.len());
    Ok(TokenSequence { ids: ids.to_vec(), embeddings: emb, positions })
}

/// Offsets of the four spans of `{V, [sep], W, [cls]}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual_len: usize,
    pub text_len: usize,
}

impl SequenceLayout {
    pub fn visual(&self) -> Range<usize> {
        0..self.visual_len
    }

    pub fn sep(&self) -> usize {
        self.visual_len
    }

    pub fn words(&self) -> Range<usize> {
        self.visual_len + 1..self.visual_len + 1 + self.text_len
    }

    pub fn cls(&self) -> usize {
        self.visual_len + 1 + self.text_len
    }

    pub fn len(&self) -> usize {
        self.visual_len + self.text_len + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub struct JointSequence {
    /// `(L + T + 2) x d` summed embeddings.
    pub tokens: Var,
    /// 0 for visual cells, 1 for `[sep]`, words and `[cls]`.
    pub segments: Vec<u8>,
    pub layout: SequenceLayout,
    pub grid_shape: (usize, usize),
}

/// Concatenates `V, [sep], W, [cls]`; every row is content + position (+ segment).
/// Visual rows flagged in `masked_cells` take `mask_content` in place of their
/// features while keeping their positions.
pub fn assemble_sequence(
    g: &mut Graph<'_>,
    visual: &VisualGrid,
    text: &TokenSequence,
    params: &EncoderParams,
    masked: Option<(&[bool], Var)>,
) -> Result<JointSequence> {
    let dv = g.value(visual.features).cols();
    let dt = g.value(text.embeddings).cols();
    if dv != params.d || dt != params.d || visual.positions.cols() != params.d {
        return Err(Error::Shape(format!("embedding widths differ: visual {dv}, text {dt}, model {}", params.d)));
    }
    let l = visual.len();
    let t = text.ids.len();

    let mut content = visual.features;
    if let Some((mask, vec)) = masked {
        if mask.len() != l {
            return Err(Error::Shape(format!("cell mask of length {} for {l} cells", mask.len())));
        }
        content = g.replace_rows(content, vec, mask);
    }
    let vpos = g.constant(visual.positions.clone());
    let mut v = g.add(content, vpos);

    let sep_c = g.param(params.sep_content);
    let sep_p = g.param(params.sep_position);
    let mut sep = g.add(sep_c, sep_p);
    let mut w = g.add(text.embeddings, text.positions);
    let cls_c = g.param(params.cls_content);
    let cls_p = g.param(params.cls_position);
    let mut cls = g.add(cls_c, cls_p);

    if let Some(seg) = params.segments {
        let seg = g.param(seg);
        let s0 = g.slice_rows(seg, 0, 1);
        let s1 = g.slice_rows(seg, 1, 2);
        v = g.add_row(v, s0);
        sep = g.add(sep, s1);
        w = g.add_row(w, s1);
        cls = g.add(cls, s1);
    }
    let tokens = g.concat_rows(&[v, sep, w, cls]);
    let layout = SequenceLayout { visual_len: l, text_len: t };
    let mut segments = vec![0u8; l];
    segments.resize(layout.len(), 1);
    Ok(JointSequence { tokens, segments, layout, grid_shape: visual.grid_shape })
}
