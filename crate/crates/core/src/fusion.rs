//! The joint multimodal Transformer, span pooling and attention-map export.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{JointSequence, SequenceLayout};
use crate::error::{Error, Result};
use crate::knowledge::BinaryMask;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Mat;

/// Affine map `x W + b` over rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            d_in,
            d_out,
            (1.0 / d_in as f64).sqrt(),
            Group::Transformer,
            true,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), 1, d_out, 0.0, Group::Transformer);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), 1, d, 1.0, Group::Transformer),
            beta: store.add_const(format!("{name}.beta"), 1, d, 0.0, Group::Transformer),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln_attn: LayerNormParams,
    /// Fused query/key/value projection, `d x 3d`.
    pub qkv: Linear,
    pub out: Linear,
    pub ln_ff: LayerNormParams,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub n_heads: usize,
    pub d: usize,
    pub d_ff: usize,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_layers: usize,
        n_heads: usize,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d = {d} is not divisible by {n_heads} heads")));
        }
        let blocks = (0..n_layers)
            .map(|l| BlockParams {
                ln_attn: LayerNormParams::init(store, &format!("fusion.{l}.ln_attn"), d),
                qkv: Linear::init(store, &format!("fusion.{l}.qkv"), d, 3 * d, rng),
                out: Linear::init(store, &format!("fusion.{l}.attn_out"), d, d, rng),
                ln_ff: LayerNormParams::init(store, &format!("fusion.{l}.ln_ff"), d),
                ff_in: Linear::init(store, &format!("fusion.{l}.ff_in"), d, d_ff, rng),
                ff_out: Linear::init(store, &format!("fusion.{l}.ff_out"), d_ff, d, rng),
            })
            .collect();
        let ln_final = LayerNormParams::init(store, "fusion.ln_final", d);
        Ok(Self { blocks, ln_final, n_heads, d, d_ff })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Last-layer states split into the four spans of the joint sequence.
pub struct FinalStates {
    /// All rows, `(L + T + 2) x d`.
    pub all: Var,
    pub h_v: Var,
    pub h_sep: Var,
    pub h_w: Var,
    pub h_cls: Var,
    pub layout: SequenceLayout,
    pub grid_shape: (usize, usize),
    /// `attentions[layer][head]`: row-stochastic `(L+T+2) x (L+T+2)` maps.
    pub attentions: Option<Vec<Vec<Mat>>>,
}

fn check_finite(g: &Graph<'_>, v: Var, layer: usize) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Pre-norm blocks: `x + Attn(LN(x))`, then `x + FFN(LN(x))`; a final LayerNorm.
pub fn transformer_forward(
    g: &mut Graph<'_>,
    seq: &JointSequence,
    params: &FusionParams,
    retain_attn: bool,
) -> Result<FinalStates> {
    let n = seq.layout.len();
    if n < 3 {
        return Err(Error::Shape(format!("sequence of length {n} is shorter than 3")));
    }
    let d = params.d;
    if g.value(seq.tokens).cols() != d {
        return Err(Error::Shape(format!("sequence width {} != model width {d}", g.value(seq.tokens).cols())));
    }
    let dh = d / params.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attentions = retain_attn.then(Vec::new);
    let mut x = seq.tokens;
    check_finite(g, x, 0)?;
    for (l, block) in params.blocks.iter().enumerate() {
        let h = block.ln_attn.forward(g, x);
        let qkv = block.qkv.forward(g, h);
        let mut heads = Vec::with_capacity(params.n_heads);
        let mut maps = Vec::new();
        for head in 0..params.n_heads {
            let q = g.slice_cols(qkv, head * dh, (head + 1) * dh);
            let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
            let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
            let scores = g.matmul_t(q, false, k, true);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            if retain_attn {
                maps.push(g.value(att).clone());
            }
            heads.push(g.matmul(att, v));
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn_out = block.out.forward(g, joined);
        x = g.add(x, attn_out);
        let h = block.ln_ff.forward(g, x);
        let f = block.ff_in.forward(g, h);
        let f = g.gelu(f);
        let f = block.ff_out.forward(g, f);
        x = g.add(x, f);
        check_finite(g, x, l + 1)?;
        if let Some(a) = attentions.as_mut() {
            a.push(maps);
        }
    }
    let all = params.ln_final.forward(g, x);
    check_finite(g, all, params.n_layers())?;
    let layout = seq.layout;
    let h_v = g.slice_rows(all, 0, layout.visual_len);
    let h_sep = g.slice_rows(all, layout.sep(), layout.sep() + 1);
    let w = layout.words();
    let h_w = g.slice_rows(all, w.start, w.end);
    let h_cls = g.slice_rows(all, layout.cls(), layout.cls() + 1);
    Ok(FinalStates { all, h_v, h_sep, h_w, h_cls, layout, grid_shape: seq.grid_shape, attentions })
}

/// Mean of the rows of `h_v` where the mask is set.
pub fn pool_region(g: &mut Graph<'_>, h_v: Var, mask: &BinaryMask) -> Result<Var> {
    let rows = g.value(h_v).rows();
    if mask.len() != rows {
        return Err(Error::Shape(format!("mask over {} cells applied to {rows} visual states", mask.len())));
    }
    if mask.active() == 0 {
        return Err(Error::Validation("cannot pool over an empty mask".into()));
    }
    Ok(g.weighted_row_sum(h_v, &mask.mean_weights()))
}

/// Mean of rows `[start, end)` of `h_w`.
pub fn pool_phrase(g: &mut Graph<'_>, h_w: Var, span: (usize, usize)) -> Result<Var> {
    let rows = g.value(h_w).rows();
    let (start, end) = span;
    if start >= end || end > rows {
        return Err(Error::Index(format!("phrase span [{start}, {end}) invalid for {rows} tokens")));
    }
    let mut w = vec![0.0; rows];
    let share = 1.0 / (end - start) as f64;
    w[start..end].iter_mut().for_each(|x| *x = share);
    Ok(g.weighted_row_sum(h_w, &w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelect {
    Head(usize),
    Mean,
}

/// Attention of word `word_index` over the visual cells, as an `h x w` grid,
/// before any rescaling.
pub fn attention_row(states: &FinalStates, word_index: usize, layer: usize, head: HeadSelect) -> Result<Mat> {
    let maps = states.attentions.as_ref().ok_or(Error::AttentionNotRetained)?;
    let layer_maps =
        maps.get(layer).ok_or_else(|| Error::Index(format!("layer {layer} of {}", maps.len())))?;
    if word_index >= states.layout.text_len {
        return Err(Error::Index(format!("word {word_index} of {}", states.layout.text_len)));
    }
    let row = states.layout.words().start + word_index;
    let l = states.layout.visual_len;
    let selected: Vec<&Mat> = match head {
        HeadSelect::Head(h) => {
            vec![layer_maps.get(h).ok_or_else(|| Error::Index(format!("head {h} of {}", layer_maps.len())))?]
        }
        HeadSelect::Mean => layer_maps.iter().collect(),
    };
    let mut out = vec![0.0; l];
    for m in &selected {
        for (o, v) in out.iter_mut().zip(&m.row(row)[..l]) {
            *o += v / selected.len() as f64;
        }
    }
    let (h, w) = states.grid_shape;
    Ok(Mat::from_vec(h, w, out))
}

/// [`attention_row`] rescaled to `[0, 1]` by dividing by its maximum.
pub fn attention_map(states: &FinalStates, word_index: usize, layer: usize, head: HeadSelect) -> Result<Mat> {
    let raw = attention_row(states, word_index, layer, head)?;
    Ok(rescale_unit(&raw))
}

pub fn rescale_unit(m: &Mat) -> Mat {
    let max = m.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.map(|x| x / max)
    } else {
        m.clone()
    }
}

pub fn write_csv(m: &Mat, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary 8-bit grayscale PGM (P5) of a map with values in `[0, 1]`.
pub fn write_pgm(m: &Mat, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    bytes.extend(m.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
