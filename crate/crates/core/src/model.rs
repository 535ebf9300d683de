//! The full pretraining model: encoder, fusion stack and task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::corpus::{Corpus, Image};
use crate::encoder::{
    assemble_sequence, grid_shape_for, text_embed, visual_embed, EncoderDims, EncoderParams, VisualGrid,
};
use crate::error::{Error, Result};
use crate::fusion::{transformer_forward, FinalStates, FusionParams, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Mat;

/// Data-dependent sizes fixed when a model is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub k_cat: usize,
    pub d_o: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
}

impl ModelDims {
    pub fn for_corpus(corpus: &Corpus, vocab_size: usize) -> Result<Self> {
        let first = corpus.pairs.first().ok_or_else(|| Error::Validation("corpus is empty".into()))?;
        let img = &first.pixels;
        if let Some(p) = corpus.pairs.iter().find(|p| {
            (p.pixels.height, p.pixels.width, p.pixels.channels) != (img.height, img.width, img.channels)
        }) {
            return Err(Error::Shape(format!("image {} differs in size from {}", p.image_id, first.image_id)));
        }
        grid_shape_for(img.height, img.width)?;
        Ok(Self {
            vocab_size,
            k_cat: corpus.meta.k_cat,
            d_o: corpus.meta.d_o,
            image_height: img.height,
            image_width: img.width,
            channels: img.channels,
        })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.image_height / crate::encoder::VISUAL_STRIDE, self.image_width / crate::encoder::VISUAL_STRIDE)
    }
}

/// Two-layer feed-forward head `Linear -> GELU -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub mrc: MlpHead,
    pub mrfr: MlpHead,
    pub mlm: Linear,
    pub itm: Linear,
    /// Content vector that replaces masked visual cells.
    pub visual_mask: ParamId,
    /// Regresses a masked cell's own backbone feature.
    pub cell_regression: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub heads: HeadParams,
}

/// Forward-pass products needed by the losses.
pub struct Encoded {
    pub states: FinalStates,
    pub visual: VisualGrid,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: &TrainConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        grid_shape_for(dims.image_height, dims.image_width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let encoder = EncoderParams::init(
            &mut store,
            &EncoderDims {
                in_channels: dims.channels,
                conv_channels: config.conv_channels,
                d,
                d_word: config.d_word,
                vocab_size: dims.vocab_size,
                max_text_len: config.max_text_len,
                use_segments: config.use_segment_embeddings,
            },
            &mut rng,
        );
        let fusion = FusionParams::init(&mut store, config.n_layers, config.n_heads, d, config.d_ff, &mut rng)?;
        let heads = HeadParams {
            mrc: MlpHead {
                hidden: Linear::init(&mut store, "heads.mrc.hidden", d, d, &mut rng),
                out: Linear::init(&mut store, "heads.mrc.out", d, dims.k_cat, &mut rng),
            },
            mrfr: MlpHead {
                hidden: Linear::init(&mut store, "heads.mrfr.hidden", d, d, &mut rng),
                out: Linear::init(&mut store, "heads.mrfr.out", d, dims.d_o, &mut rng),
            },
            mlm: Linear::init(&mut store, "heads.mlm", d, dims.vocab_size, &mut rng),
            itm: Linear::init(&mut store, "heads.itm", d, 1, &mut rng),
            visual_mask: store.add_normal("heads.visual_mask", 1, d, 1.0, Group::Transformer, false, &mut rng),
            cell_regression: Linear::init(&mut store, "heads.cell_regression", d, d, &mut rng),
        };
        Ok(Self { config: config.clone(), dims, store, encoder, fusion, heads })
    }

    /// Replaces every parameter value with those of `other`, which must have
    /// identical names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match the model's {}",
                other.len(),
                self.store.len()
            )));
        }
        for ((_, mine), (_, theirs)) in self.store.iter().zip(other.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.store = other.clone();
        Ok(())
    }

    /// Backbone output for one image as a plain matrix (`L x d`), e.g. for caching.
    pub fn visual_features(&self, image: &Image) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let grid = visual_embed(&mut g, image, &self.encoder)?;
        Ok(g.value(grid.features).clone())
    }

    /// Full forward pass. `masked_cells` replaces the content of the flagged
    /// visual cells by the learned mask vector.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        image: &Image,
        ids: &[usize],
        masked_cells: Option<&[bool]>,
        retain_attn: bool,
    ) -> Result<Encoded> {
        let visual = visual_embed(g, image, &self.encoder)?;
        self.encode_visual(g, visual, ids, masked_cells, retain_attn)
    }

    /// Forward pass from precomputed backbone features (`L x d`).
    pub fn encode_cached(
        &self,
        g: &mut Graph<'_>,
        features: &Mat,
        ids: &[usize],
        masked_cells: Option<&[bool]>,
        retain_attn: bool,
    ) -> Result<Encoded> {
        let grid_shape = self.dims.grid_shape();
        if features.rows() != grid_shape.0 * grid_shape.1 {
            return Err(Error::Shape(format!("{} cached cells for a {grid_shape:?} grid", features.rows())));
        }
        let visual = VisualGrid {
            features: g.constant(features.clone()),
            grid_shape,
            positions: crate::encoder::sine_position_2d(grid_shape, self.config.d_model)?,
        };
        self.encode_visual(g, visual, ids, masked_cells, retain_attn)
    }

    fn encode_visual(
        &self,
        g: &mut Graph<'_>,
        visual: VisualGrid,
        ids: &[usize],
        masked_cells: Option<&[bool]>,
        retain_attn: bool,
    ) -> Result<Encoded> {
        let text = text_embed(g, ids, &self.encoder)?;
        let masked = masked_cells.map(|m| (m, g.param(self.heads.visual_mask)));
        let seq = assemble_sequence(g, &visual, &text, &self.encoder, masked)?;
        let states = transformer_forward(g, &seq, &self.fusion, retain_attn)?;
        Ok(Encoded { states, visual })
    }

    /// ITM logit of `h_cls`.
    pub fn itm_logit(&self, g: &mut Graph<'_>, states: &FinalStates) -> Var {
        self.heads.itm.forward(g, states.h_cls)
    }
}
