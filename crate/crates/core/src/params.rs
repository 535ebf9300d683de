//! Named parameter storage shared by every trainable component.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Convolutional backbone, updated with momentum SGD.
    Backbone,
    /// Transformer, embeddings and heads, updated with AdamW.
    Transformer,
}

impl Group {
    pub fn code(self) -> u8 {
        match self {
            Group::Backbone => 1,
            Group::Transformer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Group::Backbone),
            2 => Some(Group::Transformer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// `None` only for parameters registered outside the model builders.
    pub group: Option<Group>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: Option<Group>, decay: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), value, group, decay });
        id
    }

    /// Gaussian-initialized weight matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        group: Group,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Mat::from_vec(rows, cols, data), Some(group), decay)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64, group: Group) -> ParamId {
        self.add(name, Mat::filled(rows, cols, value), Some(group), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients; `None` means the parameter did not take part in the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Mat, scale: f64) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_scaled(grad, scale),
            slot @ None => {
                let mut g = grad.clone();
                if scale != 1.0 {
                    g.scale_in_place(scale);
                }
                *slot = Some(g);
            }
        }
    }

    /// Adds `other * scale` into `self`, preserving the participation pattern.
    pub fn merge(&mut self, other: &ParamGrads, scale: f64) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, scale);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g.sq_norm().sqrt())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Mat>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}
