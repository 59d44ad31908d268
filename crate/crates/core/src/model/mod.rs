//! Desk-scale decoder-only transformer.
//!
//! Each block is pre-norm with RMS normalisation, has four
//! attention projections with rotary position mixing on queries and keys,
//! and a gated (SwiGLU) MLP. Every projection matrix is addressable as a
//! [`ComponentId`] and carries an optional binary mask kept apart from the
//! raw weights; the forward pass always uses `raw ⊙ mask`.

mod checkpoint;
pub(crate) mod forward;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{ActivationTrace, DecodeState, ForwardCache, LayerCache};

pub const RMS_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    AttnQuery,
    AttnKey,
    AttnValue,
    AttnDense,
    MlpUp,
    MlpGate,
    MlpDown,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::AttnQuery,
        ComponentKind::AttnKey,
        ComponentKind::AttnValue,
        ComponentKind::AttnDense,
        ComponentKind::MlpUp,
        ComponentKind::MlpGate,
        ComponentKind::MlpDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ComponentKind::AttnQuery
                | ComponentKind::AttnKey
                | ComponentKind::AttnValue
                | ComponentKind::AttnDense
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::AttnQuery => "attn_query",
            ComponentKind::AttnKey => "attn_key",
            ComponentKind::AttnValue => "attn_value",
            ComponentKind::AttnDense => "attn_dense",
            ComponentKind::MlpUp => "mlp_up",
            ComponentKind::MlpGate => "mlp_gate",
            ComponentKind::MlpDown => "mlp_down",
        }
    }

    /// `(rows, cols)` of this kind's weight for a given config. Weights map
    /// row vectors: `out = x · W`.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            ComponentKind::AttnQuery
            | ComponentKind::AttnKey
            | ComponentKind::AttnValue
            | ComponentKind::AttnDense => (d, d),
            ComponentKind::MlpUp | ComponentKind::MlpGate => (d, cfg.d_ff),
            ComponentKind::MlpDown => (cfg.d_ff, d),
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown component kind '{s}'")))
    }
}

/// One weight matrix of one layer. Serialized as `"layer.kind"`, e.g.
/// `"3.mlp_up"`; the same key names plans, reports and search logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn new(layer: usize, kind: ComponentKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.kind)
    }
}

impl FromStr for ComponentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (layer, kind) = s
            .split_once('.')
            .ok_or_else(|| Error::Argument(format!("component key '{s}' is not 'layer.kind'")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Argument(format!("bad layer index in '{s}'")))?;
        Ok(Self::new(layer, kind.parse()?))
    }
}

impl Serialize for ComponentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 172,
            max_seq: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.vocab_size > 0
                && self.d_model > 0
                && self.n_heads > 0
                && self.n_layers > 0
                && self.d_ff > 0
                && self.max_seq > 0,
            Argument,
            "model config fields must be positive: {self:?}"
        );
        ensure!(
            self.d_model.is_multiple_of(self.n_heads),
            Argument,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(
            (self.d_model / self.n_heads).is_multiple_of(2),
            Argument,
            "rotary mixing needs an even head dimension"
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every probeable component, layer-major then in [`ComponentKind::ALL`]
    /// order.
    pub fn components(&self) -> Vec<ComponentId> {
        (0..self.n_layers)
            .flat_map(|l| ComponentKind::ALL.map(|k| ComponentId::new(l, k)))
            .collect()
    }

    pub fn component_numel(&self, kind: ComponentKind) -> usize {
        let (r, c) = kind.shape(self);
        r * c
    }

    /// Total trainable parameter count: embeddings, unembedding, all
    /// component matrices and every normalization gain.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer: usize = ComponentKind::ALL
            .iter()
            .map(|&k| self.component_numel(k))
            .sum::<usize>()
            + 2 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

/// Binary keep-mask; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        ensure!(
            keep.len() == rows * cols,
            Argument,
            "mask has {} entries, expected {rows}x{cols}",
            keep.len()
        );
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn zeros_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    /// Fraction of masked (zeroed) entries.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.zeros_count() as f64 / self.keep.len() as f64
    }

    /// Entrywise AND; masking twice equals masking once.
    pub fn intersect(&self, other: &Mask) -> Mask {
        assert_eq!(self.shape(), other.shape());
        Mask {
            rows: self.rows,
            cols: self.cols,
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn apply(&self, w: &Matrix) -> Matrix {
        let mut out = w.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, w: &mut Matrix) {
        assert_eq!(self.shape(), w.shape(), "mask shape mismatch");
        for (v, &k) in w.as_mut_slice().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }

    pub fn apply_to_slice(&self, g: &mut [f64]) {
        for (v, &k) in g.iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    /// Indexed by [`ComponentKind::index`].
    pub weights: Vec<Matrix>,
    pub masks: Vec<Option<Mask>>,
}

/// Ordered vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prefix(&self, n: usize) -> TokenSequence {
        TokenSequence(self.0[..n.min(self.0.len())].to_vec())
    }

    pub fn push(&mut self, t: u32) {
        self.0.push(t);
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(bad) = self.0.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.0.len() > cfg.max_seq {
            return Err(Error::Capacity {
                len: self.0.len(),
                max: cfg.max_seq,
            });
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = u32;
    fn index(&self, i: usize) -> &u32 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub embeddings: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
    /// `d_model × vocab`
    pub unembedding: Matrix,
}

impl ToyModel {
    /// Seeded initialization. Projections draw from `N(0, 1/fan_in)`, the two
    /// residual-writing projections are further damped by `1/sqrt(2·layers)`,
    /// and gains start at one, so initial logits have unit-order spread.
    pub fn random_init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_raw(
                rows,
                cols,
                (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
            )
        };
        let d = config.d_model;
        let embeddings = gauss(config.vocab_size, d, 1.0);
        let residual_damp = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| {
                let weights = ComponentKind::ALL
                    .iter()
                    .map(|&k| {
                        let (r, c) = k.shape(&config);
                        let mut std = 1.0 / (r as f64).sqrt();
                        if matches!(k, ComponentKind::AttnDense | ComponentKind::MlpDown) {
                            std *= residual_damp;
                        }
                        gauss(r, c, std)
                    })
                    .collect();
                Layer {
                    attn_norm: vec![1.0; d],
                    mlp_norm: vec![1.0; d],
                    weights,
                    masks: vec![None; 7],
                }
            })
            .collect();
        let unembedding = gauss(d, config.vocab_size, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config,
            embeddings,
            layers,
            final_norm: vec![1.0; d],
            unembedding,
        })
    }

    pub fn components(&self) -> Vec<ComponentId> {
        self.config.components()
    }

    pub fn check_component(&self, id: ComponentId) -> Result<()> {
        ensure!(
            id.layer < self.config.n_layers,
            Argument,
            "component {id} outside {} layers",
            self.config.n_layers
        );
        Ok(())
    }

    /// Raw (unmasked) weight.
    pub fn component(&self, id: ComponentId) -> Result<&Matrix> {
        self.check_component(id)?;
        Ok(&self.layers[id.layer].weights[id.kind.index()])
    }

    pub fn component_mut(&mut self, id: ComponentId) -> Result<&mut Matrix> {
        self.check_component(id)?;
        Ok(&mut self.layers[id.layer].weights[id.kind.index()])
    }

    pub fn set_component(&mut self, id: ComponentId, w: Matrix) -> Result<()> {
        let slot = self.component_mut(id)?;
        ensure!(
            slot.shape() == w.shape(),
            Argument,
            "component {id} has shape {:?}, got {:?}",
            slot.shape(),
            w.shape()
        );
        *slot = w;
        Ok(())
    }

    pub fn mask(&self, id: ComponentId) -> Result<Option<&Mask>> {
        self.check_component(id)?;
        Ok(self.layers[id.layer].masks[id.kind.index()].as_ref())
    }

    /// Installs (or with `None` clears) a component mask.
    pub fn set_mask(&mut self, id: ComponentId, mask: Option<Mask>) -> Result<()> {
        self.check_component(id)?;
        if let Some(m) = &mask {
            ensure!(
                m.shape() == id.kind.shape(&self.config),
                Argument,
                "mask shape {:?} does not fit component {id}",
                m.shape()
            );
        }
        self.layers[id.layer].masks[id.kind.index()] = mask;
        Ok(())
    }

    /// `raw ⊙ mask`, borrowed when the component is unmasked.
    pub fn effective(&self, id: ComponentId) -> Cow<'_, Matrix> {
        let layer = &self.layers[id.layer];
        let w = &layer.weights[id.kind.index()];
        match &layer.masks[id.kind.index()] {
            Some(m) => Cow::Owned(m.apply(w)),
            None => Cow::Borrowed(w),
        }
    }

    pub fn component_sparsity(&self, id: ComponentId) -> f64 {
        self.layers[id.layer].masks[id.kind.index()]
            .as_ref()
            .map_or(0.0, Mask::sparsity)
    }

    /// Parameter-weighted mean mask sparsity over all components.
    pub fn overall_sparsity(&self) -> f64 {
        let (zeros, total) = self.components().iter().fold((0usize, 0usize), |(z, t), &id| {
            let numel = self.config.component_numel(id.kind);
            let zs = self.layers[id.layer].masks[id.kind.index()]
                .as_ref()
                .map_or(0, Mask::zeros_count);
            (z + zs, t + numel)
        });
        zeros as f64 / total as f64
    }

    /// Zeroes raw weights wherever a mask drops them.
    pub fn bake_masks(&mut self) {
        for layer in &mut self.layers {
            for (w, m) in layer.weights.iter_mut().zip(&layer.masks) {
                if let Some(m) = m {
                    m.apply_in_place(w);
                }
            }
        }
    }

    /// Every parameter tensor as a flat slice, in checkpoint order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embeddings".into(), self.embeddings.as_slice())];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("{l}.mlp_norm"), &layer.mlp_norm));
            for k in ComponentKind::ALL {
                out.push((format!("{l}.{k}"), layer.weights[k.index()].as_slice()));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembedding".into(), self.unembedding.as_slice()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embeddings.as_mut_slice()];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.mlp_norm);
            for w in &mut layer.weights {
                out.push(w.as_mut_slice());
            }
        }
        out.push(&mut self.final_norm);
        out.push(self.unembedding.as_mut_slice());
        out
    }

    /// Entry `index` of tensor `tensor` in [`ToyModel::params`] order.
    pub fn param_entry_mut(&mut self, tensor: usize, index: usize) -> &mut f64 {
        let nl = self.layers.len();
        match tensor {
            0 => &mut self.embeddings.as_mut_slice()[index],
            t if t <= 9 * nl => {
                let layer = &mut self.layers[(t - 1) / 9];
                match (t - 1) % 9 {
                    0 => &mut layer.attn_norm[index],
                    1 => &mut layer.mlp_norm[index],
                    k => &mut layer.weights[k - 2].as_mut_slice()[index],
                }
            }
            t if t == 9 * nl + 1 => &mut self.final_norm[index],
            t if t == 9 * nl + 2 => &mut self.unembedding.as_mut_slice()[index],
            t => panic!("parameter tensor {t} out of range"),
        }
    }

    /// The mask governing each entry of [`ToyModel::params`], if any.
    pub fn param_masks(&self) -> Vec<Option<&Mask>> {
        let mut out = vec![None];
        for layer in &self.layers {
            out.push(None);
            out.push(None);
            out.extend(layer.masks.iter().map(Option::as_ref));
        }
        out.push(None);
        out.push(None);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}
