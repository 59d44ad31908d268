//! Forward pass, activation tracing and incremental greedy decoding.
//!
//! The full-sequence pass and the incremental decoder share the per-row
//! kernels below, so logits for row `i` come out bit-identical whichever
//! path produced them.

use std::borrow::Cow;

use super::{ComponentId, ComponentKind, ModelConfig, TokenSequence, ToyModel, RMS_EPS, ROPE_BASE};
use crate::error::{ensure, Result};
use crate::numerics::{argmax, row_times_matrix, Matrix};

/// RMS-normalizes `x` into `out` with gain `g`; returns `1 / rms`.
#[inline]
pub(crate) fn rms_norm_row(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xv), &gv) in out.iter_mut().zip(x).zip(g) {
        *o = xv * inv * gv;
    }
    inv
}

/// Rotation angle for pair `pair` of a head at position `pos`.
#[inline]
fn rope_angle(pos: usize, pair: usize, head_dim: usize) -> f64 {
    let freq = ROPE_BASE.powf(-((2 * pair) as f64) / head_dim as f64);
    pos as f64 * freq
}

/// Precomputed `(cos, sin)` per position and pair.
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(positions: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let a = rope_angle(p, i, head_dim);
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Self { half, cos, sin }
    }

    fn ensure(&mut self, positions: usize, head_dim: usize) {
        if self.cos.len() < positions * self.half {
            *self = RopeTable::new(positions.max(1) * 2, head_dim);
        }
    }

    /// Rotates every head of `row` in place for position `pos`.
    #[inline]
    pub(crate) fn rotate(&self, row: &mut [f64], pos: usize, n_heads: usize, inverse: bool) {
        let hd = self.half * 2;
        let base = pos * self.half;
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for i in 0..self.half {
                let (c, mut s) = (self.cos[base + i], self.sin[base + i]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Causal attention for one query row against the first `upto` key/value
/// rows (stride `d`). Writes the per-head outputs to `out` and, if given,
/// the attention probabilities to `probs[h][j]`.
#[inline]
pub(crate) fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    upto: usize,
    cfg: &ModelConfig,
    scores: &mut Vec<f64>,
    out: &mut [f64],
    mut probs: Option<&mut [Vec<f64>]>,
) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    out.fill(0.0);
    for h in 0..cfg.n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        scores.clear();
        let mut max = f64::NEG_INFINITY;
        for j in 0..upto {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let s = qh.iter().zip(kh).fold(0.0, |acc, (a, b)| acc + a * b) * scale;
            max = max.max(s);
            scores.push(s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += *s * v;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h].clear();
            p[h].extend_from_slice(scores);
        }
    }
}

/// Masked weights resolved once per pass.
pub(crate) struct EffectiveWeights<'a> {
    pub(crate) layers: Vec<Vec<Cow<'a, Matrix>>>,
}

impl<'a> EffectiveWeights<'a> {
    pub(crate) fn of(model: &'a ToyModel) -> Self {
        let layers = (0..model.config.n_layers)
            .map(|l| {
                ComponentKind::ALL
                    .iter()
                    .map(|&k| model.effective(ComponentId::new(l, k)))
                    .collect()
            })
            .collect();
        Self { layers }
    }

    #[inline]
    pub(crate) fn get(&self, layer: usize, kind: ComponentKind) -> &Matrix {
        &self.layers[layer][kind.index()]
    }
}

/// Intermediates of one layer kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x_in: Matrix,
    pub h1: Matrix,
    pub inv_rms1: Vec<f64>,
    /// Rotated queries and keys.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `probs[i][h]` holds attention weights over positions `0..=i`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub attn: Matrix,
    pub x_mid: Matrix,
    pub h2: Matrix,
    pub inv_rms2: Vec<f64>,
    pub up: Matrix,
    pub gate: Matrix,
    pub hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache>,
    pub x_final: Matrix,
    pub hf: Matrix,
    pub inv_rms_f: Vec<f64>,
    pub logits: Matrix,
}

/// Counts component-input activations whose magnitude exceeds a threshold.
/// Query, key and value read the same normalized input, so each of them
/// counts it separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub threshold: f64,
    pub counts: std::collections::BTreeMap<ComponentId, u64>,
}

impl ActivationTrace {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            counts: Default::default(),
        }
    }

    fn observe(&mut self, id: ComponentId, input: &Matrix) {
        let n = input
            .as_slice()
            .iter()
            .filter(|v| v.abs() > self.threshold)
            .count() as u64;
        *self.counts.entry(id).or_insert(0) += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

impl ToyModel {
    fn check_input(&self, y: &TokenSequence) -> Result<()> {
        ensure!(!y.is_empty(), Argument, "forward needs a nonempty sequence");
        y.validate(&self.config)
    }

    /// Logits for every position: row `i` scores the token following
    /// `y[..=i]`.
    pub fn forward(&self, y: &TokenSequence) -> Result<Matrix> {
        self.check_input(y)?;
        Ok(self.run(y.as_slice(), false, None).logits)
    }

    /// Forward pass retaining every intermediate.
    pub fn forward_cached(&self, y: &TokenSequence) -> Result<ForwardCache> {
        self.check_input(y)?;
        Ok(self.run(y.as_slice(), true, None))
    }

    /// Forward pass that also feeds every component input to `trace`.
    pub fn forward_with_trace(&self, y: &TokenSequence, trace: &mut ActivationTrace) -> Result<Matrix> {
        self.check_input(y)?;
        Ok(self.run(y.as_slice(), false, Some(trace)).logits)
    }

    fn run(&self, tokens: &[u32], keep: bool, trace: Option<&mut ActivationTrace>) -> ForwardCache {
        let mut x = Matrix::zeros(tokens.len(), self.config.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embeddings.row(t as usize));
        }
        self.run_from(tokens, x, 0, keep, trace)
    }

    /// Logits from the residual stream `x` entering layer `start`; layers
    /// before `start` are skipped. Bit-identical to the tail of a full pass.
    pub(crate) fn logits_from_layer(&self, x: Matrix, start: usize) -> Matrix {
        self.run_from(&[], x, start, false, None).logits
    }

    fn run_from(
        &self,
        tokens: &[u32],
        mut x: Matrix,
        start: usize,
        keep: bool,
        mut trace: Option<&mut ActivationTrace>,
    ) -> ForwardCache {
        let cfg = &self.config;
        let (n, d, ff) = (x.rows(), cfg.d_model, cfg.d_ff);
        let w = EffectiveWeights::of(self);
        let rope = RopeTable::new(n, cfg.head_dim());

        let mut layer_caches = Vec::new();
        let mut scores = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate().skip(start) {
            let x_in = if keep { Some(x.clone()) } else { None };
            let mut h1 = Matrix::zeros(n, d);
            let mut inv1 = vec![0.0; n];
            for i in 0..n {
                inv1[i] = rms_norm_row(x.row(i), &layer.attn_norm, h1.row_mut(i));
            }
            if let Some(t) = trace.as_deref_mut() {
                for k in [ComponentKind::AttnQuery, ComponentKind::AttnKey, ComponentKind::AttnValue] {
                    t.observe(ComponentId::new(l, k), &h1);
                }
            }
            let mut q = h1.matmul(w.get(l, ComponentKind::AttnQuery));
            let mut k = h1.matmul(w.get(l, ComponentKind::AttnKey));
            let v = h1.matmul(w.get(l, ComponentKind::AttnValue));
            for i in 0..n {
                rope.rotate(q.row_mut(i), i, cfg.n_heads, false);
                rope.rotate(k.row_mut(i), i, cfg.n_heads, false);
            }
            let mut attn = Matrix::zeros(n, d);
            let mut probs: Vec<Vec<Vec<f64>>> = Vec::new();
            for i in 0..n {
                let mut p = if keep { Some(vec![Vec::new(); cfg.n_heads]) } else { None };
                attend_row(
                    q.row(i),
                    k.as_slice(),
                    v.as_slice(),
                    i + 1,
                    cfg,
                    &mut scores,
                    attn.row_mut(i),
                    p.as_deref_mut(),
                );
                if let Some(p) = p {
                    probs.push(p);
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.observe(ComponentId::new(l, ComponentKind::AttnDense), &attn);
            }
            let o = attn.matmul(w.get(l, ComponentKind::AttnDense));
            x.add_assign(&o);
            let x_mid = if keep { Some(x.clone()) } else { None };

            let mut h2 = Matrix::zeros(n, d);
            let mut inv2 = vec![0.0; n];
            for i in 0..n {
                inv2[i] = rms_norm_row(x.row(i), &layer.mlp_norm, h2.row_mut(i));
            }
            if let Some(t) = trace.as_deref_mut() {
                t.observe(ComponentId::new(l, ComponentKind::MlpUp), &h2);
                t.observe(ComponentId::new(l, ComponentKind::MlpGate), &h2);
            }
            let up = h2.matmul(w.get(l, ComponentKind::MlpUp));
            let gate = h2.matmul(w.get(l, ComponentKind::MlpGate));
            let mut hidden = Matrix::zeros(n, ff);
            for ((hv, &u), &g) in hidden
                .as_mut_slice()
                .iter_mut()
                .zip(up.as_slice())
                .zip(gate.as_slice())
            {
                *hv = silu(g) * u;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.observe(ComponentId::new(l, ComponentKind::MlpDown), &hidden);
            }
            let down = hidden.matmul(w.get(l, ComponentKind::MlpDown));
            x.add_assign(&down);

            if keep {
                layer_caches.push(LayerCache {
                    x_in: x_in.expect("kept"),
                    h1,
                    inv_rms1: inv1,
                    q,
                    k,
                    v,
                    probs,
                    attn,
                    x_mid: x_mid.expect("kept"),
                    h2,
                    inv_rms2: inv2,
                    up,
                    gate,
                    hidden,
                });
            }
        }

        let mut hf = Matrix::zeros(n, d);
        let mut inv_f = vec![0.0; n];
        for i in 0..n {
            inv_f[i] = rms_norm_row(x.row(i), &self.final_norm, hf.row_mut(i));
        }
        let logits = hf.matmul(&self.unembedding);
        ForwardCache {
            tokens: tokens.to_vec(),
            layers: layer_caches,
            x_final: x,
            hf,
            inv_rms_f: inv_f,
            logits,
        }
    }

    /// Starts an incremental decoder over this model's masked weights.
    pub fn decoder(&self) -> DecodeState<'_> {
        DecodeState::new(self)
    }

    /// Greedy completion `G(F, prefix, total_len)`: the prefix followed by
    /// argmax tokens until the sequence holds `total_len` tokens.
    pub fn greedy_decode(&self, prefix: &TokenSequence, total_len: usize) -> Result<TokenSequence> {
        ensure!(!prefix.is_empty(), Argument, "greedy decoding needs a nonempty prefix");
        ensure!(
            prefix.len() <= total_len,
            Argument,
            "prefix length {} exceeds completion length {total_len}",
            prefix.len()
        );
        prefix.validate(&self.config)?;
        if total_len > self.config.max_seq {
            return Err(crate::error::Error::Capacity {
                len: total_len,
                max: self.config.max_seq,
            });
        }
        let mut out = prefix.clone();
        if prefix.len() == total_len {
            return Ok(out);
        }
        let mut dec = self.decoder();
        let mut last = Vec::new();
        for &t in prefix.as_slice() {
            last = dec.step(t);
        }
        while out.len() < total_len {
            let next = argmax(&last)? as u32;
            out.push(next);
            if out.len() < total_len {
                last = dec.step(next);
            }
        }
        Ok(out)
    }
}

/// Key/value cache for token-at-a-time decoding.
pub struct DecodeState<'a> {
    model: &'a ToyModel,
    weights: EffectiveWeights<'a>,
    rope: RopeTable,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
    scores: Vec<f64>,
}

impl<'a> DecodeState<'a> {
    fn new(model: &'a ToyModel) -> Self {
        let cfg = &model.config;
        Self {
            model,
            weights: EffectiveWeights::of(model),
            rope: RopeTable::new(cfg.max_seq.min(256), cfg.head_dim()),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
            scores: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the logit row predicting the next.
    pub fn step(&mut self, token: u32) -> Vec<f64> {
        let m = self.model;
        let cfg = &m.config;
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let pos = self.pos;
        self.rope.ensure(pos + 1, cfg.head_dim());

        let mut x = m.embeddings.row(token as usize).to_vec();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut up = vec![0.0; ff];
        let mut gate = vec![0.0; ff];
        for (l, layer) in m.layers.iter().enumerate() {
            rms_norm_row(&x, &layer.attn_norm, &mut h);
            row_times_matrix(&h, self.weights.get(l, ComponentKind::AttnQuery), &mut q);
            row_times_matrix(&h, self.weights.get(l, ComponentKind::AttnKey), &mut k);
            row_times_matrix(&h, self.weights.get(l, ComponentKind::AttnValue), &mut v);
            self.rope.rotate(&mut q, pos, cfg.n_heads, false);
            self.rope.rotate(&mut k, pos, cfg.n_heads, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            attend_row(
                &q,
                &self.keys[l],
                &self.values[l],
                pos + 1,
                cfg,
                &mut self.scores,
                &mut attn,
                None,
            );
            row_times_matrix(&attn, self.weights.get(l, ComponentKind::AttnDense), &mut o);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
            rms_norm_row(&x, &layer.mlp_norm, &mut h);
            row_times_matrix(&h, self.weights.get(l, ComponentKind::MlpUp), &mut up);
            row_times_matrix(&h, self.weights.get(l, ComponentKind::MlpGate), &mut gate);
            for (u, g) in up.iter_mut().zip(&gate) {
                *u *= silu(*g);
            }
            row_times_matrix(&up, self.weights.get(l, ComponentKind::MlpDown), &mut o);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
        }
        rms_norm_row(&x, &m.final_norm, &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        row_times_matrix(&h, &m.unembedding, &mut logits);
        self.pos += 1;
        logits
    }
}
