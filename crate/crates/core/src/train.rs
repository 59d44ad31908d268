//! Reverse-mode gradients and the masked/dense finetuning loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::forward::{silu, EffectiveWeights, RopeTable};
use crate::model::{ComponentKind, ForwardCache, Mask, TokenSequence, ToyModel};
use crate::numerics::{dot, log_softmax_at, softmax, Matrix};

/// One gradient tensor per entry of [`ToyModel::params`], same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            tensors: model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// Positions of tensors inside `Gradients::tensors`.
const EMB: usize = 0;
fn attn_norm_slot(l: usize) -> usize {
    1 + 9 * l
}
fn mlp_norm_slot(l: usize) -> usize {
    2 + 9 * l
}
fn weight_slot(l: usize, k: ComponentKind) -> usize {
    3 + 9 * l + k.index()
}
fn final_norm_slot(layers: usize) -> usize {
    1 + 9 * layers
}
fn unemb_slot(layers: usize) -> usize {
    2 + 9 * layers
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean next-token cross-entropy over every position of every sequence, and
/// its exact gradient with respect to the raw parameters. Masked weights
/// receive zero gradient because the loss reads `raw ⊙ mask`.
pub fn loss_and_grads(model: &ToyModel, batch: &[TokenSequence]) -> Result<LossAndGrads> {
    ensure!(!batch.is_empty(), Argument, "empty batch");
    for y in batch {
        ensure!(y.len() >= 2, Argument, "training sequences need at least two tokens");
        y.validate(&model.config)?;
        if y.len() > model.config.max_seq {
            return Err(Error::Capacity {
                len: y.len(),
                max: model.config.max_seq,
            });
        }
    }
    let positions: usize = batch.iter().map(|y| y.len() - 1).sum();
    let inv_total = 1.0 / positions as f64;
    let w = EffectiveWeights::of(model);
    let parts = batch
        .par_iter()
        .map(|y| {
            let cache = model.forward_cached(y)?;
            let mut g = Gradients::zeros_like(model);
            let loss = backward_sequence(model, &w, &cache, inv_total, &mut g);
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    // Reduce in batch order so the result does not depend on scheduling.
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    loss *= inv_total;
    if !loss.is_finite() {
        let bad: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|(_, y)| model.forward(y).map(|l| !l.is_finite()).unwrap_or(true))
            .map(|(i, _)| i)
            .collect();
        return Err(Error::Numerical(format!(
            "non-finite loss {loss}; sequences with non-finite logits: {bad:?}; model finite: {}",
            model.is_finite()
        )));
    }
    for (g, m) in grads.tensors.iter_mut().zip(model.param_masks()) {
        if let Some(m) = m {
            m.apply_to_slice(g);
        }
    }
    Ok(LossAndGrads { loss, grads })
}

/// Mean next-token cross-entropy alone.
pub fn loss(model: &ToyModel, batch: &[TokenSequence]) -> Result<f64> {
    ensure!(!batch.is_empty(), Argument, "empty batch");
    let mut total = 0.0;
    let mut positions = 0usize;
    for y in batch {
        ensure!(y.len() >= 2, Argument, "training sequences need at least two tokens");
        let logits = model.forward(y)?;
        total += sequence_ce(&logits, y.as_slice())?;
        positions += y.len() - 1;
    }
    Ok(total / positions as f64)
}

/// Summed cross-entropy of rows `0..len-1` against the next tokens.
pub(crate) fn sequence_ce(logits: &Matrix, tokens: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() - 1 {
        total -= log_softmax_at(logits.row(i), tokens[i + 1] as usize)?;
    }
    Ok(total)
}

fn rms_norm_backward(x: &[f64], g: &[f64], inv: f64, dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let mut acc = 0.0;
    for j in 0..x.len() {
        acc += g[j] * dy[j] * x[j];
        dg[j] += dy[j] * x[j] * inv;
    }
    let c = inv * inv * inv * acc / x.len() as f64;
    for j in 0..x.len() {
        dx[j] += inv * g[j] * dy[j] - c * x[j];
    }
}

fn add_into(dst: &mut [f64], m: &Matrix) {
    for (d, v) in dst.iter_mut().zip(m.as_slice()) {
        *d += v;
    }
}

/// Backpropagates one sequence's share of the mean loss into `g`; returns
/// the sequence's summed (unscaled) cross-entropy.
fn backward_sequence(
    model: &ToyModel,
    w: &EffectiveWeights<'_>,
    c: &ForwardCache,
    inv_total: f64,
    g: &mut Gradients,
) -> f64 {
    let cfg = &model.config;
    let (n, d, nl) = (c.tokens.len(), cfg.d_model, cfg.n_layers);
    let (nh, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, cfg.vocab_size);
    for i in 0..n - 1 {
        let target = c.tokens[i + 1] as usize;
        loss -= log_softmax_at(c.logits.row(i), target).unwrap_or(f64::NAN);
        let p = softmax(c.logits.row(i)).unwrap_or_else(|_| vec![f64::NAN; cfg.vocab_size]);
        let row = dlogits.row_mut(i);
        for (r, pv) in row.iter_mut().zip(&p) {
            *r = pv * inv_total;
        }
        row[target] -= inv_total;
    }

    add_into(&mut g.tensors[unemb_slot(nl)], &c.hf.matmul_tn(&dlogits));
    let dhf = dlogits.matmul_nt(&model.unembedding);
    let mut dx = Matrix::zeros(n, d);
    {
        let dg = &mut g.tensors[final_norm_slot(nl)];
        for i in 0..n {
            rms_norm_backward(c.x_final.row(i), &model.final_norm, c.inv_rms_f[i], dhf.row(i), dx.row_mut(i), dg);
        }
    }

    let rope = RopeTable::new(n, hd);
    for l in (0..nl).rev() {
        let lc = &c.layers[l];
        let layer = &model.layers[l];
        let wt = |k| w.get(l, k);

        // MLP block: x_out = x_mid + (silu(h2·Wg) ⊙ h2·Wu)·Wd
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::MlpDown)], &lc.hidden.matmul_tn(&dx));
        let dhidden = dx.matmul_nt(wt(ComponentKind::MlpDown));
        let mut dup = Matrix::zeros(n, cfg.d_ff);
        let mut dgate = Matrix::zeros(n, cfg.d_ff);
        for idx in 0..n * cfg.d_ff {
            let z = lc.gate.as_slice()[idx];
            let sig = 1.0 / (1.0 + (-z).exp());
            let dh = dhidden.as_slice()[idx];
            dup.as_mut_slice()[idx] = dh * silu(z);
            dgate.as_mut_slice()[idx] = dh * lc.up.as_slice()[idx] * sig * (1.0 + z * (1.0 - sig));
        }
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::MlpUp)], &lc.h2.matmul_tn(&dup));
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::MlpGate)], &lc.h2.matmul_tn(&dgate));
        let mut dh2 = dup.matmul_nt(wt(ComponentKind::MlpUp));
        dh2.add_assign(&dgate.matmul_nt(wt(ComponentKind::MlpGate)));
        {
            let dg = &mut g.tensors[mlp_norm_slot(l)];
            for i in 0..n {
                rms_norm_backward(lc.x_mid.row(i), &layer.mlp_norm, lc.inv_rms2[i], dh2.row(i), dx.row_mut(i), dg);
            }
        }

        // Attention block: x_mid = x_in + attn·Wo
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::AttnDense)], &lc.attn.matmul_tn(&dx));
        let dattn = dx.matmul_nt(wt(ComponentKind::AttnDense));
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = Vec::with_capacity(n);
        for i in 0..n {
            for h in 0..nh {
                let p = &lc.probs[i][h];
                let hs = h * hd..(h + 1) * hd;
                let dout = &dattn.row(i)[hs.clone()];
                dp.clear();
                let mut weighted = 0.0;
                for j in 0..=i {
                    let dpj = dot(dout, &lc.v.row(j)[hs.clone()]);
                    weighted += p[j] * dpj;
                    dp.push(dpj);
                    for (dvv, &o) in dv.row_mut(j)[hs.clone()].iter_mut().zip(dout) {
                        *dvv += p[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k.row(j)[hs.clone()];
                    for (a, &b) in dq.row_mut(i)[hs.clone()].iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let qi = &lc.q.row(i)[hs.clone()];
                    for (a, &b) in dk.row_mut(j)[hs.clone()].iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        for i in 0..n {
            rope.rotate(dq.row_mut(i), i, nh, true);
            rope.rotate(dk.row_mut(i), i, nh, true);
        }
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::AttnQuery)], &lc.h1.matmul_tn(&dq));
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::AttnKey)], &lc.h1.matmul_tn(&dk));
        add_into(&mut g.tensors[weight_slot(l, ComponentKind::AttnValue)], &lc.h1.matmul_tn(&dv));
        let mut dh1 = dq.matmul_nt(wt(ComponentKind::AttnQuery));
        dh1.add_assign(&dk.matmul_nt(wt(ComponentKind::AttnKey)));
        dh1.add_assign(&dv.matmul_nt(wt(ComponentKind::AttnValue)));
        {
            let dg = &mut g.tensors[attn_norm_slot(l)];
            for i in 0..n {
                rms_norm_backward(lc.x_in.row(i), &layer.attn_norm, lc.inv_rms1[i], dh1.row(i), dx.row_mut(i), dg);
            }
        }
    }

    let emb = &mut g.tensors[EMB];
    for (i, &t) in c.tokens.iter().enumerate() {
        let dst = &mut emb[t as usize * d..(t as usize + 1) * d];
        for (a, b) in dst.iter_mut().zip(dx.row(i)) {
            *a += b;
        }
    }
    loss
}

/// Outcome of comparing [`loss_and_grads`] against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which a gradient is judged by absolute error
    /// `tolerance · floor`, the roundoff level of the difference quotient.
    pub floor: f64,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every parameter gradient against `(L(θ+h) − L(θ−h)) / 2h`.
///
/// A perturbation of layer `l` only changes the residual stream from layer
/// `l` on, so the loss is re-evaluated from the cached input of that layer;
/// this gives the same bits as a full forward pass at a fraction of the
/// cost. The error measure is `|g − fd| / max(|g|, |fd|, floor)` where
/// `floor = 8·ε·max(|L|, 1) / (h · tolerance)` bounds the rounding noise of
/// the quotient.
pub fn gradient_check(model: &ToyModel, batch: &[TokenSequence], h: f64, tolerance: f64) -> Result<GradCheck> {
    ensure!(h > 0.0 && tolerance > 0.0, Argument, "step and tolerance must be positive");
    let LossAndGrads { loss: base_loss, grads } = loss_and_grads(model, batch)?;
    let nl = model.config.n_layers;
    let positions: usize = batch.iter().map(|y| y.len() - 1).sum();
    // Residual stream entering each layer (index nl: entering the final norm).
    let mut inputs: Vec<Vec<Matrix>> = Vec::with_capacity(batch.len());
    for y in batch {
        let c = model.forward_cached(y)?;
        let mut xs: Vec<Matrix> = c.layers.into_iter().map(|l| l.x_in).collect();
        xs.push(c.x_final);
        inputs.push(xs);
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let start_of = |t: usize| -> Option<usize> {
        match t {
            EMB => None,
            t if t <= 9 * nl => Some((t - 1) / 9),
            _ => Some(nl),
        }
    };
    let eval = |m: &ToyModel, start: Option<usize>| -> Result<f64> {
        let mut total = 0.0;
        for (y, xs) in batch.iter().zip(&inputs) {
            let logits = match start {
                None => m.forward(y)?,
                Some(s) => m.logits_from_layer(xs[s].clone(), s),
            };
            total += sequence_ce(&logits, y.as_slice())?;
        }
        Ok(total / positions as f64)
    };

    let floor = 8.0 * f64::EPSILON * base_loss.abs().max(1.0) / (h * tolerance);
    let mut work = model.clone();
    let mut report = GradCheck {
        checked: 0,
        failures: 0,
        step: h,
        tolerance,
        floor,
        max_rel_error: 0.0,
        worst: None,
    };
    for (t, name) in names.iter().enumerate() {
        let start = start_of(t);
        for j in 0..grads.tensors[t].len() {
            let orig = *work.param_entry_mut(t, j);
            *work.param_entry_mut(t, j) = orig + h;
            let up = eval(&work, start)?;
            *work.param_entry_mut(t, j) = orig - h;
            let down = eval(&work, start)?;
            *work.param_entry_mut(t, j) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[t][j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > tolerance {
                report.failures += 1;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradMismatch {
                    tensor: name.clone(),
                    index: j,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub masked_steps: usize,
    pub dense_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 0.01,
            batch_size: 16,
            seq_len: 128,
            masked_steps: 450,
            dense_steps: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Argument,
            "learning rate must be finite and nonnegative"
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Argument,
            "weight decay must be finite and nonnegative"
        );
        ensure!(self.batch_size > 0, Argument, "batch size must be positive");
        ensure!(self.seq_len >= 2, Argument, "sequence length must be at least 2");
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.masked_steps + self.dense_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Masked,
    Dense,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Masked => "masked",
            Phase::Dense => "dense",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Phase::Masked),
            "dense" => Ok(Phase::Dense),
            _ => Err(Error::Schema(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn push(&mut self, phase: Phase, loss: f64) {
        let step = self.records.len();
        self.records.push(LossRecord { step, phase, loss });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn phase_count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }

    /// Appends `other`, renumbering its steps to continue this trace.
    pub fn extend(&mut self, other: &LossTrace) {
        for r in &other.records {
            self.push(r.phase, r.loss);
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "phase", "loss"])?;
        for r in &self.records {
            out.write_record([r.step.to_string(), r.phase.to_string(), format!("{:?}", r.loss)])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        ensure!(
            header.iter().eq(["step", "phase", "loss"]),
            Schema,
            "unexpected loss-trace header {header:?}"
        );
        let mut trace = LossTrace::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let step: usize = rec[0].parse().map_err(|_| Error::Schema(format!("bad step {:?}", &rec[0])))?;
            ensure!(step == i, Schema, "loss-trace steps must be consecutive");
            let loss: f64 = rec[2].parse().map_err(|_| Error::Schema(format!("bad loss {:?}", &rec[2])))?;
            ensure!(loss.is_finite(), Schema, "non-finite loss in trace");
            trace.push(rec[1].parse()?, loss);
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Seeded random windows of a token stream.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    tokens: Vec<u32>,
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl WindowSampler {
    pub fn new(tokens: Vec<u32>, seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        ensure!(seq_len >= 2, Argument, "window length must be at least 2");
        ensure!(
            tokens.len() >= seq_len,
            Argument,
            "token stream of {} is shorter than window {seq_len}",
            tokens.len()
        );
        Ok(Self {
            tokens,
            seq_len,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Vec<TokenSequence> {
        let hi = self.tokens.len() - self.seq_len;
        (0..self.batch_size)
            .map(|_| {
                let off = self.rng.random_range(0..=hi);
                TokenSequence::new(self.tokens[off..off + self.seq_len].to_vec())
            })
            .collect()
    }
}

fn sgd_step(model: &mut ToyModel, grads: &Gradients, lr: f64, wd: f64) {
    let decay = 1.0 - lr * wd;
    let names: Vec<bool> = model
        .params()
        .iter()
        .map(|(name, _)| !name.ends_with("_norm"))
        .collect();
    for ((p, g), is_matrix) in model.params_mut().into_iter().zip(&grads.tensors).zip(names) {
        let f = if is_matrix { decay } else { 1.0 };
        for (w, gv) in p.iter_mut().zip(g) {
            *w = *w * f - lr * gv;
        }
    }
}

/// Finetunes `model` in place: `masked_steps` with its masks applied and raw
/// weights re-masked after every update, then `dense_steps` with masks
/// lifted (previously masked weights restart from zero). Masks are restored
/// at the end, so the returned model is sparse again.
pub fn train_masked(
    model: &mut ToyModel,
    config: &TrainConfig,
    data: &mut dyn FnMut(usize) -> Vec<TokenSequence>,
) -> Result<LossTrace> {
    config.validate()?;
    let mut trace = LossTrace::default();
    model.bake_masks();
    for step in 0..config.masked_steps {
        let batch = data(step);
        let LossAndGrads { loss, grads } = loss_and_grads(model, &batch)?;
        trace.push(Phase::Masked, loss);
        sgd_step(model, &grads, config.learning_rate, config.weight_decay);
        model.bake_masks();
    }
    let masks: Vec<Vec<Option<Mask>>> = model
        .layers
        .iter_mut()
        .map(|l| l.masks.iter_mut().map(Option::take).collect())
        .collect();
    for step in config.masked_steps..config.steps() {
        let batch = data(step);
        let LossAndGrads { loss, grads } = loss_and_grads(model, &batch)?;
        trace.push(Phase::Dense, loss);
        sgd_step(model, &grads, config.learning_rate, config.weight_decay);
    }
    for (layer, m) in model.layers.iter_mut().zip(masks) {
        layer.masks = m;
    }
    ensure!(model.is_finite(), Numerical, "training produced non-finite weights");
    Ok(trace)
}

/// Plain training without masks, e.g. to produce a base model.
pub fn train_dense(
    model: &mut ToyModel,
    config: &TrainConfig,
    steps: usize,
    sampler: &mut WindowSampler,
) -> Result<LossTrace> {
    let cfg = TrainConfig {
        masked_steps: 0,
        dense_steps: steps,
        ..*config
    };
    train_masked(model, &cfg, &mut |_| sampler.next_batch())
}

/// Round-by-round trainer driven by a [`WindowSampler`]. Each round reseeds
/// the sampler from `(seed, round)` so rounds are reproducible in isolation.
#[derive(Debug, Clone)]
pub struct SgdTrainer {
    pub config: TrainConfig,
    tokens: Vec<u32>,
}

impl SgdTrainer {
    pub fn new(config: TrainConfig, tokens: Vec<u32>) -> Result<Self> {
        config.validate()?;
        WindowSampler::new(tokens.clone(), config.seq_len, config.batch_size, 0)?;
        Ok(Self { config, tokens })
    }

    pub fn train_round(&mut self, model: &mut ToyModel, round: usize) -> Result<LossTrace> {
        let seed = self.config.seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut sampler = WindowSampler::new(
            self.tokens.clone(),
            self.config.seq_len,
            self.config.batch_size,
            seed,
        )?;
        train_masked(model, &self.config, &mut |_| sampler.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComponentId, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq: 16,
        }
    }

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec())
    }

    #[test]
    fn uniform_output_loss_is_log_vocab() {
        let mut m = ToyModel::random_init(cfg(), 1).unwrap();
        m.unembedding = Matrix::zeros(8, 11);
        let r = loss_and_grads(&m, &[seq(&[1, 2, 3]), seq(&[4, 5])]).unwrap();
        assert!((r.loss - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let m = ToyModel::random_init(cfg(), 2).unwrap();
        let a = seq(&[1, 2, 3, 4]);
        let b = seq(&[7, 0, 9]);
        let one = loss_and_grads(&m, &[a.clone(), b.clone()]).unwrap();
        let two = loss_and_grads(&m, &[a.clone(), b.clone(), a, b]).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-12);
        for (x, y) in one.grads.tensors.iter().flatten().zip(two.grads.tensors.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_forward() {
        let m = ToyModel::random_init(cfg(), 3).unwrap();
        let batch = [seq(&[1, 2, 3, 4, 5]), seq(&[3, 3])];
        let r = loss_and_grads(&m, &batch).unwrap();
        assert!((r.loss - loss(&m, &batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn masked_weights_get_zero_gradient() {
        let mut m = ToyModel::random_init(cfg(), 4).unwrap();
        let id = ComponentId::new(0, ComponentKind::MlpUp);
        let keep = (0..96).map(|i| i % 2 == 0).collect();
        m.set_mask(id, Some(Mask::from_keep(8, 12, keep).unwrap())).unwrap();
        let r = loss_and_grads(&m, &[seq(&[1, 2, 3, 4])]).unwrap();
        let g = &r.grads.tensors[weight_slot(0, ComponentKind::MlpUp)];
        assert!(g.iter().skip(1).step_by(2).all(|v| *v == 0.0));
        assert!(g.iter().step_by(2).any(|v| *v != 0.0));
    }

    #[test]
    fn input_errors() {
        let m = ToyModel::random_init(cfg(), 5).unwrap();
        assert!(loss_and_grads(&m, &[]).is_err());
        assert!(loss_and_grads(&m, &[seq(&[1])]).is_err());
        assert!(loss_and_grads(&m, &[seq(&[1, 99])]).is_err());
        assert!(matches!(
            loss_and_grads(&m, &[TokenSequence::new(vec![0; 17])]),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut m = ToyModel::random_init(cfg(), 6).unwrap();
        let before = m.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            seq_len: 5,
            masked_steps: 3,
            dense_steps: 2,
            ..Default::default()
        };
        let mut s = WindowSampler::new((0..40).map(|i| i % 11).collect(), 5, 2, 0).unwrap();
        let fixed = s.next_batch();
        let trace = train_masked(&mut m, &config, &mut |_| fixed.clone()).unwrap();
        assert_eq!(m, before);
        let l = trace.losses();
        assert!(l.iter().all(|v| *v == l[0]));
    }

    #[test]
    fn masked_phase_accounting() {
        let mut m = ToyModel::random_init(cfg(), 7).unwrap();
        let id = ComponentId::new(1, ComponentKind::AttnKey);
        let keep: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
        m.set_mask(id, Some(Mask::from_keep(8, 8, keep.clone()).unwrap())).unwrap();
        let config = TrainConfig {
            batch_size: 2,
            seq_len: 6,
            masked_steps: 4,
            dense_steps: 0,
            ..Default::default()
        };
        let mut s = WindowSampler::new((0..60).map(|i| (i * 7) % 11).collect(), 6, 2, 1).unwrap();
        let trace = train_masked(&mut m, &config, &mut |_| s.next_batch()).unwrap();
        assert_eq!(trace.phase_count(Phase::Masked), 4);
        let raw = m.component(id).unwrap();
        for (i, k) in keep.iter().enumerate() {
            if !k {
                assert_eq!(raw.as_slice()[i], 0.0);
            }
        }
        let config = TrainConfig {
            masked_steps: 3,
            dense_steps: 2,
            ..config
        };
        let trace = train_masked(&mut m, &config, &mut |_| s.next_batch()).unwrap();
        assert_eq!(trace.phase_count(Phase::Masked), 3);
        assert_eq!(trace.phase_count(Phase::Dense), 2);
        // Dense steps revive masked raw weights; the mask still hides them.
        assert!(m.component(id).unwrap().as_slice().iter().any(|v| *v != 0.0));
        assert!(m.mask(id).unwrap().is_some());
        assert_eq!(m.effective(id).as_slice()[0], 0.0);
    }

    #[test]
    fn loss_trace_csv_round_trip() {
        let mut t = LossTrace::default();
        t.push(Phase::Masked, 1.25);
        t.push(Phase::Dense, 0.1 + 0.2);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("step,phase,loss\n"));
        assert_eq!(LossTrace::read_csv(buf.as_slice()).unwrap(), t);
    }
}
