//! Pruning masks, simulated AbsMax quantization and outlier accounting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ActivationTrace, ComponentId, Mask, TokenSequence, ToyModel};
use crate::numerics::Matrix;

/// Fraction of a matrix's entries that are masked, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsityLevel(f64);

impl SparsityLevel {
    pub const DENSE: SparsityLevel = SparsityLevel(0.0);

    pub fn new(fraction: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&fraction),
            Argument,
            "sparsity {fraction} not in [0, 1]"
        );
        Ok(Self(fraction))
    }

    pub fn from_percent(p: f64) -> Result<Self> {
        Self::new(p / 100.0)
    }

    pub fn fraction(self) -> f64 {
        self.0
    }

    /// Number of zeros this level asks for in a matrix of `numel` entries.
    /// The tiny epsilon absorbs rounding in fractions like `k / numel`.
    pub fn zero_count(self, numel: usize) -> usize {
        ((self.0 * numel as f64 + 1e-9).floor() as usize).min(numel)
    }
}

impl TryFrom<f64> for SparsityLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        SparsityLevel::new(v)
    }
}

impl From<SparsityLevel> for f64 {
    fn from(s: SparsityLevel) -> f64 {
        s.0
    }
}

fn mask_targets(w: &Matrix, existing: Option<&Mask>, target: SparsityLevel) -> Result<(Vec<bool>, usize)> {
    let keep = match existing {
        Some(m) => {
            ensure!(m.shape() == w.shape(), Argument, "mask shape does not match weight");
            m.keep().to_vec()
        }
        None => vec![true; w.len()],
    };
    let current = keep.iter().filter(|k| !**k).count();
    let wanted = target.zero_count(w.len());
    ensure!(
        wanted >= current,
        Argument,
        "target sparsity {} below current {}",
        target.fraction(),
        current as f64 / w.len().max(1) as f64
    );
    Ok((keep, wanted - current))
}

/// Extends `existing` (or an all-ones mask) until exactly
/// `floor(target · numel)` entries are zero, dropping the smallest-magnitude
/// surviving weights first; equal magnitudes go in flat index order.
pub fn magnitude_mask(w: &Matrix, existing: Option<&Mask>, target: SparsityLevel) -> Result<Mask> {
    let (mut keep, extra) = mask_targets(w, existing, target)?;
    let vals = w.as_slice();
    let mut alive: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    alive.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()).then(a.cmp(&b)));
    for &i in &alive[..extra] {
        keep[i] = false;
    }
    Mask::from_keep(w.rows(), w.cols(), keep)
}

/// Like [`magnitude_mask`] but drops surviving entries uniformly at random.
pub fn random_mask(w: &Matrix, existing: Option<&Mask>, target: SparsityLevel, seed: u64) -> Result<Mask> {
    let (mut keep, extra) = mask_targets(w, existing, target)?;
    let alive: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in sample(&mut rng, alive.len(), extra) {
        keep[alive[j]] = false;
    }
    Mask::from_keep(w.rows(), w.cols(), keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    AbsMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scheme: QuantScheme,
}

impl QuantSpec {
    pub fn new(bits: u8) -> Result<Self> {
        ensure!(bits == 4 || bits == 8, Argument, "only 4- and 8-bit grids are supported, got {bits}");
        Ok(Self {
            bits,
            scheme: QuantScheme::AbsMax,
        })
    }

    pub fn int8() -> Self {
        Self::new(8).expect("8 bits")
    }

    /// Largest representable magnitude, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> f64 {
        ((1u32 << (self.bits - 1)) - 1) as f64
    }
}

/// Snaps every entry to the symmetric grid `k · scale` with
/// `scale = max|w| / qmax`, rounding half away from zero, and returns the
/// dequantized values.
pub fn absmax_quantize_dequantize(w: &Matrix, spec: QuantSpec) -> Result<Matrix> {
    ensure!(w.is_finite(), Domain, "cannot quantize non-finite weights");
    let max = w.max_abs();
    if max == 0.0 {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    }
    let qmax = spec.qmax();
    let scale = max / qmax;
    let data = w
        .as_slice()
        .iter()
        .map(|&v| (v / scale).round().clamp(-qmax, qmax) * scale)
        .collect();
    Matrix::from_vec(w.rows(), w.cols(), data)
}

/// Grid step used by [`absmax_quantize_dequantize`].
pub fn absmax_scale(w: &Matrix, spec: QuantSpec) -> f64 {
    w.max_abs() / spec.qmax()
}

/// Activation outliers at component inputs, accumulated over probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierCensus {
    pub threshold: f64,
    pub per_component: BTreeMap<ComponentId, u64>,
    pub total: u64,
}

impl From<ActivationTrace> for OutlierCensus {
    fn from(t: ActivationTrace) -> Self {
        let total = t.total();
        Self {
            threshold: t.threshold,
            per_component: t.counts,
            total,
        }
    }
}

/// Default absolute outlier threshold.
pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 6.0;

pub fn outlier_census(model: &ToyModel, probes: &[TokenSequence], threshold: f64) -> Result<OutlierCensus> {
    ensure!(!probes.is_empty(), Argument, "outlier census needs probes");
    let mut trace = ActivationTrace::new(threshold);
    for p in probes {
        model.forward_with_trace(p, &mut trace)?;
    }
    Ok(trace.into())
}

/// What to do to one component: prune to a sparsity, quantize, or both
/// (pruning first).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
}

/// Per-component compression settings, keyed `"layer.kind"`.
///
/// ```toml
/// [components."0.attn_key"]
/// sparsity = 0.35
///
/// [components."1.mlp_down"]
/// bits = 8
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    #[serde(default)]
    pub components: BTreeMap<ComponentId, ComponentAction>,
}

impl CompressionPlan {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn prune(&mut self, id: ComponentId, level: SparsityLevel) -> &mut Self {
        self.components.entry(id).or_default().sparsity = Some(level);
        self
    }

    pub fn quantize(&mut self, id: ComponentId, spec: QuantSpec) -> &mut Self {
        self.components.entry(id).or_default().bits = Some(spec.bits);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (id, a) in &self.components {
            ensure!(
                a.sparsity.is_some() || a.bits.is_some(),
                Schema,
                "plan entry {id} sets neither sparsity nor bits"
            );
            if let Some(b) = a.bits {
                QuantSpec::new(b)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        self.validate()?;
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }
}

/// Returns a copy of `model` with `plan` applied; `model` is untouched.
pub fn apply_plan(model: &ToyModel, plan: &CompressionPlan) -> Result<ToyModel> {
    plan.validate()?;
    let mut out = model.clone();
    for (&id, action) in &plan.components {
        apply_action(&mut out, id, action)?;
    }
    Ok(out)
}

pub fn apply_action(model: &mut ToyModel, id: ComponentId, action: &ComponentAction) -> Result<()> {
    model.check_component(id)?;
    if let Some(level) = action.sparsity {
        let mask = magnitude_mask(model.component(id)?, model.mask(id)?, level)?;
        model.set_mask(id, Some(mask))?;
    }
    if let Some(bits) = action.bits {
        let q = absmax_quantize_dequantize(&model.effective(id), QuantSpec::new(bits)?)?;
        let keep: Option<Vec<bool>> = model.mask(id)?.map(|m| m.keep().to_vec());
        let raw = model.component_mut(id)?;
        for (i, (r, v)) in raw.as_mut_slice().iter_mut().zip(q.as_slice()).enumerate() {
            if keep.as_ref().is_none_or(|k| k[i]) {
                *r = *v;
            }
        }
    }
    Ok(())
}
