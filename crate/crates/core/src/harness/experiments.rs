//! Experiments that are more than a single module call: the pruning
//! discrimination study and the proposition suites.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{magnitude_mask, random_mask, SparsityLevel};
use crate::error::{ensure, Error, Result};
use crate::metrics::{
    adversary_base, check_dppl_bound, construct_ppl_adversary, logit_sdt, ppl, score_completion, ProbeSet,
};
use crate::model::{ComponentId, TokenSequence, ToyModel};
use crate::numerics::{bootstrap_diff_se, mean, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminateConfig {
    pub trials: usize,
    /// Fraction of one component's entries removed per trial.
    pub fraction: f64,
    pub bootstrap: usize,
}

impl Default for DiscriminateConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            fraction: 0.001,
            bootstrap: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lowest,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub component: ComponentId,
    pub variant: Variant,
    pub fdt: usize,
    pub sdt: usize,
    pub dppl: f64,
    pub ppl: f64,
}

/// Mean of a metric under both variants and whether they differ by more
/// than two bootstrap standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub mean_lowest: f64,
    pub mean_random: f64,
    pub diff: f64,
    pub se: f64,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub config: DiscriminateConfig,
    pub trials: Vec<TrialRecord>,
    pub metrics: BTreeMap<String, Separation>,
}

impl Discrimination {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["trial", "component", "variant", "fdt", "sdt", "dppl", "ppl"])?;
        for t in &self.trials {
            out.write_record([
                t.trial.to_string(),
                t.component.to_string(),
                serde_json::to_value(t.variant)?.as_str().unwrap_or_default().to_string(),
                t.fdt.to_string(),
                t.sdt.to_string(),
                format!("{:?}", t.dppl),
                format!("{:?}", t.ppl),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Trial `i` prunes `fraction` of component `i mod C` of `base` once by
/// lowest magnitude and once at random, and scores both against probe `i`.
pub fn discriminate(base: &ToyModel, probes: &ProbeSet, config: &DiscriminateConfig, seed: u64) -> Result<Discrimination> {
    ensure!(
        probes.len() >= config.trials && config.trials >= 2,
        Argument,
        "need at least 2 trials and one probe per trial ({} probes, {} trials)",
        probes.len(),
        config.trials
    );
    let components = base.components();
    let n = probes.spec.prefix_len;
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let id = components[i % components.len()];
            let current = base.component_sparsity(id);
            let target = SparsityLevel::new((current + config.fraction).min(1.0))?;
            let w = base.component(id)?;
            let existing = base.mask(id)?;
            let masks = [
                (Variant::Lowest, magnitude_mask(w, existing, target)?),
                (Variant::Random, random_mask(w, existing, target, seed.wrapping_add(i as u64))?),
            ];
            let z = &probes.completions[i];
            masks
                .into_iter()
                .map(|(variant, mask)| {
                    let mut m = base.clone();
                    m.set_mask(id, Some(mask))?;
                    let o = score_completion(z, &m.forward(z)?, n)?;
                    Ok(TrialRecord {
                        trial: i,
                        component: id,
                        variant,
                        fdt: o.fdt,
                        sdt: o.sdt,
                        dppl: o.dppl,
                        ppl: o.ppl,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let trials: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();

    let column = |v: Variant, f: fn(&TrialRecord) -> f64| -> Vec<f64> {
        trials.iter().filter(|t| t.variant == v).map(f).collect()
    };
    let extractors: [(&str, fn(&TrialRecord) -> f64); 4] = [
        ("fdt", |t| t.fdt as f64),
        ("sdt", |t| t.sdt as f64),
        ("dppl", |t| t.dppl),
        ("ppl", |t| t.ppl),
    ];
    let mut metrics = BTreeMap::new();
    for (k, (name, f)) in extractors.into_iter().enumerate() {
        let a = column(Variant::Lowest, f);
        let b = column(Variant::Random, f);
        let se = bootstrap_diff_se(&a, &b, config.bootstrap, seed.wrapping_add(k as u64))?;
        let diff = mean(&a) - mean(&b);
        metrics.insert(
            name.to_string(),
            Separation {
                mean_lowest: mean(&a),
                mean_random: mean(&b),
                diff,
                se,
                separated: diff.abs() > 2.0 * se,
            },
        );
    }
    Ok(Discrimination {
        config: *config,
        trials,
        metrics,
    })
}

fn gaussian_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryResult {
    pub rows: usize,
    pub sdt: usize,
    pub ppl_base: f64,
    pub ppl_adversary: f64,
    pub delta_ppl: f64,
    pub passed: bool,
}

/// Builds a logit pair that disagrees on every row yet has nearly the same
/// perplexity on a random token sequence.
pub fn ppl_adversary_check(seed: u64, rows: usize, vocab: usize, delta: f64) -> Result<AdversaryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = gaussian_logits(&mut rng, rows, vocab, 1.0);
    let l = adversary_base(&raw, delta)?;
    let l_adv = construct_ppl_adversary(&l, delta)?;
    let tokens = Uniform::new(0, vocab as u32).expect("nonempty vocab");
    let y = TokenSequence::new((0..rows).map(|_| tokens.sample(&mut rng)).collect());
    let sdt = logit_sdt(&l, &l_adv, 1)?;
    let ppl_base = ppl(&y, &l, 1)?;
    let ppl_adversary = ppl(&y, &l_adv, 1)?;
    let delta_ppl = (ppl_adversary - ppl_base).abs();
    Ok(AdversaryResult {
        rows,
        sdt,
        ppl_base,
        ppl_adversary,
        delta_ppl,
        passed: sdt == rows && delta_ppl < 1e-3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub pairs: usize,
    pub violations: usize,
    /// Largest observed `SDT / bound` over pairs with a nonzero bound.
    pub max_ratio: f64,
    pub passed: bool,
}

/// Checks `SDT ≤ (N−n)/ln 2 · ln DPPL` on random logit pairs. The second
/// matrix is the first plus noise of a random scale, so pairs range from
/// near-identical to unrelated.
pub fn sdt_bound_check(seed: u64, pairs: usize, vocab: usize, total: usize, prefix: usize) -> Result<BoundResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Uniform::new(0.0f64, 1.0).expect("valid range");
    let tokens = Uniform::new(0, vocab as u32).expect("nonempty vocab");
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..pairs {
        let temp = 10f64.powf(2.0 * scale.sample(&mut rng) - 1.0);
        let l = gaussian_logits(&mut rng, total, vocab, temp);
        let noise_std = temp * 10f64.powf(3.0 * scale.sample(&mut rng) - 2.0);
        let noise = gaussian_logits(&mut rng, total, vocab, noise_std);
        let mut l2 = l.clone();
        l2.add_assign(&noise);
        let p = TokenSequence::new((0..prefix).map(|_| tokens.sample(&mut rng)).collect());
        let c = check_dppl_bound(&l, &l2, &p)?;
        if !c.holds {
            violations += 1;
        }
        if c.bound > 0.0 {
            max_ratio = max_ratio.max(c.sdt as f64 / c.bound);
        }
    }
    Ok(BoundResult {
        pairs,
        violations,
        max_ratio,
        passed: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ProbeSpec;
    use crate::model::ModelConfig;

    #[test]
    fn prop_suites_pass() {
        let p1 = ppl_adversary_check(0, 64, 16, 1e-6).unwrap();
        assert!(p1.passed, "{p1:?}");
        let p2 = sdt_bound_check(0, 200, 16, 32, 4).unwrap();
        assert!(p2.passed, "{p2:?}");
        assert!(p2.max_ratio > 0.0);
    }

    #[test]
    fn zero_fraction_is_indistinguishable() {
        let m = ToyModel::random_init(
            ModelConfig {
                vocab_size: 16,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 12,
                max_seq: 32,
            },
            1,
        )
        .unwrap();
        let prefixes: Vec<TokenSequence> = (0..8)
            .map(|i| TokenSequence::new(vec![i as u32, (i * 3 % 16) as u32, 2]))
            .collect();
        let probes = ProbeSet::build(&m, &prefixes, ProbeSpec::new(3, 12).unwrap()).unwrap();
        let cfg = DiscriminateConfig {
            trials: 8,
            fraction: 0.0,
            bootstrap: 100,
        };
        let d = discriminate(&m, &probes, &cfg, 0).unwrap();
        assert_eq!(d.trials.len(), 16);
        for s in d.metrics.values() {
            assert_eq!(s.diff, 0.0);
            assert!(!s.separated);
        }
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
    }
}
