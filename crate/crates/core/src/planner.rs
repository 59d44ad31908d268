//! FDT-balanced per-component sparsity allocation and the multi-round
//! prune/finetune schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{magnitude_mask, CompressionPlan, SparsityLevel};
use crate::error::{ensure, Error, Result};
use crate::metrics::{DivergenceReport, ProbeSet, ProbeSpec};
use crate::model::{ComponentId, ComponentKind, TokenSequence, ToyModel};
use crate::train::{LossTrace, SgdTrainer};

/// Piecewise-linear FDT₇₅ curve of one component over ADDED sparsity in
/// percent: `(0, N−n)`, `(step/2, m₁)`, `(3·step/2, m₂)`, `(100, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentAnchors {
    /// Sparsity already present, in percent.
    pub current: f64,
    pub points: [(f64, f64); 4],
}

impl ComponentAnchors {
    pub fn new(current: f64, step: f64, cap: f64, m1: f64, m2: f64) -> Result<Self> {
        ensure!((0.0..=100.0).contains(&current), Argument, "current sparsity {current} outside [0, 100]");
        let clamp = |v: f64| v.clamp(0.0, cap);
        // With nothing left to prune the model never changes, so the curve
        // is flat at the cap.
        let terminal = if current >= 100.0 { cap } else { 0.0 };
        let a = Self {
            current,
            points: [
                (0.0, cap),
                (step / 2.0, clamp(m1)),
                (1.5 * step, clamp(m2)),
                (100.0, terminal),
            ],
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            ensure!(w[0].0 < w[1].0, Invariant, "anchor sparsities must increase: {:?}", self.points);
        }
        ensure!(
            self.points.iter().all(|p| p.1 >= 0.0 && p.1.is_finite()),
            Invariant,
            "anchor FDT values must be finite and nonnegative"
        );
        Ok(())
    }

    /// Remaining prunable percent of the component.
    pub fn capacity(&self) -> f64 {
        (100.0 - self.current).max(0.0)
    }

    /// Curve value at added sparsity `s`.
    pub fn value_at(&self, s: f64) -> f64 {
        let p = &self.points;
        if s <= p[0].0 {
            return p[0].1;
        }
        for w in p.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if s <= x1 {
                return y0 + (y1 - y0) * (s - x0) / (x1 - x0);
            }
        }
        p[3].1
    }
}

/// Largest added sparsity at which the piecewise-linear curve through
/// `anchors` is still at least `f`. Values of `f` above every anchor clamp to
/// 0; `f ≤ 0` reaches the terminal anchor.
pub fn interpolate_max_sparsity(anchors: &[(f64, f64)], f: f64) -> f64 {
    let Some(&(x_last, y_last)) = anchors.last() else {
        return 0.0;
    };
    if y_last >= f {
        return x_last;
    }
    for w in anchors.windows(2).rev() {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        // Here y1 < f; the curve crosses f inside this segment if y0 ≥ f.
        if y0 >= f {
            return x0 + (y0 - f) / (y0 - y1) * (x1 - x0);
        }
    }
    anchors[0].0
}

/// Probed anchors for every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdtSparseMap {
    pub step: f64,
    /// `N − n`, the FDT of an unchanged model.
    pub cap: f64,
    pub components: BTreeMap<ComponentId, ComponentAnchors>,
}

impl FdtSparseMap {
    /// Uniform constant anchors, mostly useful for tests.
    pub fn from_anchors(step: f64, cap: f64, components: BTreeMap<ComponentId, ComponentAnchors>) -> Self {
        Self { step, cap, components }
    }
}

fn check_step(step: f64) -> Result<()> {
    ensure!(
        step > 0.0 && step < 100.0,
        Argument,
        "step {step} must lie in (0, 100)"
    );
    ensure!(
        1.5 * step < 100.0,
        Argument,
        "step {step} puts the second probe at or beyond 100%"
    );
    Ok(())
}

/// `model` with only `id` further pruned by `added` percent of its entries.
pub fn prune_component(model: &ToyModel, id: ComponentId, added: f64) -> Result<ToyModel> {
    let current = model.component_sparsity(id) * 100.0;
    let target = SparsityLevel::from_percent((current + added).min(100.0))?;
    let mut m = model.clone();
    let mask = magnitude_mask(m.component(id)?, m.mask(id)?, target)?;
    m.set_mask(id, Some(mask))?;
    Ok(m)
}

/// Measures FDT₇₅ against `probes` (completions of `base`) with each
/// component alone pruned by an extra `step/2` and `3·step/2` percent.
pub fn probe_components(base: &ToyModel, step: f64, probes: &ProbeSet) -> Result<FdtSparseMap> {
    check_step(step)?;
    ensure!(!probes.is_empty(), Argument, "probing needs a nonempty probe set");
    let cap = probes.spec.completion_len() as f64;
    let components = base
        .components()
        .into_par_iter()
        .map(|id| {
            let current = base.component_sparsity(id) * 100.0;
            let m1 = probes.fdt75(&prune_component(base, id, step / 2.0)?)?;
            let m2 = probes.fdt75(&prune_component(base, id, 1.5 * step)?)?;
            Ok((id, ComponentAnchors::new(current, step, cap, m1, m2)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(FdtSparseMap { step, cap, components })
}

/// Per-component allocation for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    /// Absolute target per component.
    pub targets: BTreeMap<ComponentId, SparsityLevel>,
    /// Added sparsity per component, percent.
    pub added: BTreeMap<ComponentId, f64>,
    /// Parameter-weighted mean of `added`.
    pub achieved: f64,
    pub target_step: f64,
    /// Chosen FDT floor.
    pub f_star: usize,
}

impl SparsityPlan {
    pub fn to_compression_plan(&self) -> CompressionPlan {
        let mut p = CompressionPlan::default();
        for (&id, &t) in &self.targets {
            p.prune(id, t);
        }
        p
    }

    /// Smallest curve value over components at the allocated sparsities.
    pub fn min_fdt(&self, map: &FdtSparseMap) -> f64 {
        self.added
            .iter()
            .map(|(id, &s)| map.components[id].value_at(s))
            .fold(f64::INFINITY, f64::min)
    }
}

fn weighted_mean(values: &BTreeMap<ComponentId, f64>, weights: &BTreeMap<ComponentId, usize>) -> f64 {
    let total: f64 = weights.values().map(|&w| w as f64).sum();
    values.iter().map(|(id, v)| v * weights[id] as f64).sum::<f64>() / total
}

fn plan_at(map: &FdtSparseMap, f: f64) -> BTreeMap<ComponentId, f64> {
    map.components
        .iter()
        .map(|(&id, a)| (id, interpolate_max_sparsity(&a.points, f).min(a.capacity())))
        .collect()
}

/// Descends the FDT floor `f` from `N − n` in unit steps until the
/// parameter-weighted mean added sparsity reaches `target_step`. The plan is
/// then blended linearly between the allocations at `f_star + 1` and
/// `f_star` so the weighted mean lands exactly on the target.
pub fn allocate(
    map: &FdtSparseMap,
    target_step: f64,
    weights: &BTreeMap<ComponentId, usize>,
) -> Result<SparsityPlan> {
    ensure!(
        target_step > 0.0 && target_step < 100.0,
        Argument,
        "target step {target_step} must lie in (0, 100)"
    );
    ensure!(!map.components.is_empty(), Argument, "no components to allocate");
    for id in map.components.keys() {
        ensure!(weights.contains_key(id), Argument, "no weight for component {id}");
    }
    let weights: BTreeMap<ComponentId, usize> = map.components.keys().map(|id| (*id, weights[id])).collect();
    ensure!(weights.values().any(|&w| w > 0), Argument, "all component weights are zero");

    let top = map.cap.floor() as i64;
    // Above the cap nothing can be pruned, which seeds the blend.
    let none = plan_at(map, (top + 1) as f64);
    let none_mean = weighted_mean(&none, &weights);
    let mut prev = Some((none, none_mean));
    for f in (0..=top).rev() {
        let alloc = plan_at(map, f as f64);
        let mean = weighted_mean(&alloc, &weights);
        if mean >= target_step {
            let added = match prev {
                Some((lo, lo_mean)) if mean > lo_mean => {
                    let lambda = (target_step - lo_mean) / (mean - lo_mean);
                    lo.iter()
                        .map(|(id, &a)| (*id, a + lambda * (alloc[id] - a)))
                        .collect()
                }
                _ => alloc,
            };
            let achieved = weighted_mean(&added, &weights);
            let targets = added
                .iter()
                .map(|(id, &a)| {
                    let c = map.components[id].current;
                    Ok((*id, SparsityLevel::from_percent((c + a).min(100.0))?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            return Ok(SparsityPlan {
                targets,
                added,
                achieved,
                target_step,
                f_star: f as usize,
            });
        }
        prev = Some((alloc, mean));
    }
    Err(Error::Invariant(format!(
        "no FDT floor reaches a weighted mean of {target_step}% (remaining capacity too small)"
    )))
}

/// Every component gets `step` added percent (capped at its capacity).
pub fn allocate_uniform(map: &FdtSparseMap, step: f64, weights: &BTreeMap<ComponentId, usize>) -> Result<SparsityPlan> {
    let added: BTreeMap<ComponentId, f64> = map
        .components
        .iter()
        .map(|(&id, a)| (id, step.min(a.capacity())))
        .collect();
    let w: BTreeMap<ComponentId, usize> = map.components.keys().map(|id| (*id, weights[id])).collect();
    let targets = added
        .iter()
        .map(|(id, &a)| {
            let c = map.components[id].current;
            Ok((*id, SparsityLevel::from_percent((c + a).min(100.0))?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SparsityPlan {
        targets,
        achieved: weighted_mean(&added, &w),
        added,
        target_step: step,
        f_star: 0,
    })
}

/// Parameter count of every component of `model`.
pub fn component_weights(model: &ToyModel) -> BTreeMap<ComponentId, usize> {
    model
        .components()
        .into_iter()
        .map(|id| (id, model.config.component_numel(id.kind)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Percent of component parameters removed per round.
    pub increments: Vec<f64>,
    pub masked_steps: usize,
    pub dense_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            increments: vec![20.0, 15.0, 10.0, 10.0, 5.0, 5.0, 5.0, 5.0],
            masked_steps: 450,
            dense_steps: 50,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.increments.is_empty(), Argument, "schedule has no rounds");
        ensure!(
            self.increments.iter().all(|&s| s > 0.0),
            Argument,
            "schedule increments must be positive"
        );
        let total: f64 = self.increments.iter().sum();
        ensure!(total <= 100.0 + 1e-9, Argument, "schedule removes {total}% > 100%");
        for &s in &self.increments {
            check_step(s)?;
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.increments.iter().sum()
    }
}

/// Finetuning between pruning rounds.
pub trait Trainer {
    fn train_round(&mut self, model: &mut ToyModel, round: usize) -> Result<LossTrace>;
}

/// Leaves the model alone; turns a schedule into one-shot pruning.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopTrainer;

impl Trainer for NoopTrainer {
    fn train_round(&mut self, _model: &mut ToyModel, _round: usize) -> Result<LossTrace> {
        Ok(LossTrace::default())
    }
}

impl Trainer for SgdTrainer {
    fn train_round(&mut self, model: &mut ToyModel, round: usize) -> Result<LossTrace> {
        SgdTrainer::train_round(self, model, round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    #[default]
    Balanced,
    Uniform,
}

#[derive(Debug, Clone, Default)]
pub struct ScheduleOptions {
    pub allocation: Allocation,
    /// Round artifacts are written below this directory when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub step: f64,
    pub map: Option<FdtSparseMap>,
    pub plan: SparsityPlan,
    /// Against the original base model, after finetuning.
    pub report: DivergenceReport,
    pub loss: LossTrace,
    pub overall_sparsity: f64,
    pub sparsity: BTreeMap<ComponentId, f64>,
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub model: ToyModel,
    pub rounds: Vec<RoundRecord>,
}

/// Runs every round: probe the current model on `prefixes`, allocate, apply
/// magnitude masks, finetune, and score against the ORIGINAL base.
pub fn run_schedule(
    base: &ToyModel,
    schedule: &Schedule,
    prefixes: &[TokenSequence],
    spec: ProbeSpec,
    trainer: &mut dyn Trainer,
    options: &ScheduleOptions,
) -> Result<ScheduleOutcome> {
    schedule.validate()?;
    let reference = ProbeSet::build(base, prefixes, spec)?;
    let weights = component_weights(base);
    let mut model = base.clone();
    // Intended cumulative sparsity per component, in percent. Masks round
    // counts down, so reading the current level back from them would let the
    // shortfall compound over rounds.
    let mut planned: BTreeMap<ComponentId, f64> = model
        .components()
        .into_iter()
        .map(|id| (id, model.component_sparsity(id) * 100.0))
        .collect();
    let mut rounds = Vec::new();
    for (round, &step) in schedule.increments.iter().enumerate() {
        let (map, plan) = match options.allocation {
            Allocation::Balanced => {
                let probes = if round == 0 {
                    reference.clone()
                } else {
                    ProbeSet::build(&model, prefixes, spec)?
                };
                let mut map = probe_components(&model, step, &probes)?;
                for (id, a) in map.components.iter_mut() {
                    a.current = planned[id];
                }
                let plan = allocate(&map, step, &weights)?;
                (Some(map), plan)
            }
            Allocation::Uniform => {
                let cap = spec.completion_len() as f64;
                let components = planned
                    .iter()
                    .map(|(&id, &c)| Ok((id, ComponentAnchors::new(c, step, cap, cap, cap)?)))
                    .collect::<Result<_>>()?;
                let map = FdtSparseMap::from_anchors(step, cap, components);
                (None, allocate_uniform(&map, step, &weights)?)
            }
        };
        for (id, t) in &plan.targets {
            planned.insert(*id, t.fraction() * 100.0);
        }
        model = crate::compress::apply_plan(&model, &plan.to_compression_plan())?;
        log::info!(
            "round {round}: step {step}%, f* {}, sparsity {:.2}%",
            plan.f_star,
            model.overall_sparsity() * 100.0
        );
        let loss = trainer.train_round(&mut model, round)?;
        let report = reference.evaluate(&model)?;
        let sparsity = model
            .components()
            .into_iter()
            .map(|id| (id, model.component_sparsity(id)))
            .collect();
        let record = RoundRecord {
            round,
            step,
            map,
            plan,
            report,
            loss,
            overall_sparsity: model.overall_sparsity(),
            sparsity,
        };
        if let Some(dir) = &options.out_dir {
            write_round(&dir.join(format!("round_{round:02}")), &record)?;
        }
        rounds.push(record);
    }
    Ok(ScheduleOutcome { model, rounds })
}

fn write_round(dir: &Path, r: &RoundRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    r.plan.to_compression_plan().save(&dir.join("plan.toml"))?;
    let alloc = serde_json::to_string_pretty(&r.plan)?;
    std::fs::write(dir.join("allocation.json"), alloc).map_err(|e| Error::io(dir, e))?;
    if let Some(map) = &r.map {
        let json = serde_json::to_string_pretty(map)?;
        std::fs::write(dir.join("fdt_sparse_map.json"), json).map_err(|e| Error::io(dir, e))?;
    }
    r.report.save(dir, "report")?;
    r.loss.save(&dir.join("loss_trace.csv"))?;
    write_sparsity_map(&dir.join("sparsity_map.csv"), &r.sparsity)
}

/// Layer × kind grid of component sparsities.
pub fn write_sparsity_map(path: &Path, sparsity: &BTreeMap<ComponentId, f64>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["layer".to_string()];
    header.extend(ComponentKind::ALL.iter().map(|k| k.to_string()));
    w.write_record(&header)?;
    let layers = sparsity.keys().map(|id| id.layer + 1).max().unwrap_or(0);
    for l in 0..layers {
        let mut row = vec![l.to_string()];
        for k in ComponentKind::ALL {
            let v = sparsity.get(&ComponentId::new(l, k)).copied().unwrap_or(0.0);
            row.push(format!("{v:?}"));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    const EXAMPLE: [(f64, f64); 4] = [(0.0, 100.0), (2.5, 80.0), (7.5, 40.0), (100.0, 0.0)];

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_max_sparsity(&EXAMPLE, 0.0), 100.0);
        assert_eq!(interpolate_max_sparsity(&EXAMPLE, 100.0), 0.0);
        assert!((interpolate_max_sparsity(&EXAMPLE, 60.0) - 5.0).abs() < 1e-12);
        assert_eq!(interpolate_max_sparsity(&EXAMPLE, 150.0), 0.0);
    }

    #[test]
    fn interpolation_takes_rightmost_crossing() {
        // Non-monotone curve: dips to 10 then recovers to 50.
        let a = [(0.0, 100.0), (5.0, 10.0), (15.0, 50.0), (100.0, 0.0)];
        let s = interpolate_max_sparsity(&a, 40.0);
        assert!((s - (15.0 + 10.0 / 50.0 * 85.0)).abs() < 1e-12);
    }

    fn ids(n: usize) -> Vec<ComponentId> {
        (0..n).map(|i| ComponentId::new(i / 7, ComponentKind::ALL[i % 7])).collect()
    }

    fn map_of(anchors: &[(f64, f64)], step: f64) -> FdtSparseMap {
        let components = ids(anchors.len())
            .into_iter()
            .zip(anchors)
            .map(|(id, &(m1, m2))| (id, ComponentAnchors::new(0.0, step, 100.0, m1, m2).unwrap()))
            .collect();
        FdtSparseMap::from_anchors(step, 100.0, components)
    }

    #[test]
    fn identical_components_get_uniform_allocation() {
        let map = map_of(&[(70.0, 30.0); 4], 10.0);
        let w = ids(4).into_iter().map(|id| (id, 100)).collect();
        let plan = allocate(&map, 10.0, &w).unwrap();
        for a in plan.added.values() {
            assert!((a - 10.0).abs() < 1e-9, "{a}");
        }
        assert!((plan.achieved - 10.0).abs() < 1e-9);
    }

    #[test]
    fn robust_component_absorbs_more() {
        let map = map_of(&[(99.0, 97.0), (40.0, 5.0)], 10.0);
        let ids = ids(2);
        let w = ids.iter().map(|id| (*id, 100)).collect();
        let plan = allocate(&map, 10.0, &w).unwrap();
        assert!(plan.added[&ids[0]] > plan.added[&ids[1]]);
        assert!((plan.achieved - 10.0).abs() < 1e-9);
        assert!(plan.min_fdt(&map) >= plan.f_star as f64 - 1e-9);
    }

    #[test]
    fn weights_shift_the_budget() {
        // A heavy component pulls the mean: with weights 3:1 the weighted
        // mean still hits the target exactly.
        let map = map_of(&[(90.0, 60.0), (50.0, 20.0)], 10.0);
        let ids = ids(2);
        let w: BTreeMap<_, _> = [(ids[0], 300), (ids[1], 100)].into();
        let plan = allocate(&map, 10.0, &w).unwrap();
        let mean = (3.0 * plan.added[&ids[0]] + plan.added[&ids[1]]) / 4.0;
        assert!((mean - 10.0).abs() < 1e-9);
    }

    #[test]
    fn allocation_respects_capacity() {
        let mut map = map_of(&[(90.0, 80.0), (90.0, 80.0)], 10.0);
        let ids = ids(2);
        map.components.insert(ids[0], ComponentAnchors::new(95.0, 10.0, 100.0, 90.0, 80.0).unwrap());
        let w = ids.iter().map(|id| (*id, 100)).collect();
        let plan = allocate(&map, 10.0, &w).unwrap();
        assert!(plan.added[&ids[0]] <= 5.0 + 1e-12);
        assert!((plan.achieved - 10.0).abs() < 1e-9);
        assert!(plan.targets[&ids[0]].fraction() <= 1.0);
        let full = ComponentAnchors::new(100.0, 10.0, 100.0, 100.0, 100.0).unwrap();
        assert!(full.points.iter().all(|p| p.1 == 100.0));
    }

    #[test]
    fn allocation_errors() {
        let map = map_of(&[(90.0, 80.0)], 10.0);
        let w = ids(1).into_iter().map(|id| (id, 1)).collect();
        assert!(allocate(&map, 0.0, &w).is_err());
        assert!(allocate(&map, 100.0, &w).is_err());
        assert!(allocate(&map, 10.0, &BTreeMap::new()).is_err());
        let mut tight = map.clone();
        for a in tight.components.values_mut() {
            *a = ComponentAnchors::new(95.0, 10.0, 100.0, 90.0, 80.0).unwrap();
        }
        assert!(matches!(allocate(&tight, 10.0, &w), Err(Error::Invariant(_))));
        assert!(check_step(70.0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::default().validate().is_ok());
        assert!((Schedule::default().total() - 75.0).abs() < 1e-12);
        let bad = Schedule {
            increments: vec![60.0, 50.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> ToyModel {
        ToyModel::random_init(
            ModelConfig {
                vocab_size: 16,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 12,
                max_seq: 32,
            },
            8,
        )
        .unwrap()
    }

    fn prefixes(k: usize) -> Vec<TokenSequence> {
        (0..k)
            .map(|i| TokenSequence::new((0..4).map(|j| ((i * 5 + j * 3) % 16) as u32).collect()))
            .collect()
    }

    #[test]
    fn probing_anchors_and_order_independence() {
        let m = tiny();
        let spec = ProbeSpec::new(4, 16).unwrap();
        let probes = ProbeSet::build(&m, &prefixes(6), spec).unwrap();
        let map = probe_components(&m, 10.0, &probes).unwrap();
        assert_eq!(map.components.len(), 7);
        for (id, a) in &map.components {
            assert_eq!(a.points[0], (0.0, 12.0));
            let again = prune_component(&m, *id, 5.0).unwrap();
            assert_eq!(probes.fdt75(&again).unwrap(), a.points[1].1);
        }
        assert_eq!(probes.fdt75(&prune_component(&m, ids(1)[0], 0.0).unwrap()).unwrap(), 12.0);
        assert!(probe_components(&m, 0.0, &probes).is_err());
    }

    #[test]
    fn one_shot_schedule_hits_target() {
        let m = tiny();
        let spec = ProbeSpec::new(4, 16).unwrap();
        let schedule = Schedule {
            increments: vec![20.0],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = ScheduleOptions {
            allocation: Allocation::Balanced,
            out_dir: Some(dir.path().to_path_buf()),
        };
        let out = run_schedule(&m, &schedule, &prefixes(6), spec, &mut NoopTrainer, &opts).unwrap();
        let s = out.model.overall_sparsity() * 100.0;
        assert!((s - 20.0).abs() <= 1.0, "{s}");
        for f in ["plan.toml", "report.json", "report.csv", "loss_trace.csv", "sparsity_map.csv"] {
            assert!(dir.path().join("round_00").join(f).exists(), "{f}");
        }
        let plan = CompressionPlan::load(&dir.path().join("round_00/plan.toml")).unwrap();
        assert_eq!(crate::compress::apply_plan(&m, &plan).unwrap(), out.model);
    }

    #[test]
    fn uniform_schedule_reaches_total() {
        let m = tiny();
        let spec = ProbeSpec::new(4, 16).unwrap();
        let opts = ScheduleOptions {
            allocation: Allocation::Uniform,
            out_dir: None,
        };
        let out = run_schedule(&m, &Schedule::default(), &prefixes(3), spec, &mut NoopTrainer, &opts).unwrap();
        for id in m.components() {
            assert!((out.model.component_sparsity(id) - 0.75).abs() < 0.01);
        }
        assert!((out.model.overall_sparsity() - 0.75).abs() <= 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn allocation_contract(
            raw in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..60.0, 1usize..1000), 1..8),
            step in 1.0f64..30.0,
        ) {
            let ids = ids(raw.len());
            let components = ids
                .iter()
                .zip(&raw)
                .map(|(id, &(m1, m2, cur, _))| (*id, ComponentAnchors::new(cur, step, 100.0, m1, m2).unwrap()))
                .collect();
            let map = FdtSparseMap::from_anchors(step, 100.0, components);
            let w: BTreeMap<_, _> = ids.iter().zip(&raw).map(|(id, r)| (*id, r.3)).collect();
            let plan = allocate(&map, step, &w).unwrap();
            prop_assert!((plan.achieved - step).abs() <= 1.0);
            for (id, t) in &plan.targets {
                prop_assert!(t.fraction() * 100.0 >= map.components[id].current - 1e-9);
            }
            if plan.f_star < 100 {
                let next = plan_at(&map, (plan.f_star + 1) as f64);
                prop_assert!(weighted_mean(&next, &w) < step);
            }
        }
    }
}
