use divtok::metrics::{ProbeSet, ProbeSpec};
use divtok::model::{ModelConfig, TokenSequence, ToyModel};
use divtok::planner::{
    allocate, allocate_uniform, component_weights, probe_components, run_schedule, Allocation, NoopTrainer, Schedule,
    ScheduleOptions,
};

fn model() -> ToyModel {
    ToyModel::random_init(
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 40,
            max_seq: 48,
        },
        21,
    )
    .unwrap()
}

fn prefixes(k: usize) -> Vec<TokenSequence> {
    (0..k)
        .map(|i| TokenSequence::new((0..6).map(|j| ((i * 7 + j * 3) % 32) as u32).collect()))
        .collect()
}

#[test]
fn default_schedule_reaches_three_quarters_with_monotone_masks() {
    let m = model();
    let spec = ProbeSpec::new(6, 30).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = ScheduleOptions {
        allocation: Allocation::Balanced,
        out_dir: Some(dir.path().to_path_buf()),
    };
    let out = run_schedule(&m, &Schedule::default(), &prefixes(8), spec, &mut NoopTrainer, &opts).unwrap();
    assert_eq!(out.rounds.len(), 8);
    let s = out.model.overall_sparsity() * 100.0;
    assert!((s - 75.0).abs() <= 1.0, "{s}");
    let mut cumulative = 0.0;
    for (r, next) in out.rounds.iter().zip(out.rounds.iter().skip(1)) {
        for (id, &v) in &r.sparsity {
            assert!(next.sparsity[id] >= v, "{id} shrank from {v} to {}", next.sparsity[id]);
        }
    }
    for r in &out.rounds {
        cumulative += r.step;
        assert!((r.overall_sparsity * 100.0 - cumulative).abs() <= 1.0);
        assert!((r.plan.achieved - r.step).abs() < 1e-9);
        let d = dir.path().join(format!("round_{:02}", r.round));
        for f in ["plan.toml", "fdt_sparse_map.json", "report.json", "sparsity_map.csv"] {
            assert!(d.join(f).exists(), "{}", d.join(f).display());
        }
    }
    let grid = std::fs::read_to_string(dir.path().join("round_07/sparsity_map.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
}

#[test]
fn balanced_min_fdt_dominates_uniform() {
    let m = model();
    let probes = ProbeSet::build(&m, &prefixes(10), ProbeSpec::new(6, 30).unwrap()).unwrap();
    let weights = component_weights(&m);
    for step in [5.0, 10.0, 20.0] {
        let map = probe_components(&m, step, &probes).unwrap();
        let balanced = allocate(&map, step, &weights).unwrap();
        let uniform = allocate_uniform(&map, step, &weights).unwrap();
        assert!(balanced.min_fdt(&map) >= uniform.min_fdt(&map) - 1e-9, "step {step}");
        assert!((balanced.achieved - uniform.achieved).abs() < 1e-9);
    }
}
