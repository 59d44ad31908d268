use divtok::metrics::{ProbeSet, ProbeSpec};
use divtok::model::{ComponentId, ComponentKind, ModelConfig, TokenSequence, ToyModel};
use divtok::quantsearch::{exhaustive_best, run_search, top_k_plan, Criterion, SearchConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 24,
        max_seq: 48,
    }
}

fn probes(m: &ToyModel, seed: u64, count: usize) -> ProbeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefixes: Vec<TokenSequence> = (0..count)
        .map(|_| TokenSequence::new((0..6).map(|_| rng.random_range(0..32)).collect()))
        .collect();
    ProbeSet::build(m, &prefixes, ProbeSpec::new(6, 40).unwrap()).unwrap()
}

/// Layer-0 value matrix carries an entry 10^4 times its largest weight in
/// an input row the layer norm zeroes out. The model is unchanged, but
/// AbsMax rounds every other entry of that matrix to zero.
fn poisoned(seed: u64) -> (ToyModel, ComponentId) {
    let mut m = ToyModel::random_init(config(), seed).unwrap();
    m.layers[0].attn_norm[3] = 0.0;
    let id = ComponentId::new(0, ComponentKind::AttnValue);
    let w = m.component_mut(id).unwrap();
    let big = 1e4 * w.max_abs();
    w.set(3, 0, big);
    (m, id)
}

#[test]
fn poison_component_is_deferred_until_forced() {
    let (m, poison) = poisoned(4);
    let p = probes(&m, 4, 12);
    let log = run_search(&m, &p, &SearchConfig::default()).unwrap();
    let c = m.components().len();
    assert_eq!(log.depths.len(), c + 1);
    for d in 1..c {
        let best = log.best_at(d).unwrap();
        assert!(!best.components.contains(&poison), "depth {d} best node quantizes the poison");
    }
    assert!(log.best_at(c).unwrap().components.contains(&poison));
    let full = top_k_plan(&log, c).unwrap();
    assert_eq!(full.len(), c);
}

#[test]
fn beam_matches_exhaustive_depth_three() {
    for seed in 0..3 {
        let m = ToyModel::random_init(config(), 50 + seed).unwrap();
        let p = probes(&m, seed, 8);
        let cfg = SearchConfig {
            bits: 4,
            max_depth: Some(3),
            ..SearchConfig::default()
        };
        let log = run_search(&m, &p, &cfg).unwrap();
        let oracle = exhaustive_best(&m, &p, 3, &cfg).unwrap();
        assert_eq!(log.best_at(3).unwrap().score, oracle.score, "seed {seed}");
    }
}

#[test]
fn every_criterion_produces_a_full_log() {
    let m = ToyModel::random_init(config(), 8).unwrap();
    let p = probes(&m, 8, 6);
    for criterion in [Criterion::Fdt, Criterion::Dppl, Criterion::Ppl] {
        let cfg = SearchConfig {
            criterion,
            width: 3,
            max_depth: Some(4),
            bits: 4,
            ..SearchConfig::default()
        };
        let log = run_search(&m, &p, &cfg).unwrap();
        assert_eq!(log.depths.len(), 5);
        for (d, rec) in log.depths.iter().enumerate() {
            assert_eq!(rec.depth, d);
            assert!(rec.frontier.iter().all(|n| n.depth() == d));
            assert!(rec.frontier.len() <= 3);
        }
        let dir = tempfile::tempdir().unwrap();
        log.save(dir.path()).unwrap();
        let lines = std::fs::read_to_string(dir.path().join("nodes.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), log.evaluations());
    }
}
