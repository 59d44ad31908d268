//! Beam search over which components to quantize, ranked by a divergence
//! metric of the quantized model against its base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{absmax_quantize_dequantize, CompressionPlan, QuantSpec, DEFAULT_OUTLIER_THRESHOLD};
use crate::error::{ensure, Error, Result};
use crate::metrics::ProbeSet;
use crate::model::{ComponentId, ComponentKind, ToyModel};
use crate::numerics::{mean, quantile, Quantile};

pub type ComponentSet = BTreeSet<ComponentId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Mean FDT, higher is better.
    Fdt,
    /// Mean DPPL, lower is better.
    Dppl,
    /// Mean PPL, lower is better.
    Ppl,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Fdt => "fdt",
            Criterion::Dppl => "dppl",
            Criterion::Ppl => "ppl",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fdt" | "fdt75" => Ok(Criterion::Fdt),
            "dppl" => Ok(Criterion::Dppl),
            "ppl" => Ok(Criterion::Ppl),
            _ => Err(Error::Argument(format!("unknown criterion {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub components: ComponentSet,
    pub score: f64,
    pub fdt75: f64,
    pub mean_fdt: f64,
    pub mean_sdt: f64,
    pub dppl: f64,
    pub ppl: f64,
    pub outliers: u64,
}

impl SearchNode {
    pub fn depth(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub width: usize,
    pub criterion: Criterion,
    pub bits: u8,
    /// Deepest level explored; `None` means every component.
    pub max_depth: Option<usize>,
    /// Width 1 with a single ranking of components reused at every depth.
    pub greedy: bool,
    pub outlier_threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            width: 10,
            criterion: Criterion::Fdt,
            bits: 8,
            max_depth: None,
            greedy: false,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, components: usize) -> Result<()> {
        ensure!(self.width >= 1, Argument, "beam width must be at least 1");
        QuantSpec::new(self.bits)?;
        if let Some(d) = self.max_depth {
            ensure!(d <= components, Argument, "depth {d} exceeds {components} components");
        }
        Ok(())
    }

    pub fn quant(&self) -> QuantSpec {
        QuantSpec::new(self.bits).expect("validated bits")
    }
}

/// `base` with every component in `set` AbsMax quantized.
pub fn quantize_set(base: &ToyModel, set: &ComponentSet, spec: QuantSpec) -> Result<ToyModel> {
    let mut m = base.clone();
    for &id in set {
        let q = absmax_quantize_dequantize(&m.effective(id), spec)?;
        m.set_component(id, q)?;
    }
    Ok(m)
}

/// Scores one component set against the probe set's base completions.
pub fn evaluate(base: &ToyModel, probes: &ProbeSet, set: ComponentSet, config: &SearchConfig) -> Result<SearchNode> {
    let model = quantize_set(base, &set, config.quant())?;
    let (outcomes, trace) = probes.outcomes_with_trace(&model, config.outlier_threshold)?;
    let fdts: Vec<f64> = outcomes.iter().map(|o| o.fdt as f64).collect();
    let mean_fdt = mean(&fdts);
    let dppl = mean(&outcomes.iter().map(|o| o.dppl).collect::<Vec<_>>());
    let ppl = mean(&outcomes.iter().map(|o| o.ppl).collect::<Vec<_>>());
    let score = match config.criterion {
        Criterion::Fdt => mean_fdt,
        Criterion::Dppl => dppl,
        Criterion::Ppl => ppl,
    };
    Ok(SearchNode {
        components: set,
        score,
        fdt75: quantile(&fdts, Quantile::Q75)?,
        mean_fdt,
        mean_sdt: mean(&outcomes.iter().map(|o| o.sdt as f64).collect::<Vec<_>>()),
        dppl,
        ppl,
        outliers: trace.total(),
    })
}

/// Orders `a` before `b` when it ranks better under `criterion`; ties fall
/// back to the lexicographic order of the component sets.
pub fn rank_cmp(a: &SearchNode, b: &SearchNode, criterion: Criterion) -> std::cmp::Ordering {
    let by_score = match criterion {
        Criterion::Fdt => b.score.total_cmp(&a.score),
        Criterion::Dppl | Criterion::Ppl => a.score.total_cmp(&b.score),
    };
    by_score.then_with(|| a.components.cmp(&b.components))
}

/// Every one-component extension of every frontier node, each set once,
/// scored and returned in rank order.
pub fn expand(
    frontier: &[SearchNode],
    base: &ToyModel,
    probes: &ProbeSet,
    config: &SearchConfig,
) -> Result<Vec<SearchNode>> {
    ensure!(!frontier.is_empty(), Argument, "empty frontier");
    let depth = frontier[0].depth();
    ensure!(
        frontier.iter().all(|n| n.depth() == depth),
        Argument,
        "frontier nodes must share a depth"
    );
    let all = base.components();
    let mut sets: BTreeSet<ComponentSet> = BTreeSet::new();
    for node in frontier {
        for &c in &all {
            if !node.components.contains(&c) {
                let mut s = node.components.clone();
                s.insert(c);
                sets.insert(s);
            }
        }
    }
    let mut children = sets
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| evaluate(base, probes, s, config))
        .collect::<Result<Vec<_>>>()?;
    children.sort_by(|a, b| rank_cmp(a, b, config.criterion));
    Ok(children)
}

/// The best `width` nodes.
pub fn select(mut children: Vec<SearchNode>, config: &SearchConfig) -> Vec<SearchNode> {
    children.sort_by(|a, b| rank_cmp(a, b, config.criterion));
    children.truncate(config.width);
    children
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRecord {
    pub depth: usize,
    pub frontier: Vec<SearchNode>,
    pub mean_score: f64,
    pub mean_fdt: f64,
    pub mean_sdt: f64,
    pub mean_dppl: f64,
    pub mean_ppl: f64,
    pub mean_outliers: f64,
    /// Kinds quantized in the best node at this depth.
    pub kinds: BTreeMap<ComponentKind, usize>,
}

impl DepthRecord {
    fn new(depth: usize, frontier: Vec<SearchNode>) -> Self {
        let avg = |f: fn(&SearchNode) -> f64| mean(&frontier.iter().map(f).collect::<Vec<_>>());
        let mut kinds = BTreeMap::new();
        if let Some(best) = frontier.first() {
            for id in &best.components {
                *kinds.entry(id.kind).or_insert(0) += 1;
            }
        }
        Self {
            depth,
            mean_score: avg(|n| n.score),
            mean_fdt: avg(|n| n.mean_fdt),
            mean_sdt: avg(|n| n.mean_sdt),
            mean_dppl: avg(|n| n.dppl),
            mean_ppl: avg(|n| n.ppl),
            mean_outliers: avg(|n| n.outliers as f64),
            kinds,
            frontier,
        }
    }

    pub fn best(&self) -> &SearchNode {
        &self.frontier[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub config: SearchConfig,
    pub depths: Vec<DepthRecord>,
    /// Every evaluated node in evaluation order.
    pub evaluated: Vec<SearchNode>,
}

impl SearchLog {
    pub fn evaluations(&self) -> usize {
        self.evaluated.len()
    }

    pub fn best_at(&self, depth: usize) -> Option<&SearchNode> {
        self.depths.get(depth).map(DepthRecord::best)
    }

    /// Depths where the mean frontier score got better than the previous
    /// depth, which the premise "more quantization never helps" rules out.
    pub fn improving_depths(&self) -> Vec<usize> {
        self.depths
            .windows(2)
            .filter(|w| rank_better(w[1].mean_score, w[0].mean_score, self.config.criterion))
            .map(|w| w[1].depth)
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for n in &self.evaluated {
            let rec = NodeRecord::from(n);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    pub fn write_frontier_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "depth", "rank", "components", "score", "fdt75", "mean_fdt", "mean_sdt", "dppl", "ppl", "outliers",
        ])?;
        for d in &self.depths {
            for (rank, n) in d.frontier.iter().enumerate() {
                out.write_record([
                    d.depth.to_string(),
                    rank.to_string(),
                    join_set(&n.components),
                    format!("{:?}", n.score),
                    format!("{:?}", n.fdt75),
                    format!("{:?}", n.mean_fdt),
                    format!("{:?}", n.mean_sdt),
                    format!("{:?}", n.dppl),
                    format!("{:?}", n.ppl),
                    n.outliers.to_string(),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nodes = dir.join("nodes.jsonl");
        let f = std::fs::File::create(&nodes).map_err(|e| Error::io(&nodes, e))?;
        self.write_jsonl(std::io::BufWriter::new(f))?;
        let frontier = dir.join("frontier.csv");
        let f = std::fs::File::create(&frontier).map_err(|e| Error::io(&frontier, e))?;
        self.write_frontier_csv(f)
    }
}

fn rank_better(a: f64, b: f64, c: Criterion) -> bool {
    match c {
        Criterion::Fdt => a > b,
        Criterion::Dppl | Criterion::Ppl => a < b,
    }
}

fn join_set(s: &ComponentSet) -> String {
    s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

/// One line of the node log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub depth: usize,
    pub components: Vec<ComponentId>,
    pub fdt75: f64,
    pub mean_fdt: f64,
    pub mean_sdt: f64,
    pub dppl: f64,
    pub ppl: f64,
    pub outliers: u64,
}

impl From<&SearchNode> for NodeRecord {
    fn from(n: &SearchNode) -> Self {
        Self {
            depth: n.depth(),
            components: n.components.iter().copied().collect(),
            fdt75: n.fdt75,
            mean_fdt: n.mean_fdt,
            mean_sdt: n.mean_sdt,
            dppl: n.dppl,
            ppl: n.ppl,
            outliers: n.outliers,
        }
    }
}

/// Runs the search from the unquantized root down to the configured depth.
pub fn run_search(base: &ToyModel, probes: &ProbeSet, config: &SearchConfig) -> Result<SearchLog> {
    let all = base.components();
    config.validate(all.len())?;
    let max_depth = config.max_depth.unwrap_or(all.len());
    let root = evaluate(base, probes, ComponentSet::new(), config)?;
    let mut log = SearchLog {
        config: *config,
        depths: vec![DepthRecord::new(0, vec![root.clone()])],
        evaluated: vec![root.clone()],
    };
    if config.greedy {
        if max_depth == 0 {
            return Ok(log);
        }
        let singles = expand(&[root], base, probes, config)?;
        log.evaluated.extend(singles.iter().cloned());
        let order: Vec<ComponentId> = singles.iter().map(|n| *n.components.first().expect("one")).collect();
        log.depths.push(DepthRecord::new(1, vec![singles[0].clone()]));
        for depth in 2..=max_depth {
            let set: ComponentSet = order[..depth].iter().copied().collect();
            let node = evaluate(base, probes, set, config)?;
            log.evaluated.push(node.clone());
            log.depths.push(DepthRecord::new(depth, vec![node]));
        }
        return Ok(log);
    }
    let mut frontier = vec![root];
    for depth in 1..=max_depth {
        let children = expand(&frontier, base, probes, config)?;
        log.evaluated.extend(children.iter().cloned());
        frontier = select(children, config);
        log::info!(
            "depth {depth}: best score {:.3}, frontier mean {:.3}",
            frontier[0].score,
            mean(&frontier.iter().map(|n| n.score).collect::<Vec<_>>())
        );
        log.depths.push(DepthRecord::new(depth, frontier.clone()));
    }
    Ok(log)
}

/// Plan quantizing the components of the best node at depth `k`.
pub fn top_k_plan(log: &SearchLog, k: usize) -> Result<CompressionPlan> {
    let node = log
        .best_at(k)
        .ok_or_else(|| Error::Argument(format!("search reached depth {}, not {k}", log.depths.len() - 1)))?;
    let spec = log.config.quant();
    let mut plan = CompressionPlan::default();
    for &id in &node.components {
        plan.quantize(id, spec);
    }
    Ok(plan)
}

/// Best set of exactly `k` components by brute force, same ranking rule.
pub fn exhaustive_best(base: &ToyModel, probes: &ProbeSet, k: usize, config: &SearchConfig) -> Result<SearchNode> {
    let all = base.components();
    ensure!(k <= all.len(), Argument, "k = {k} exceeds {} components", all.len());
    let mut sets = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        sets.push(idx.iter().map(|&i| all[i]).collect::<ComponentSet>());
        // Next k-combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                let mut nodes = sets
                    .into_par_iter()
                    .map(|s| evaluate(base, probes, s, config))
                    .collect::<Result<Vec<_>>>()?;
                nodes.sort_by(|a, b| rank_cmp(a, b, config.criterion));
                return Ok(nodes.swap_remove(0));
            }
            i -= 1;
            if idx[i] < all.len() - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}
