//! Token-level divergence metrics.
//!
//! Conventions, all 0-indexed: a sequence `y` of length `N` has logit
//! matrix `l` with `N` rows, and row `i` scores `y[i + 1]`. With a prefix of
//! `n` tokens the scored region is rows `n-1 ..= N-2`, i.e. the `N - n`
//! completion tokens `y[n..N]`.
//!
//! * FDT counts the completion tokens matched before the first argmax
//!   mismatch (0 means the very first completion token differs, `N - n`
//!   means no divergence).
//! * SDT counts every mismatching completion position.
//! * DPPL is the compressed model's perplexity on the base model's greedy
//!   completion, teacher-forced over the completion region.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ActivationTrace, TokenSequence, ToyModel};
use crate::numerics::{argmax, log_softmax_at, mean, quantile, Matrix, Quantile};

pub mod report;

pub use report::{Aggregates, DivergenceReport, ProbeRecord, REPORT_SCHEMA_VERSION};

/// `N × |V|` logits.
pub type LogitMatrix = Matrix;

/// Prefix length `n` and total length `N` of a probe, `0 < n < N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub prefix_len: usize,
    pub total_len: usize,
}

impl ProbeSpec {
    pub fn new(prefix_len: usize, total_len: usize) -> Result<Self> {
        let s = Self {
            prefix_len,
            total_len,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            0 < self.prefix_len && self.prefix_len < self.total_len,
            Argument,
            "probe spec needs 0 < n < N, got n={} N={}",
            self.prefix_len,
            self.total_len
        );
        Ok(())
    }

    /// Number of completion tokens, `N - n`; also the FDT ceiling.
    pub fn completion_len(&self) -> usize {
        self.total_len - self.prefix_len
    }
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            prefix_len: 100,
            total_len: 200,
        }
    }
}

fn check_scoring(y: &TokenSequence, l: &Matrix, n: usize) -> Result<()> {
    let big_n = y.len();
    ensure!(
        l.rows() == big_n,
        Argument,
        "logits have {} rows for a sequence of {big_n}",
        l.rows()
    );
    ensure!(
        n >= 1 && n < big_n,
        Argument,
        "prefix length {n} must satisfy 1 <= n < N = {big_n}"
    );
    if let Some(t) = y.as_slice().iter().find(|&&t| t as usize >= l.cols()) {
        return Err(Error::Argument(format!(
            "token {t} outside logit width {}",
            l.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `y[n..]` under `l`.
pub fn nll(y: &TokenSequence, l: &LogitMatrix, n: usize) -> Result<f64> {
    check_scoring(y, l, n)?;
    let big_n = y.len();
    let mut total = 0.0;
    for i in n - 1..big_n - 1 {
        total -= log_softmax_at(l.row(i), y[i + 1] as usize)?;
    }
    Ok(total / (big_n - n) as f64)
}

pub fn ppl(y: &TokenSequence, l: &LogitMatrix, n: usize) -> Result<f64> {
    nll(y, l, n).map(f64::exp)
}

/// Completion offsets (0-based, relative to `n`) where the argmax of `l`
/// disagrees with `y`.
pub fn divergent_positions(y: &TokenSequence, l: &LogitMatrix, n: usize) -> Result<Vec<usize>> {
    check_scoring(y, l, n)?;
    let mut out = Vec::new();
    for i in n - 1..y.len() - 1 {
        if argmax(l.row(i))? != y[i + 1] as usize {
            out.push(i + 1 - n);
        }
    }
    Ok(out)
}

pub fn sdt(y: &TokenSequence, l: &LogitMatrix, n: usize) -> Result<usize> {
    divergent_positions(y, l, n).map(|p| p.len())
}

pub fn fdt(y: &TokenSequence, l: &LogitMatrix, n: usize) -> Result<usize> {
    check_scoring(y, l, n)?;
    for i in n - 1..y.len() - 1 {
        if argmax(l.row(i))? != y[i + 1] as usize {
            return Ok(i + 1 - n);
        }
    }
    Ok(y.len() - n)
}

/// Metrics of one probe of a compressed model against the base completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub fdt: usize,
    pub sdt: usize,
    pub dppl: f64,
    /// Perplexity of the compressed model on the real-data prefix tokens.
    pub ppl: f64,
    pub divergent: Vec<usize>,
}

/// Scores a compressed model's logits over a base completion `z`.
pub fn score_completion(z: &TokenSequence, logits: &LogitMatrix, n: usize) -> Result<ProbeOutcome> {
    let divergent = divergent_positions(z, logits, n)?;
    let fdt = divergent.first().copied().unwrap_or(z.len() - n);
    let dppl = ppl(z, logits, n)?;
    // The prefix is real data; rows 0..n-1 of the same pass score it.
    let ppl_prefix = if n >= 2 {
        let rows = Matrix::from_raw(n, logits.cols(), logits.as_slice()[..n * logits.cols()].to_vec());
        ppl(&z.prefix(n), &rows, 1)?
    } else {
        ppl(z, logits, 1)?
    };
    Ok(ProbeOutcome {
        fdt,
        sdt: divergent.len(),
        dppl,
        ppl: ppl_prefix,
        divergent,
    })
}

/// One probe: decode the base greedily from `prefix`, then run the
/// compressed model once over that completion.
pub fn probe_pair(
    base: &ToyModel,
    compressed: &ToyModel,
    prefix: &TokenSequence,
    spec: ProbeSpec,
) -> Result<ProbeOutcome> {
    spec.validate()?;
    ensure!(
        prefix.len() == spec.prefix_len,
        Argument,
        "prefix has {} tokens, spec wants {}",
        prefix.len(),
        spec.prefix_len
    );
    let z = base.greedy_decode(prefix, spec.total_len)?;
    let logits = compressed.forward(&z)?;
    score_completion(&z, &logits, spec.prefix_len)
}

/// A fixed probe dataset with the base model's greedy completions cached,
/// so many compressed variants can be scored against the same ground truth.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub spec: ProbeSpec,
    pub completions: Vec<TokenSequence>,
}

impl ProbeSet {
    pub fn build(base: &ToyModel, prefixes: &[TokenSequence], spec: ProbeSpec) -> Result<Self> {
        spec.validate()?;
        ensure!(!prefixes.is_empty(), Argument, "probe dataset is empty");
        for p in prefixes {
            ensure!(
                p.len() == spec.prefix_len,
                Argument,
                "prefix has {} tokens, spec wants {}",
                p.len(),
                spec.prefix_len
            );
        }
        let completions = prefixes
            .par_iter()
            .map(|p| base.greedy_decode(p, spec.total_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, completions })
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    pub fn outcomes(&self, compressed: &ToyModel) -> Result<Vec<ProbeOutcome>> {
        let n = self.spec.prefix_len;
        self.completions
            .par_iter()
            .map(|z| score_completion(z, &compressed.forward(z)?, n))
            .collect()
    }

    /// Outcomes plus an activation census accumulated over every probe.
    /// Per-probe traces are merged in probe order.
    pub fn outcomes_with_trace(
        &self,
        compressed: &ToyModel,
        threshold: f64,
    ) -> Result<(Vec<ProbeOutcome>, ActivationTrace)> {
        let n = self.spec.prefix_len;
        let parts = self
            .completions
            .par_iter()
            .map(|z| {
                let mut t = ActivationTrace::new(threshold);
                let l = compressed.forward_with_trace(z, &mut t)?;
                Ok((score_completion(z, &l, n)?, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = ActivationTrace::new(threshold);
        let mut outcomes = Vec::with_capacity(parts.len());
        for (o, t) in parts {
            outcomes.push(o);
            for (id, c) in t.counts {
                *total.counts.entry(id).or_insert(0) += c;
            }
        }
        Ok((outcomes, total))
    }

    pub fn evaluate(&self, compressed: &ToyModel) -> Result<DivergenceReport> {
        DivergenceReport::from_outcomes(self.spec, self.outcomes(compressed)?)
    }

    /// FDT₇₅ of `compressed` against the cached completions.
    pub fn fdt75(&self, compressed: &ToyModel) -> Result<f64> {
        let fdts: Vec<f64> = self
            .outcomes(compressed)?
            .iter()
            .map(|o| o.fdt as f64)
            .collect();
        quantile(&fdts, Quantile::Q75)
    }
}

/// Aggregated metrics of `compressed` against `base` over a prefix dataset.
pub fn aggregate(
    base: &ToyModel,
    compressed: &ToyModel,
    dataset: &[TokenSequence],
    spec: ProbeSpec,
) -> Result<DivergenceReport> {
    ProbeSet::build(base, dataset, spec)?.evaluate(compressed)
}

/// Mean gap between consecutive divergent positions of a probe, if it has at
/// least two.
pub fn mean_inter_error_distance(divergent: &[usize]) -> Option<f64> {
    if divergent.len() < 2 {
        return None;
    }
    let gaps: Vec<f64> = divergent.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    Some(mean(&gaps))
}

/// Logit-level SDT between two logit matrices: rows `n-1..` whose argmax
/// differs. With `n = 1` every row counts, matching the greedy operator on
/// logits, which emits one token per row.
pub fn logit_sdt(l: &LogitMatrix, l_prime: &LogitMatrix, n: usize) -> Result<usize> {
    ensure!(l.shape() == l_prime.shape(), Argument, "logit shapes differ");
    ensure!(n >= 1 && n <= l.rows(), Argument, "bad prefix length {n}");
    let mut count = 0;
    for i in n - 1..l.rows() {
        if argmax(l.row(i))? != argmax(l_prime.row(i))? {
            count += 1;
        }
    }
    Ok(count)
}

fn sorted_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Makes `l` satisfy the adversary precondition for bump `delta`: every row
/// gets distinct values (a deterministic, index-proportional jitter far below
/// `delta` is added to rows with repeats) and a top-two gap below `delta`
/// (the runner-up is raised to `top − delta/2` where needed).
pub fn adversary_base(l: &LogitMatrix, delta: f64) -> Result<LogitMatrix> {
    ensure!(delta > 0.0 && delta.is_finite(), Argument, "delta must be positive");
    ensure!(l.cols() >= 2, Argument, "adversary needs at least two vocabulary entries");
    let mut out = l.clone();
    let v = l.cols() as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut scale = delta * 1e-3 / v;
        while has_repeats(row) {
            for (j, x) in row.iter_mut().enumerate() {
                *x += j as f64 * scale;
            }
            scale *= 0.5;
        }
        let order = sorted_desc(row);
        let (a1, a2) = (order[0], order[1]);
        if row[a1] - row[a2] >= delta {
            row[a2] = row[a1] - delta / 2.0;
        }
    }
    Ok(out)
}

fn has_repeats(row: &[f64]) -> bool {
    let mut s = row.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Bumps every row's runner-up logit by `delta`, flipping each row's argmax
/// while moving no entry by more than `delta`.
///
/// Rows must have distinct values and a top-two gap strictly below `delta`;
/// [`adversary_base`] prepares arbitrary logits accordingly.
pub fn construct_ppl_adversary(l: &LogitMatrix, delta: f64) -> Result<LogitMatrix> {
    ensure!(delta > 0.0 && delta.is_finite(), Argument, "delta must be positive");
    ensure!(l.cols() >= 2, Argument, "adversary needs at least two vocabulary entries");
    let mut out = l.clone();
    for i in 0..l.rows() {
        let row = l.row(i);
        if has_repeats(row) {
            return Err(Error::Precondition(format!("row {i} has repeated values")));
        }
        let order = sorted_desc(row);
        let (a1, a2) = (order[0], order[1]);
        let gap = row[a1] - row[a2];
        if gap >= delta {
            return Err(Error::Precondition(format!(
                "row {i}: top-two gap {gap} is not below delta {delta}"
            )));
        }
        let bumped = row[a2] + delta;
        out.set(i, a2, bumped);
    }
    Ok(out)
}

/// Outcome of checking `SDT ≤ (N−n)/ln 2 · ln DPPL` on one logit pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub sdt: usize,
    pub dppl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks the SDT upper bound for logits `l` (reference) and `l_prime`
/// (compressed), both `N × |V|`. The reference completion continues
/// `prefix` with the argmax of `l`'s rows `n-1 ..= N-2`.
///
/// The bound is evaluated as `(N−n)·NLL / ln 2`, which equals the
/// `ln DPPL` form without the exp/ln round trip; `holds` allows a relative
/// slack of 1e-12 for rounding.
pub fn check_dppl_bound(
    l: &LogitMatrix,
    l_prime: &LogitMatrix,
    prefix: &TokenSequence,
) -> Result<BoundCheck> {
    ensure!(l.shape() == l_prime.shape(), Argument, "logit shapes differ");
    let (n, big_n) = (prefix.len(), l.rows());
    ensure!(
        n >= 1 && n < big_n,
        Argument,
        "prefix length {n} must satisfy 1 <= n < N = {big_n}"
    );
    let mut z = prefix.clone();
    for i in n - 1..big_n - 1 {
        z.push(argmax(l.row(i))? as u32);
    }
    let sdt = sdt(&z, l_prime, n)?;
    let nll = nll(&z, l_prime, n)?;
    let bound = (big_n - n) as f64 * nll / std::f64::consts::LN_2;
    Ok(BoundCheck {
        sdt,
        dppl: nll.exp(),
        bound,
        holds: sdt as f64 <= bound * (1.0 + 1e-12) + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec())
    }

    /// Logits whose argmax at row i is `targets[i]` with the given margin.
    fn peaked(targets: &[usize], vocab: usize, margin: f64) -> Matrix {
        let mut m = Matrix::zeros(targets.len(), vocab);
        for (i, &t) in targets.iter().enumerate() {
            m.set(i, t, margin);
        }
        m
    }

    #[test]
    fn nll_of_certain_and_flat_logits() {
        let y = seq(&[0, 1, 2, 3]);
        let certain = peaked(&[1, 2, 3, 0], 4, 1e3);
        assert!(nll(&y, &certain, 1).unwrap() < 1e-12);
        assert_eq!(ppl(&y, &certain, 1).unwrap(), 1.0);
        let flat = Matrix::zeros(4, 4);
        assert!((nll(&y, &flat, 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((ppl(&y, &flat, 2).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn nll_hand_computed() {
        // Rows 0..2 score tokens 2, 0, 1 under logits [ln1, ln2, ln1].
        let y = seq(&[1, 2, 0, 1]);
        let row = vec![1f64.ln(), 2f64.ln(), 1f64.ln()];
        let l = Matrix::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let expected = -((0.25f64).ln() + (0.25f64).ln() + (0.5f64).ln()) / 3.0;
        assert!((nll(&y, &l, 1).unwrap() - expected).abs() < 1e-12);
        // Only the last two predictions with n = 2.
        let expected2 = -((0.25f64).ln() + (0.5f64).ln()) / 2.0;
        assert!((nll(&y, &l, 2).unwrap() - expected2).abs() < 1e-12);
    }

    #[test]
    fn scoring_argument_errors() {
        let y = seq(&[0, 1, 2]);
        let l = Matrix::zeros(3, 4);
        assert!(nll(&y, &l, 3).is_err());
        assert!(nll(&y, &l, 0).is_err());
        assert!(fdt(&y, &Matrix::zeros(2, 4), 1).is_err());
        assert!(sdt(&seq(&[0, 9, 1]), &l, 1).is_err());
    }

    #[test]
    fn fdt_and_sdt_basics() {
        let y = seq(&[0, 1, 2, 3, 0, 1]);
        let agree = peaked(&[1, 2, 3, 0, 1, 2], 4, 5.0);
        assert_eq!(fdt(&y, &agree, 2).unwrap(), 4);
        assert_eq!(sdt(&y, &agree, 2).unwrap(), 0);
        let wrong = peaked(&[2, 3, 0, 1, 2, 3], 4, 5.0);
        assert_eq!(fdt(&y, &wrong, 2).unwrap(), 0);
        assert_eq!(sdt(&y, &wrong, 2).unwrap(), 4);
    }

    #[test]
    fn fdt_points_at_first_divergent_token() {
        // 3-token prefix, 8 generated tokens, mismatch at the 4th generated.
        let y = seq(&[5, 6, 7, 1, 2, 3, 4, 1, 2, 3, 4]);
        let mut preds: Vec<usize> = y.as_slice()[1..].iter().map(|&t| t as usize).collect();
        preds.push(0);
        preds[2 + 3] = 0; // row n-1+3 predicts y[n+3]
        let l = peaked(&preds, 8, 3.0);
        assert_eq!(fdt(&y, &l, 3).unwrap(), 3);
        assert_eq!(divergent_positions(&y, &l, 3).unwrap(), vec![3]);
    }

    #[test]
    fn sdt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let y = TokenSequence::new((0..6).map(|_| rng.random_range(0..3)).collect());
            let l = Matrix::from_raw(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mut count = 0;
            let mut first = None;
            for pos in 1..6 {
                let row = l.row(pos - 1);
                let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                if best != y[pos] as usize {
                    count += 1;
                    first.get_or_insert(pos - 1);
                }
            }
            assert_eq!(sdt(&y, &l, 1).unwrap(), count);
            assert_eq!(fdt(&y, &l, 1).unwrap(), first.unwrap_or(5));
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 20,
            max_seq: 64,
        }
    }

    #[test]
    fn identical_models_never_diverge() {
        let m = ToyModel::random_init(tiny(), 1).unwrap();
        let spec = ProbeSpec::new(4, 20).unwrap();
        let prefix = seq(&[1, 2, 3, 4]);
        let o = probe_pair(&m, &m, &prefix, spec).unwrap();
        assert_eq!(o.fdt, 16);
        assert_eq!(o.sdt, 0);
        let z = m.greedy_decode(&prefix, 20).unwrap();
        assert_eq!(o.dppl, ppl(&z, &m.forward(&z).unwrap(), 4).unwrap());
        assert!(o.dppl >= 1.0);
    }

    #[test]
    fn aggregate_edge_cases() {
        let m = ToyModel::random_init(tiny(), 2).unwrap();
        let spec = ProbeSpec::new(3, 12).unwrap();
        assert!(aggregate(&m, &m, &[], spec).is_err());
        let data = vec![seq(&[1, 2, 3]), seq(&[4, 5, 6])];
        let r = aggregate(&m, &m, &data, spec).unwrap();
        assert_eq!(r.aggregates.fdt_75, 9.0);
        assert_eq!(r.aggregates.mean_sdt, 0.0);
        let single = aggregate(&m, &m, &data[..1], spec).unwrap();
        assert_eq!(single.aggregates.mean_dppl, single.records[0].dppl);
        assert_eq!(single.aggregates.median_fdt, single.records[0].fdt as f64);
    }

    #[test]
    fn probe_spec_validation() {
        assert!(ProbeSpec::new(0, 4).is_err());
        assert!(ProbeSpec::new(4, 4).is_err());
        assert_eq!(ProbeSpec::new(100, 200).unwrap().completion_len(), 100);
    }

    #[test]
    fn adversary_flips_small_example() {
        let delta = 0.01;
        let l = Matrix::from_rows(&[vec![1.0, 1.0 - delta / 2.0, 0.0]]).unwrap();
        let lp = construct_ppl_adversary(&l, delta).unwrap();
        assert_eq!(argmax(l.row(0)).unwrap(), 0);
        assert_eq!(argmax(lp.row(0)).unwrap(), 1);
        assert!(l.max_abs_diff(&lp) <= delta);
    }

    #[test]
    fn adversary_preconditions() {
        let wide = Matrix::from_rows(&[vec![2.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(construct_ppl_adversary(&wide, 0.5), Err(Error::Precondition(_))));
        let repeated = Matrix::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(construct_ppl_adversary(&repeated, 0.5), Err(Error::Precondition(_))));
        let fixed = adversary_base(&repeated, 0.5).unwrap();
        let lp = construct_ppl_adversary(&fixed, 0.5).unwrap();
        assert_eq!(logit_sdt(&fixed, &lp, 1).unwrap(), 1);
        assert!(fixed.max_abs_diff(&repeated) < 0.5);
    }

    #[test]
    fn bound_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = Matrix::from_raw(8, 5, (0..40).map(|_| rng.random_range(-2.0..2.0)).collect());
        let check = check_dppl_bound(&l, &l, &seq(&[0, 1])).unwrap();
        assert_eq!(check.sdt, 0);
        assert!(check.holds);
        // N - n = 1 with a flat two-way row gives DPPL = 2, bound = 1.
        let flat = Matrix::zeros(2, 2);
        let c = check_dppl_bound(&flat, &flat, &seq(&[1])).unwrap();
        assert!((c.dppl - 2.0).abs() < 1e-12);
        assert!((c.bound - 1.0).abs() < 1e-12);
        assert!(c.holds);
    }

    #[test]
    fn inter_error_distance() {
        assert_eq!(mean_inter_error_distance(&[3]), None);
        assert_eq!(mean_inter_error_distance(&[1, 4, 5]), Some(2.0));
    }
}
