//! Divergence report and its JSON / CSV encodings.
//!
//! CSV header (one row per probe): `probe_id,fdt,sdt,dppl,ppl`.
//! JSON carries the full records, aggregates and the conventions used to
//! compute them. Both encodings are validated before writing and after
//! reading.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProbeOutcome, ProbeSpec};
use crate::error::{ensure, Error, Result};
use crate::numerics::{mean, quantile, std_dev, Quantile};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: [&str; 5] = ["probe_id", "fdt", "sdt", "dppl", "ppl"];

const FDT_CONVENTION: &str =
    "fdt = completion tokens matched before the first argmax mismatch; N-n when none";
const QUANTILE_CONVENTION: &str = "lower interpolation: sorted[floor(q*(len-1))]";
const PPL_CONVENTION: &str = "ppl = compressed-model perplexity on the real-data prefix tokens";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe_id: usize,
    pub fdt: usize,
    pub sdt: usize,
    pub dppl: f64,
    pub ppl: f64,
    /// Divergent completion offsets; JSON only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub divergent: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub probes: usize,
    pub mean_fdt: f64,
    pub std_fdt: f64,
    pub median_fdt: f64,
    pub fdt_75: f64,
    pub mean_sdt: f64,
    pub mean_dppl: f64,
    pub mean_ppl: f64,
    /// Probes that never diverged (fdt = N - n).
    pub full_matches: usize,
    /// Probes diverging on the first completion token.
    pub immediate_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub fdt: String,
    pub quantile: String,
    pub ppl: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            fdt: FDT_CONVENTION.into(),
            quantile: QUANTILE_CONVENTION.into(),
            ppl: PPL_CONVENTION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub schema_version: u32,
    pub spec: ProbeSpec,
    pub conventions: Conventions,
    pub records: Vec<ProbeRecord>,
    pub aggregates: Aggregates,
}

impl Aggregates {
    pub fn compute(records: &[ProbeRecord], spec: ProbeSpec) -> Result<Self> {
        ensure!(!records.is_empty(), Argument, "no probe records to aggregate");
        let fdts: Vec<f64> = records.iter().map(|r| r.fdt as f64).collect();
        let sdts: Vec<f64> = records.iter().map(|r| r.sdt as f64).collect();
        let dppl: Vec<f64> = records.iter().map(|r| r.dppl).collect();
        let ppl: Vec<f64> = records.iter().map(|r| r.ppl).collect();
        Ok(Self {
            probes: records.len(),
            mean_fdt: mean(&fdts),
            std_fdt: std_dev(&fdts),
            median_fdt: quantile(&fdts, Quantile::MEDIAN)?,
            fdt_75: quantile(&fdts, Quantile::Q75)?,
            mean_sdt: mean(&sdts),
            mean_dppl: mean(&dppl),
            mean_ppl: mean(&ppl),
            full_matches: records
                .iter()
                .filter(|r| r.fdt == spec.completion_len())
                .count(),
            immediate_divergences: records.iter().filter(|r| r.fdt == 0).count(),
        })
    }
}

impl DivergenceReport {
    pub fn from_outcomes(spec: ProbeSpec, outcomes: Vec<ProbeOutcome>) -> Result<Self> {
        let records: Vec<ProbeRecord> = outcomes
            .into_iter()
            .enumerate()
            .map(|(probe_id, o)| ProbeRecord {
                probe_id,
                fdt: o.fdt,
                sdt: o.sdt,
                dppl: o.dppl,
                ppl: o.ppl,
                divergent: o.divergent,
            })
            .collect();
        Self::from_records(spec, records)
    }

    pub fn from_records(spec: ProbeSpec, records: Vec<ProbeRecord>) -> Result<Self> {
        let aggregates = Aggregates::compute(&records, spec)?;
        let r = Self {
            schema_version: REPORT_SCHEMA_VERSION,
            spec,
            conventions: Conventions::default(),
            records,
            aggregates,
        };
        r.validate()?;
        Ok(r)
    }

    /// Schema check: version, per-record bounds, and aggregates consistent
    /// with the records.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!("report schema version {}", self.schema_version));
        }
        self.spec.validate()?;
        let cap = self.spec.completion_len();
        for r in &self.records {
            if r.fdt > cap || r.sdt > cap {
                return bad(format!("probe {}: fdt/sdt beyond {cap}", r.probe_id));
            }
            if !(r.dppl >= 1.0 && r.ppl >= 1.0 && r.dppl.is_finite() && r.ppl.is_finite()) {
                return bad(format!("probe {}: perplexities must be finite and >= 1", r.probe_id));
            }
            if (r.fdt == cap) != (r.sdt == 0) {
                return bad(format!("probe {}: fdt = N-n must coincide with sdt = 0", r.probe_id));
            }
            if !r.divergent.is_empty()
                && (r.divergent.len() != r.sdt || r.divergent[0] != r.fdt)
            {
                return bad(format!("probe {}: divergent positions disagree with fdt/sdt", r.probe_id));
            }
        }
        let expect = Aggregates::compute(&self.records, self.spec)?;
        if !aggregates_match(&expect, &self.aggregates) {
            return bad("aggregates do not match records".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.validate()?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.probe_id.to_string(),
                r.fdt.to_string(),
                r.sdt.to_string(),
                format!("{:?}", r.dppl),
                format!("{:?}", r.ppl),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parses CSV records back into a report for `spec`; divergent positions
    /// are not part of the CSV and come back empty.
    pub fn read_csv<R: Read>(r: R, spec: ProbeSpec) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Schema(format!("unexpected CSV header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let (probe_id, fdt, sdt, dppl, ppl): (usize, usize, usize, f64, f64) = row?;
            records.push(ProbeRecord {
                probe_id,
                fdt,
                sdt,
                dppl,
                ppl,
                divergent: Vec::new(),
            });
        }
        Self::from_records(spec, records)
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f)
    }

    pub fn fdts(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fdt as f64).collect()
    }
}

fn aggregates_match(a: &Aggregates, b: &Aggregates) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
    a.probes == b.probes
        && a.full_matches == b.full_matches
        && a.immediate_divergences == b.immediate_divergences
        && close(a.mean_fdt, b.mean_fdt)
        && close(a.std_fdt, b.std_fdt)
        && close(a.median_fdt, b.median_fdt)
        && close(a.fdt_75, b.fdt_75)
        && close(a.mean_sdt, b.mean_sdt)
        && close(a.mean_dppl, b.mean_dppl)
        && close(a.mean_ppl, b.mean_ppl)
}
