//! Run configuration, experiment drivers and artifact emission.

mod corpus;
mod experiments;

pub use corpus::{detokenize, sample_prefixes, synthetic_text, tokenize, Corpus, CorpusSource, PrefixSample};
pub use experiments::{
    discriminate, ppl_adversary_check, sdt_bound_check, DiscriminateConfig, Discrimination, AdversaryResult, BoundResult,
    Separation, TrialRecord, Variant,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::compress::{apply_plan, outlier_census, CompressionPlan};
use crate::error::{ensure, Error, Result};
use crate::metrics::{ProbeSet, ProbeSpec, REPORT_SCHEMA_VERSION};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ToyModel};
use crate::planner::{run_schedule, Allocation, NoopTrainer, Schedule, ScheduleOptions, Trainer};
use crate::quantsearch::{run_search, top_k_plan, SearchConfig};
use crate::train::{train_dense, SgdTrainer, TrainConfig, WindowSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Metrics,
    Discriminate,
    Sparsify,
    Quantsearch,
    Train,
    Props,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Metrics,
        Experiment::Discriminate,
        Experiment::Sparsify,
        Experiment::Quantsearch,
        Experiment::Train,
        Experiment::Props,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Metrics => "metrics",
            Experiment::Discriminate => "discriminate",
            Experiment::Sparsify => "sparsify",
            Experiment::Quantsearch => "quantsearch",
            Experiment::Train => "train",
            Experiment::Props => "props",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub config: ModelConfig,
    /// Start from this checkpoint instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
    /// Dense training steps applied to a fresh model before the experiment.
    pub pretrain_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Text file for training and probing; synthetic prose when absent.
    pub path: Option<PathBuf>,
    /// Separate probe corpus; defaults to `path`.
    pub probe_path: Option<PathBuf>,
    pub synthetic_bytes: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            probe_path: None,
            synthetic_bytes: 400_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub prefix_len: usize,
    pub total_len: usize,
    pub count: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            prefix_len: 100,
            total_len: 200,
            count: 1000,
        }
    }
}

impl ProbeSection {
    pub fn spec(&self) -> Result<ProbeSpec> {
        ProbeSpec::new(self.prefix_len, self.total_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(flatten)]
    pub schedule: Schedule,
    pub allocation: Allocation,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            allocation: Allocation::Balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Plan applied to the base model to obtain the compressed model.
    pub plan: Option<PathBuf>,
    /// Alternatively, a compressed checkpoint.
    pub compressed: Option<PathBuf>,
    pub outlier_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropsSection {
    pub delta: f64,
    pub pairs: usize,
}

impl Default for PropsSection {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            pairs: 10_000,
        }
    }
}

/// Everything one run needs; stored verbatim in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub discriminate: DiscriminateConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub props: PropsSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            seed: 0,
            out_dir: default_out_dir(),
            workers: None,
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            probe: ProbeSection::default(),
            train: TrainConfig::default(),
            schedule: ScheduleSection::default(),
            search: SearchConfig::default(),
            discriminate: DiscriminateConfig::default(),
            metrics: MetricsSection::default(),
            props: PropsSection::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.model.config.validate()?;
        self.probe.spec()?;
        self.train.validate()?;
        self.schedule.schedule.validate()?;
        self.search.validate(self.model.config.n_layers * 7)?;
        ensure!(
            self.probe.total_len <= self.model.config.max_seq,
            Argument,
            "probe length {} exceeds max_seq {}",
            self.probe.total_len,
            self.model.config.max_seq
        );
        let files = [
            &self.model.checkpoint,
            &self.corpus.path,
            &self.corpus.probe_path,
            &self.metrics.plan,
            &self.metrics.compressed,
        ];
        for p in files.into_iter().flatten() {
            ensure!(p.exists(), Argument, "referenced file {} does not exist", p.display());
        }
        Ok(())
    }
}

/// Record of one run, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: Experiment,
    pub version: String,
    pub schema_version: u32,
    pub seed: u64,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub passed: bool,
    pub config: RunConfig,
    pub summary: serde_json::Value,
}

/// Result of a command: whether its assertions held, plus a JSON summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: serde_json::Value,
}

fn training_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus.path {
        Some(p) => Corpus::from_file(p),
        None => Ok(Corpus::synthetic(cfg.seed, cfg.corpus.synthetic_bytes)),
    }
}

fn probe_corpus(cfg: &RunConfig, training: &Corpus) -> Result<Corpus> {
    match &cfg.corpus.probe_path {
        Some(p) => Corpus::from_file(p),
        None => Ok(training.clone()),
    }
}

/// Loads the configured checkpoint or initializes (and optionally
/// pretrains) a fresh model.
pub fn prepare_base(cfg: &RunConfig, corpus: &Corpus) -> Result<(ToyModel, Option<crate::train::LossTrace>)> {
    if let Some(p) = &cfg.model.checkpoint {
        return Ok((load_checkpoint(p)?, None));
    }
    let mut model = ToyModel::random_init(cfg.model.config, cfg.seed)?;
    if cfg.model.pretrain_steps == 0 {
        return Ok((model, None));
    }
    let mut sampler = WindowSampler::new(
        corpus.tokens.clone(),
        cfg.train.seq_len,
        cfg.train.batch_size,
        cfg.seed ^ 0x5eed,
    )?;
    let trace = train_dense(&mut model, &cfg.train, cfg.model.pretrain_steps, &mut sampler)?;
    Ok((model, Some(trace)))
}

fn probe_set(cfg: &RunConfig, base: &ToyModel, corpus: &Corpus) -> Result<ProbeSet> {
    let spec = cfg.probe.spec()?;
    let sample = sample_prefixes(corpus, cfg.probe.count, spec.prefix_len, cfg.seed.wrapping_add(1))?;
    ProbeSet::build(base, &sample.prefixes, spec)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.experiment`, writing artifacts and `manifest.json` to
/// `cfg.out_dir`.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = match cfg.experiment {
        Experiment::Props => cmd_props(cfg)?,
        Experiment::Train => cmd_train(cfg)?,
        Experiment::Metrics => cmd_metrics(cfg)?,
        Experiment::Discriminate => cmd_discriminate(cfg)?,
        Experiment::Sparsify => cmd_sparsify(cfg)?,
        Experiment::Quantsearch => cmd_quantsearch(cfg)?,
    };
    let manifest = Manifest {
        experiment: cfg.experiment,
        version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        started_unix,
        wall_time_secs: started.elapsed().as_secs_f64(),
        passed: outcome.passed,
        config: cfg.clone(),
        summary: outcome.summary.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

pub fn cmd_props(cfg: &RunConfig) -> Result<Outcome> {
    let p1 = ppl_adversary_check(cfg.seed, 64, 16, cfg.props.delta)?;
    let p2 = sdt_bound_check(cfg.seed, cfg.props.pairs, 16, 32, 4)?;
    let summary = json!({ "adversary": p1, "sdt_bound": p2 });
    write_json(&cfg.out_dir.join("props.json"), &summary)?;
    Ok(Outcome {
        passed: p1.passed && p2.passed,
        summary,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = training_corpus(cfg)?;
    let (model, trace) = prepare_base(cfg, &corpus)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let losses = trace.map(|t| {
        let _ = t.save(&cfg.out_dir.join("loss_trace.csv"));
        t.losses()
    });
    let first = losses.as_ref().and_then(|l| l.first().copied());
    let last = losses.as_ref().and_then(|l| l.last().copied());
    Ok(Outcome {
        passed: model.is_finite(),
        summary: json!({
            "checkpoint": ckpt,
            "parameters": model.parameter_count(),
            "first_loss": first,
            "last_loss": last,
        }),
    })
}

pub fn cmd_metrics(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = training_corpus(cfg)?;
    let (base, _) = prepare_base(cfg, &corpus)?;
    let compressed = match (&cfg.metrics.compressed, &cfg.metrics.plan) {
        (Some(c), _) => load_checkpoint(c)?,
        (None, Some(p)) => apply_plan(&base, &CompressionPlan::load(p)?)?,
        (None, None) => base.clone(),
    };
    ensure!(
        compressed.config == base.config,
        Argument,
        "compressed model config differs from the base"
    );
    let probes = probe_set(cfg, &base, &probe_corpus(cfg, &corpus)?)?;
    let report = probes.evaluate(&compressed)?;
    report.save(&cfg.out_dir, "report")?;
    let threshold = cfg.metrics.outlier_threshold.unwrap_or(crate::compress::DEFAULT_OUTLIER_THRESHOLD);
    let census = outlier_census(&compressed, &probes.completions, threshold)?;
    write_json(&cfg.out_dir.join("outliers.json"), &census)?;
    Ok(Outcome {
        passed: true,
        summary: json!({ "aggregates": report.aggregates, "outliers": census.total }),
    })
}

pub fn cmd_discriminate(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = training_corpus(cfg)?;
    let (base, _) = prepare_base(cfg, &corpus)?;
    let probes = probe_set(cfg, &base, &probe_corpus(cfg, &corpus)?)?;
    let d = discriminate(&base, &probes, &cfg.discriminate, cfg.seed)?;
    let path = cfg.out_dir.join("discriminate.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    d.write_csv(f)?;
    write_json(&cfg.out_dir.join("separation.json"), &d.metrics)?;
    Ok(Outcome {
        passed: true,
        summary: serde_json::to_value(&d.metrics)?,
    })
}

pub fn cmd_sparsify(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = training_corpus(cfg)?;
    let (base, _) = prepare_base(cfg, &corpus)?;
    let spec = cfg.probe.spec()?;
    let sample = sample_prefixes(&probe_corpus(cfg, &corpus)?, cfg.probe.count, spec.prefix_len, cfg.seed.wrapping_add(1))?;
    let sched = &cfg.schedule.schedule;
    let mut trainer: Box<dyn Trainer> = if sched.masked_steps + sched.dense_steps == 0 {
        Box::new(NoopTrainer)
    } else {
        let tc = TrainConfig {
            masked_steps: sched.masked_steps,
            dense_steps: sched.dense_steps,
            ..cfg.train
        };
        Box::new(SgdTrainer::new(tc, corpus.tokens.clone())?)
    };
    let opts = ScheduleOptions {
        allocation: cfg.schedule.allocation,
        out_dir: Some(cfg.out_dir.clone()),
    };
    let outcome = run_schedule(&base, sched, &sample.prefixes, spec, trainer.as_mut(), &opts)?;
    save_checkpoint(&outcome.model, cfg.out_dir.join("model.ckpt"))?;
    let rounds: Vec<_> = outcome
        .rounds
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "step": r.step,
                "f_star": r.plan.f_star,
                "allocated": r.plan.achieved,
                "sparsity": r.overall_sparsity,
                "mean_fdt": r.report.aggregates.mean_fdt,
                "fdt_75": r.report.aggregates.fdt_75,
                "mean_dppl": r.report.aggregates.mean_dppl,
                "final_loss": r.loss.losses().last().copied(),
            })
        })
        .collect();
    let achieved = outcome.model.overall_sparsity() * 100.0;
    let passed = (achieved - sched.total()).abs() <= 1.0;
    Ok(Outcome {
        passed,
        summary: json!({ "target": sched.total(), "achieved": achieved, "rounds": rounds }),
    })
}

pub fn cmd_quantsearch(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = training_corpus(cfg)?;
    let (base, _) = prepare_base(cfg, &corpus)?;
    let probes = probe_set(cfg, &base, &probe_corpus(cfg, &corpus)?)?;
    let log = run_search(&base, &probes, &cfg.search)?;
    log.save(&cfg.out_dir)?;
    let depth = log.depths.len() - 1;
    top_k_plan(&log, depth)?.save(&cfg.out_dir.join(format!("plan_top{depth}.toml")))?;
    // Deepest level whose best node keeps the root's mean FDT within 1%.
    let root = log.depths[0].best().mean_fdt;
    let lossless = log
        .depths
        .iter()
        .filter(|d| d.best().mean_fdt >= 0.99 * root)
        .map(|d| d.depth)
        .max()
        .unwrap_or(0);
    Ok(Outcome {
        passed: true,
        summary: json!({
            "criterion": cfg.search.criterion,
            "evaluations": log.evaluations(),
            "improving_depths": log.improving_depths(),
            "lossless_depth": lossless,
            "lossless_fraction": lossless as f64 / base.components().len() as f64,
            "frontier": log.depths.iter().map(|d| json!({
                "depth": d.depth,
                "mean_score": d.mean_score,
                "mean_sdt": d.mean_sdt,
                "mean_outliers": d.mean_outliers,
            })).collect::<Vec<_>>(),
        }),
    })
}
