//! Command implementations: data preparation, driver dispatch, artifact
//! emission, baseline pairing and sweeps.
//!
//! A run writes nothing until it succeeds, so a failed run leaves no
//! partial artifacts behind. Artifacts per run: `metrics.csv`,
//! `lambda.txt`, `topics.txt` and `summary.json` (which embeds the full
//! resolved config).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use asysvi::corpus::{load_corpus, save_corpus, split, Corpus, SplitSpec};
use asysvi::engine::{
    compute_tsp_rsp, run_threaded, simulate, AsyncConfig, DelaySchedule, StalePolicy,
    StalenessStats,
};
use asysvi::expfam::{GlobalParams, HyperParams, LearningSchedule};
use asysvi::lda::{generate_synthetic, Document};
use asysvi::metrics::{Checkpoint, RunMetrics};
use asysvi::serial::{run_serial, SerialConfig};
use asysvi::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig, Mode, Policy};
use crate::matrixio::{block_topics, load_matrix, render_topics, save_matrix};

const TOPICS_IN_SUMMARY: usize = 10;

pub struct Outcome {
    pub lambda: GlobalParams,
    pub metrics: RunMetrics,
    pub staleness: Option<StalenessStats>,
    pub vocab: Vec<String>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
pub struct MetricsSummary {
    pub iterations: u64,
    pub total_docs_processed: u64,
    pub optimize_seconds: f64,
    pub eval_seconds: f64,
    pub test_set_words: u64,
    pub final_iteration: u64,
    pub final_perplexity: f64,
    pub final_held_out_bound: f64,
}

#[derive(Serialize)]
struct StalenessSummary {
    max_observed: u64,
    dropped_count: u64,
    over_limit_applied: u64,
    mean_received: f64,
    histogram: BTreeMap<u64, u64>,
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Comparison {
    Paired { baseline: PathBuf, tsp: f64, rsp: f64 },
    Incomparable { baseline: PathBuf, reason: String },
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    metrics: MetricsSummary,
    staleness: Option<StalenessSummary>,
    comparison: Option<Comparison>,
}

/// The subset of a summary.json another run needs for pairing.
#[derive(Deserialize)]
struct BaselineFile {
    metrics: MetricsSummary,
}

fn metrics_summary(metrics: &RunMetrics) -> Result<MetricsSummary> {
    let last = metrics
        .final_checkpoint()
        .ok_or_else(|| Error::Usage("run recorded no checkpoints".into()))?;
    Ok(MetricsSummary {
        iterations: metrics.iterations,
        total_docs_processed: metrics.total_docs_processed,
        optimize_seconds: metrics.optimize_seconds,
        eval_seconds: metrics.eval_seconds,
        test_set_words: metrics.test_set_words,
        final_iteration: last.iteration,
        final_perplexity: last.perplexity,
        final_held_out_bound: last.held_out_bound,
    })
}

/// Rebuilds the scalar run record a stored summary describes, enough to
/// pair against with the library's comparison guards intact.
fn metrics_from_summary(s: &MetricsSummary) -> RunMetrics {
    let mut metrics = RunMetrics::new();
    metrics.iterations = s.iterations;
    metrics.total_docs_processed = s.total_docs_processed;
    metrics.optimize_seconds = s.optimize_seconds;
    metrics.eval_seconds = s.eval_seconds;
    metrics.test_set_words = s.test_set_words;
    metrics.record(Checkpoint {
        iteration: s.final_iteration,
        docs_processed: s.total_docs_processed,
        rho: 0.0,
        gradient_variance: 0.0,
        held_out_bound: s.final_held_out_bound,
        perplexity: s.final_perplexity,
        wall_clock_seconds: s.optimize_seconds,
        staleness_mean: None,
        staleness_max: None,
        dropped_total: None,
    });
    metrics
}

fn load_baseline(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path)?;
    let parsed: BaselineFile = serde_json::from_str(&text)
        .map_err(|e| Error::Usage(format!("baseline {} is not a run summary: {e}", path.display())))?;
    Ok(metrics_from_summary(&parsed.metrics))
}

/// Loads or synthesizes the corpus and carves out the held-out set.
fn prepare_data(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<Document>, Vec<String>)> {
    let full = if let Some(spec) = &cfg.synthetic {
        let beta = block_topics(spec.topics, spec.vocab)?;
        generate_synthetic(&beta, spec.alpha, spec.docs, spec.doc_length, spec.seed)?
    } else {
        let corpus_path = cfg.corpus.as_ref().expect("config guarantees a source");
        let vocab_path = cfg.vocab.as_ref().expect("config guarantees a vocab");
        let (corpus, report) = load_corpus(corpus_path, vocab_path)?;
        for warning in &report.warnings {
            eprintln!("warning: {warning}");
        }
        corpus
    };

    let spec = SplitSpec::new(cfg.train_fraction, cfg.validation_docs, cfg.test_docs, cfg.split_seed)?;
    let (train, _validation, test) = split(&full, &spec)?;
    if train.num_docs() < cfg.batch {
        return Err(Error::Config(format!(
            "training split holds {} documents, fewer than batch {}",
            train.num_docs(),
            cfg.batch
        )));
    }
    let vocab = full.vocab().to_vec();
    Ok((train, test.docs().to_vec(), vocab))
}

/// Caps threaded workers by the ASYSVI_THREADS environment variable.
fn apply_thread_cap(cfg: &mut ExperimentConfig) -> Result<()> {
    if cfg.mode != Mode::AsyncThreaded {
        return Ok(());
    }
    if let Ok(raw) = std::env::var("ASYSVI_THREADS") {
        let cap: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!("ASYSVI_THREADS must be a positive integer, got {raw:?}"))
            })?;
        cfg.num_workers = cfg.num_workers.min(cap);
    }
    Ok(())
}

fn build_delays(cfg: &ExperimentConfig) -> Result<DelaySchedule> {
    let schedule = match &cfg.delay_csv {
        Some(path) => DelaySchedule::from_csv(BufReader::new(fs::File::open(path)?))?,
        None => DelaySchedule::zero(),
    };
    Ok(schedule.with_default(cfg.delay_default))
}

/// Runs the configured driver. Pure compute: writes nothing.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (train, test_docs, vocab) = prepare_data(cfg)?;
    let hp = HyperParams::new(cfg.alpha, cfg.eta, cfg.num_topics, train.num_docs())?;
    let schedule = LearningSchedule::new(cfg.tau0, cfg.kappa)?;

    match cfg.mode {
        Mode::Serial => {
            let mut run_cfg = SerialConfig::new(schedule, cfg.batch, cfg.iterations, cfg.seed);
            run_cfg.eval_every = cfg.eval_every;
            let (lambda, metrics) = run_serial(&train, &test_docs, &hp, &run_cfg)?;
            Ok(Outcome { lambda, metrics, staleness: None, vocab })
        }
        Mode::AsyncSim | Mode::AsyncThreaded => {
            let mut run_cfg = AsyncConfig::new(
                schedule,
                cfg.num_workers,
                cfg.gradients_per_update,
                cfg.max_staleness,
                cfg.batch,
                cfg.iterations,
                cfg.seed,
            );
            run_cfg.eval_every = cfg.eval_every;
            run_cfg.stale_policy = match cfg.stale_policy {
                Policy::Drop => StalePolicy::Drop,
                Policy::Apply => StalePolicy::Apply,
            };
            let (lambda, metrics, stats) = if cfg.mode == Mode::AsyncSim {
                let delays = build_delays(cfg)?;
                simulate(&train, &test_docs, &hp, &run_cfg, &delays)?
            } else {
                run_cfg.per_doc_cost =
                    cfg.per_doc_cost_ms.map(std::time::Duration::from_millis);
                run_threaded(&train, &test_docs, &hp, &run_cfg)?
            };
            Ok(Outcome { lambda, metrics, staleness: Some(stats), vocab })
        }
    }
}

/// Writes the full artifact set for a finished run and returns its summary.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    outcome: &Outcome,
    baseline: Option<&Path>,
) -> Result<MetricsSummary> {
    let summary_metrics = metrics_summary(&outcome.metrics)?;
    let comparison = match baseline {
        None => None,
        Some(path) => {
            let serial_side = load_baseline(path)?;
            Some(match compute_tsp_rsp(&serial_side, &outcome.metrics) {
                Ok((tsp, rsp)) => Comparison::Paired { baseline: path.to_path_buf(), tsp, rsp },
                Err(Error::Usage(reason)) => {
                    Comparison::Incomparable { baseline: path.to_path_buf(), reason }
                }
                Err(other) => return Err(other),
            })
        }
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = fs::File::create(cfg.out_dir.join("metrics.csv"))?;
    outcome.metrics.write_csv(&mut csv)?;
    save_matrix(&cfg.out_dir.join("lambda.txt"), outcome.lambda.values())?;
    fs::write(
        cfg.out_dir.join("topics.txt"),
        render_topics(outcome.lambda.values(), &outcome.vocab, TOPICS_IN_SUMMARY)?,
    )?;

    let summary = Summary {
        config: cfg,
        metrics: summary_metrics,
        staleness: outcome.staleness.as_ref().map(|s| StalenessSummary {
            max_observed: s.max_observed,
            dropped_count: s.dropped_count,
            over_limit_applied: s.over_limit_applied,
            mean_received: s.mean_received(),
            histogram: s.histogram.clone(),
        }),
        comparison,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Usage(format!("summary serialization failed: {e}")))?;
    fs::write(cfg.out_dir.join("summary.json"), json + "\n")?;
    Ok(summary_metrics)
}

pub fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = config::load(config_path, seed, out)?;
    apply_thread_cap(&mut cfg)?;
    let outcome = execute(&cfg)?;
    let summary = write_artifacts(&cfg, &outcome, baseline.as_deref())?;
    println!(
        "run complete: {} iterations, {} documents, final perplexity {:.3}; artifacts in {}",
        summary.iterations,
        summary.total_docs_processed,
        summary.final_perplexity,
        cfg.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    NumWorkers,
    MaxStaleness,
    Batch,
    Kappa,
    Tau0,
}

impl SweepParam {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "num_workers" => Ok(SweepParam::NumWorkers),
            "B" => Ok(SweepParam::MaxStaleness),
            "batch" => Ok(SweepParam::Batch),
            "kappa" => Ok(SweepParam::Kappa),
            "tau0" => Ok(SweepParam::Tau0),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected num_workers, B, batch, kappa or tau0"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SweepParam::NumWorkers => "num_workers",
            SweepParam::MaxStaleness => "B",
            SweepParam::Batch => "batch",
            SweepParam::Kappa => "kappa",
            SweepParam::Tau0 => "tau0",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, SweepParam::NumWorkers | SweepParam::MaxStaleness | SweepParam::Batch)
    }

    fn format_value(self, value: f64) -> String {
        if self.is_integer() {
            format!("{}", value as u64)
        } else {
            format!("{value}")
        }
    }
}

/// Documents consumed by one master update under this config.
fn docs_per_update(cfg: &ExperimentConfig) -> u64 {
    match cfg.mode {
        Mode::Serial => cfg.batch as u64,
        _ => (cfg.gradients_per_update * cfg.batch) as u64,
    }
}

/// Applies one sweep value to a copy of the base config. Batch sweeps keep
/// the total document budget fixed by rescaling the iteration count, so
/// rows stay comparable; a value that does not divide the budget is
/// rejected.
fn apply_sweep_value(
    param: SweepParam,
    value: f64,
    base: &ExperimentConfig,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    if param.is_integer() && (value.fract() != 0.0 || value < 0.0) {
        return Err(Error::Config(format!(
            "{} requires non-negative integer values, got {value}",
            param.name()
        )));
    }
    match param {
        SweepParam::NumWorkers => {
            if value < 1.0 {
                return Err(Error::Config("num_workers values must be at least 1".into()));
            }
            cfg.num_workers = value as usize;
        }
        SweepParam::MaxStaleness => cfg.max_staleness = value as u64,
        SweepParam::Batch => {
            if value < 1.0 {
                return Err(Error::Config("batch values must be at least 1".into()));
            }
            let budget = docs_per_update(base) * base.iterations;
            cfg.batch = value as usize;
            let per_update = docs_per_update(&cfg);
            if budget % per_update != 0 {
                return Err(Error::Config(format!(
                    "batch {} does not divide the {budget}-document budget",
                    cfg.batch
                )));
            }
            cfg.iterations = budget / per_update;
        }
        SweepParam::Kappa => cfg.kappa = value,
        SweepParam::Tau0 => cfg.tau0 = value,
    }
    Ok(cfg)
}

struct SweepRow {
    value: f64,
    status: String,
    tsp: Option<f64>,
    rsp: Option<f64>,
    final_perplexity: Option<f64>,
    staleness_max: Option<u64>,
    docs_processed: Option<u64>,
}

pub fn cmd_sweep(
    config_path: &Path,
    param_name: &str,
    values_list: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> Result<()> {
    let base = config::load(config_path, seed, out)?;
    let param = SweepParam::parse(param_name)?;
    if base.mode == Mode::Serial
        && matches!(param, SweepParam::NumWorkers | SweepParam::MaxStaleness)
    {
        return Err(Error::Config(format!(
            "parameter {} has no effect in serial mode",
            param.name()
        )));
    }

    let mut values: Vec<f64> = values_list
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| {
                Error::Config(format!("sweep value {:?} is not a number", t.trim()))
            })
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let sweep_dir = base.out_dir.clone();
    fs::create_dir_all(&sweep_dir)?;

    // Shared serial baseline for pairing: referenced, or run fresh first.
    // The serial analogue of one aggregated master update is a batch of
    // M x S documents, which keeps the document budgets equal.
    let baseline_path = match baseline {
        Some(path) => path,
        None => {
            let mut serial_cfg = base.clone();
            serial_cfg.mode = Mode::Serial;
            serial_cfg.batch = docs_per_update(&base) as usize;
            serial_cfg.out_dir = sweep_dir.join("baseline");
            let outcome = execute(&serial_cfg)?;
            write_artifacts(&serial_cfg, &outcome, None)?;
            serial_cfg.out_dir.join("summary.json")
        }
    };
    let serial_side = load_baseline(&baseline_path)?;

    let mut rows = Vec::new();
    for &value in &values {
        let label = param.format_value(value);
        let row = match apply_sweep_value(param, value, &base) {
            Err(e) => {
                eprintln!("sweep {}={label} rejected: {e}", param.name());
                SweepRow {
                    value,
                    status: "failed".into(),
                    tsp: None,
                    rsp: None,
                    final_perplexity: None,
                    staleness_max: None,
                    docs_processed: None,
                }
            }
            Ok(mut cfg) => {
                cfg.out_dir = sweep_dir.join(format!("{}_{label}", param.name()));
                apply_thread_cap(&mut cfg)?;
                match execute(&cfg).and_then(|outcome| {
                    let summary = write_artifacts(&cfg, &outcome, Some(&baseline_path))?;
                    Ok((outcome, summary))
                }) {
                    Ok((outcome, summary)) => {
                        let (tsp, rsp) = match compute_tsp_rsp(&serial_side, &outcome.metrics) {
                            Ok(pair) => (Some(pair.0), Some(pair.1)),
                            Err(Error::Usage(reason)) => {
                                eprintln!(
                                    "sweep {}={label} not comparable to baseline: {reason}",
                                    param.name()
                                );
                                (None, None)
                            }
                            Err(other) => return Err(other),
                        };
                        let status =
                            if tsp.is_some() { "ok" } else { "incomparable" }.to_string();
                        SweepRow {
                            value,
                            status,
                            tsp,
                            rsp,
                            final_perplexity: Some(summary.final_perplexity),
                            staleness_max: outcome.staleness.as_ref().map(|s| s.max_observed),
                            docs_processed: Some(summary.total_docs_processed),
                        }
                    }
                    Err(e) => {
                        eprintln!("sweep {}={label} failed: {e}", param.name());
                        SweepRow {
                            value,
                            status: "failed".into(),
                            tsp: None,
                            rsp: None,
                            final_perplexity: None,
                            staleness_max: None,
                            docs_processed: None,
                        }
                    }
                }
            }
        };
        rows.push(row);
    }

    let mut csv = String::from(
        "parameter,value,status,tsp,rsp,final_perplexity,staleness_max,docs_processed\n",
    );
    for row in &rows {
        let opt_f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            param.name(),
            param.format_value(row.value),
            row.status,
            opt_f(row.tsp),
            opt_f(row.rsp),
            opt_f(row.final_perplexity),
            opt_u(row.staleness_max),
            opt_u(row.docs_processed),
        ));
    }
    let csv_path = sweep_dir.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    println!("sweep complete: {} rows in {}", rows.len(), csv_path.display());
    Ok(())
}

pub fn cmd_topics(lambda_path: &Path, vocab_path: &Path, top_n: usize) -> Result<()> {
    let matrix = load_matrix(lambda_path)?;
    let vocab: Vec<String> =
        fs::read_to_string(vocab_path)?.lines().map(str::to_string).collect();
    print!("{}", render_topics(&matrix, &vocab, top_n)?);
    Ok(())
}

pub fn cmd_gen(
    topics: usize,
    vocab: usize,
    docs: usize,
    doc_length: usize,
    alpha: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let beta = block_topics(topics, vocab)?;
    let corpus = generate_synthetic(&beta, alpha, docs, doc_length, seed)?;
    fs::create_dir_all(out)?;
    save_corpus(&corpus, out.join("docword.txt"), out.join("vocab.txt"))?;
    save_matrix(&out.join("beta.txt"), &beta)?;
    println!(
        "generated {} documents over {} words from {} block topics into {}",
        corpus.num_docs(),
        corpus.vocab_size(),
        topics,
        out.display()
    );
    Ok(())
}
