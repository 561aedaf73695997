//! Flat key = value experiment configs.
//!
//! One key per line, `#` starts a comment line, unknown keys are errors so
//! typos surface instead of silently falling back to defaults. The resolved
//! config is embedded verbatim in every run summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use asysvi::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Serial,
    AsyncSim,
    AsyncThreaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Drop,
    Apply,
}

/// Synthetic corpus request: K contiguous block topics over W words.
#[derive(Debug, Clone, Serialize)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub vocab: usize,
    pub docs: usize,
    pub doc_length: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Everything a run needs, fully resolved (CLI overrides applied).
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,

    pub train_fraction: f64,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub split_seed: u64,

    pub num_topics: usize,
    pub alpha: f64,
    pub eta: f64,

    pub kappa: f64,
    pub tau0: f64,

    pub mode: Mode,
    pub batch: usize,
    pub iterations: u64,
    pub eval_every: u64,
    pub seed: u64,

    pub num_workers: usize,
    pub gradients_per_update: usize,
    pub max_staleness: u64,
    pub stale_policy: Policy,
    pub delay_default: u64,
    pub delay_csv: Option<PathBuf>,
    pub per_doc_cost_ms: Option<u64>,

    pub out_dir: PathBuf,
    pub reference_perplexity: Option<f64>,
}

struct Raw {
    entries: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (offset, line) in text.lines().enumerate() {
            let line_no = offset + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no} is not a `key = value` pair: {trimmed:?}"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(Error::Config(format!("key `{key}` at line {line_no} has no value")));
            }
            if entries.insert(key.clone(), (line_no, value)).is_some() {
                return Err(Error::Config(format!(
                    "key `{key}` set twice (second time at line {line_no})"
                )));
            }
        }
        Ok(Raw { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn take_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(value) => value.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}` has invalid value {value:?}"))
            }),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take_parse(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("unknown config key `{key}` at line {line}")));
        }
        Ok(())
    }
}

/// Reads and resolves a config file, applying the command-line overrides.
pub fn load(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut raw = Raw::parse(&text)?;

    let seed = match seed_override {
        Some(s) => {
            raw.take("seed");
            s
        }
        None => raw.require("seed")?,
    };

    let corpus: Option<PathBuf> = raw.take("corpus").map(PathBuf::from);
    let vocab: Option<PathBuf> = raw.take("vocab").map(PathBuf::from);
    let synthetic_topics: Option<usize> = raw.take_parse("synthetic_topics")?;
    let synthetic = match (corpus.is_some(), synthetic_topics) {
        (true, Some(_)) => {
            return Err(Error::Config(
                "config sets both `corpus` and `synthetic_topics`; pick one source".into(),
            ));
        }
        (true, None) => {
            if vocab.is_none() {
                return Err(Error::Config("`corpus` requires a `vocab` path".into()));
            }
            None
        }
        (false, Some(topics)) => Some(SyntheticSpec {
            topics,
            vocab: raw.require("synthetic_vocab")?,
            docs: raw.require("synthetic_docs")?,
            doc_length: raw.require("synthetic_doc_length")?,
            alpha: raw.take_parse("synthetic_alpha")?.unwrap_or(0.3),
            seed: raw.take_parse("synthetic_seed")?.unwrap_or(seed),
        }),
        (false, None) => {
            return Err(Error::Config(
                "config needs a data source: `corpus` + `vocab`, or `synthetic_*` keys".into(),
            ));
        }
    };
    if synthetic.is_some() && vocab.is_some() {
        return Err(Error::Config("`vocab` is only meaningful with `corpus`".into()));
    }
    if let Some(spec) = &synthetic {
        if spec.topics == 0 || spec.docs == 0 || spec.doc_length == 0 {
            return Err(Error::Config("synthetic sizes must all be at least 1".into()));
        }
        if spec.vocab < spec.topics {
            return Err(Error::Config(format!(
                "synthetic_vocab {} cannot hold {} block topics",
                spec.vocab, spec.topics
            )));
        }
    }

    let mode = match raw.require::<String>("mode")?.as_str() {
        "serial" => Mode::Serial,
        "async-sim" => Mode::AsyncSim,
        "async-threaded" => Mode::AsyncThreaded,
        other => {
            return Err(Error::Config(format!(
                "mode must be serial, async-sim or async-threaded, got {other:?}"
            )));
        }
    };
    let stale_policy = match raw.take("stale_policy").as_deref() {
        None | Some("drop") => Policy::Drop,
        Some("apply") => Policy::Apply,
        Some(other) => {
            return Err(Error::Config(format!(
                "stale_policy must be drop or apply, got {other:?}"
            )));
        }
    };

    let out_dir = match out_override {
        Some(dir) => {
            raw.take("out_dir");
            dir
        }
        None => PathBuf::from(
            raw.take("out_dir")
                .ok_or_else(|| Error::Config("set `out_dir` in the config or pass --out".into()))?,
        ),
    };

    let config = ExperimentConfig {
        corpus,
        vocab,
        synthetic,
        train_fraction: raw.take_parse("train_fraction")?.unwrap_or(1.0),
        validation_docs: raw.take_parse("validation_docs")?.unwrap_or(0),
        test_docs: raw.require("test_docs")?,
        split_seed: raw.take_parse("split_seed")?.unwrap_or(seed),
        num_topics: raw.require("num_topics")?,
        alpha: raw.require("alpha")?,
        eta: raw.require("eta")?,
        kappa: raw.require("kappa")?,
        tau0: raw.require("tau0")?,
        mode,
        batch: raw.require("batch")?,
        iterations: raw.require("iterations")?,
        eval_every: raw.take_parse("eval_every")?.unwrap_or(0),
        seed,
        num_workers: raw.take_parse("num_workers")?.unwrap_or(1),
        gradients_per_update: raw.take_parse("gradients_per_update")?.unwrap_or(1),
        max_staleness: raw.take_parse("max_staleness")?.unwrap_or(5),
        stale_policy,
        delay_default: raw.take_parse("delay_default")?.unwrap_or(0),
        delay_csv: raw.take("delay_csv").map(PathBuf::from),
        per_doc_cost_ms: raw.take_parse("per_doc_cost_ms")?,
        out_dir,
        reference_perplexity: raw.take_parse("reference_perplexity")?,
    };
    raw.finish()?;

    if config.test_docs == 0 {
        return Err(Error::Config("test_docs must be at least 1".into()));
    }
    if config.batch == 0 || config.iterations == 0 {
        return Err(Error::Config("batch and iterations must be at least 1".into()));
    }
    if config.mode == Mode::Serial {
        if config.delay_csv.is_some() || config.delay_default != 0 {
            return Err(Error::Config("delay settings only apply to async-sim mode".into()));
        }
    }
    if config.mode != Mode::AsyncThreaded && config.per_doc_cost_ms.is_some() {
        return Err(Error::Config("per_doc_cost_ms only applies to async-threaded mode".into()));
    }
    Ok(config)
}
