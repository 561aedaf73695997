//! Run instrumentation shared by the serial and asynchronous drivers.
//!
//! Checkpoints capture only deterministic quantities in the CSV export, so
//! two runs with the same seed and config produce byte-identical files.
//! Wall-clock figures live in the struct (and the drivers' JSON summaries),
//! never in the CSV; optimization and evaluation time are tracked apart so
//! speed-up ratios compare optimization work only.

use std::io::{self, Write};

use crate::error::{Error, Result};

/// One evaluation point along a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Master iteration count at this point, strictly increasing.
    pub iteration: u64,
    /// Documents consumed by applied updates so far.
    pub docs_processed: u64,
    /// Step size used at the most recent update.
    pub rho: f64,
    /// Dispersion of the gradients entering the most recent update.
    pub gradient_variance: f64,
    pub held_out_bound: f64,
    pub perplexity: f64,
    /// Cumulative optimization seconds (excluded from the CSV).
    pub wall_clock_seconds: f64,
    /// Mean staleness over all gradients received so far; async runs only.
    pub staleness_mean: Option<f64>,
    /// Largest staleness among applied gradients so far; async runs only.
    pub staleness_max: Option<u64>,
    /// Gradients dropped for exceeding the staleness bound so far.
    pub dropped_total: Option<u64>,
}

impl Checkpoint {
    fn has_staleness(&self) -> bool {
        self.staleness_mean.is_some()
    }
}

/// Accumulated measurements of one run.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub checkpoints: Vec<Checkpoint>,
    pub iterations: u64,
    pub total_docs_processed: u64,
    /// Wall-clock seconds spent in the optimization loop.
    pub optimize_seconds: f64,
    /// Wall-clock seconds spent evaluating checkpoints.
    pub eval_seconds: f64,
    /// Token count of the evaluation set, a fingerprint for pairing runs.
    pub test_set_words: u64,
}

impl RunMetrics {
    pub fn new() -> Self {
        RunMetrics::default()
    }

    /// Appends a checkpoint, holding the line on ordering invariants:
    /// iterations strictly increase, wall clock and docs never decrease,
    /// and staleness columns are all-or-nothing across the run.
    pub fn record(&mut self, checkpoint: Checkpoint) {
        if let Some(last) = self.checkpoints.last() {
            assert!(
                checkpoint.iteration > last.iteration,
                "checkpoint iterations must strictly increase"
            );
            assert!(
                checkpoint.wall_clock_seconds >= last.wall_clock_seconds,
                "wall clock must not decrease"
            );
            assert!(
                checkpoint.docs_processed >= last.docs_processed,
                "docs processed must not decrease"
            );
            assert_eq!(
                checkpoint.has_staleness(),
                last.has_staleness(),
                "staleness columns must be present on every checkpoint or none"
            );
        }
        self.checkpoints.push(checkpoint);
    }

    pub fn final_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn final_perplexity(&self) -> Result<f64> {
        self.final_checkpoint()
            .map(|c| c.perplexity)
            .ok_or_else(|| Error::usage("run recorded no checkpoints"))
    }

    fn has_staleness(&self) -> bool {
        self.checkpoints.first().is_some_and(Checkpoint::has_staleness)
    }

    /// Writes the checkpoint table. Columns are deterministic functions of
    /// seed and config; staleness columns appear only for async runs.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let staleness = self.has_staleness();
        write!(out, "iteration,docs_processed,rho,gradient_variance,held_out_bound,perplexity")?;
        if staleness {
            write!(out, ",staleness_mean,staleness_max,dropped_total")?;
        }
        writeln!(out)?;
        for c in &self.checkpoints {
            write!(
                out,
                "{},{},{},{},{},{}",
                c.iteration, c.docs_processed, c.rho, c.gradient_variance, c.held_out_bound,
                c.perplexity
            )?;
            if staleness {
                write!(
                    out,
                    ",{},{},{}",
                    c.staleness_mean.expect("checked all-or-nothing"),
                    c.staleness_max.expect("checked all-or-nothing"),
                    c.dropped_total.expect("checked all-or-nothing"),
                )?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv content is ascii")
    }
}
