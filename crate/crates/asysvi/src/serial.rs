//! Reference single-threaded driver: the determinism baseline every other
//! mode is compared against, and the numerator of the speed-up ratios.
//!
//! Each iteration samples a mini-batch uniformly with replacement, runs the
//! local step per document, forms the scaled natural gradient, and moves λ
//! by ρ_t along it. Sampling with replacement keeps the gradient estimate
//! unbiased; epoch shuffling would not.
//!
//! RNG streams are fixed by convention: stream 0 initializes λ, stream 1
//! drives batch sampling. The async engine assigns stream 1 + w to worker
//! w, so its single-worker degenerate case replays this driver's exact
//! document sequence.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::expfam::{apply_gradient, learning_rate, GlobalParams, HyperParams, LearningSchedule};
use crate::lda::{
    gradient_dispersion, held_out_bound_with, init_lambda, local_step_with, natural_gradient,
    Document, TopicExpectations, DEFAULT_LOCAL_MAX_ITERS, DEFAULT_LOCAL_TOL,
};
use crate::metrics::{Checkpoint, RunMetrics};

/// Stream id for λ initialization draws.
pub(crate) const INIT_STREAM: u64 = 0;
/// Stream id for the serial batch sampler; worker w of the async engine
/// uses BATCH_STREAM_BASE + w.
pub(crate) const BATCH_STREAM_BASE: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerialConfig {
    pub schedule: LearningSchedule,
    pub batch_size: usize,
    /// T, the number of stochastic updates.
    pub num_iterations: u64,
    /// Evaluate every this many iterations; 0 means only at the end. The
    /// final iteration is always evaluated.
    pub eval_every: u64,
    pub rng_seed: u64,
    pub local_tol: f64,
    pub local_max_iters: usize,
}

impl SerialConfig {
    pub fn new(schedule: LearningSchedule, batch_size: usize, num_iterations: u64, rng_seed: u64) -> Self {
        SerialConfig {
            schedule,
            batch_size,
            num_iterations,
            eval_every: 0,
            rng_seed,
            local_tol: DEFAULT_LOCAL_TOL,
            local_max_iters: DEFAULT_LOCAL_MAX_ITERS,
        }
    }

    pub(crate) fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.num_iterations == 0 {
            return Err(Error::config("num_iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.batch_size > corpus.num_docs() {
            return Err(Error::config(format!(
                "batch_size {} exceeds corpus size {}",
                self.batch_size,
                corpus.num_docs()
            )));
        }
        Ok(())
    }
}

/// `batch_size` uniform draws over `[0, num_docs)` with replacement, taken
/// left to right from the generator. Same generator state, same batch.
/// Requires `num_docs ≥ 1`.
pub fn sample_batch(rng: &mut impl Rng, num_docs: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.random_range(0..num_docs)).collect()
}

pub(crate) fn check_driver_inputs(
    corpus: &Corpus,
    test_docs: &[Document],
    hp: &HyperParams,
) -> Result<()> {
    if corpus.num_docs() == 0 {
        return Err(Error::usage("training corpus is empty"));
    }
    if test_docs.is_empty() {
        return Err(Error::usage("evaluation needs at least one held-out document"));
    }
    if hp.corpus_size != corpus.num_docs() {
        return Err(Error::usage(format!(
            "hyperparameter corpus_size {} does not match training corpus size {}; \
             gradient scaling would be wrong",
            hp.corpus_size,
            corpus.num_docs()
        )));
    }
    Ok(())
}

/// Runs T stochastic updates and returns the final topics with the run's
/// measurements. Fully deterministic given `config.rng_seed`: the sampled
/// batches, the λ trajectory, and every CSV column replay exactly.
///
/// Evaluation works on the λ of the moment without touching the batch
/// sampler, so checkpoint frequency never changes the trajectory; its cost
/// is booked to `eval_seconds`, keeping `optimize_seconds` comparable
/// across drivers.
pub fn run_serial(
    corpus: &Corpus,
    test_docs: &[Document],
    hp: &HyperParams,
    config: &SerialConfig,
) -> Result<(GlobalParams, RunMetrics)> {
    check_driver_inputs(corpus, test_docs, hp)?;
    config.validate(corpus)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    init_rng.set_stream(INIT_STREAM);
    let mut lambda = init_lambda(hp.num_topics, corpus.vocab_size(), &mut init_rng)?;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    batch_rng.set_stream(BATCH_STREAM_BASE);

    let mut metrics = RunMetrics::new();
    metrics.test_set_words = test_docs.iter().map(Document::total_count).sum();
    let mut optimize_seconds = 0.0;
    let mut eval_seconds = 0.0;

    for t in 0..config.num_iterations {
        let started = Instant::now();
        let rho = learning_rate(t, &config.schedule);

        let indices = sample_batch(&mut batch_rng, corpus.num_docs(), config.batch_size);
        let batch: Vec<Document> =
            indices.iter().map(|&i| corpus.docs()[i].clone()).collect();
        let exps = TopicExpectations::new(&lambda);
        let locals = batch
            .iter()
            .map(|doc| local_step_with(doc, &exps, hp, config.local_tol, config.local_max_iters))
            .collect::<Result<Vec<_>>>()?;
        let gradient = natural_gradient(&batch, &locals, &lambda, hp)?;

        let at_checkpoint = (config.eval_every > 0 && (t + 1) % config.eval_every == 0)
            || t + 1 == config.num_iterations;
        let variance = if at_checkpoint {
            gradient_dispersion(&batch, &locals, &lambda, hp)?
        } else {
            0.0
        };

        lambda = apply_gradient(&lambda, &gradient, rho)?;
        metrics.total_docs_processed += gradient.batch_size as u64;
        optimize_seconds += started.elapsed().as_secs_f64();

        if at_checkpoint {
            let eval_started = Instant::now();
            let eval =
                held_out_bound_with(test_docs, &lambda, hp, config.local_tol, config.local_max_iters)?;
            eval_seconds += eval_started.elapsed().as_secs_f64();
            metrics.record(Checkpoint {
                iteration: t + 1,
                docs_processed: metrics.total_docs_processed,
                rho,
                gradient_variance: variance,
                held_out_bound: eval.total_log_likelihood_bound,
                perplexity: eval.perplexity,
                wall_clock_seconds: optimize_seconds,
                staleness_mean: None,
                staleness_max: None,
                dropped_total: None,
            });
        }
    }

    metrics.iterations = config.num_iterations;
    metrics.optimize_seconds = optimize_seconds;
    metrics.eval_seconds = eval_seconds;
    Ok((lambda, metrics))
}
