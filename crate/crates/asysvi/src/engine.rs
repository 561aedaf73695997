//! Asynchronous master-worker SVI with bounded staleness, in two modes.
//!
//! The topology is a star: one master owns λ and is its only writer;
//! workers pull immutable λ snapshots, compute stochastic natural gradients
//! against them, and push the results back. The master blocks until it has
//! aggregated exactly M gradients, steps λ once, and publishes the new
//! version; a gradient's age is the number of master updates between its
//! snapshot pull and its arrival.
//!
//! Simulation mode replays this protocol single-threaded under an explicit
//! delay schedule, making every interleaving reproducible bit for bit; it
//! is the test vehicle. Threaded mode runs real worker threads over a
//! channel; it is the performance vehicle. Both share the gradient
//! computation and the master's accept/aggregate/update step.
//!
//! Gradients older than the bound B are dropped by default (and counted),
//! which turns the bounded-delay assumption behind the convergence
//! argument into a runtime guarantee; the permissive policy applies them
//! anyway and records the violation, for studying what the bound buys.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, RwLock};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::expfam::{
    aggregate_gradients, apply_gradient, learning_rate, GlobalParams, HyperParams,
    LearningSchedule, NaturalGradient,
};
use crate::lda::{held_out_bound_with, init_lambda, local_step_with, natural_gradient, Document,
    TopicExpectations, DEFAULT_LOCAL_MAX_ITERS, DEFAULT_LOCAL_TOL};
use crate::metrics::{Checkpoint, RunMetrics};
use crate::serial::{check_driver_inputs, sample_batch, BATCH_STREAM_BASE, INIT_STREAM};

/// What to do with a gradient older than the staleness bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StalePolicy {
    /// Discard it and wait for a fresher one; the bound becomes a runtime
    /// guarantee on every applied gradient.
    Drop,
    /// Apply it anyway and record the violation.
    Apply,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsyncConfig {
    pub num_workers: usize,
    /// M: gradients aggregated into each master update.
    pub gradients_per_update: usize,
    /// B: largest staleness an applied gradient may carry.
    pub max_staleness: u64,
    /// S: documents per worker batch.
    pub worker_batch_size: usize,
    pub schedule: LearningSchedule,
    /// T: number of master updates.
    pub num_iterations: u64,
    /// Evaluate every this many updates; 0 means only at the end.
    pub eval_every: u64,
    pub rng_seed: u64,
    pub stale_policy: StalePolicy,
    pub local_tol: f64,
    pub local_max_iters: usize,
    /// Artificial per-document compute cost, honored by threaded workers
    /// for throughput experiments. Ignored in simulation, where wall clock
    /// is not a measurement target.
    pub per_doc_cost: Option<Duration>,
}

impl AsyncConfig {
    pub fn new(
        schedule: LearningSchedule,
        num_workers: usize,
        gradients_per_update: usize,
        max_staleness: u64,
        worker_batch_size: usize,
        num_iterations: u64,
        rng_seed: u64,
    ) -> Self {
        AsyncConfig {
            num_workers,
            gradients_per_update,
            max_staleness,
            worker_batch_size,
            schedule,
            num_iterations,
            eval_every: 0,
            rng_seed,
            stale_policy: StalePolicy::Drop,
            local_tol: DEFAULT_LOCAL_TOL,
            local_max_iters: DEFAULT_LOCAL_MAX_ITERS,
            per_doc_cost: None,
        }
    }

    fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.num_workers == 0 {
            return Err(Error::config("num_workers must be at least 1"));
        }
        if self.gradients_per_update == 0 {
            return Err(Error::config("gradients_per_update must be at least 1"));
        }
        if self.num_iterations == 0 {
            return Err(Error::config("num_iterations must be at least 1"));
        }
        if self.worker_batch_size == 0 {
            return Err(Error::config("worker_batch_size must be at least 1"));
        }
        if self.worker_batch_size > corpus.num_docs() {
            return Err(Error::config(format!(
                "worker_batch_size {} exceeds corpus size {}",
                self.worker_batch_size,
                corpus.num_docs()
            )));
        }
        Ok(())
    }
}

/// Maps (master iteration, collection slot) to the age of the snapshot the
/// slot's gradient was computed against. Unlisted pairs take the default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelaySchedule {
    default: u64,
    overrides: BTreeMap<(u64, usize), u64>,
}

impl DelaySchedule {
    pub fn zero() -> Self {
        DelaySchedule::constant(0)
    }

    pub fn constant(delay: u64) -> Self {
        DelaySchedule { default: delay, overrides: BTreeMap::new() }
    }

    pub fn with_entry(mut self, iteration: u64, slot: usize, delay: u64) -> Self {
        self.overrides.insert((iteration, slot), delay);
        self
    }

    /// Replaces the delay used for pairs without an explicit entry.
    pub fn with_default(mut self, delay: u64) -> Self {
        self.default = delay;
        self
    }

    pub fn delay(&self, iteration: u64, slot: usize) -> u64 {
        *self.overrides.get(&(iteration, slot)).unwrap_or(&self.default)
    }

    pub fn max_delay(&self) -> u64 {
        self.overrides.values().copied().fold(self.default, u64::max)
    }

    /// True when every delay this schedule can produce is at most `bound`.
    pub fn is_bounded_by(&self, bound: u64) -> bool {
        self.max_delay() <= bound
    }

    /// Reads override triples "iteration,slot,delay", one per line. Blank
    /// lines, `#` comments, and a literal header line are skipped; the
    /// default delay for unlisted pairs is 0.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut schedule = DelaySchedule::zero();
        for (offset, line) in reader.lines().enumerate() {
            let line_no = offset + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected \"iteration,slot,delay\", got {trimmed:?}"),
                });
            }
            if line_no == 1 && fields[0].chars().any(|c| c.is_ascii_alphabetic()) {
                continue;
            }
            let parse = |field: &str, what: &str| -> Result<u64> {
                field.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("{what} must be a non-negative integer, got {field:?}"),
                })
            };
            let iteration = parse(fields[0], "iteration")?;
            let slot = parse(fields[1], "slot")? as usize;
            let delay = parse(fields[2], "delay")?;
            schedule.overrides.insert((iteration, slot), delay);
        }
        Ok(schedule)
    }
}

/// Observed staleness accounting for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StalenessStats {
    /// Staleness value → number of gradients received with it (applied and
    /// dropped alike).
    pub histogram: BTreeMap<u64, u64>,
    /// Largest staleness among applied gradients. Never exceeds the bound
    /// under the drop policy.
    pub max_observed: u64,
    /// Gradients discarded for exceeding the bound.
    pub dropped_count: u64,
    /// Over-bound gradients applied under the permissive policy.
    pub over_limit_applied: u64,
}

impl StalenessStats {
    pub fn received_total(&self) -> u64 {
        self.histogram.values().sum()
    }

    pub fn applied_total(&self) -> u64 {
        self.received_total() - self.dropped_count
    }

    pub fn mean_received(&self) -> f64 {
        let total = self.received_total();
        if total == 0 {
            return 0.0;
        }
        let sum: u64 = self.histogram.iter().map(|(&s, &n)| s * n).sum();
        sum as f64 / total as f64
    }
}

/// One worker-to-master message: a gradient tagged with its origin.
#[derive(Debug, Clone)]
pub struct GradientMsg {
    pub gradient: NaturalGradient,
    pub worker_id: usize,
}

/// λ snapshot with a checksum over its contents, so readers can prove they
/// never see a torn mix of two versions.
#[derive(Debug, Clone)]
pub struct Snapshot {
    params: GlobalParams,
    checksum: u64,
}

impl Snapshot {
    fn new(params: GlobalParams) -> Self {
        let checksum = checksum_params(&params);
        Snapshot { params, checksum }
    }

    pub fn params(&self) -> &GlobalParams {
        &self.params
    }

    pub fn verify(&self) -> bool {
        checksum_params(&self.params) == self.checksum
    }
}

fn checksum_params(params: &GlobalParams) -> u64 {
    // FNV-1a over the version and the value bit patterns.
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: [u8; 8]| {
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    eat(params.version().to_le_bytes());
    for v in params.values() {
        eat(v.to_bits().to_le_bytes());
    }
    hash
}

/// The master's published λ. The master swaps in a freshly checksummed
/// snapshot per version; workers clone the Arc under a read lock, so a
/// reader always holds exactly one whole published version.
pub struct SharedLambda {
    slot: RwLock<Arc<Snapshot>>,
}

impl SharedLambda {
    pub fn new(params: GlobalParams) -> Self {
        SharedLambda { slot: RwLock::new(Arc::new(Snapshot::new(params))) }
    }

    pub fn publish(&self, params: GlobalParams) {
        let snapshot = Arc::new(Snapshot::new(params));
        *self.slot.write().expect("snapshot lock poisoned") = snapshot;
    }

    pub fn pull(&self) -> Arc<Snapshot> {
        Arc::clone(&self.slot.read().expect("snapshot lock poisoned"))
    }
}

/// One worker batch: sample S documents from the worker's own stream, run
/// local steps against the snapshot, return the scaled natural gradient.
fn compute_gradient(
    corpus: &Corpus,
    hp: &HyperParams,
    snapshot: &GlobalParams,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    local_tol: f64,
    local_max_iters: usize,
    per_doc_cost: Option<Duration>,
) -> Result<NaturalGradient> {
    let indices = sample_batch(rng, corpus.num_docs(), batch_size);
    let batch: Vec<Document> = indices.iter().map(|&i| corpus.docs()[i].clone()).collect();
    let exps = TopicExpectations::new(snapshot);
    let locals = batch
        .iter()
        .map(|doc| {
            if let Some(cost) = per_doc_cost {
                busy_wait(cost);
            }
            local_step_with(doc, &exps, hp, local_tol, local_max_iters)
        })
        .collect::<Result<Vec<_>>>()?;
    natural_gradient(&batch, &locals, snapshot, hp)
}

fn busy_wait(cost: Duration) {
    let end = Instant::now() + cost;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

/// Dispersion of the aggregated messages around their mean, the async
/// analogue of the serial per-document gradient variance column.
fn message_dispersion(pending: &[NaturalGradient]) -> f64 {
    if pending.len() <= 1 {
        return 0.0;
    }
    let mut mean = Array2::<f64>::zeros(pending[0].values.dim());
    for g in pending {
        mean += &g.values;
    }
    mean.mapv_inplace(|v| v / pending.len() as f64);
    pending
        .iter()
        .map(|g| (&g.values - &mean).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / pending.len() as f64
}

/// Accept/drop bookkeeping and the update step, shared by both modes.
struct MasterState {
    lambda: GlobalParams,
    stats: StalenessStats,
    pending: Vec<NaturalGradient>,
    consecutive_drops: u64,
    docs_processed: u64,
}

impl MasterState {
    fn new(lambda: GlobalParams) -> Self {
        MasterState {
            lambda,
            stats: StalenessStats::default(),
            pending: Vec::new(),
            consecutive_drops: 0,
            docs_processed: 0,
        }
    }

    /// Screens one received gradient against the staleness bound. Returns
    /// whether it joined the pending aggregate.
    fn offer(&mut self, msg: GradientMsg, iteration: u64, config: &AsyncConfig) -> Result<bool> {
        if msg.gradient.base_version > iteration {
            return Err(Error::domain(format!(
                "gradient from worker {} claims base version {} ahead of master iteration {iteration}",
                msg.worker_id, msg.gradient.base_version
            )));
        }
        let staleness = iteration - msg.gradient.base_version;
        *self.stats.histogram.entry(staleness).or_insert(0) += 1;

        if staleness > config.max_staleness {
            match config.stale_policy {
                StalePolicy::Drop => {
                    self.stats.dropped_count += 1;
                    self.consecutive_drops += 1;
                    let limit = 10 * config.gradients_per_update as u64;
                    if self.consecutive_drops > limit {
                        return Err(Error::StalenessStarvation {
                            iteration,
                            consecutive_drops: self.consecutive_drops,
                        });
                    }
                    return Ok(false);
                }
                StalePolicy::Apply => {
                    self.stats.over_limit_applied += 1;
                }
            }
        }
        self.consecutive_drops = 0;
        self.stats.max_observed = self.stats.max_observed.max(staleness);
        self.pending.push(msg.gradient);
        Ok(true)
    }

    /// Aggregates the M pending gradients and steps λ once.
    fn update(&mut self, iteration: u64, schedule: &LearningSchedule) -> Result<()> {
        let aggregate = aggregate_gradients(&self.pending)?;
        self.pending.clear();
        let rho = learning_rate(iteration, schedule);
        self.lambda = apply_gradient(&self.lambda, &aggregate, rho)?;
        self.docs_processed += aggregate.batch_size as u64;
        Ok(())
    }

    fn checkpoint(
        &self,
        iteration: u64,
        rho: f64,
        variance: f64,
        wall: f64,
        eval: crate::lda::EvalResult,
    ) -> Checkpoint {
        Checkpoint {
            iteration,
            docs_processed: self.docs_processed,
            rho,
            gradient_variance: variance,
            held_out_bound: eval.total_log_likelihood_bound,
            perplexity: eval.perplexity,
            wall_clock_seconds: wall,
            staleness_mean: Some(self.stats.mean_received()),
            staleness_max: Some(self.stats.max_observed),
            dropped_total: Some(self.stats.dropped_count),
        }
    }
}

fn seeded_worker_rng(seed: u64, worker_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM_BASE + worker_id as u64);
    rng
}

fn initial_lambda(corpus: &Corpus, hp: &HyperParams, seed: u64) -> Result<GlobalParams> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(INIT_STREAM);
    init_lambda(hp.num_topics, corpus.vocab_size(), &mut init_rng)
}

/// Runs the asynchronous protocol in whichever mode the arguments select:
/// with a delay schedule the run is the deterministic simulation, without
/// one it spawns real worker threads.
pub fn master_loop(
    corpus: &Corpus,
    test_docs: &[Document],
    hp: &HyperParams,
    config: &AsyncConfig,
    delays: Option<&DelaySchedule>,
) -> Result<(GlobalParams, RunMetrics, StalenessStats)> {
    match delays {
        Some(schedule) => simulate(corpus, test_docs, hp, config, schedule),
        None => run_threaded(corpus, test_docs, hp, config),
    }
}

/// Deterministic replay of the master-worker protocol.
///
/// The collection slot (t, m) is served by worker (global attempt count mod
/// num_workers) against the λ snapshot of version t − delay(t, m), clamped
/// at 0. A dropped slot re-collects at the next slot index, so exactly M
/// accepted gradients enter every update. Given (seed, schedule, config)
/// the entire run is bitwise reproducible; with one worker, M = 1, and an
/// all-zero schedule it reproduces the serial driver exactly.
pub fn simulate(
    corpus: &Corpus,
    test_docs: &[Document],
    hp: &HyperParams,
    config: &AsyncConfig,
    delays: &DelaySchedule,
) -> Result<(GlobalParams, RunMetrics, StalenessStats)> {
    check_driver_inputs(corpus, test_docs, hp)?;
    config.validate(corpus)?;

    let mut state = MasterState::new(initial_lambda(corpus, hp, config.rng_seed)?);
    let mut workers: Vec<ChaCha8Rng> =
        (0..config.num_workers).map(|w| seeded_worker_rng(config.rng_seed, w)).collect();

    // λ versions still reachable by a delayed pull; front is the oldest.
    let depth = config
        .max_staleness
        .max(delays.max_delay())
        .saturating_add(1)
        .min(config.num_iterations + 1) as usize;
    let mut history: VecDeque<GlobalParams> = VecDeque::with_capacity(depth);
    history.push_back(state.lambda.clone());

    let mut metrics = RunMetrics::new();
    metrics.test_set_words = test_docs.iter().map(Document::total_count).sum();
    let mut eval_seconds = 0.0;
    let run_started = Instant::now();
    let mut attempt_counter: u64 = 0;

    for t in 0..config.num_iterations {
        let mut slot = 0usize;
        while state.pending.len() < config.gradients_per_update {
            let tau = delays.delay(t, slot);
            let version = t.saturating_sub(tau);
            let front_version = t + 1 - history.len() as u64;
            let snapshot = &history[(version - front_version) as usize];
            debug_assert_eq!(snapshot.version(), version);

            let worker_id = (attempt_counter % config.num_workers as u64) as usize;
            let gradient = compute_gradient(
                corpus,
                hp,
                snapshot,
                &mut workers[worker_id],
                config.worker_batch_size,
                config.local_tol,
                config.local_max_iters,
                None,
            )?;
            attempt_counter += 1;
            slot += 1;
            state.offer(GradientMsg { gradient, worker_id }, t, config)?;
        }

        let at_checkpoint = (config.eval_every > 0 && (t + 1) % config.eval_every == 0)
            || t + 1 == config.num_iterations;
        let variance = if at_checkpoint { message_dispersion(&state.pending) } else { 0.0 };
        let rho = learning_rate(t, &config.schedule);
        state.update(t, &config.schedule)?;
        history.push_back(state.lambda.clone());
        while history.len() > depth {
            history.pop_front();
        }

        if at_checkpoint {
            let eval_started = Instant::now();
            let eval = held_out_bound_with(
                test_docs,
                &state.lambda,
                hp,
                config.local_tol,
                config.local_max_iters,
            )?;
            eval_seconds += eval_started.elapsed().as_secs_f64();
            let wall = run_started.elapsed().as_secs_f64() - eval_seconds;
            metrics.record(state.checkpoint(t + 1, rho, variance, wall, eval));
        }
    }

    metrics.iterations = config.num_iterations;
    metrics.eval_seconds = eval_seconds;
    metrics.optimize_seconds = run_started.elapsed().as_secs_f64() - eval_seconds;
    metrics.total_docs_processed = state.docs_processed;
    Ok((state.lambda, metrics, state.stats))
}

/// One worker thread's body: pull a verified snapshot, compute a gradient
/// batch against it, push the message, repeat until told to stop. A closed
/// channel is a clean shutdown, never an error; a torn snapshot is.
pub fn worker_loop(
    worker_id: usize,
    corpus: &Corpus,
    hp: &HyperParams,
    config: &AsyncConfig,
    shared: &SharedLambda,
    sender: &mpsc::SyncSender<GradientMsg>,
    shutdown: &AtomicBool,
) -> Result<()> {
    let mut rng = seeded_worker_rng(config.rng_seed, worker_id);
    while !shutdown.load(Ordering::Acquire) {
        let snapshot = shared.pull();
        if !snapshot.verify() {
            return Err(Error::domain(format!(
                "worker {worker_id} pulled a torn snapshot at version {}",
                snapshot.params().version()
            )));
        }
        let gradient = compute_gradient(
            corpus,
            hp,
            snapshot.params(),
            &mut rng,
            config.worker_batch_size,
            config.local_tol,
            config.local_max_iters,
            config.per_doc_cost,
        )?;
        if sender.send(GradientMsg { gradient, worker_id }).is_err() {
            break;
        }
    }
    Ok(())
}

/// Real-thread mode: spawns `num_workers` workers and drives T master
/// updates over a bounded channel. Arrival order is scheduler-dependent,
/// so unlike simulation the trajectory is not reproducible; staleness
/// accounting and the bounded-staleness guarantee hold identically.
pub fn run_threaded(
    corpus: &Corpus,
    test_docs: &[Document],
    hp: &HyperParams,
    config: &AsyncConfig,
) -> Result<(GlobalParams, RunMetrics, StalenessStats)> {
    check_driver_inputs(corpus, test_docs, hp)?;
    config.validate(corpus)?;

    let mut state = MasterState::new(initial_lambda(corpus, hp, config.rng_seed)?);
    let shared = SharedLambda::new(state.lambda.clone());
    let shutdown = AtomicBool::new(false);
    let (sender, receiver) = mpsc::sync_channel::<GradientMsg>(config.num_workers * 2);

    let mut metrics = RunMetrics::new();
    metrics.test_set_words = test_docs.iter().map(Document::total_count).sum();
    let mut eval_seconds = 0.0;

    let master_result: Result<()> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.num_workers)
            .map(|worker_id| {
                let sender = sender.clone();
                let shared = &shared;
                let shutdown = &shutdown;
                scope.spawn(move || {
                    worker_loop(worker_id, corpus, hp, config, shared, &sender, shutdown)
                })
            })
            .collect();
        drop(sender);

        let run_started = Instant::now();
        let mut run = || -> Result<()> {
            for t in 0..config.num_iterations {
                while state.pending.len() < config.gradients_per_update {
                    let msg = receiver
                        .recv_timeout(Duration::from_secs(60))
                        .map_err(|_| Error::domain("workers stopped producing gradients"))?;
                    state.offer(msg, t, config)?;
                }
                let at_checkpoint = (config.eval_every > 0 && (t + 1) % config.eval_every == 0)
                    || t + 1 == config.num_iterations;
                let variance =
                    if at_checkpoint { message_dispersion(&state.pending) } else { 0.0 };
                let rho = learning_rate(t, &config.schedule);
                state.update(t, &config.schedule)?;
                shared.publish(state.lambda.clone());

                if at_checkpoint {
                    let eval_started = Instant::now();
                    let eval = held_out_bound_with(
                        test_docs,
                        &state.lambda,
                        hp,
                        config.local_tol,
                        config.local_max_iters,
                    )?;
                    eval_seconds += eval_started.elapsed().as_secs_f64();
                    let wall = run_started.elapsed().as_secs_f64() - eval_seconds;
                    metrics.record(state.checkpoint(t + 1, rho, variance, wall, eval));
                }
            }
            Ok(())
        };
        let outcome = run();
        metrics.optimize_seconds = run_started.elapsed().as_secs_f64() - eval_seconds;

        // Unblock senders before joining: drop our receiver end.
        shutdown.store(true, Ordering::Release);
        drop(receiver);
        let mut worker_error = None;
        for handle in handles {
            match handle.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => worker_error = Some(e),
                Err(_) => worker_error = Some(Error::domain("worker thread panicked")),
            }
        }
        // A worker's failure explains a master timeout better than the
        // timeout itself does.
        match (outcome, worker_error) {
            (Ok(()), Some(e)) => Err(e),
            (Err(_), Some(e)) => Err(e),
            (outcome, None) => outcome,
        }
    });
    master_result?;

    metrics.iterations = config.num_iterations;
    metrics.eval_seconds = eval_seconds;
    metrics.total_docs_processed = state.docs_processed;
    Ok((state.lambda, metrics, state.stats))
}

/// Per-run speed-up and quality ratios: time speed-up = serial seconds over
/// parallel seconds, perplexity ratio = serial perplexity over parallel
/// perplexity. Requires runs that processed the same number of documents
/// against the same evaluation set; anything else is not a comparison.
pub fn compute_tsp_rsp(serial: &RunMetrics, parallel: &RunMetrics) -> Result<(f64, f64)> {
    if serial.total_docs_processed != parallel.total_docs_processed {
        return Err(Error::usage(format!(
            "runs processed different document counts ({} vs {})",
            serial.total_docs_processed, parallel.total_docs_processed
        )));
    }
    if serial.test_set_words != parallel.test_set_words {
        return Err(Error::usage(format!(
            "runs evaluated different test sets ({} vs {} words)",
            serial.test_set_words, parallel.test_set_words
        )));
    }
    if parallel.optimize_seconds <= 0.0 {
        return Err(Error::usage("parallel run recorded no optimization time"));
    }
    let tsp = serial.optimize_seconds / parallel.optimize_seconds;
    let rsp = serial.final_perplexity()? / parallel.final_perplexity()?;
    Ok((tsp, rsp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lda::generate_synthetic;
    use crate::serial::{run_serial, SerialConfig};
    use ndarray::array;
    use std::io::Cursor;

    fn tiny_corpus() -> Corpus {
        let beta = array![[0.5, 0.3, 0.1, 0.1], [0.1, 0.1, 0.3, 0.5]];
        generate_synthetic(&beta, 0.3, 10, 15, 123).unwrap()
    }

    fn eval_docs() -> Vec<Document> {
        vec![
            Document::new(0, vec![0, 3], vec![2, 2]).unwrap(),
            Document::new(1, vec![1, 2], vec![1, 3]).unwrap(),
        ]
    }

    fn base_config(t: u64) -> AsyncConfig {
        let schedule = LearningSchedule::new(8.0, 0.6).unwrap();
        AsyncConfig::new(schedule, 1, 1, 5, 2, t, 31)
    }

    #[test]
    fn delay_schedule_lookup_and_bounds() {
        let schedule = DelaySchedule::constant(2).with_entry(4, 1, 7);
        assert_eq!(schedule.delay(0, 0), 2);
        assert_eq!(schedule.delay(4, 1), 7);
        assert_eq!(schedule.delay(4, 2), 2);
        assert_eq!(schedule.max_delay(), 7);
        assert!(schedule.is_bounded_by(7));
        assert!(!schedule.is_bounded_by(6));
        assert_eq!(DelaySchedule::zero().max_delay(), 0);
    }

    #[test]
    fn delay_schedule_csv_round() {
        let text = "iteration,slot,delay\n# warmup is fresh\n3,0,2\n3,1,4\n10,0,1\n\n";
        let schedule = DelaySchedule::from_csv(Cursor::new(text)).unwrap();
        assert_eq!(schedule.delay(3, 0), 2);
        assert_eq!(schedule.delay(3, 1), 4);
        assert_eq!(schedule.delay(10, 0), 1);
        assert_eq!(schedule.delay(0, 0), 0);
        assert_eq!(schedule.max_delay(), 4);

        let err = DelaySchedule::from_csv(Cursor::new("1,2\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = DelaySchedule::from_csv(Cursor::new("3,0,2\n1,x,0\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn degenerate_simulation_equals_serial() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let schedule = LearningSchedule::new(8.0, 0.6).unwrap();

        let mut serial_config = SerialConfig::new(schedule, 2, 30, 31);
        serial_config.eval_every = 10;
        let (serial_lambda, serial_metrics) =
            run_serial(&corpus, &eval_docs(), &hp, &serial_config).unwrap();

        let mut async_config = base_config(30);
        async_config.eval_every = 10;
        let (sim_lambda, sim_metrics, stats) =
            simulate(&corpus, &eval_docs(), &hp, &async_config, &DelaySchedule::zero()).unwrap();

        assert!(serial_lambda.max_relative_diff(&sim_lambda) < 1e-12);
        assert_eq!(sim_lambda.version(), 30);
        assert_eq!(serial_metrics.total_docs_processed, sim_metrics.total_docs_processed);
        assert_eq!(stats.max_observed, 0);
        assert_eq!(stats.dropped_count, 0);
        // Same trajectory, same evaluations.
        for (a, b) in serial_metrics.checkpoints.iter().zip(&sim_metrics.checkpoints) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.held_out_bound, b.held_out_bound);
            assert_eq!(a.perplexity, b.perplexity);
        }
    }

    #[test]
    fn constant_delay_statistics_match_the_schedule() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let mut config = base_config(10);
        config.num_workers = 2;
        config.gradients_per_update = 2;
        config.max_staleness = 3;

        let (lambda, metrics, stats) =
            simulate(&corpus, &eval_docs(), &hp, &config, &DelaySchedule::constant(3)).unwrap();
        assert_eq!(lambda.version(), 10);
        assert_eq!(stats.max_observed, 3);
        assert_eq!(stats.dropped_count, 0);
        // Clamped warmup: staleness t at t < 3, then 3 for the rest.
        assert_eq!(stats.histogram, BTreeMap::from([(0, 2), (1, 2), (2, 2), (3, 14)]));
        assert_eq!(stats.received_total(), 20);
        assert_eq!(metrics.total_docs_processed, 10 * 2 * 2);
    }

    #[test]
    fn over_limit_entry_is_dropped_and_recollected() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let mut config = base_config(8);
        config.gradients_per_update = 2;
        config.num_workers = 2;
        config.max_staleness = 2;

        let delays = DelaySchedule::zero().with_entry(5, 0, 3);
        let (lambda, metrics, stats) =
            simulate(&corpus, &eval_docs(), &hp, &config, &delays).unwrap();
        assert_eq!(stats.dropped_count, 1);
        assert_eq!(stats.max_observed, 0);
        assert_eq!(stats.received_total(), 8 * 2 + 1);
        assert_eq!(stats.applied_total(), 16);
        // The dropped slot was re-collected: every update still aggregated
        // exactly M gradients, and the run completed all iterations.
        assert_eq!(lambda.version(), 8);
        assert_eq!(metrics.total_docs_processed, 8 * 2 * 2);
    }

    #[test]
    fn persistent_staleness_starves_under_drop_policy() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let mut config = base_config(5);
        config.max_staleness = 0;

        let err = simulate(&corpus, &eval_docs(), &hp, &config, &DelaySchedule::constant(1))
            .unwrap_err();
        match err {
            Error::StalenessStarvation { iteration, consecutive_drops } => {
                assert_eq!(iteration, 1);
                assert_eq!(consecutive_drops, 11);
            }
            other => panic!("expected starvation, got {other:?}"),
        }
    }

    #[test]
    fn apply_policy_records_violations_instead_of_dropping() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let mut config = base_config(4);
        config.max_staleness = 0;
        config.stale_policy = StalePolicy::Apply;

        let (lambda, _, stats) =
            simulate(&corpus, &eval_docs(), &hp, &config, &DelaySchedule::constant(1)).unwrap();
        assert_eq!(lambda.version(), 4);
        assert_eq!(stats.dropped_count, 0);
        // t=0 clamps to version 0 (fresh); t=1..3 violate the zero bound.
        assert_eq!(stats.over_limit_applied, 3);
        assert_eq!(stats.max_observed, 1);
    }

    #[test]
    fn simulation_is_deterministic() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let mut config = base_config(12);
        config.num_workers = 3;
        config.gradients_per_update = 2;
        let delays = DelaySchedule::constant(1).with_entry(6, 0, 4);

        let (a, am, astats) = simulate(&corpus, &eval_docs(), &hp, &config, &delays).unwrap();
        let (b, bm, bstats) = simulate(&corpus, &eval_docs(), &hp, &config, &delays).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(am.to_csv_string(), bm.to_csv_string());
        assert_eq!(astats, bstats);

        let mut reseeded = config;
        reseeded.rng_seed = 32;
        let (c, _, _) = simulate(&corpus, &eval_docs(), &hp, &reseeded, &delays).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn worker_streams_are_distinct() {
        let mut w0 = seeded_worker_rng(7, 0);
        let mut w1 = seeded_worker_rng(7, 1);
        let a = sample_batch(&mut w0, 1000, 100);
        let b = sample_batch(&mut w1, 1000, 100);
        assert_ne!(a, b);
    }

    #[test]
    fn snapshots_are_never_torn() {
        let make = |fill: f64, version: u64| {
            GlobalParams::new(Array2::from_elem((4, 16), fill))
                .map(|p| {
                    // Distinct content per version so a torn mix would break
                    // the checksum.
                    let values = p.values().mapv(|v| v + version as f64);
                    GlobalParams::new(values).unwrap()
                })
                .unwrap()
        };
        let shared = SharedLambda::new(make(1.0, 0));
        let stop = AtomicBool::new(false);
        std::thread::scope(|scope| {
            let shared_ref = &shared;
            let stop_ref = &stop;
            let readers: Vec<_> = (0..2)
                .map(|_| {
                    scope.spawn(move || {
                        let mut pulls = 0u64;
                        let mut last_version = 0u64;
                        while !stop_ref.load(Ordering::Acquire) {
                            let snap = shared_ref.pull();
                            assert!(snap.verify(), "torn snapshot observed");
                            let v = snap.params().version();
                            assert!(v >= last_version, "published versions went backwards");
                            last_version = v;
                            pulls += 1;
                        }
                        pulls
                    })
                })
                .collect();
            for version in 1..300u64 {
                shared_ref.publish(GlobalParams::from_parts(
                    make(1.5, version).values().clone(),
                    version,
                ));
            }
            stop.store(true, Ordering::Release);
            for reader in readers {
                assert!(reader.join().unwrap() > 0);
            }
        });
    }

    #[test]
    fn threaded_run_completes_with_coherent_accounting() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let schedule = LearningSchedule::new(8.0, 0.6).unwrap();
        let mut config = AsyncConfig::new(schedule, 2, 2, 1_000_000, 1, 6, 77);
        config.eval_every = 3;

        let (lambda, metrics, stats) =
            run_threaded(&corpus, &eval_docs(), &hp, &config).unwrap();
        assert_eq!(lambda.version(), 6);
        assert!(lambda.values().iter().all(|&v| v > 0.0));
        assert_eq!(metrics.total_docs_processed, 6 * 2);
        assert_eq!(stats.dropped_count, 0);
        assert!(stats.received_total() >= stats.applied_total());
        assert_eq!(stats.applied_total(), 12);
        assert_eq!(metrics.checkpoints.len(), 2);
        assert!(metrics.checkpoints[0].staleness_mean.is_some());
        assert!(metrics.optimize_seconds > 0.0);
    }

    #[test]
    fn master_loop_dispatches_on_schedule_presence() {
        let corpus = tiny_corpus();
        let hp = HyperParams::new(0.2, 0.1, 2, corpus.num_docs()).unwrap();
        let config = base_config(3);
        let (sim, _, _) =
            master_loop(&corpus, &eval_docs(), &hp, &config, Some(&DelaySchedule::zero()))
                .unwrap();
        let (thr, _, _) = master_loop(&corpus, &eval_docs(), &hp, &config, None).unwrap();
        assert_eq!(sim.version(), 3);
        assert_eq!(thr.version(), 3);
    }

    #[test]
    fn tsp_rsp_arithmetic_and_guards() {
        let mut serial = RunMetrics::new();
        serial.total_docs_processed = 800;
        serial.optimize_seconds = 100.0;
        serial.test_set_words = 50;
        serial.record(Checkpoint {
            iteration: 1,
            docs_processed: 800,
            rho: 1.0,
            gradient_variance: 0.0,
            held_out_bound: -10.0,
            perplexity: 4.0,
            wall_clock_seconds: 100.0,
            staleness_mean: None,
            staleness_max: None,
            dropped_total: None,
        });

        let mut parallel = serial.clone();
        parallel.optimize_seconds = 25.0;
        let (tsp, rsp) = compute_tsp_rsp(&serial, &parallel).unwrap();
        assert_eq!(tsp, 4.0);
        assert_eq!(rsp, 1.0);

        let (tsp, rsp) = compute_tsp_rsp(&serial, &serial).unwrap();
        assert_eq!(tsp, 1.0);
        assert_eq!(rsp, 1.0);

        let mut mismatched = parallel.clone();
        mismatched.total_docs_processed = 801;
        assert!(matches!(compute_tsp_rsp(&serial, &mismatched), Err(Error::Usage(_))));

        let mut other_test_set = parallel.clone();
        other_test_set.test_set_words = 51;
        assert!(matches!(compute_tsp_rsp(&serial, &other_test_set), Err(Error::Usage(_))));
    }
}
