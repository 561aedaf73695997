//! Latent Dirichlet allocation as the concrete model: the per-document
//! E-step, sufficient statistics, the stochastic natural gradient, held-out
//! evaluation, and a seeded synthetic-corpus generator.
//!
//! The global parameter is the K×W matrix of topic Dirichlet parameters λ.
//! Each document contributes through its topic proportions γ and per-word
//! responsibilities φ; everything a driver pushes back to λ flows through
//! the counts-weighted φ statistics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::expfam::{GlobalParams, HyperParams, NaturalGradient};
use crate::math::{digamma, ln_gamma};

/// Default mean absolute γ change below which a local step stops.
pub const DEFAULT_LOCAL_TOL: f64 = 1e-3;
/// Default cap on local-step coordinate ascent iterations.
pub const DEFAULT_LOCAL_MAX_ITERS: usize = 100;

/// A bag-of-words document: sorted distinct word ids with positive counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    doc_id: usize,
    word_ids: Vec<usize>,
    counts: Vec<u64>,
}

impl Document {
    /// `word_ids` must be strictly increasing and parallel to `counts`,
    /// every count at least 1, and the document non-empty (inference is
    /// undefined on empty documents; the corpus parser drops them).
    pub fn new(doc_id: usize, word_ids: Vec<usize>, counts: Vec<u64>) -> Result<Self> {
        if word_ids.len() != counts.len() {
            return Err(Error::usage(format!(
                "document {doc_id}: {} word ids but {} counts",
                word_ids.len(),
                counts.len()
            )));
        }
        if word_ids.is_empty() {
            return Err(Error::domain(format!("document {doc_id} has no words")));
        }
        if !word_ids.windows(2).all(|pair| pair[0] < pair[1]) {
            return Err(Error::domain(format!(
                "document {doc_id}: word ids must be strictly increasing"
            )));
        }
        if counts.contains(&0) {
            return Err(Error::domain(format!("document {doc_id}: counts must be at least 1")));
        }
        Ok(Document { doc_id, word_ids, counts })
    }

    /// Builds from unordered (word, count) pairs, merging duplicates.
    pub fn from_pairs(doc_id: usize, mut pairs: Vec<(usize, u64)>) -> Result<Self> {
        pairs.sort_by_key(|&(word, _)| word);
        let mut word_ids = Vec::with_capacity(pairs.len());
        let mut counts: Vec<u64> = Vec::with_capacity(pairs.len());
        for (word, count) in pairs {
            if word_ids.last() == Some(&word) {
                *counts.last_mut().expect("parallel to word_ids") += count;
            } else {
                word_ids.push(word);
                counts.push(count);
            }
        }
        Document::new(doc_id, word_ids, counts)
    }

    pub fn doc_id(&self) -> usize {
        self.doc_id
    }

    pub(crate) fn set_doc_id(&mut self, doc_id: usize) {
        self.doc_id = doc_id;
    }

    pub fn word_ids(&self) -> &[usize] {
        &self.word_ids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of distinct words.
    pub fn num_distinct(&self) -> usize {
        self.word_ids.len()
    }

    /// Total token count.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Converged (or iteration-capped) local variational state for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    /// Per-topic Dirichlet parameter, length K; always ≥ alpha.
    pub gamma: Array1<f64>,
    /// Topic responsibilities, one row per distinct word; rows sum to 1.
    pub phi: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Held-out evaluation: a lower bound on the test log likelihood and the
/// per-word perplexity derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub total_log_likelihood_bound: f64,
    pub word_count: u64,
    pub perplexity: f64,
}

/// E[log θ_k] = ψ(param_k) − ψ(Σ param) under Dir(param). Every output is
/// negative except the singleton case, which is exactly 0.
pub fn dirichlet_expectation(param: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if param.is_empty() {
        return Err(Error::domain("dirichlet_expectation of an empty vector"));
    }
    if let Some(&bad) = param.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!(
            "dirichlet_expectation requires strictly positive entries, got {bad}"
        )));
    }
    let total = digamma(param.sum());
    Ok(param.mapv(|v| digamma(v) - total))
}

/// Row-wise [`dirichlet_expectation`] over a matrix of Dirichlet parameters.
pub fn dirichlet_expectation_rows(params: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(params.dim());
    for (row, mut out_row) in params.rows().into_iter().zip(out.rows_mut()) {
        out_row.assign(&dirichlet_expectation(row)?);
    }
    Ok(out)
}

/// E[log β] precomputed once per λ snapshot and shared across the local
/// steps of a batch.
#[derive(Debug, Clone)]
pub struct TopicExpectations {
    elog_beta: Array2<f64>,
    version: u64,
}

impl TopicExpectations {
    pub fn new(lambda: &GlobalParams) -> Self {
        let elog_beta =
            dirichlet_expectation_rows(lambda.values()).expect("lambda entries are positive");
        TopicExpectations { elog_beta, version: lambda.version() }
    }

    pub fn elog_beta(&self) -> &Array2<f64> {
        &self.elog_beta
    }

    /// Version of the λ snapshot this was derived from.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_topics(&self) -> usize {
        self.elog_beta.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.elog_beta.ncols()
    }
}

/// Coordinate ascent on one document's (φ, γ) with topics frozen.
///
/// φ is updated in log space with a per-word log-sum-exp normalization,
/// then γ = alpha + Σ count·φ, until the mean absolute γ change drops
/// below `tol` or `max_iters` rounds pass. Hitting the cap is not an
/// error; the returned state is flagged unconverged and the run goes on.
/// The returned γ is computed from the returned φ, so the two are exactly
/// consistent.
pub fn local_step(
    doc: &Document,
    lambda: &GlobalParams,
    hp: &HyperParams,
    tol: f64,
    max_iters: usize,
) -> Result<LocalState> {
    local_step_with(doc, &TopicExpectations::new(lambda), hp, tol, max_iters)
}

/// [`local_step`] against a precomputed [`TopicExpectations`], the form
/// drivers use to amortize the K×W digamma pass over a whole batch.
pub fn local_step_with(
    doc: &Document,
    exps: &TopicExpectations,
    hp: &HyperParams,
    tol: f64,
    max_iters: usize,
) -> Result<LocalState> {
    let k = exps.num_topics();
    if k != hp.num_topics {
        return Err(Error::usage(format!(
            "topic expectations have {k} topics but hyperparameters say {}",
            hp.num_topics
        )));
    }
    if let Some(&bad) = doc.word_ids().iter().find(|&&w| w >= exps.vocab_size()) {
        return Err(Error::domain(format!(
            "document {} references word id {bad} outside vocabulary of size {}",
            doc.doc_id(),
            exps.vocab_size()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::config(format!("local tolerance must be positive, got {tol}")));
    }
    if max_iters == 0 {
        return Err(Error::config("local max_iters must be at least 1"));
    }

    let n = doc.num_distinct();
    let counts = Array1::from_iter(doc.counts().iter().map(|&c| c as f64));
    let total = counts.sum();

    // Gathered E[log beta] columns for this document's words, n×k.
    let elog_beta_doc = Array2::from_shape_fn((n, k), |(i, topic)| {
        exps.elog_beta[[topic, doc.word_ids()[i]]]
    });

    let mut gamma = Array1::from_elem(k, hp.alpha + total / k as f64);
    let mut phi = Array2::<f64>::zeros((n, k));
    let mut log_phi_row = vec![0.0; k];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let elog_theta = dirichlet_expectation(gamma.view())?;

        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for topic in 0..k {
                let v = elog_theta[topic] + elog_beta_doc[[i, topic]];
                log_phi_row[topic] = v;
                max = max.max(v);
            }
            let norm: f64 = log_phi_row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + norm.ln();
            for topic in 0..k {
                phi[[i, topic]] = (log_phi_row[topic] - log_norm).exp();
            }
        }

        let mut mean_change = 0.0;
        for topic in 0..k {
            let new = hp.alpha + counts.dot(&phi.column(topic));
            mean_change += (new - gamma[topic]).abs();
            gamma[topic] = new;
        }
        mean_change /= k as f64;
        if mean_change < tol {
            converged = true;
            break;
        }
    }

    Ok(LocalState { gamma, phi, converged, iterations })
}

/// K×W matrix of counts-weighted responsibilities, Σ_docs Σ_words
/// count·φ_{word,topic}, scattered onto the words' vocabulary columns.
pub fn batch_sufficient_stats(
    batch: &[Document],
    locals: &[LocalState],
    num_topics: usize,
    vocab_size: usize,
) -> Result<Array2<f64>> {
    if batch.len() != locals.len() {
        return Err(Error::usage(format!(
            "batch has {} documents but {} local states",
            batch.len(),
            locals.len()
        )));
    }
    let mut stats = Array2::<f64>::zeros((num_topics, vocab_size));
    for (doc, local) in batch.iter().zip(locals) {
        if local.phi.dim() != (doc.num_distinct(), num_topics) {
            return Err(Error::usage(format!(
                "local state shape {:?} does not match document {} with {} words",
                local.phi.dim(),
                doc.doc_id(),
                doc.num_distinct()
            )));
        }
        for (i, (&word, &count)) in doc.word_ids().iter().zip(doc.counts()).enumerate() {
            let count = count as f64;
            for topic in 0..num_topics {
                stats[[topic, word]] += count * local.phi[[i, topic]];
            }
        }
    }
    Ok(stats)
}

/// Stochastic natural gradient of the batch: eta + (D/S)·stats − λ, where
/// S is the batch size and D the configured corpus size. Carries the λ
/// version it was evaluated at.
pub fn natural_gradient(
    batch: &[Document],
    locals: &[LocalState],
    lambda: &GlobalParams,
    hp: &HyperParams,
) -> Result<NaturalGradient> {
    if batch.is_empty() {
        return Err(Error::usage("natural_gradient needs a non-empty batch"));
    }
    let (k, w) = lambda.shape();
    if k != hp.num_topics {
        return Err(Error::usage(format!(
            "lambda has {k} topics but hyperparameters say {}",
            hp.num_topics
        )));
    }
    let stats = batch_sufficient_stats(batch, locals, k, w)?;
    let scale = hp.corpus_size as f64 / batch.len() as f64;
    let values = stats.mapv(|s| s * scale + hp.eta) - lambda.values();
    Ok(NaturalGradient { values, base_version: lambda.version(), batch_size: batch.len() })
}

/// One full-batch coordinate round: a local step on every document, then
/// the exact global update λ = eta + Σ stats.
pub fn coordinate_ascent_round(
    docs: &[Document],
    lambda: &GlobalParams,
    hp: &HyperParams,
    tol: f64,
    max_iters: usize,
) -> Result<(GlobalParams, Vec<LocalState>)> {
    if docs.is_empty() {
        return Err(Error::usage("coordinate_ascent_round needs documents"));
    }
    let exps = TopicExpectations::new(lambda);
    let locals = docs
        .iter()
        .map(|doc| local_step_with(doc, &exps, hp, tol, max_iters))
        .collect::<Result<Vec<_>>>()?;
    let (k, w) = lambda.shape();
    let stats = batch_sufficient_stats(docs, &locals, k, w)?;
    let values = stats.mapv(|s| s + hp.eta);
    Ok((GlobalParams::from_parts(values, lambda.version() + 1), locals))
}

/// One document's contribution to the variational objective: the expected
/// word log likelihood plus the θ and z prior/entropy terms, with topics
/// frozen at the given expectations.
fn document_elbo_term(
    doc: &Document,
    local: &LocalState,
    exps: &TopicExpectations,
    hp: &HyperParams,
) -> Result<f64> {
    let k = exps.num_topics();
    let elog_theta = dirichlet_expectation(local.gamma.view())?;

    let mut score = 0.0;
    for (i, (&word, &count)) in doc.word_ids().iter().zip(doc.counts()).enumerate() {
        let mut word_term = 0.0;
        for topic in 0..k {
            let p = local.phi[[i, topic]];
            if p > 0.0 {
                word_term += p * (elog_theta[topic] + exps.elog_beta[[topic, word]] - p.ln());
            }
        }
        score += count as f64 * word_term;
    }

    let gamma_sum = local.gamma.sum();
    for topic in 0..k {
        score += (hp.alpha - local.gamma[topic]) * elog_theta[topic];
        score += ln_gamma(local.gamma[topic]);
    }
    score -= ln_gamma(gamma_sum);
    score += ln_gamma(k as f64 * hp.alpha) - k as f64 * ln_gamma(hp.alpha);
    Ok(score)
}

/// Evaluates frozen topics on held-out documents with the default local
/// tolerance; perplexity = exp(−bound / word count).
///
/// The bound covers whole documents (no document-completion split), so the
/// caller must keep these documents out of training. The per-topic prior
/// term is excluded: it is constant across the evaluations being compared.
pub fn held_out_bound(docs: &[Document], lambda: &GlobalParams, hp: &HyperParams) -> Result<EvalResult> {
    held_out_bound_with(docs, lambda, hp, DEFAULT_LOCAL_TOL, DEFAULT_LOCAL_MAX_ITERS)
}

/// [`held_out_bound`] with explicit local-step controls so evaluation can
/// mirror the training configuration.
pub fn held_out_bound_with(
    docs: &[Document],
    lambda: &GlobalParams,
    hp: &HyperParams,
    tol: f64,
    max_iters: usize,
) -> Result<EvalResult> {
    if docs.is_empty() {
        return Err(Error::usage("held_out_bound needs at least one document"));
    }
    let exps = TopicExpectations::new(lambda);
    let mut bound = 0.0;
    let mut word_count = 0u64;
    for doc in docs {
        let local = local_step_with(doc, &exps, hp, tol, max_iters)?;
        bound += document_elbo_term(doc, &local, &exps, hp)?;
        word_count += doc.total_count();
    }
    Ok(EvalResult {
        total_log_likelihood_bound: bound,
        word_count,
        perplexity: perplexity_from(bound, word_count),
    })
}

/// exp(−bound / words): the geometric-mean inverse per-word probability
/// implied by a log-likelihood bound.
pub fn perplexity_from(total_log_likelihood_bound: f64, word_count: u64) -> f64 {
    (-total_log_likelihood_bound / word_count as f64).exp()
}

/// Full variational objective over `docs` at the given locals and topics:
/// the document terms of [`held_out_bound`] plus the topic prior/entropy
/// block. This is the quantity full-batch coordinate ascent never decreases.
pub fn elbo(
    docs: &[Document],
    locals: &[LocalState],
    lambda: &GlobalParams,
    hp: &HyperParams,
) -> Result<f64> {
    if docs.len() != locals.len() {
        return Err(Error::usage(format!(
            "elbo got {} documents but {} local states",
            docs.len(),
            locals.len()
        )));
    }
    let exps = TopicExpectations::new(lambda);
    let mut score = 0.0;
    for (doc, local) in docs.iter().zip(locals) {
        score += document_elbo_term(doc, local, &exps, hp)?;
    }

    let (k, w) = lambda.shape();
    for topic in 0..k {
        let row = lambda.values().row(topic);
        for word in 0..w {
            score += (hp.eta - row[word]) * exps.elog_beta[[topic, word]];
            score += ln_gamma(row[word]);
        }
        score -= ln_gamma(row.sum());
    }
    score += k as f64 * (ln_gamma(w as f64 * hp.eta) - w as f64 * ln_gamma(hp.eta));
    Ok(score)
}

/// Mean squared Frobenius deviation of the per-document gradients (each
/// scaled as its own singleton batch) around their mean: the dispersion a
/// driver records as its gradient-noise diagnostic.
pub fn gradient_dispersion(
    batch: &[Document],
    locals: &[LocalState],
    lambda: &GlobalParams,
    hp: &HyperParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("gradient_dispersion needs a non-empty batch"));
    }
    if batch.len() != locals.len() {
        return Err(Error::usage(format!(
            "batch has {} documents but {} local states",
            batch.len(),
            locals.len()
        )));
    }
    let grads: Vec<Array2<f64>> = batch
        .iter()
        .zip(locals)
        .map(|(doc, local)| {
            natural_gradient(
                std::slice::from_ref(doc),
                std::slice::from_ref(local),
                lambda,
                hp,
            )
            .map(|g| g.values)
        })
        .collect::<Result<_>>()?;
    let mut mean = Array2::<f64>::zeros(lambda.shape());
    for g in &grads {
        mean += g;
    }
    mean.mapv_inplace(|v| v / grads.len() as f64);
    let dispersion = grads
        .iter()
        .map(|g| (g - &mean).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / grads.len() as f64;
    Ok(dispersion)
}

/// Worst matched cosine similarity between learned and reference topic
/// rows under a greedy best-pair-first assignment. Cosine is scale
/// invariant, so raw λ rows compare directly against row-stochastic
/// reference topics. Returns the minimum over matched pairs: every topic
/// must be recovered for the score to be high.
pub fn matched_topic_cosine(learned: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    if learned.dim() != reference.dim() {
        return Err(Error::ShapeMismatch { expected: reference.dim(), got: learned.dim() });
    }
    let k = learned.nrows();
    if k == 0 {
        return Err(Error::usage("matched_topic_cosine needs at least one topic"));
    }
    let cosine = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        let dot = a.dot(&b);
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut pairs = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            pairs.push((cosine(learned.row(i), reference.row(j)), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut learned_used = vec![false; k];
    let mut reference_used = vec![false; k];
    let mut worst = f64::INFINITY;
    let mut assigned = 0;
    for (score, i, j) in pairs {
        if !learned_used[i] && !reference_used[j] {
            learned_used[i] = true;
            reference_used[j] = true;
            worst = worst.min(score);
            assigned += 1;
            if assigned == k {
                break;
            }
        }
    }
    Ok(worst)
}

/// Elementwise Gamma(shape 100, scale 0.01) draws: positive, mean 1,
/// enough spread to break topic symmetry at the start of a run.
pub fn init_lambda(num_topics: usize, vocab_size: usize, rng: &mut impl Rng) -> Result<GlobalParams> {
    let gamma = Gamma::new(100.0, 0.01).expect("fixed valid parameters");
    let values: Vec<f64> = (0..num_topics * vocab_size).map(|_| gamma.sample(rng)).collect();
    let values = Array2::from_shape_vec((num_topics, vocab_size), values)
        .map_err(|e| Error::domain(e.to_string()))?;
    GlobalParams::new(values)
}

/// θ ~ Dir(alpha·1) for runtime-sized simplices, by normalizing Gamma
/// draws. Resamples on the (vanishing) all-underflow event.
fn sample_simplex(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Samples the generative process exactly: per document, topic proportions
/// θ ~ Dir(alpha·1), then for each of `doc_length` word slots a topic
/// z ~ Mult(θ) and a word x ~ Mult(beta_z). Deterministic given `seed`.
/// The vocabulary is named `w0..w{W-1}`.
pub fn generate_synthetic(
    beta: &Array2<f64>,
    alpha: f64,
    num_docs: usize,
    doc_length: usize,
    seed: u64,
) -> Result<Corpus> {
    let (k, w) = beta.dim();
    if k == 0 || w == 0 {
        return Err(Error::domain("beta must be non-empty"));
    }
    for (topic, row) in beta.rows().into_iter().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!("beta row {topic} has a negative or non-finite entry")));
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("beta row {topic} sums to {sum}, not 1")));
        }
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    if num_docs == 0 || doc_length == 0 {
        return Err(Error::config("num_docs and doc_length must be at least 1"));
    }

    let word_tables: Vec<WeightedIndex<f64>> = beta
        .rows()
        .into_iter()
        .map(|row| WeightedIndex::new(row.iter().cloned()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::domain(format!("beta row is not a usable distribution: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(num_docs);
    for doc_id in 0..num_docs {
        let theta = sample_simplex(alpha, k, &mut rng);
        let topic_table = WeightedIndex::new(&theta)
            .map_err(|e| Error::domain(format!("degenerate topic proportions: {e}")))?;
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for _ in 0..doc_length {
            let z = topic_table.sample(&mut rng);
            let x = word_tables[z].sample(&mut rng);
            *counts.entry(x).or_insert(0) += 1;
        }
        docs.push(Document::from_pairs(doc_id, counts.into_iter().collect())?);
    }
    let vocab = (0..w).map(|i| format!("w{i}")).collect();
    Corpus::new(docs, vocab)
}
