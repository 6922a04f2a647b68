//! Evaluation metrics: perplexity, top-k accuracy, MRR, ROUGE-N/L, clone
//! versus non-clone perplexity with a one-tailed Wilcoxon rank-sum test,
//! marker ablation and per-functionality statistics.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::bpe::{self, MergeTable};
use crate::corpus::ClonePair;
use crate::decoder::{self, GenerationConfig, PredictionRanking, Termination};
use crate::lexer::{EOC, SOC};
use crate::model::{LanguageModel, LmError};
use crate::par;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("{rankings} rankings but {truths} truths")]
    LengthMismatch { rankings: usize, truths: usize },
    #[error("unbalanced clone markers at position {position}")]
    UnbalancedMarkers { position: usize },
    #[error(transparent)]
    Model(#[from] LmError),
}

/// `exp(-mean(log_probs))`.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64, EvalError> {
    if log_probs.is_empty() {
        return Err(EvalError::DegenerateInput("no scored positions".into()));
    }
    Ok((-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp())
}

/// Perplexity of `ids[scored]`, each position conditioned on everything
/// before it. `scored` must lie within `1..=ids.len()`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, ids: &[u32], scored: Range<usize>) -> Result<f64, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::DegenerateInput("empty scored range".into()));
    }
    if scored.start == 0 || scored.end > ids.len() {
        return Err(EvalError::DegenerateInput(format!("scored range {scored:?} outside 1..={}", ids.len())));
    }
    perplexity_from_log_probs(&model.log_probs(ids, scored)?)
}

/// Sum of negative log-likelihood and number of scored positions over
/// every position after the first of every document.
pub fn corpus_nll<M: LanguageModel + ?Sized>(model: &M, docs: &[Vec<u32>]) -> Result<(f64, usize), LmError> {
    let per_doc = par::try_map(docs, |doc| -> Result<(f64, usize), LmError> {
        if doc.len() < 2 {
            return Ok((0.0, 0));
        }
        let lp = model.log_probs(doc, 1..doc.len())?;
        Ok((-lp.iter().sum::<f64>(), lp.len()))
    })?;
    Ok(per_doc.into_iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m)))
}

/// Perplexity over a document collection, pooling positions.
pub fn corpus_perplexity<M: LanguageModel + ?Sized>(model: &M, docs: &[Vec<u32>]) -> Result<f64, LmError> {
    let (nll, n) = corpus_nll(model, docs)?;
    if n == 0 {
        return Ok(f64::NAN);
    }
    Ok((nll / n as f64).exp())
}

fn check_lengths(rankings: &[PredictionRanking], truths: &[u32]) -> Result<(), EvalError> {
    if rankings.len() != truths.len() {
        return Err(EvalError::LengthMismatch { rankings: rankings.len(), truths: truths.len() });
    }
    if rankings.is_empty() {
        return Err(EvalError::DegenerateInput("no rankings".into()));
    }
    Ok(())
}

/// Fraction of positions whose truth is among the first `k` candidates.
pub fn top_k_accuracy(rankings: &[PredictionRanking], truths: &[u32], k: usize) -> Result<f64, EvalError> {
    check_lengths(rankings, truths)?;
    let hits = rankings.iter().zip(truths).filter(|(r, &t)| r.rank_of(t).is_some_and(|rank| rank <= k)).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Mean reciprocal rank; a truth missing from its ranking contributes 0.
pub fn mrr(rankings: &[PredictionRanking], truths: &[u32]) -> Result<f64, EvalError> {
    check_lengths(rankings, truths)?;
    let total: f64 =
        rankings.iter().zip(truths).map(|(r, &t)| r.rank_of(t).map_or(0.0, |rank| 1.0 / rank as f64)).sum();
    Ok(total / truths.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(overlap, candidate);
        let recall = ratio(overlap, reference);
        let f_measure = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        RougeScore { precision, recall, f_measure }
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be positive");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    RougeScore::from_overlap(overlap, total(candidate.len()), total(reference.len()))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_overlap(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// A scored region and the preceding ids it is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snippet {
    pub span: Range<usize>,
    pub context: Range<usize>,
}

fn with_context(span: Range<usize>, context_length: usize) -> Snippet {
    Snippet { context: span.start.saturating_sub(context_length)..span.start, span }
}

/// One snippet per `<soc>`…`<eoc>` pair, markers included.
pub fn extract_clone_snippets<T: PartialEq>(
    ids: &[T],
    soc: &T,
    eoc: &T,
    context_length: usize,
) -> Result<Vec<Snippet>, EvalError> {
    let mut out = Vec::new();
    let mut open = None;
    for (i, tok) in ids.iter().enumerate() {
        if tok == soc {
            if open.is_some() {
                return Err(EvalError::UnbalancedMarkers { position: i });
            }
            open = Some(i);
        } else if tok == eoc {
            let Some(start) = open.take() else {
                return Err(EvalError::UnbalancedMarkers { position: i });
            };
            out.push(with_context(start..i + 1, context_length));
        }
    }
    if let Some(position) = open {
        return Err(EvalError::UnbalancedMarkers { position });
    }
    Ok(out)
}

/// Maximal runs outside `snippets` (which must be sorted and disjoint).
pub fn nonclone_regions(len: usize, snippets: &[Snippet], context_length: usize) -> Vec<Snippet> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for s in snippets {
        if s.span.start > cursor {
            out.push(with_context(cursor..s.span.start, context_length));
        }
        cursor = s.span.end;
    }
    if cursor < len {
        out.push(with_context(cursor..len, context_length));
    }
    out
}

/// Perplexity of a region; `None` when no position can be scored (a
/// single id at the very start of a document).
pub fn region_perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    ids: &[u32],
    region: &Snippet,
) -> Result<Option<f64>, EvalError> {
    let window = &ids[region.context.start..region.span.end];
    let first = (region.span.start - region.context.start).max(1);
    if first >= window.len() {
        return Ok(None);
    }
    Ok(Some(perplexity(model, window, first..window.len())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneComparison {
    /// Mean clone-snippet perplexity.
    pub p4: f64,
    /// Mean non-clone-region perplexity.
    pub p5: f64,
    pub p_value: f64,
    pub clone_perplexities: Vec<f64>,
    pub nonclone_perplexities: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-region perplexities for all clone snippets and non-clone regions,
/// in document order.
pub fn region_perplexities<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[Vec<u32>],
    soc: u32,
    eoc: u32,
    context_length: usize,
) -> Result<(Vec<Option<f64>>, Vec<f64>), EvalError> {
    let mut jobs = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let snippets = extract_clone_snippets(doc, &soc, &eoc, context_length)?;
        let others = nonclone_regions(doc.len(), &snippets, context_length);
        jobs.extend(snippets.into_iter().map(|s| (d, true, s)));
        jobs.extend(others.into_iter().map(|s| (d, false, s)));
    }
    let ppls = par::try_map(&jobs, |(d, _, s)| region_perplexity(model, &docs[*d], s))?;
    let mut clones = Vec::new();
    let mut others = Vec::new();
    for ((_, is_clone, _), ppl) in jobs.iter().zip(ppls) {
        if *is_clone {
            clones.push(ppl);
        } else if let Some(p) = ppl {
            others.push(p);
        }
    }
    Ok((clones, others))
}

pub fn compare_populations(clone: Vec<f64>, nonclone: Vec<f64>) -> Result<CloneComparison, EvalError> {
    if clone.is_empty() || nonclone.is_empty() {
        return Err(EvalError::DegenerateInput("need at least one clone and one non-clone region".into()));
    }
    let p_value = wilcoxon_one_tailed(&clone, &nonclone)?;
    Ok(CloneComparison {
        p4: mean(&clone),
        p5: mean(&nonclone),
        p_value,
        clone_perplexities: clone,
        nonclone_perplexities: nonclone,
    })
}

pub fn clone_vs_nonclone_report<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[Vec<u32>],
    soc: u32,
    eoc: u32,
    context_length: usize,
) -> Result<CloneComparison, EvalError> {
    let (clones, others) = region_perplexities(model, docs, soc, eoc, context_length)?;
    compare_populations(clones.into_iter().flatten().collect(), others)
}

/// Midranks of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::DegenerateInput("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(EvalError::DegenerateInput("rank-sum test needs finite values".into()));
    }
    Ok(())
}

/// Exact `P(W <= w_obs)` for the rank sum `W` of `a`, enumerating every
/// assignment of the pooled midranks to `a`.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_samples(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let observed: f64 = ranks[..a.len()].iter().sum();
    let n = ranks.len();
    if n > 30 {
        return Err(EvalError::DegenerateInput(format!("exact enumeration over {n} values is infeasible")));
    }
    let (mut below, mut total) = (0u64, 0u64);
    let mut pick: Vec<usize> = (0..a.len()).collect();
    loop {
        let sum: f64 = pick.iter().map(|&i| ranks[i]).sum();
        total += 1;
        if sum <= observed + 1e-9 {
            below += 1;
        }
        // Next combination in lexicographic order.
        let k = pick.len();
        let Some(i) = (0..k).rev().find(|&i| pick[i] < n - k + i) else { break };
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
    Ok(below as f64 / total as f64)
}

/// Normal approximation of `P(W <= w_obs)` with tie-corrected variance
/// and a continuity correction of one half.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_samples(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let observed: f64 = ranks[..a.len()].iter().sum();
    let mean = na * (n + 1.0) / 2.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let ties: f64 = sorted
        .chunk_by(|x, y| x == y)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (observed - mean + 0.5) / var.sqrt();
    let p = Normal::standard().cdf(z);
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Largest pooled sample size that uses exact enumeration.
pub const EXACT_LIMIT: usize = 12;

/// One-tailed rank-sum test of the alternative "`a` tends to be smaller
/// than `b`". Exact for `|a| + |b| <= 12`, normal approximation otherwise.
pub fn wilcoxon_one_tailed(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() + b.len() <= EXACT_LIMIT {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// Removes clone markers from token documents.
pub fn strip_markers(docs: &[Vec<String>]) -> Vec<Vec<String>> {
    docs.iter().map(|d| d.iter().filter(|t| *t != SOC && *t != EOC).cloned().collect()).collect()
}

pub fn encode_docs(docs: &[Vec<String>], table: &MergeTable, vocab: &Vocabulary) -> Vec<Vec<u32>> {
    par::map(docs, |d| vocab.ids(&table.encode(d)))
}

/// Test perplexity with markers (P2) and with every marker removed before
/// encoding (P3).
pub fn marker_ablation<M: LanguageModel + ?Sized>(
    model: &M,
    token_docs: &[Vec<String>],
    table: &MergeTable,
    vocab: &Vocabulary,
) -> Result<(f64, f64), EvalError> {
    let with = encode_docs(token_docs, table, vocab);
    let without = encode_docs(&strip_markers(token_docs), table, vocab);
    let p2 = corpus_perplexity(model, &with)?;
    let p3 = corpus_perplexity(model, &without)?;
    if !(p2.is_finite() && p3.is_finite()) {
        return Err(EvalError::DegenerateInput("test corpus has no scorable positions".into()));
    }
    Ok((p2, p3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalityStats {
    pub functionality_id: u32,
    pub training_snippet_count: usize,
    /// Mean pair similarity; `None` without pairs.
    pub similarity_mean: Option<f64>,
    /// Population variance of pair similarity.
    pub similarity_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalityRow {
    #[serde(flatten)]
    pub stats: FunctionalityStats,
    pub test_snippet_count: usize,
    /// Mean snippet perplexity; `None` means no test snippet to evaluate.
    pub mean_perplexity: Option<f64>,
}

/// Groups snippet perplexities by functionality and attaches pair
/// similarity statistics. Every functionality seen in any input gets a row.
pub fn per_functionality_report(
    snippet_perplexities: &[(u32, f64)],
    pairs: &[ClonePair],
    training_counts: &BTreeMap<u32, usize>,
) -> Vec<FunctionalityRow> {
    let mut ids: BTreeMap<u32, ()> = BTreeMap::new();
    ids.extend(snippet_perplexities.iter().map(|(f, _)| (*f, ())));
    ids.extend(pairs.iter().map(|p| (p.functionality_id, ())));
    ids.extend(training_counts.keys().map(|f| (*f, ())));
    ids.into_keys()
        .map(|fid| {
            let ppls: Vec<f64> = snippet_perplexities.iter().filter(|(f, _)| *f == fid).map(|(_, p)| *p).collect();
            let sims: Vec<f64> =
                pairs.iter().filter(|p| p.functionality_id == fid).map(|p| p.syntactic_similarity).collect();
            let (similarity_mean, similarity_variance) = if sims.is_empty() {
                (None, None)
            } else {
                let m = mean(&sims);
                (Some(m), Some(sims.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / sims.len() as f64))
            };
            FunctionalityRow {
                stats: FunctionalityStats {
                    functionality_id: fid,
                    training_snippet_count: training_counts.get(&fid).copied().unwrap_or(0),
                    similarity_mean,
                    similarity_variance,
                },
                test_snippet_count: ppls.len(),
                mean_perplexity: (!ppls.is_empty()).then(|| mean(&ppls)),
            }
        })
        .collect()
}

/// A fixed-size window taken from document `doc` at offset `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindow {
    pub doc: usize,
    pub start: usize,
    pub len: usize,
}

impl ContextWindow {
    pub fn slice<'a, T>(&self, docs: &'a [Vec<T>]) -> &'a [T] {
        &docs[self.doc][self.start..self.start + self.len]
    }
}

/// Enumerates every stride-1 window of `window` tokens containing `soc`
/// and returns a seeded sample of up to `count` of them, in corpus order.
pub fn extract_clone_contexts<T: PartialEq>(
    docs: &[Vec<T>],
    soc: &T,
    window: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ContextWindow>, EvalError> {
    if window < 2 {
        return Err(EvalError::DegenerateInput("window must be at least 2".into()));
    }
    let mut all = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        if doc.len() < window {
            continue;
        }
        let socs: Vec<usize> = doc.iter().enumerate().filter(|(_, t)| *t == soc).map(|(i, _)| i).collect();
        for start in 0..=doc.len() - window {
            if socs.iter().any(|&p| p >= start && p < start + window) {
                all.push(ContextWindow { doc: d, start, len: window });
            }
        }
    }
    if all.is_empty() {
        return Err(EvalError::DegenerateInput("no window contains <soc>".into()));
    }
    if count >= all.len() {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// The tokens from the `<soc>` at `anchor` through the next `<eoc>`
/// (inclusive), or to the end when no `<eoc>` follows.
pub fn clone_segment<T: PartialEq + Clone>(tokens: &[T], anchor: usize, eoc: &T) -> Vec<T> {
    let rest = &tokens[anchor..];
    let end = rest.iter().position(|t| t == eoc).map_or(rest.len(), |p| p + 1);
    rest[..end].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let m = mean(xs);
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean: m, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_measure: MeanStd,
}

impl RougeSummary {
    pub fn of(scores: &[RougeScore]) -> Self {
        let col = |f: fn(&RougeScore) -> f64| MeanStd::of(&scores.iter().map(f).collect::<Vec<_>>());
        RougeSummary { precision: col(|s| s.precision), recall: col(|s| s.recall), f_measure: col(|s| s.f_measure) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionOutcome {
    pub window: (usize, usize),
    pub generated_tokens: usize,
    pub terminated_with_eoc: bool,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Completes one token-level context window and scores the predicted clone
/// segment against the corpus. The anchor is the last `<soc>` in the window.
pub fn complete_and_score<M: LanguageModel + ?Sized>(
    model: &M,
    token_docs: &[Vec<String>],
    window: &ContextWindow,
    table: &MergeTable,
    vocab: &Vocabulary,
    config: &GenerationConfig,
) -> Result<CompletionOutcome, EvalError> {
    let context = window.slice(token_docs);
    let anchor = context
        .iter()
        .rposition(|t| t == SOC)
        .ok_or_else(|| EvalError::DegenerateInput("window has no <soc>".into()))?;
    let ids = vocab.ids(&table.encode(context));
    let completion = decoder::complete_clone(model, &ids, config, vocab.eoc_id())?;
    let generated = bpe::decode_lossy(&vocab.subwords(&completion.ids));
    let mut predicted: Vec<String> = context.to_vec();
    predicted.extend(generated.iter().cloned());
    let eoc = EOC.to_string();
    let predicted = clone_segment(&predicted, anchor, &eoc);
    let truth = clone_segment(&token_docs[window.doc], window.start + anchor, &eoc);
    Ok(CompletionOutcome {
        window: (window.doc, window.start),
        generated_tokens: generated.len(),
        terminated_with_eoc: completion.reason == Termination::Eoc,
        rouge1: rouge_n(&predicted, &truth, 1),
        rouge2: rouge_n(&predicted, &truth, 2),
        rouge_l: rouge_l(&predicted, &truth),
    })
}

/// Top-k accuracies and MRR over every predicted position of `docs`
/// (capped at `max_positions` when non-zero), ranking `list_len` candidates.
pub fn ranking_metrics<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[Vec<u32>],
    ks: &[usize],
    list_len: usize,
    max_positions: usize,
) -> Result<(BTreeMap<usize, f64>, f64), EvalError> {
    let per_doc = par::try_map(docs, |doc| -> Result<Vec<PredictionRanking>, LmError> {
        let mut out = Vec::new();
        if doc.len() >= 2 {
            model.scan(&doc[..doc.len() - 1], &mut |_, dist| {
                out.push(PredictionRanking { context: Vec::new(), candidates: decoder::top_k(dist, list_len) });
            })?;
        }
        Ok(out)
    })?;
    let mut rankings = Vec::new();
    let mut truths = Vec::new();
    'outer: for (doc, ranks) in docs.iter().zip(per_doc) {
        for (i, r) in ranks.into_iter().enumerate() {
            if max_positions > 0 && rankings.len() >= max_positions {
                break 'outer;
            }
            rankings.push(r);
            truths.push(doc[i + 1]);
        }
    }
    let top = ks.iter().map(|&k| top_k_accuracy(&rankings, &truths, k).map(|a| (k, a))).collect::<Result<_, _>>()?;
    Ok((top, mrr(&rankings, &truths)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perplexities {
    /// P1: validation split.
    pub validation: Option<f64>,
    /// P2: test split.
    pub test: f64,
    /// P3: test split with clone markers removed.
    pub test_without_markers: Option<f64>,
    /// P4: mean clone-snippet perplexity.
    pub clone_snippets: f64,
    /// P5: mean non-clone-region perplexity.
    pub non_clone: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeBlock {
    pub contexts: usize,
    pub terminated_with_eoc: usize,
    pub mean_generated_tokens: f64,
    pub rouge1: RougeSummary,
    pub rouge2: RougeSummary,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Granularity of perplexity and ranking metrics.
    pub perplexity_level: String,
    /// Granularity of ROUGE scores.
    pub rouge_level: String,
    /// How region perplexities are conditioned.
    pub snippet_conditioning: String,
    pub perplexity: Perplexities,
    pub mrr: f64,
    pub top_k: BTreeMap<String, f64>,
    pub rouge: Option<RougeBlock>,
    pub per_functionality: Vec<FunctionalityRow>,
    pub wilcoxon_p: f64,
}

impl EvalReport {
    /// Canonical JSON (fixed key order, pretty-printed).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub top_k: Vec<usize>,
    /// Candidates collected per prediction for top-k and MRR.
    pub ranking_list_len: usize,
    /// Upper bound on ranked positions; 0 scores every position.
    pub max_ranked_positions: usize,
    pub ablation: bool,
    pub rouge: bool,
    pub rouge_window: usize,
    pub rouge_contexts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            top_k: vec![1, 3, 5, 10],
            ranking_list_len: 10,
            max_ranked_positions: 0,
            ablation: true,
            rouge: true,
            rouge_window: 20,
            rouge_contexts: 100,
        }
    }
}

/// Inputs for a full evaluation run.
pub struct EvalInputs<'a> {
    pub table: &'a MergeTable,
    pub vocab: &'a Vocabulary,
    /// Test split as token documents (markers and meta-tokens included).
    pub test_tokens: &'a [Vec<String>],
    /// Validation split as token documents, if available.
    pub valid_tokens: Option<&'a [Vec<String>]>,
    /// Functionality id of every clone in the test split, in corpus order.
    pub test_clone_functionalities: Option<&'a [u32]>,
    pub pairs: &'a [ClonePair],
    pub training_counts: &'a BTreeMap<u32, usize>,
    pub context_length: usize,
}

pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    inputs: &EvalInputs<'_>,
    options: &EvalOptions,
    generation: &GenerationConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let test_ids = encode_docs(inputs.test_tokens, inputs.table, inputs.vocab);
    let test = corpus_perplexity(model, &test_ids)?;
    if !test.is_finite() {
        return Err(EvalError::DegenerateInput("test corpus has no scorable positions".into()));
    }
    let validation = match inputs.valid_tokens {
        Some(v) => {
            Some(corpus_perplexity(model, &encode_docs(v, inputs.table, inputs.vocab))?).filter(|p| p.is_finite())
        }
        None => None,
    };
    let test_without_markers = if options.ablation {
        Some(marker_ablation(model, inputs.test_tokens, inputs.table, inputs.vocab)?.1)
    } else {
        None
    };

    let (soc, eoc) = (inputs.vocab.soc_id(), inputs.vocab.eoc_id());
    let (clone_ppls, nonclone_ppls) = region_perplexities(model, &test_ids, soc, eoc, inputs.context_length)?;
    let scored_pairs: Vec<(u32, f64)> = match inputs.test_clone_functionalities {
        Some(fids) if fids.len() == clone_ppls.len() => {
            fids.iter().zip(&clone_ppls).filter_map(|(f, p)| p.map(|p| (*f, p))).collect()
        }
        Some(fids) => {
            return Err(EvalError::DegenerateInput(format!(
                "manifest lists {} test clones but the corpus has {}",
                fids.len(),
                clone_ppls.len()
            )))
        }
        None => Vec::new(),
    };
    let comparison = compare_populations(clone_ppls.into_iter().flatten().collect(), nonclone_ppls)?;
    let per_functionality = per_functionality_report(&scored_pairs, inputs.pairs, inputs.training_counts);

    let (top, mrr_value) =
        ranking_metrics(model, &test_ids, &options.top_k, options.ranking_list_len, options.max_ranked_positions)?;

    let rouge = if options.rouge {
        let soc_tok = SOC.to_string();
        let windows =
            extract_clone_contexts(inputs.test_tokens, &soc_tok, options.rouge_window, options.rouge_contexts, seed)?;
        let outcomes = par::try_map(&windows, |w| {
            let cfg = GenerationConfig {
                seed: generation.seed ^ ((w.doc as u64) << 32 | w.start as u64),
                ..generation.clone()
            };
            complete_and_score(model, inputs.test_tokens, w, inputs.table, inputs.vocab, &cfg)
        })?;
        Some(summarize_completions(&outcomes))
    } else {
        None
    };

    Ok(EvalReport {
        perplexity_level: "subword".into(),
        rouge_level: "token".into(),
        snippet_conditioning: format!(
            "each region is conditioned on up to {} preceding in-document subwords; only region positions are scored",
            inputs.context_length
        ),
        perplexity: Perplexities {
            validation,
            test,
            test_without_markers,
            clone_snippets: comparison.p4,
            non_clone: comparison.p5,
        },
        mrr: mrr_value,
        top_k: top.into_iter().map(|(k, v)| (format!("top{k}"), v)).collect(),
        rouge,
        per_functionality,
        wilcoxon_p: comparison.p_value,
    })
}

pub fn summarize_completions(outcomes: &[CompletionOutcome]) -> RougeBlock {
    let pick = |f: fn(&CompletionOutcome) -> RougeScore| outcomes.iter().map(f).collect::<Vec<_>>();
    RougeBlock {
        contexts: outcomes.len(),
        terminated_with_eoc: outcomes.iter().filter(|o| o.terminated_with_eoc).count(),
        mean_generated_tokens: MeanStd::of(&outcomes.iter().map(|o| o.generated_tokens as f64).collect::<Vec<_>>())
            .mean,
        rouge1: RougeSummary::of(&pick(|o| o.rouge1)),
        rouge2: RougeSummary::of(&pick(|o| o.rouge2)),
        rouge_l: RougeSummary::of(&pick(|o| o.rouge_l)),
    }
}
