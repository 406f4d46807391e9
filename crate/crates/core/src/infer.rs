//! Zero-shot prediction with a cached context prefix, and evaluation.
//!
//! The labeled context is encoded and run through the decoder once. Every
//! prediction then appends only the target's two tokens to that prefix,
//! reads the logits, and truncates the cache back to its original length.

use rand::Rng;
use serde::Serialize;

use crate::encoder::{PairQuery, TimeDraws};
use crate::error::{Error, Result};
use crate::graph::{negative_sample, ChronoSplit, NodeId, TemporalGraph};
use crate::model::{sample_context, ClgModel, ClgTriple};
use crate::tape::softmax_in_place;
use crate::tensor::Tensor;
use crate::transformer::KvCache;

/// A frozen, labeled context prefix ready to condition predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    pub kv: KvCache,
    /// Time-augmentation draws shared by the context and every target.
    pub draws: TimeDraws,
    pub context: Vec<ClgTriple>,
    pub source_domain: u32,
}

impl ContextCache {
    /// Number of cached context triples.
    pub fn num_triples(&self) -> usize {
        self.context.len()
    }

    /// Cached token positions (`3 ×` triples).
    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }
}

/// Samples a context of up to `seq_len − 1` triples from all of `g` (the
/// caller passes a train split), encodes it, and fills the decoder cache.
pub fn build_context_cache<R: Rng + ?Sized>(
    model: &ClgModel,
    g: &TemporalGraph,
    seq_len: usize,
    rng: &mut R,
) -> Result<ContextCache> {
    if seq_len == 0 || seq_len > model.max_len() {
        return Err(Error::Length(format!(
            "context length {seq_len} must be within 1..={}",
            model.max_len()
        )));
    }
    let draws = model.time_aug().draw(rng);
    let context = sample_context(g, f64::INFINITY, seq_len - 1, rng)?;
    let mut kv = model.new_cache();
    if !context.is_empty() {
        let queries: Vec<PairQuery> = context
            .iter()
            .map(|c| PairQuery { u: c.u, v: c.v, t: c.t, draws })
            .collect();
        let z = model.encode_values(g, &queries)?;
        let labels: Vec<_> = context.iter().map(|c| c.label).collect();
        model.decode_cached(&z, &labels, &mut kv)?;
    }
    Ok(ContextCache {
        kv,
        draws,
        context,
        source_domain: g.domain_id(),
    })
}

fn link_probability(logits: &Tensor) -> f64 {
    let mut p = logits.row(0).to_vec();
    softmax_in_place(&mut p);
    p[1]
}

/// Scores an already-encoded target (`2×h`: z_src, z_dst) against the cache.
/// The cache length is restored before returning, including on error.
pub fn predict_encoded(model: &ClgModel, cache: &mut ContextCache, z: &Tensor) -> Result<f64> {
    let keep = cache.kv.len();
    let out = model.decode_cached(z, &[None], &mut cache.kv);
    cache.kv.truncate(keep);
    Ok(link_probability(&out?))
}

/// P(link) for `(u, v)` at time `t`, with neighborhoods taken from `g`.
pub fn predict_link(
    model: &ClgModel,
    cache: &mut ContextCache,
    g: &TemporalGraph,
    u: NodeId,
    v: NodeId,
    t: f64,
) -> Result<f64> {
    if cache.kv.hidden() != model.cfg.decoder.hidden {
        return Err(Error::Cache(format!(
            "cache width {} does not match decoder width {}",
            cache.kv.hidden(),
            model.cfg.decoder.hidden
        )));
    }
    let z = model.encode_values(g, &[PairQuery { u, v, t, draws: cache.draws }])?;
    predict_encoded(model, cache, &z)
}

/// Scores many targets; encodings are computed in batches of `chunk` pairs.
pub fn predict_many(
    model: &ClgModel,
    cache: &mut ContextCache,
    g: &TemporalGraph,
    targets: &[(NodeId, NodeId, f64)],
) -> Result<Vec<f64>> {
    const CHUNK: usize = 128;
    let h = model.cfg.encoder.hidden;
    let mut out = Vec::with_capacity(targets.len());
    for part in targets.chunks(CHUNK) {
        let queries: Vec<PairQuery> = part
            .iter()
            .map(|&(u, v, t)| PairQuery { u, v, t, draws: cache.draws })
            .collect();
        let z = model.encode_values(g, &queries)?;
        for i in 0..part.len() {
            let zi = Tensor::matrix(2, h, z.data()[2 * i * h..2 * (i + 1) * h].to_vec())?;
            out.push(predict_encoded(model, cache, &zi)?);
        }
    }
    Ok(out)
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties kept in input order.
pub fn evaluate_ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut precision = Vec::with_capacity(n_pos);
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            precision.push(hits as f64 / (rank + 1) as f64);
        }
    }
    Ok(canonical_sum(&mut precision) / n_pos as f64)
}

/// Sum in ascending order, so the rounding depends only on the multiset of
/// terms and never on the order they were produced in.
fn canonical_sum(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredEdge {
    pub u: NodeId,
    pub v: NodeId,
    pub t: f64,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub average_precision: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub context_source: u32,
    /// Sequence length including the target (1 = no context).
    pub context_len: usize,
    #[serde(skip)]
    pub scores: Vec<ScoredEdge>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "AP={:.4} n_pos={} context_len={}",
            self.average_precision, self.n_pos, self.context_len
        )
    }
}

/// Test edges of `target` paired 1:1 with negatives (same source and time,
/// destination drawn from the target's destination set).
pub fn test_pairs<R: Rng + ?Sized>(target: &ChronoSplit, rng: &mut R) -> Result<Vec<(NodeId, NodeId, f64, u8)>> {
    let g = &target.full;
    let mut out = Vec::with_capacity(2 * target.test.num_edges());
    for e in target.test.edges() {
        out.push((e.src, e.dst, e.t, 1));
        let neg = negative_sample(g, e.src, e.dst, e.t, rng)?;
        out.push((e.src, neg, e.t, 0));
    }
    Ok(out)
}

/// Scores every test edge of `target` and one negative per edge, conditioned
/// on a context of `context_len − 1` triples drawn from `context_graph`.
/// Target neighborhoods come from the full target stream before each `t`.
pub fn cross_domain_eval<R: Rng + ?Sized>(
    model: &ClgModel,
    target: &ChronoSplit,
    context_graph: &TemporalGraph,
    context_len: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    let mut cache = build_context_cache(model, context_graph, context_len, rng)?;
    let pairs = test_pairs(target, rng)?;
    eval_pairs(model, &mut cache, &target.full, &pairs, context_len)
}

/// Scores prepared `(u, v, t, label)` pairs against an existing cache.
pub fn eval_pairs(
    model: &ClgModel,
    cache: &mut ContextCache,
    g: &TemporalGraph,
    pairs: &[(NodeId, NodeId, f64, u8)],
    context_len: usize,
) -> Result<EvalReport> {
    let targets: Vec<_> = pairs.iter().map(|&(u, v, t, _)| (u, v, t)).collect();
    let probs = predict_many(model, cache, g, &targets)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.3).collect();
    let ap = evaluate_ap(&probs, &labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    Ok(EvalReport {
        average_precision: ap,
        n_pos,
        n_neg: labels.len() - n_pos,
        context_source: cache.source_domain,
        context_len,
        scores: pairs
            .iter()
            .zip(&probs)
            .map(|(&(u, v, t, label), &score)| ScoredEdge { u, v, t, label, score })
            .collect(),
    })
}
