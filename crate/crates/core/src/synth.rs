//! Synthetic dynamic graphs with known, opposed evolution rules, and the
//! ambiguity experiment built on them.
//!
//! Triadic and anti-triadic streams share everything except the rule that
//! picks a destination: with matched seeds they see the same source
//! sequence, the same candidate pools, and the same coin flips. The source
//! of each event follows a Zipf activity law; the destination is chosen from
//! `candidates` uniform draws by comparing how many recent neighbors each
//! candidate shares with the source.

use std::collections::VecDeque;
use std::str::FromStr;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DecoderConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{chronological_split, ChronoSplit, NodeId, TemporalEdge, TemporalGraph};
use crate::infer::{cross_domain_eval, EvalReport};
use crate::model::ClgModel;
use crate::train::{train, EpochRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Triadic,
    AntiTriadic,
    BipartiteReconnect,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triadic" => Ok(GeneratorKind::Triadic),
            "anti_triadic" | "anti-triadic" => Ok(GeneratorKind::AntiTriadic),
            "bipartite_reconnect" | "bipartite-reconnect" => Ok(GeneratorKind::BipartiteReconnect),
            other => Err(Error::Validation(format!(
                "unknown generator kind `{other}` (triadic, anti_triadic, bipartite_reconnect)"
            ))),
        }
    }
}

/// Sign of the preference for high-degree partners on repeat events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeCorr {
    Positive,
    Negative,
    Zero,
}

impl FromStr for DegreeCorr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" | "positive" => Ok(DegreeCorr::Positive),
            "-" | "negative" => Ok(DegreeCorr::Negative),
            "0" | "zero" => Ok(DegreeCorr::Zero),
            other => Err(Error::Validation(format!("unknown degree correlation `{other}` (+, -, 0)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub n_nodes: usize,
    pub n_edges: usize,
    /// Closure probability (triadic kinds) or reconnect probability.
    pub prob: f64,
    pub degree_corr: DegreeCorr,
    pub seed: u64,
    /// Zipf exponent of per-node source activity.
    pub activity_skew: f64,
    /// Uniform destination candidates drawn per event (triadic kinds).
    pub candidates: usize,
    /// Recent neighbors per node that count toward wedges; 0 = all history.
    pub wedge_window: usize,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, n_nodes: usize, n_edges: usize, prob: f64, seed: u64) -> Self {
        GeneratorSpec {
            kind,
            n_nodes,
            n_edges,
            prob,
            degree_corr: DegreeCorr::Zero,
            seed,
            activity_skew: 0.8,
            candidates: 32,
            wedge_window: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 4 || self.n_edges < 1 {
            return Err(Error::Validation(format!(
                "need at least 4 nodes and 1 edge, got {} and {}",
                self.n_nodes, self.n_edges
            )));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Validation(format!("probability {} outside [0, 1]", self.prob)));
        }
        if self.candidates == 0 {
            return Err(Error::Validation("candidates must be at least 1".into()));
        }
        if !self.activity_skew.is_finite() || self.activity_skew < 0.0 {
            return Err(Error::Validation(format!("activity skew {} must be ≥ 0", self.activity_skew)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GeneratorMeta {
    /// Events whose rule could not be satisfied and fell back to a random choice.
    pub fallbacks: usize,
    /// Events on which the rule coin came up (closure/avoidance or repeat attempted).
    pub rule_events: usize,
    /// Per edge (triadic kinds): whether its endpoints shared a recent neighbor.
    pub closed_wedge: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub graph: TemporalGraph,
    pub meta: GeneratorMeta,
}

/// Bounded recent-neighbor lists.
struct Recent {
    window: usize,
    lists: Vec<VecDeque<NodeId>>,
}

impl Recent {
    fn new(n: usize, window: usize) -> Self {
        Recent {
            window,
            lists: vec![VecDeque::new(); n + 1],
        }
    }

    fn push(&mut self, a: NodeId, b: NodeId) {
        for (x, y) in [(a, b), (b, a)] {
            let l = &mut self.lists[x as usize];
            l.push_back(y);
            if self.window > 0 && l.len() > self.window {
                l.pop_front();
            }
        }
    }
}

/// Counts distinct shared recent neighbors using generation stamps.
struct WedgeCounter {
    mark: Vec<u64>,
    seen: Vec<u64>,
    stamp: u64,
    pass: u64,
}

impl WedgeCounter {
    fn new(n: usize) -> Self {
        WedgeCounter {
            mark: vec![0; n + 1],
            seen: vec![0; n + 1],
            stamp: 0,
            pass: 0,
        }
    }

    fn load(&mut self, recent: &Recent, u: NodeId) {
        self.stamp += 1;
        for &w in &recent.lists[u as usize] {
            self.mark[w as usize] = self.stamp;
        }
    }

    /// Shared distinct neighbors between the loaded node and `c`.
    fn common(&mut self, recent: &Recent, c: NodeId) -> usize {
        self.pass += 1;
        let key = self.pass;
        let mut n = 0;
        for &w in &recent.lists[c as usize] {
            let w = w as usize;
            if self.mark[w] == self.stamp && self.seen[w] != key {
                self.seen[w] = key;
                n += 1;
            }
        }
        n
    }
}

fn zipf_sampler(nodes: &[NodeId], skew: f64, rng: &mut ChaCha8Rng) -> (Vec<NodeId>, WeightedIndex<f64>) {
    let mut order = nodes.to_vec();
    order.shuffle(rng);
    let weights: Vec<f64> = (1..=order.len()).map(|r| (r as f64).powf(-skew)).collect();
    (order, WeightedIndex::new(weights).expect("positive weights"))
}

pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    spec.validate()?;
    match spec.kind {
        GeneratorKind::Triadic | GeneratorKind::AntiTriadic => Ok(generate_triadic(spec)),
        GeneratorKind::BipartiteReconnect => Ok(generate_reconnect(spec)),
    }
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    let mut b = a.clone();
    a.set_stream(0);
    b.set_stream(1);
    (a, b)
}

fn generate_triadic(spec: &GeneratorSpec) -> Generated {
    let n = spec.n_nodes;
    let triadic = spec.kind == GeneratorKind::Triadic;
    let (mut src_rng, mut rng) = streams(spec.seed);
    let all: Vec<NodeId> = (1..=n as NodeId).collect();
    let (order, zipf) = zipf_sampler(&all, spec.activity_skew, &mut src_rng);
    let mut recent = Recent::new(n, spec.wedge_window);
    let mut wc = WedgeCounter::new(n);
    let mut meta = GeneratorMeta::default();
    let mut edges = Vec::with_capacity(spec.n_edges);
    // Each block of `n` events hands every node exactly one destination stub,
    // so both rules end with identical degree sequences while the candidate
    // pool stays comparable across the whole stream.
    let mut stubs: Vec<NodeId> = Vec::with_capacity(n);
    let mut cands = Vec::with_capacity(spec.candidates);
    let mut counts = Vec::with_capacity(spec.candidates);
    for i in 0..spec.n_edges {
        let u = order[zipf.sample(&mut src_rng)];
        if stubs.is_empty() {
            stubs.extend(1..=n as NodeId);
        }
        cands.clear();
        for _ in 0..10 * spec.candidates {
            if cands.len() == spec.candidates {
                break;
            }
            let j = rng.gen_range(0..stubs.len());
            if stubs[j] != u {
                cands.push(j);
            }
        }
        let coin = rng.gen::<f64>() < spec.prob;
        meta.rule_events += usize::from(coin);
        wc.load(&recent, u);
        counts.clear();
        for &c in &cands {
            counts.push(wc.common(&recent, stubs[c]));
        }
        let v = if cands.is_empty() {
            // Only stubs of `u` remain.
            meta.fallbacks += 1;
            let c = rng.gen_range(1..n as NodeId);
            let v = if c >= u { c + 1 } else { c };
            meta.closed_wedge.push(wc.common(&recent, v) > 0);
            v
        } else {
            let pick = match (triadic, coin) {
                (true, true) => {
                    let (j, &best) = counts.iter().enumerate().rev().max_by_key(|&(_, c)| c).unwrap();
                    if best == 0 {
                        meta.fallbacks += 1;
                        0
                    } else {
                        j
                    }
                }
                (true, false) => counts.iter().position(|&c| c == 0).unwrap_or_else(|| {
                    meta.fallbacks += 1;
                    0
                }),
                (false, true) => {
                    let (j, &least) = counts.iter().enumerate().rev().min_by_key(|&(_, c)| c).unwrap();
                    if least > 0 {
                        meta.fallbacks += 1;
                        0
                    } else {
                        j
                    }
                }
                (false, false) => 0,
            };
            meta.closed_wedge.push(counts[pick] > 0);
            stubs.swap_remove(cands[pick])
        };
        edges.push(TemporalEdge::new(u, v, (i + 1) as f64));
        recent.push(u, v);
    }
    Generated {
        graph: TemporalGraph::from_edges(0, edges, n).expect("generated edges are valid"),
        meta,
    }
}

fn generate_reconnect(spec: &GeneratorSpec) -> Generated {
    let n = spec.n_nodes;
    let n_users = n / 2;
    let (mut src_rng, mut rng) = streams(spec.seed);
    let users: Vec<NodeId> = (1..=n_users as NodeId).collect();
    let (order, zipf) = zipf_sampler(&users, spec.activity_skew, &mut src_rng);
    let mut partners: Vec<Vec<NodeId>> = vec![Vec::new(); n + 1];
    let mut degree = vec![0usize; n + 1];
    let mut active: Vec<NodeId> = Vec::new();
    let mut meta = GeneratorMeta::default();
    let mut edges = Vec::with_capacity(spec.n_edges);
    for i in 0..spec.n_edges {
        let mut u = order[zipf.sample(&mut src_rng)];
        let repeat = rng.gen::<f64>() < spec.prob;
        meta.rule_events += usize::from(repeat);
        let mut v = None;
        if repeat {
            if partners[u as usize].is_empty() && !active.is_empty() {
                u = active[rng.gen_range(0..active.len())];
            }
            let ps = &partners[u as usize];
            if ps.is_empty() {
                meta.fallbacks += 1;
            } else {
                let w: Vec<f64> = ps
                    .iter()
                    .map(|&p| {
                        let d = degree[p as usize] as f64;
                        match spec.degree_corr {
                            DegreeCorr::Positive => d,
                            DegreeCorr::Negative => 1.0 / d,
                            DegreeCorr::Zero => 1.0,
                        }
                    })
                    .collect();
                let idx = WeightedIndex::new(&w).expect("partners have positive degree");
                v = Some(ps[idx.sample(&mut rng)]);
            }
        }
        let v = match v {
            Some(v) => v,
            None => {
                let ps = &partners[u as usize];
                let items = n_users as NodeId + 1..=n as NodeId;
                let mut pick = (0..64)
                    .map(|_| rng.gen_range(items.clone()))
                    .find(|c| !ps.contains(c));
                if pick.is_none() {
                    let free: Vec<NodeId> = items.clone().filter(|c| !ps.contains(c)).collect();
                    pick = free.choose(&mut rng).copied();
                }
                let pick = match pick {
                    Some(c) => {
                        if ps.is_empty() {
                            active.push(u);
                        }
                        partners[u as usize].push(c);
                        c
                    }
                    None => {
                        // Every item already seen: a repeat is unavoidable.
                        meta.fallbacks += 1;
                        rng.gen_range(items)
                    }
                };
                pick
            }
        };
        degree[u as usize] += 1;
        degree[v as usize] += 1;
        edges.push(TemporalEdge::new(u, v, (i + 1) as f64));
    }
    Generated {
        graph: TemporalGraph::from_edges(0, edges, n).expect("generated edges are valid"),
        meta,
    }
}

/// Writes a graph as `src,dst,t` CSV text.
pub fn to_csv(g: &TemporalGraph) -> String {
    let mut s = String::from("src,dst,t\n");
    for e in g.edges() {
        s.push_str(&format!("{},{},{}\n", g.raw_id(e.src), g.raw_id(e.dst), e.t));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityConfig {
    pub nodes: usize,
    pub edges: usize,
    pub prob: f64,
    pub activity_skew: f64,
    pub candidates: usize,
    pub wedge_window: usize,
    pub seed: u64,
    pub model: Config,
    /// Sequence lengths (including the target) to evaluate.
    pub context_lens: Vec<usize>,
    pub eval_seeds: Vec<u64>,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        let mut model = Config::default();
        model.encoder = EncoderConfig {
            k: 32,
            patch: 2,
            hidden: 32,
            layers: 1,
            heads: 4,
            time_dims: 8,
            count_dims: 16,
            omega_max: 100.0,
        };
        model.decoder = DecoderConfig {
            layers: 2,
            heads: 4,
            hidden: 32,
            max_len: 64,
        };
        model.train.epochs = 10;
        model.train.batch = 2;
        model.train.lr = 3e-3;
        model.train.edges_per_epoch = 14000;
        AmbiguityConfig {
            nodes: 2000,
            edges: 20000,
            prob: 0.9,
            activity_skew: 0.8,
            candidates: 32,
            wedge_window: 32,
            seed: 0,
            model,
            context_lens: vec![1, 64],
            eval_seeds: vec![0],
        }
    }
}

impl AmbiguityConfig {
    pub fn spec(&self, kind: GeneratorKind, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            activity_skew: self.activity_skew,
            candidates: self.candidates,
            wedge_window: self.wedge_window,
            ..GeneratorSpec::new(kind, self.nodes, self.edges, self.prob, seed)
        }
    }
}

/// A generated, split graph taking part in the experiment.
pub struct ExperimentGraph {
    pub name: String,
    pub split: ChronoSplit,
    pub meta: GeneratorMeta,
}

pub fn experiment_graph(cfg: &AmbiguityConfig, kind: GeneratorKind, seed: u64, domain: u32) -> Result<ExperimentGraph> {
    let gen = generate(&cfg.spec(kind, seed))?;
    let s = cfg.model.train.split;
    let split = chronological_split(&gen.graph.with_domain(domain), (s[0], s[1], s[2]))?;
    let name = match kind {
        GeneratorKind::Triadic => "triadic",
        GeneratorKind::AntiTriadic => "anti_triadic",
        GeneratorKind::BipartiteReconnect => "bipartite_reconnect",
    };
    Ok(ExperimentGraph {
        name: name.to_string(),
        split,
        meta: gen.meta,
    })
}

/// Both graphs plus the jointly trained model.
pub struct AmbiguitySetup {
    pub cfg: AmbiguityConfig,
    pub graphs: Vec<ExperimentGraph>,
    pub model: ClgModel,
    pub train_log: Vec<EpochRecord>,
    pub train_seconds: f64,
}

/// Generates the triadic and anti-triadic graphs (matched seeds) and trains
/// one model on both train splits.
pub fn prepare_ambiguity(cfg: &AmbiguityConfig, log: &mut dyn FnMut(&EpochRecord)) -> Result<AmbiguitySetup> {
    let graphs = vec![
        experiment_graph(cfg, GeneratorKind::Triadic, cfg.seed, 0)?,
        experiment_graph(cfg, GeneratorKind::AntiTriadic, cfg.seed, 1)?,
    ];
    let mut mcfg = cfg.model.clone();
    mcfg.train.seed = cfg.seed;
    let mut model = ClgModel::new(mcfg, cfg.seed)?;
    let domains: Vec<TemporalGraph> = graphs.iter().map(|g| g.split.train.clone()).collect();
    let start = Instant::now();
    let report = train(&mut model, &domains, log)?;
    Ok(AmbiguitySetup {
        cfg: cfg.clone(),
        graphs,
        model,
        train_log: report.records,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmbiguityRow {
    pub graph: String,
    pub context_len: usize,
    pub seed: u64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmbiguityReport {
    pub config: AmbiguityConfig,
    pub fallbacks: Vec<(String, usize)>,
    pub final_losses: Vec<(u32, f64)>,
    pub rows: Vec<AmbiguityRow>,
}

impl AmbiguityReport {
    /// Mean AP over seeds for one graph and context length.
    pub fn mean_ap(&self, graph: &str, context_len: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.graph == graph && r.context_len == context_len)
            .map(|r| r.ap)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl AmbiguitySetup {
    /// Evaluates graph `i` on its test edges with a context drawn from
    /// `context` (its own train split when `None`).
    pub fn evaluate(&self, i: usize, context: Option<&TemporalGraph>, context_len: usize, seed: u64) -> Result<EvalReport> {
        let g = &self.graphs[i];
        let ctx = context.unwrap_or(&g.split.train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cross_domain_eval(&self.model, &g.split, ctx, context_len, &mut rng)
    }

    pub fn report(&self) -> Result<AmbiguityReport> {
        let mut rows = Vec::new();
        for (i, g) in self.graphs.iter().enumerate() {
            for &len in &self.cfg.context_lens {
                for &seed in &self.cfg.eval_seeds {
                    let r = self.evaluate(i, None, len, seed)?;
                    rows.push(AmbiguityRow {
                        graph: g.name.clone(),
                        context_len: len,
                        seed,
                        ap: r.average_precision,
                    });
                }
            }
        }
        let last = self.train_log.iter().map(|r| r.epoch).max().unwrap_or(0);
        Ok(AmbiguityReport {
            config: self.cfg.clone(),
            fallbacks: self.graphs.iter().map(|g| (g.name.clone(), g.meta.fallbacks)).collect(),
            final_losses: self
                .train_log
                .iter()
                .filter(|r| r.epoch == last)
                .map(|r| (r.domain, r.loss))
                .collect(),
            rows,
        })
    }
}

/// Generate, train jointly, and evaluate with every configured context length.
pub fn ambiguity_experiment(cfg: &AmbiguityConfig, log: &mut dyn FnMut(&EpochRecord)) -> Result<AmbiguityReport> {
    prepare_ambiguity(cfg, log)?.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::reconnection_stats;

    /// Windowed wedge oracle: recompute each edge's recent-neighbor lists
    /// from scratch and intersect them.
    fn closed_wedges_brute(g: &TemporalGraph, window: usize) -> Vec<bool> {
        let edges = g.edges();
        (0..edges.len())
            .map(|i| {
                let recent = |x: NodeId| -> Vec<NodeId> {
                    let mut l: Vec<NodeId> = edges[..i]
                        .iter()
                        .filter(|e| e.src == x || e.dst == x)
                        .map(|e| e.other(x))
                        .collect();
                    if window > 0 && l.len() > window {
                        l.drain(..l.len() - window);
                    }
                    l
                };
                let (a, b) = (recent(edges[i].src), recent(edges[i].dst));
                a.iter().any(|x| b.contains(x))
            })
            .collect()
    }

    fn spec(kind: GeneratorKind, n: usize, m: usize, p: f64) -> GeneratorSpec {
        GeneratorSpec::new(kind, n, m, p, 7)
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&spec(GeneratorKind::Triadic, 3, 10, 0.5)).is_err());
        assert!(generate(&spec(GeneratorKind::Triadic, 10, 0, 0.5)).is_err());
        assert!(generate(&spec(GeneratorKind::AntiTriadic, 10, 10, 1.5)).is_err());
        assert!("sideways".parse::<GeneratorKind>().is_err());
    }

    #[test]
    fn timestamps_are_one_to_m() {
        let g = generate(&spec(GeneratorKind::Triadic, 30, 100, 0.5)).unwrap().graph;
        let ts: Vec<f64> = g.edges().iter().map(|e| e.t).collect();
        assert_eq!(ts, (1..=100).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn wedge_bookkeeping_matches_brute_force() {
        for kind in [GeneratorKind::Triadic, GeneratorKind::AntiTriadic] {
            for window in [0, 3, 8] {
                let mut s = spec(kind, 40, 400, 0.8);
                s.wedge_window = window;
                s.candidates = 6;
                let gen = generate(&s).unwrap();
                assert_eq!(gen.meta.closed_wedge, closed_wedges_brute(&gen.graph, window), "{kind:?} {window}");
            }
        }
    }

    #[test]
    fn closure_rates_are_opposed() {
        let rate = |kind| {
            let gen = generate(&spec(kind, 500, 5000, 0.9)).unwrap();
            let w = closed_wedges_brute(&gen.graph, 32);
            w.iter().filter(|&&b| b).count() as f64 / w.len() as f64
        };
        let tri = rate(GeneratorKind::Triadic);
        let anti = rate(GeneratorKind::AntiTriadic);
        assert!(tri - anti > 0.5, "triadic {tri} anti {anti}");
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks(a: &[usize], b: &[usize]) -> f64 {
        let max = *a.iter().chain(b).max().unwrap();
        let cdf = |v: &[usize], x: usize| v.iter().filter(|&&d| d <= x).count() as f64 / v.len() as f64;
        (0..=max).map(|x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matched_seeds_match_degree_distributions() {
        let n = 2000;
        let a = generate(&spec(GeneratorKind::Triadic, n, 20000, 0.9)).unwrap().graph;
        let b = generate(&spec(GeneratorKind::AntiTriadic, n, 20000, 0.9)).unwrap().graph;
        let src = |g: &TemporalGraph| g.edges().iter().map(|e| e.src).collect::<Vec<_>>();
        assert_eq!(src(&a), src(&b));
        let deg = |g: &TemporalGraph| (1..=n as NodeId).map(|v| g.degree(v)).collect::<Vec<_>>();
        let d = ks(&deg(&a), &deg(&b));
        // 1% critical value for equal samples of size n.
        let crit = 1.63 * (2.0 / n as f64).sqrt();
        assert!(d < crit, "KS {d} ≥ {crit}");
    }

    #[test]
    fn rule_coin_is_binomial() {
        let n = 6000;
        for (kind, p) in [(GeneratorKind::Triadic, 0.3), (GeneratorKind::BipartiteReconnect, 0.6)] {
            let gen = generate(&spec(kind, 500, n, p)).unwrap();
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((gen.meta.rule_events as f64 - n as f64 * p).abs() < 3.0 * sd);
        }
    }

    #[test]
    fn reconnect_zero_never_repeats() {
        let g = generate(&spec(GeneratorKind::BipartiteReconnect, 400, 2000, 0.0)).unwrap().graph;
        assert_eq!(reconnection_stats(&g).unwrap().possibility, 0.0);
    }

    #[test]
    fn reconnect_half_measures_half() {
        let g = generate(&spec(GeneratorKind::BipartiteReconnect, 1000, 5000, 0.5)).unwrap().graph;
        let p = reconnection_stats(&g).unwrap().possibility;
        assert!((p - 0.5).abs() <= 0.05, "possibility {p}");
    }

    #[test]
    fn degree_sign_shows_in_pearson() {
        let mut pos = spec(GeneratorKind::BipartiteReconnect, 1000, 5000, 0.5);
        pos.degree_corr = DegreeCorr::Positive;
        let mut neg = pos.clone();
        neg.degree_corr = DegreeCorr::Negative;
        let rp = reconnection_stats(&generate(&pos).unwrap().graph).unwrap().pearson.unwrap();
        let rn = reconnection_stats(&generate(&neg).unwrap().graph).unwrap().pearson.unwrap();
        assert!(rp > rn, "{rp} vs {rn}");
    }

    #[test]
    fn csv_round_trips() {
        let g = generate(&spec(GeneratorKind::AntiTriadic, 20, 50, 0.5)).unwrap().graph;
        let back = crate::graph::parse_csv(&to_csv(&g), 0).unwrap();
        assert_eq!(back.num_edges(), 50);
        for (a, b) in g.edges().iter().zip(back.edges()) {
            assert_eq!(a.t, b.t);
            assert_eq!(g.raw_id(a.src), back.raw_id(b.src));
        }
    }
}
