//! Domain-tagged dynamic edge streams: storage, chronological splits,
//! temporal neighbor sampling, negative sampling and reconnection analysis.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense per-domain node id. `0` is reserved for padding; real nodes start at 1.
pub type NodeId = u32;

pub const PAD: NodeId = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
}

impl TemporalEdge {
    pub fn new(src: NodeId, dst: NodeId, t: f64) -> Self {
        TemporalEdge { src, dst, t }
    }

    /// The endpoint opposite `node` (a self-loop returns `node`).
    pub fn other(&self, node: NodeId) -> NodeId {
        if self.src == node {
            self.dst
        } else {
            self.src
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemporalGraph {
    domain_id: u32,
    edges: Vec<TemporalEdge>,
    /// `node_index[u]` holds positions of edges incident to `u`, in time order.
    node_index: Vec<Vec<usize>>,
    node_count: usize,
    dst_set: Vec<NodeId>,
    /// Original id for every dense id (`raw_ids[0]` is unused).
    raw_ids: Vec<u64>,
}

impl TemporalGraph {
    /// Build a graph over dense ids `1..=node_count`. Edges are stably sorted
    /// by timestamp.
    pub fn from_edges(domain_id: u32, mut edges: Vec<TemporalEdge>, node_count: usize) -> Result<Self> {
        for (i, e) in edges.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(Error::Validation(format!(
                    "edge {i} has invalid timestamp {}",
                    e.t
                )));
            }
            if e.src == PAD || e.dst == PAD {
                return Err(Error::Validation(format!("edge {i} uses the reserved pad id 0")));
            }
            if e.src as usize > node_count || e.dst as usize > node_count {
                return Err(Error::Validation(format!(
                    "edge {i} references a node beyond {node_count}"
                )));
            }
        }
        edges.sort_by(|a, b| a.t.total_cmp(&b.t));
        let mut node_index = vec![Vec::new(); node_count + 1];
        let mut is_dst = vec![false; node_count + 1];
        for (pos, e) in edges.iter().enumerate() {
            node_index[e.src as usize].push(pos);
            if e.dst != e.src {
                node_index[e.dst as usize].push(pos);
            }
            is_dst[e.dst as usize] = true;
        }
        let dst_set = (1..=node_count as NodeId)
            .filter(|&n| is_dst[n as usize])
            .collect();
        Ok(TemporalGraph {
            domain_id,
            edges,
            node_index,
            node_count,
            dst_set,
            raw_ids: (0..=node_count as u64).collect(),
        })
    }

    /// Same node id space, restricted to `edges[range]`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TemporalGraph {
        let mut g = TemporalGraph::from_edges(
            self.domain_id,
            self.edges[range].to_vec(),
            self.node_count,
        )
        .expect("sub-range of a valid graph is valid");
        g.raw_ids = self.raw_ids.clone();
        g
    }

    pub fn domain_id(&self) -> u32 {
        self.domain_id
    }

    pub fn with_domain(mut self, domain_id: u32) -> Self {
        self.domain_id = domain_id;
        self
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Size of the dense id space (ids `1..=node_count`).
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Nodes with at least one incident edge.
    pub fn active_nodes(&self) -> usize {
        self.node_index.iter().skip(1).filter(|l| !l.is_empty()).count()
    }

    pub fn dst_set(&self) -> &[NodeId] {
        &self.dst_set
    }

    pub fn contains_node(&self, n: NodeId) -> bool {
        n != PAD && (n as usize) <= self.node_count
    }

    pub fn raw_id(&self, n: NodeId) -> u64 {
        self.raw_ids[n as usize]
    }

    pub fn incident(&self, n: NodeId) -> &[usize] {
        self.node_index
            .get(n as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.incident(n).len()
    }

    pub fn max_time(&self) -> Option<f64> {
        self.edges.last().map(|e| e.t)
    }

    pub fn min_time(&self) -> Option<f64> {
        self.edges.first().map(|e| e.t)
    }
}

/// Parse a `src,dst,t` CSV edge list. Raw ids are remapped densely per
/// domain in order of first appearance in the file.
pub fn ingest_csv(path: impl AsRef<Path>, domain_id: u32) -> Result<TemporalGraph> {
    let path = path.as_ref();
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_csv(&text, domain_id)
}

pub fn parse_csv(text: &str, domain_id: u32) -> Result<TemporalGraph> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if !header.is_empty() && header.iter().collect::<Vec<_>>() != ["src", "dst", "t"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `src,dst,t`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut dense: HashMap<u64, NodeId> = HashMap::new();
    let mut raw_ids = vec![0u64];
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let field = |i: usize, what: &str| -> Result<&str> {
            let s = &rec[i];
            if s.is_empty() {
                Err(Error::Parse {
                    line,
                    msg: format!("empty {what}"),
                })
            } else {
                Ok(s)
            }
        };
        let parse_id = |s: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid node id `{s}`"),
            })
        };
        let src = parse_id(field(0, "src")?)?;
        let dst = parse_id(field(1, "dst")?)?;
        let ts = field(2, "t")?;
        let t: f64 = ts.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid timestamp `{ts}`"),
        })?;
        if !t.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite timestamp `{ts}`"),
            });
        }
        if t < 0.0 {
            return Err(Error::Validation(format!(
                "negative timestamp {t} at line {line}"
            )));
        }
        let mut map = |raw: u64| {
            *dense.entry(raw).or_insert_with(|| {
                raw_ids.push(raw);
                (raw_ids.len() - 1) as NodeId
            })
        };
        let (s, d) = (map(src), map(dst));
        edges.push(TemporalEdge::new(s, d, t));
    }
    let n = raw_ids.len() - 1;
    let mut g = TemporalGraph::from_edges(domain_id, edges, n)?;
    g.raw_ids = raw_ids;
    Ok(g)
}

/// Chronological train/val/test partition of one graph.
#[derive(Clone, Debug)]
pub struct ChronoSplit {
    pub full: TemporalGraph,
    pub train: TemporalGraph,
    pub val: TemporalGraph,
    pub test: TemporalGraph,
    /// Edge index where val starts and where test starts.
    pub bounds: (usize, usize),
}

pub fn chronological_split(g: &TemporalGraph, ratios: (f64, f64, f64)) -> Result<ChronoSplit> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let n = g.num_edges();
    if n < 3 {
        return Err(Error::Size(format!("need at least 3 edges to split, got {n}")));
    }
    let nf = n as f64;
    // the small epsilon keeps e.g. 100 * 0.7 from flooring to 69
    let b1 = (nf * rt + 1e-9).floor() as usize;
    let b2 = (nf * (rt + rv) + 1e-9).floor() as usize;
    if b1 == 0 || b2 <= b1 || b2 >= n {
        return Err(Error::Size(format!(
            "{n} edges leave an empty split for ratios ({rt}, {rv}, {rs})"
        )));
    }
    Ok(ChronoSplit {
        full: g.clone(),
        train: g.slice(0..b1),
        val: g.slice(b1..b2),
        test: g.slice(b2..n),
        bounds: (b1, b2),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborEntry {
    pub node: NodeId,
    pub time: f64,
}

impl NeighborEntry {
    pub const PAD: NeighborEntry = NeighborEntry { node: PAD, time: 0.0 };

    pub fn is_pad(&self) -> bool {
        self.node == PAD
    }
}

/// Fixed-length, oldest-first, left-padded recent history of one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSequence {
    pub entries: Vec<NeighborEntry>,
    pub anchor_time: f64,
}

impl NeighborSequence {
    pub fn real(&self) -> impl Iterator<Item = &NeighborEntry> {
        self.entries.iter().filter(|e| !e.is_pad())
    }

    pub fn num_real(&self) -> usize {
        self.real().count()
    }
}

/// The most recent `k` interactions of `u` strictly before `t`.
pub fn sample_recent_neighbors(g: &TemporalGraph, u: NodeId, t: f64, k: usize) -> NeighborSequence {
    assert!(k >= 1, "neighbor window must be at least 1");
    let inc = g.incident(u);
    let edges = g.edges();
    let end = inc.partition_point(|&pos| edges[pos].t < t);
    let start = end.saturating_sub(k);
    let mut entries = vec![NeighborEntry::PAD; k - (end - start)];
    entries.extend(inc[start..end].iter().map(|&pos| {
        let e = &edges[pos];
        NeighborEntry {
            node: e.other(u),
            time: e.t,
        }
    }));
    NeighborSequence {
        entries,
        anchor_time: t,
    }
}

/// A destination drawn uniformly from the domain's destination set, excluding `v`.
pub fn negative_sample<R: Rng + ?Sized>(
    g: &TemporalGraph,
    _u: NodeId,
    v: NodeId,
    _t: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let dst = g.dst_set();
    if dst.len() < 2 {
        return Err(Error::Sampling(format!(
            "domain {} has {} destination(s); need at least 2",
            g.domain_id(),
            dst.len()
        )));
    }
    match dst.binary_search(&v) {
        Ok(skip) => {
            let i = rng.gen_range(0..dst.len() - 1);
            Ok(dst[if i >= skip { i + 1 } else { i }])
        }
        Err(_) => Ok(dst[rng.gen_range(0..dst.len())]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconnectionStats {
    pub possibility: f64,
    /// `None` when the degree or label series is constant.
    pub pearson: Option<f64>,
}

fn pair_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Fraction of edges whose endpoint pair interacts again strictly later, and
/// the Pearson correlation between `deg(v) / (deg(u) + deg(v))` and that
/// reconnect label. Degrees are whole-stream degrees.
pub fn reconnection_stats(g: &TemporalGraph) -> Result<ReconnectionStats> {
    let n = g.num_edges();
    if n < 2 {
        return Err(Error::Size(format!("need at least 2 edges, got {n}")));
    }
    let mut last: HashMap<(NodeId, NodeId), f64> = HashMap::new();
    for e in g.edges() {
        last.insert(pair_key(e.src, e.dst), e.t);
    }
    let mut degree = vec![0usize; g.node_count() + 1];
    for e in g.edges() {
        degree[e.src as usize] += 1;
        degree[e.dst as usize] += 1;
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for e in g.edges() {
        let (du, dv) = (degree[e.src as usize] as f64, degree[e.dst as usize] as f64);
        xs.push(dv / (du + dv));
        ys.push(if last[&pair_key(e.src, e.dst)] > e.t { 1.0 } else { 0.0 });
    }
    let possibility = ys.iter().sum::<f64>() / n as f64;
    Ok(ReconnectionStats {
        possibility,
        pearson: pearson(&xs, &ys),
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(edges: &[(NodeId, NodeId, f64)]) -> TemporalGraph {
        let n = edges.iter().map(|e| e.0.max(e.1)).max().unwrap_or(0) as usize;
        let es = edges.iter().map(|&(s, d, t)| TemporalEdge::new(s, d, t)).collect();
        TemporalGraph::from_edges(0, es, n).unwrap()
    }

    #[test]
    fn csv_sorts_stably() {
        let g = parse_csv("src,dst,t\n1,2,5\n3,1,2\n2,3,5\n", 0).unwrap();
        let raw: Vec<_> = g
            .edges()
            .iter()
            .map(|e| (g.raw_id(e.src), g.raw_id(e.dst), e.t))
            .collect();
        assert_eq!(raw, vec![(3, 1, 2.0), (1, 2, 5.0), (2, 3, 5.0)]);
        assert_eq!(g.node_count(), 3);
    }

    #[test]
    fn csv_header_only_is_empty() {
        let g = parse_csv("src,dst,t\n", 4).unwrap();
        assert_eq!((g.num_edges(), g.node_count(), g.domain_id()), (0, 0, 4));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_csv("src,dst,t\n1,2,3\n1,x,4\n", 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_csv("src,dst,t\n1,2,-1\n", 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(parse_csv("a,b\n1,2\n", 0), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_sizes() {
        let g = graph(&(0..100).map(|i| (1, 2, i as f64)).collect::<Vec<_>>());
        let s = chronological_split(&g, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!((s.train.num_edges(), s.val.num_edges(), s.test.num_edges()), (70, 15, 15));
        let g = graph(&[(1, 2, 1.0), (2, 3, 2.0), (3, 1, 3.0)]);
        let third = 1.0 / 3.0;
        let s = chronological_split(&g, (third, third, 1.0 - 2.0 * third)).unwrap();
        assert_eq!((s.train.num_edges(), s.val.num_edges(), s.test.num_edges()), (1, 1, 1));
    }

    #[test]
    fn split_ten_edges_by_hand() {
        // floor(10 * 0.7) = 7, floor(10 * 0.85) = 8
        let times = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
        let g = graph(&times.iter().map(|&t| (1, 2, t)).collect::<Vec<_>>());
        let s = chronological_split(&g, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!((s.train.num_edges(), s.val.num_edges(), s.test.num_edges()), (7, 1, 2));
        let tmax = s.train.max_time().unwrap();
        assert!(tmax <= s.val.min_time().unwrap());
        assert!(s.val.max_time().unwrap() <= s.test.min_time().unwrap());
        assert_eq!(s.val.edges()[0].t, 5.0);
    }

    #[test]
    fn split_rejects_bad_input() {
        let g = graph(&[(1, 2, 1.0), (2, 3, 2.0)]);
        assert!(matches!(chronological_split(&g, (0.7, 0.15, 0.15)), Err(Error::Size(_))));
        let g = graph(&[(1, 2, 1.0), (2, 3, 2.0), (1, 3, 3.0)]);
        assert!(chronological_split(&g, (0.7, 0.2, 0.2)).is_err());
    }

    #[test]
    fn neighbors_window_and_padding() {
        let g = graph(&[(1, 2, 1.0), (1, 3, 2.0), (4, 1, 4.0), (1, 5, 7.0)]);
        let s = sample_recent_neighbors(&g, 1, 5.0, 2);
        assert_eq!(s.entries, vec![
            NeighborEntry { node: 3, time: 2.0 },
            NeighborEntry { node: 4, time: 4.0 },
        ]);
        let s = sample_recent_neighbors(&g, 1, 5.0, 10);
        assert_eq!(s.entries.iter().filter(|e| e.is_pad()).count(), 7);
        assert_eq!(s.real().map(|e| e.time).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);
        let s = sample_recent_neighbors(&g, 1, 1.0, 3);
        assert!(s.entries.iter().all(NeighborEntry::is_pad));
        let s = sample_recent_neighbors(&g, 9, 1.0, 3);
        assert_eq!(s.entries.len(), 3);
    }

    #[test]
    fn negative_sampling() {
        let g = graph(&[(1, 5, 1.0), (2, 5, 2.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(negative_sample(&g, 1, 5, 3.0, &mut rng), Err(Error::Sampling(_))));

        let es: Vec<_> = (1..=100).map(|d| (101, d, d as f64)).collect();
        let g = graph(&es);
        let a = negative_sample(&g, 101, 7, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = negative_sample(&g, 101, 7, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_sampling_is_uniform() {
        let g = graph(&[(9, 1, 1.0), (9, 2, 2.0), (9, 3, 3.0), (9, 4, 4.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let n = negative_sample(&g, 9, 2, 5.0, &mut rng).unwrap();
            counts[n as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let chi2: f64 = [1, 3, 4]
            .iter()
            .map(|&i| {
                let e = draws as f64 * p;
                assert!((counts[i] as f64 - e).abs() < 3.0 * sigma);
                (counts[i] as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square, 2 dof, p = 0.001
        assert!(chi2 < 13.82);
    }

    #[test]
    fn reconnection_hand_cases() {
        let g = graph(&[(1, 2, 1.0), (1, 2, 2.0), (1, 3, 3.0)]);
        let s = reconnection_stats(&g).unwrap();
        assert!((s.possibility - 1.0 / 3.0).abs() < 1e-15);
        let g = graph(&[(1, 2, 1.0), (1, 3, 2.0), (2, 3, 3.0)]);
        let s = reconnection_stats(&g).unwrap();
        assert_eq!(s.possibility, 0.0);
        assert_eq!(s.pearson, None);
        // same-timestamp recurrence does not count as later
        let g = graph(&[(1, 2, 1.0), (2, 1, 1.0)]);
        assert_eq!(reconnection_stats(&g).unwrap().possibility, 0.0);
        assert!(reconnection_stats(&graph(&[(1, 2, 1.0)])).is_err());
    }
}
