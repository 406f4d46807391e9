//! The conditioned link generation model: pair encoder, token layout,
//! causal decoder, and the two-logit prediction head.
//!
//! Each triple `(u, v, t, y)` becomes three decoder tokens
//! `[proj(z_src), proj(z_dst), label_emb[y]]`. The prediction for a triple is
//! read at its dst token, which sees every earlier triple (labels included)
//! and its own src token, but never its own label. Tokens also receive a
//! learned role embedding (src / dst / label); there is no absolute position
//! embedding, so any context length up to `max_len` uses the same weights.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::{encode_batch, encoder_inputs, EncoderParams, PairQuery, TimeAugConfig, TimeDraws};
use crate::error::{Error, Result};
use crate::graph::{negative_sample, NodeId, TemporalGraph};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{stack_forward, BlockParams, KvCache, LayerNormParams, Linear, StackPass};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClgTriple {
    pub u: NodeId,
    pub v: NodeId,
    pub t: f64,
    /// `Some(0|1)` when known; the inference target carries `None`.
    pub label: Option<u8>,
    pub domain: u32,
}

impl ClgTriple {
    pub fn labeled(u: NodeId, v: NodeId, t: f64, label: u8, domain: u32) -> Self {
        ClgTriple { u, v, t, label: Some(label), domain }
    }
}

/// A single-domain, time-grouped run of triples sharing one pair of
/// time-augmentation draws.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolvingSequence {
    domain_id: u32,
    triples: Vec<ClgTriple>,
    draws: TimeDraws,
}

impl EvolvingSequence {
    pub fn new(domain_id: u32, triples: Vec<ClgTriple>, draws: TimeDraws) -> Result<Self> {
        for (i, tr) in triples.iter().enumerate() {
            if tr.domain != domain_id {
                return Err(Error::Validation(format!(
                    "triple {i} belongs to domain {}, sequence is domain {domain_id}",
                    tr.domain
                )));
            }
            match tr.label {
                Some(y) if y > 1 => {
                    return Err(Error::Validation(format!("triple {i} has label {y}; labels are 0 or 1")))
                }
                None if i + 1 != triples.len() => {
                    return Err(Error::Validation(format!(
                        "triple {i} is unlabeled; only the final triple may be"
                    )))
                }
                _ => {}
            }
        }
        Ok(EvolvingSequence { domain_id, triples, draws })
    }

    pub fn domain_id(&self) -> u32 {
        self.domain_id
    }

    pub fn triples(&self) -> &[ClgTriple] {
        &self.triples
    }

    pub fn draws(&self) -> TimeDraws {
        self.draws
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Labels of every triple, or an error if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.triples
            .iter()
            .map(|t| {
                t.label
                    .map(usize::from)
                    .ok_or_else(|| Error::Validation("sequence has an unlabeled triple".into()))
            })
            .collect()
    }

    /// The first `n` triples, sharing this sequence's draws.
    pub fn prefix(&self, n: usize) -> EvolvingSequence {
        EvolvingSequence {
            domain_id: self.domain_id,
            triples: self.triples[..n].to_vec(),
            draws: self.draws,
        }
    }

    pub fn queries(&self) -> impl Iterator<Item = PairQuery> + '_ {
        self.triples.iter().map(|tr| PairQuery {
            u: tr.u,
            v: tr.v,
            t: tr.t,
            draws: self.draws,
        })
    }
}

pub const ROLE_SRC: usize = 0;
pub const ROLE_DST: usize = 1;
pub const ROLE_LABEL: usize = 2;

/// Where each decoder token comes from for a sequence of `n` triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_triples: usize,
    /// Whether the final triple contributes a label token.
    pub last_labeled: bool,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        3 * self.n_triples - usize::from(!self.last_labeled && self.n_triples > 0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn src_position(i: usize) -> usize {
        3 * i
    }

    pub fn dst_position(i: usize) -> usize {
        3 * i + 1
    }

    pub fn label_position(i: usize) -> usize {
        3 * i + 2
    }

    pub fn roles(&self) -> Vec<usize> {
        (0..self.len()).map(|p| p % 3).collect()
    }
}

/// Inputs to the decoder for one sequence: rows of the pair-embedding batch
/// and the known labels.
struct DecodeItem {
    z_offset: usize,
    labels: Vec<Option<u8>>,
}

#[derive(Clone, Debug)]
pub struct ClgModel {
    pub cfg: Config,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub proj: Linear,
    pub label_emb: ParamId,
    pub role_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub head: Linear,
}

impl ClgModel {
    /// Builds a freshly initialized model; all weights derive from `seed`.
    pub fn new(cfg: Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &cfg.encoder, &mut rng);
        let h = cfg.decoder.hidden;
        let proj = Linear::new(&mut store, "decoder.proj", cfg.encoder.hidden, h, &mut rng);
        let label_emb = store.add_xavier("decoder.label_emb", 2, h, &mut rng);
        let role_emb = store.add_xavier("decoder.role_emb", 3, h, &mut rng);
        let blocks = (0..cfg.decoder.layers)
            .map(|i| BlockParams::new(&mut store, &format!("decoder.block{i}"), h, &mut rng))
            .collect();
        let ln_f = LayerNormParams::new(&mut store, "decoder.ln_f", h);
        let head = Linear::new(&mut store, "head", h, 2, &mut rng);
        Ok(ClgModel {
            cfg,
            store,
            encoder,
            proj,
            label_emb,
            role_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn time_aug(&self) -> TimeAugConfig {
        TimeAugConfig::from(&self.cfg.time)
    }

    pub fn max_len(&self) -> usize {
        self.cfg.decoder.max_len
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.decoder.layers, self.cfg.decoder.hidden)
    }

    /// Encodes every triple of `seqs` against `g`; rows are
    /// `(z_src, z_dst)` per triple in sequence order.
    pub fn encode(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        queries: &[PairQuery],
        dropout: Option<(f64, &mut dyn FnMut() -> f64)>,
    ) -> Result<Var> {
        let inputs = encoder_inputs(g, queries, &self.cfg.encoder, &self.time_aug())?;
        encode_batch(tape, &self.store, &self.encoder, &inputs, dropout)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        z: Var,
        items: &[DecodeItem],
        cache: Option<&mut KvCache>,
        dropout: Option<(f64, &mut dyn FnMut() -> f64)>,
    ) -> Result<Var> {
        let store = &self.store;
        let pz = self.proj.forward(tape, store, z)?;
        let z_rows = tape.value(z).rows();
        let labels: Vec<usize> = items
            .iter()
            .flat_map(|it| it.labels.iter().flatten().map(|&y| usize::from(y)))
            .collect();
        let mut gather = Vec::new();
        let mut roles = Vec::new();
        let mut segments = Vec::new();
        let mut dst_rows = Vec::new();
        let mut label_cursor = 0;
        for it in items {
            let start = gather.len();
            for (i, y) in it.labels.iter().enumerate() {
                gather.push(2 * (it.z_offset + i));
                roles.push(ROLE_SRC);
                dst_rows.push(gather.len());
                gather.push(2 * (it.z_offset + i) + 1);
                roles.push(ROLE_DST);
                if y.is_some() {
                    gather.push(z_rows + label_cursor);
                    roles.push(ROLE_LABEL);
                    label_cursor += 1;
                }
            }
            segments.push((start, gather.len() - start));
        }
        let all = if labels.is_empty() {
            pz
        } else {
            let table = tape.param(store, self.label_emb);
            let lab = tape.gather_rows(table, labels)?;
            tape.concat_rows(&[pz, lab])?
        };
        let x = tape.gather_rows(all, gather)?;
        let role_table = tape.param(store, self.role_emb);
        let r = tape.gather_rows(role_table, roles)?;
        let x = tape.add(x, r)?;
        let mut pass = StackPass {
            heads: self.cfg.decoder.heads,
            segments,
            causal: true,
            cache,
            dropout,
        };
        let x = stack_forward(tape, store, &self.blocks, x, &mut pass)?;
        let x = self.ln_f.forward(tape, store, x)?;
        let x = tape.gather_rows(x, dst_rows)?;
        self.head.forward(tape, store, x)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.max_len() {
            return Err(Error::Length(format!(
                "sequence of {n} triples exceeds decoder.max_len {}",
                self.max_len()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass for a batch of sequences on `tape` and
    /// returns the `Σn × 2` logits, one row per triple in order.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        seqs: &[EvolvingSequence],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut queries = Vec::new();
        let mut items = Vec::new();
        for s in seqs {
            self.check_len(s.len())?;
            if s.is_empty() {
                return Err(Error::Length("cannot run the decoder on an empty sequence".into()));
            }
            items.push(DecodeItem {
                z_offset: queries.len(),
                labels: s.triples().iter().map(|t| t.label).collect(),
            });
            queries.extend(s.queries());
        }
        let p = self.cfg.train.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let mut draw = || rng.gen::<f64>();
                let z = self.encode(tape, g, &queries, Some((p, &mut draw)))?;
                self.decode(tape, z, &items, None, Some((p, &mut draw)))
            }
            _ => {
                let z = self.encode(tape, g, &queries, None)?;
                self.decode(tape, z, &items, None, None)
            }
        }
    }

    /// Logits for every triple of one sequence (no dropout).
    pub fn forward(&self, g: &TemporalGraph, seq: &EvolvingSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, g, std::slice::from_ref(seq), None)?;
        Ok(tape.value(out).clone())
    }

    /// Runs already-encoded pairs through the decoder, resuming from and
    /// appending to `cache`.
    pub fn decode_cached(
        &self,
        z_pairs: &Tensor,
        labels: &[Option<u8>],
        cache: &mut KvCache,
    ) -> Result<Tensor> {
        if cache.hidden() != self.cfg.decoder.hidden || cache.num_layers() != self.blocks.len() {
            return Err(Error::Cache(format!(
                "cache is {} layers × {} wide, model is {} × {}",
                cache.num_layers(),
                cache.hidden(),
                self.blocks.len(),
                self.cfg.decoder.hidden
            )));
        }
        if cache.len() % 3 != 0 {
            return Err(Error::Cache(format!(
                "cache length {} is not a whole number of triples",
                cache.len()
            )));
        }
        self.check_len(cache.len() / 3 + labels.len())?;
        if labels.is_empty() {
            return Ok(Tensor::zeros(&[0, 2]));
        }
        let mut tape = Tape::new();
        let z = tape.constant(z_pairs.clone());
        let items = [DecodeItem {
            z_offset: 0,
            labels: labels.to_vec(),
        }];
        let out = self.decode(&mut tape, z, &items, Some(cache), None)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes the triples of `seq` outside any tape, as a `2n×h` matrix.
    pub fn encode_values(&self, g: &TemporalGraph, queries: &[PairQuery]) -> Result<Tensor> {
        if queries.is_empty() {
            return Ok(Tensor::zeros(&[0, self.cfg.encoder.hidden]));
        }
        let mut tape = Tape::new();
        let z = self.encode(&mut tape, g, queries, None)?;
        Ok(tape.value(z).clone())
    }
}

/// `Σᵢ CE(logitsᵢ, yᵢ)` over the rows of `logits`.
pub fn clg_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = tape.cross_entropy(x, labels)?;
    Ok(tape.value(l).data()[0])
}

/// Samples a labeled context of at most `k` triples from edges of `g` with
/// timestamp strictly before `before`: positives drawn without replacement,
/// each followed by one negative, shuffled, cut to `k`, then stably sorted
/// by time.
pub fn sample_context<R: Rng + ?Sized>(
    g: &TemporalGraph,
    before: f64,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ClgTriple>> {
    let edges = g.edges();
    let hist = edges.partition_point(|e| e.t < before);
    let n_pos = k.div_ceil(2).min(hist);
    let d = g.domain_id();
    let mut out = Vec::with_capacity(2 * n_pos);
    for i in rand::seq::index::sample(rng, hist, n_pos).into_vec() {
        let e = edges[i];
        out.push(ClgTriple::labeled(e.src, e.dst, e.t, 1, d));
        let neg = negative_sample(g, e.src, e.dst, e.t, rng)?;
        out.push(ClgTriple::labeled(e.src, neg, e.t, 0, d));
    }
    out.shuffle(rng);
    out.truncate(k);
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

/// Context of up to `max_len − 1` triples before `target.t`, followed by the
/// target. One pair of time draws is taken first and shared by all triples.
pub fn build_evolving_sequence<R: Rng + ?Sized>(
    g: &TemporalGraph,
    target: ClgTriple,
    max_len: usize,
    aug: &TimeAugConfig,
    rng: &mut R,
) -> Result<EvolvingSequence> {
    if max_len == 0 {
        return Err(Error::Length("max_len must be at least 1".into()));
    }
    let draws = aug.draw(rng);
    let mut triples = sample_context(g, target.t, max_len - 1, rng)?;
    triples.push(target);
    EvolvingSequence::new(g.domain_id(), triples, draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, EncoderConfig};
    use crate::graph::TemporalEdge;

    pub(crate) fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.encoder = EncoderConfig {
            k: 4,
            patch: 1,
            hidden: 8,
            layers: 1,
            heads: 2,
            time_dims: 4,
            count_dims: 4,
            omega_max: 100.0,
        };
        cfg.decoder = DecoderConfig {
            layers: 2,
            heads: 2,
            hidden: 8,
            max_len: 16,
        };
        cfg
    }

    fn toy_graph() -> TemporalGraph {
        let mut edges = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..40 {
            let u = rng.gen_range(1..10);
            let mut v = rng.gen_range(1..10);
            if v == u {
                v = u % 9 + 1;
            }
            edges.push(TemporalEdge::new(u, v, 1.0 + i as f64));
        }
        TemporalGraph::from_edges(0, edges, 10).unwrap()
    }

    fn random_seq(g: &TemporalGraph, n: usize, seed: u64) -> EvolvingSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = sample_context(g, f64::INFINITY, n, &mut rng).unwrap();
        EvolvingSequence::new(0, ctx, TimeDraws { beta: 1.2, gamma: 0.3 }).unwrap()
    }

    #[test]
    fn layout_positions() {
        let l = TokenLayout { n_triples: 4, last_labeled: true };
        assert_eq!(l.len(), 12);
        let l = TokenLayout { n_triples: 4, last_labeled: false };
        assert_eq!(l.len(), 11);
        assert_eq!(TokenLayout::dst_position(3), 10);
        assert_eq!(l.roles()[..6], [0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn sequence_rejects_foreign_domain_and_bad_labels() {
        let a = ClgTriple::labeled(1, 2, 1.0, 1, 0);
        let b = ClgTriple::labeled(1, 2, 2.0, 0, 1);
        assert!(matches!(
            EvolvingSequence::new(0, vec![a, b], TimeDraws::IDENTITY),
            Err(Error::Validation(_))
        ));
        let c = ClgTriple { label: None, ..a };
        assert!(EvolvingSequence::new(0, vec![c, a], TimeDraws::IDENTITY).is_err());
        assert!(EvolvingSequence::new(0, vec![a, c], TimeDraws::IDENTITY).is_ok());
        let d = ClgTriple { label: Some(2), ..a };
        assert!(EvolvingSequence::new(0, vec![d], TimeDraws::IDENTITY).is_err());
    }

    #[test]
    fn max_len_one_is_target_only() {
        let g = toy_graph();
        let target = ClgTriple { u: 1, v: 2, t: 30.0, label: None, domain: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_evolving_sequence(&g, target, 1, &TimeAugConfig::default(), &mut rng).unwrap();
        assert_eq!(s.triples(), &[target]);
    }

    #[test]
    fn context_is_before_target_and_sorted() {
        let g = toy_graph();
        let target = ClgTriple { u: 1, v: 2, t: 20.0, label: Some(1), domain: 0 };
        let aug = TimeAugConfig::default();
        let s = build_evolving_sequence(&g, target, 8, &aug, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ctx = &s.triples()[..s.len() - 1];
        assert_eq!(ctx.len(), 7);
        assert!(ctx.iter().all(|tr| tr.t < 20.0));
        assert!(ctx.windows(2).all(|w| w[0].t <= w[1].t));

        // Re-derive the sample with the same stream: draws, then indices.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = aug.draw(&mut rng);
        assert_eq!(draws, s.draws());
        let hist: Vec<_> = g.edges().iter().filter(|e| e.t < 20.0).collect();
        let idx = rand::seq::index::sample(&mut rng, hist.len(), 4).into_vec();
        let mut pos: Vec<f64> = idx.iter().map(|&i| hist[i].t).collect();
        pos.sort_by(f64::total_cmp);
        let mut got: Vec<f64> = ctx.iter().filter(|t| t.label == Some(1)).map(|t| t.t).collect();
        got.sort_by(f64::total_cmp);
        assert!(got.iter().all(|t| pos.contains(t)));
        assert!(got.len() >= 3);
    }

    #[test]
    fn empty_history_gives_target_only() {
        let g = toy_graph();
        let target = ClgTriple { u: 1, v: 2, t: 0.5, label: None, domain: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_evolving_sequence(&g, target, 10, &TimeAugConfig::default(), &mut rng).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn logits_shape_and_length_error() {
        let g = toy_graph();
        let m = ClgModel::new(tiny_config(), 1).unwrap();
        let s = random_seq(&g, 6, 2);
        let l = m.forward(&g, &s).unwrap();
        assert_eq!(l.shape(), &[6, 2]);
        let long = random_seq(&g, 17, 3);
        assert!(matches!(m.forward(&g, &long), Err(Error::Length(_))));
    }

    #[test]
    fn own_and_later_labels_do_not_affect_prediction() {
        let g = toy_graph();
        let m = ClgModel::new(tiny_config(), 2).unwrap();
        let s = random_seq(&g, 8, 4);
        let base = m.forward(&g, &s).unwrap();
        for j in 0..s.len() {
            let mut tr = s.triples().to_vec();
            tr[j].label = tr[j].label.map(|y| 1 - y);
            let flipped = EvolvingSequence::new(0, tr, s.draws()).unwrap();
            let l = m.forward(&g, &flipped).unwrap();
            for i in 0..=j {
                for c in 0..2 {
                    assert!((l.get(i, c) - base.get(i, c)).abs() <= 1e-12);
                }
            }
            if j + 1 < s.len() {
                assert!(l.max_abs_diff(&base) > 0.0);
            }
        }
    }

    #[test]
    fn loss_of_single_triple_is_plain_ce() {
        let logits = Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap();
        let want = -(0.3f64.exp() / (0.3f64.exp() + (-0.4f64).exp())).ln();
        assert!((clg_loss(&logits, &[0]).unwrap() - want).abs() < 1e-12);
        let uniform = Tensor::zeros(&[4, 2]);
        let l = clg_loss(&uniform, &[0, 1, 1, 0]).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batched_forward_matches_individual() {
        let g = toy_graph();
        let m = ClgModel::new(tiny_config(), 3).unwrap();
        let a = random_seq(&g, 5, 5);
        let b = random_seq(&g, 7, 6);
        let mut tape = Tape::new();
        let out = m.forward_batch(&mut tape, &g, &[a.clone(), b.clone()], None).unwrap();
        let out = tape.value(out);
        let la = m.forward(&g, &a).unwrap();
        let lb = m.forward(&g, &b).unwrap();
        for i in 0..5 {
            assert!((out.get(i, 0) - la.get(i, 0)).abs() < 1e-12);
        }
        for i in 0..7 {
            assert!((out.get(5 + i, 1) - lb.get(i, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let g = toy_graph();
        let m = ClgModel::new(tiny_config(), 4).unwrap();
        let s = random_seq(&g, 11, 7);
        let full = m.forward(&g, &s).unwrap();
        let queries: Vec<_> = s.queries().collect();
        let z = m.encode_values(&g, &queries).unwrap();
        let labels: Vec<_> = s.triples().iter().map(|t| t.label).collect();
        let mut cache = m.new_cache();
        let rows = |a: usize, b: usize| Tensor::matrix(2 * (b - a), 8, z.data()[2 * a * 8..2 * b * 8].to_vec()).unwrap();
        m.decode_cached(&rows(0, 10), &labels[..10], &mut cache).unwrap();
        assert_eq!(cache.len(), 30);
        let last = m.decode_cached(&rows(10, 11), &labels[10..], &mut cache).unwrap();
        assert!((last.get(0, 0) - full.get(10, 0)).abs() <= 1e-8);
        assert!((last.get(0, 1) - full.get(10, 1)).abs() <= 1e-8);
    }
}
