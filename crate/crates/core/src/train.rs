//! Multi-domain training.
//!
//! Every epoch, each domain independently draws the same number of positive
//! edges (smaller domains are resampled with replacement), pairs each with
//! one negative, shuffles all triples, sorts them by time within groups of
//! `max_len`, and cuts the groups into sequences. One optimizer step sums
//! the losses of `batch` sequences from every domain; domains are never
//! mixed inside a sequence.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::TimeAugConfig;
use crate::error::{Error, Result};
use crate::graph::{negative_sample, TemporalGraph};
use crate::model::{ClgModel, ClgTriple, EvolvingSequence};
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::Tape;

/// Sorts each consecutive group of `seq_n` items by time, in place. Groups
/// keep their boundaries and members; ties keep their incoming order.
pub fn sort_in_seq_by_time(items: &mut [ClgTriple], seq_n: usize) {
    assert!(seq_n >= 1, "group size must be at least 1");
    for group in items.chunks_mut(seq_n) {
        group.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
}

/// Positive edges drawn for one domain this epoch: all of them when
/// `target ≥ n` plus `target − n` extra draws with replacement, otherwise
/// `target` drawn without replacement. Returned in chronological order.
pub fn draw_positive_indices<R: Rng + ?Sized>(n: usize, target: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = if target >= n {
        let mut v: Vec<usize> = (0..n).collect();
        v.extend((0..target - n).map(|_| rng.gen_range(0..n)));
        v
    } else {
        rand::seq::index::sample(rng, n, target).into_vec()
    };
    idx.sort_unstable();
    idx
}

/// Builds one epoch's sequences for a domain.
pub fn epoch_sequences<R: Rng + ?Sized>(
    g: &TemporalGraph,
    n_positives: usize,
    max_len: usize,
    aug: &TimeAugConfig,
    rng: &mut R,
) -> Result<Vec<EvolvingSequence>> {
    if g.num_edges() == 0 {
        return Err(Error::Size(format!("domain {} has no training edges", g.domain_id())));
    }
    let d = g.domain_id();
    let mut triples = Vec::with_capacity(2 * n_positives);
    for i in draw_positive_indices(g.num_edges(), n_positives, rng) {
        let e = g.edges()[i];
        triples.push(ClgTriple::labeled(e.src, e.dst, e.t, 1, d));
        let neg = negative_sample(g, e.src, e.dst, e.t, rng)?;
        triples.push(ClgTriple::labeled(e.src, neg, e.t, 0, d));
    }
    triples.shuffle(rng);
    sort_in_seq_by_time(&mut triples, max_len);
    triples
        .chunks(max_len)
        .map(|c| EvolvingSequence::new(d, c.to_vec(), aug.draw(rng)))
        .collect()
}

/// Number of violations of the context-before-target rule: a triple placed
/// before triple `i` in the same sequence with a strictly later timestamp.
/// Equal timestamps are concurrent events and are allowed.
pub fn leakage_violations(seqs: &[EvolvingSequence]) -> usize {
    seqs.iter()
        .map(|s| {
            let tr = s.triples();
            (0..tr.len())
                .map(|i| tr[..i].iter().filter(|c| c.t > tr[i].t).count())
                .sum::<usize>()
        })
        .sum()
}

/// Adds the gradient of `Σ clg_loss` over `seqs` into the model's store and
/// returns the loss.
pub fn accumulate_gradients(
    model: &mut ClgModel,
    g: &TemporalGraph,
    seqs: &[EvolvingSequence],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let labels: Vec<usize> = seqs
        .iter()
        .map(|s| s.labels())
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut tape = Tape::new();
    let logits = model.forward_batch(&mut tape, g, seqs, Some(rng))?;
    let loss = tape.cross_entropy(logits, &labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on domain {} over {} triples",
            g.domain_id(),
            labels.len()
        )));
    }
    tape.backward(loss, &mut model.store)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub domain: u32,
    /// Mean cross-entropy per triple.
    pub loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} domain={} loss={:.6} seconds={:.3}",
            self.epoch, self.domain, self.loss, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub steps: usize,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl TrainReport {
    /// Mean loss per domain in the final epoch.
    pub fn last_epoch_losses(&self) -> Vec<(u32, f64)> {
        let last = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.records
            .iter()
            .filter(|r| r.epoch == last)
            .map(|r| (r.domain, r.loss))
            .collect()
    }
}

/// Positives per domain per epoch: the largest domain's edge count, capped
/// by `train.edges_per_epoch` when that is non-zero.
pub fn positives_per_epoch(model: &ClgModel, domains: &[TemporalGraph]) -> usize {
    let largest = domains.iter().map(|g| g.num_edges()).max().unwrap_or(0);
    match model.cfg.train.edges_per_epoch {
        0 => largest,
        cap => largest.min(cap),
    }
}

/// Independent stream for (epoch, domain); the same stream drives a domain
/// whether it is trained alone or alongside others.
pub fn domain_rng(seed: u64, epoch: usize, domain_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(domain_index as u64);
    rng
}

pub struct Trainer {
    pub opt: AdamW,
    pub steps_per_epoch: usize,
    pub n_positives: usize,
}

impl Trainer {
    pub fn new(model: &ClgModel, domains: &[TemporalGraph]) -> Result<Self> {
        let tc = &model.cfg.train;
        if domains.is_empty() {
            return Err(Error::Validation("no training domains".into()));
        }
        for g in domains {
            if g.dst_set().len() < 2 {
                return Err(Error::Sampling(format!(
                    "domain {} has fewer than 2 destinations",
                    g.domain_id()
                )));
            }
        }
        let n_positives = positives_per_epoch(model, domains);
        let seqs = (2 * n_positives).div_ceil(model.max_len());
        let steps_per_epoch = seqs.div_ceil(tc.batch);
        let total = steps_per_epoch * tc.epochs;
        let opt = AdamW::new(
            AdamWConfig {
                lr: tc.lr,
                weight_decay: tc.weight_decay,
                warmup_steps: (tc.warmup * total as f64).ceil() as usize,
                ..Default::default()
            },
            &model.store,
        );
        Ok(Trainer {
            opt,
            steps_per_epoch,
            n_positives,
        })
    }

    /// One epoch over all domains; returns the mean per-triple loss of each.
    pub fn train_epoch(
        &mut self,
        model: &mut ClgModel,
        domains: &[TemporalGraph],
        epoch: usize,
    ) -> Result<Vec<f64>> {
        let aug = model.time_aug();
        let batch = model.cfg.train.batch;
        let seed = model.cfg.train.seed;
        let mut rngs: Vec<ChaCha8Rng> = (0..domains.len()).map(|d| domain_rng(seed, epoch, d)).collect();
        let plans = domains
            .iter()
            .zip(&mut rngs)
            .map(|(g, rng)| epoch_sequences(g, self.n_positives, model.max_len(), &aug, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut sums = vec![0.0; domains.len()];
        let mut counts = vec![0usize; domains.len()];
        for step in 0..self.steps_per_epoch {
            model.store.zero_grad();
            for (d, g) in domains.iter().enumerate() {
                let seqs = &plans[d];
                let lo = (step * batch).min(seqs.len());
                let hi = ((step + 1) * batch).min(seqs.len());
                if lo == hi {
                    continue;
                }
                let chunk = &seqs[lo..hi];
                let loss = accumulate_gradients(model, g, chunk, &mut rngs[d]).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} step {step}: {m}")),
                    other => other,
                })?;
                sums[d] += loss;
                counts[d] += chunk.iter().map(|s| s.len()).sum::<usize>();
            }
            self.opt.step(&mut model.store);
        }
        Ok(sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect())
    }
}

/// Trains for `train.epochs` epochs, reporting one record per
/// (epoch, domain) through `log` as it goes.
pub fn train(
    model: &mut ClgModel,
    domains: &[TemporalGraph],
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let start = Instant::now();
    let mut trainer = Trainer::new(model, domains)?;
    let mut report = TrainReport::default();
    for epoch in 1..=model.cfg.train.epochs {
        let t0 = Instant::now();
        let losses = trainer.train_epoch(model, domains, epoch)?;
        let seconds = t0.elapsed().as_secs_f64();
        for (g, loss) in domains.iter().zip(losses) {
            let rec = EpochRecord {
                epoch,
                domain: g.domain_id(),
                loss,
                seconds,
            };
            log(&rec);
            report.records.push(rec);
        }
    }
    report.steps = trainer.opt.steps_taken();
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, DecoderConfig, EncoderConfig};
    use crate::graph::TemporalEdge;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config() -> Config {
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
            layers: 1,
            heads: 2,
            hidden: 8,
            max_len: 4,
        };
        cfg.train.epochs = 1;
        cfg.train.batch = 2;
        cfg
    }

    fn toy(domain: u32, n: usize, seed: u64) -> TemporalGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = (0..n)
            .map(|i| {
                let u = rng.gen_range(1..6);
                TemporalEdge::new(u, u % 5 + 1, 1.0 + i as f64)
            })
            .collect();
        TemporalGraph::from_edges(domain, edges, 6).unwrap()
    }

    fn triple(t: f64) -> ClgTriple {
        ClgTriple::labeled(1, 2, t, 1, 0)
    }

    #[test]
    fn sort_examples() {
        let times = [5.0, 1.0, 7.0, 3.0, 8.0, 2.0, 6.0, 4.0];
        let mut all: Vec<_> = times.iter().map(|&t| triple(t)).collect();
        sort_in_seq_by_time(&mut all, 8);
        assert!(all.windows(2).all(|w| w[0].t <= w[1].t));

        let mut one: Vec<_> = times.iter().map(|&t| triple(t)).collect();
        sort_in_seq_by_time(&mut one, 1);
        assert_eq!(one.iter().map(|x| x.t).collect::<Vec<_>>(), times);

        let mut halves: Vec<_> = times.iter().map(|&t| triple(t)).collect();
        sort_in_seq_by_time(&mut halves, 4);
        assert_eq!(
            halves.iter().map(|x| x.t).collect::<Vec<_>>(),
            [1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]
        );
    }

    #[test]
    fn positives_resample_small_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = draw_positive_indices(5, 12, &mut rng);
        assert_eq!(idx.len(), 12);
        for i in 0..5 {
            assert!(idx.contains(&i));
        }
        let idx = draw_positive_indices(50, 10, &mut rng);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn epoch_is_half_negative_and_leak_free() {
        let g = toy(0, 40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seqs = epoch_sequences(&g, 40, 8, &TimeAugConfig::default(), &mut rng).unwrap();
        let labels: Vec<u8> = seqs.iter().flat_map(|s| s.triples().iter().map(|t| t.label.unwrap())).collect();
        assert_eq!(labels.len(), 80);
        assert_eq!(labels.iter().filter(|&&y| y == 0).count(), 40);
        assert_eq!(leakage_violations(&seqs), 0);
        assert!(seqs.iter().all(|s| s.len() <= 8));
    }

    #[test]
    fn single_domain_epoch_is_bit_reproducible() {
        let g = toy(0, 8, 3);
        let run = || {
            let mut m = ClgModel::new(tiny_config(), 5).unwrap();
            let r = train(&mut m, std::slice::from_ref(&g), &mut |_| {}).unwrap();
            (r.records[0].loss.to_bits(), crate::checkpoint::to_bytes(&m.store))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn two_domain_gradient_is_the_sum() {
        let gs = [toy(0, 12, 4), toy(1, 9, 5)];
        let mut m = ClgModel::new(tiny_config(), 6).unwrap();
        let aug = m.time_aug();
        let grads = |m: &ClgModel| -> Vec<Tensor> { m.store.iter().map(|p| p.grad.clone()).collect() };
        let plan = |d: usize| {
            let mut rng = domain_rng(9, 1, d);
            let s = epoch_sequences(&gs[d], 12, 4, &aug, &mut rng).unwrap();
            (s, rng)
        };
        let mut single = Vec::new();
        for d in 0..2 {
            m.store.zero_grad();
            let (s, mut rng) = plan(d);
            accumulate_gradients(&mut m, &gs[d], &s[..2], &mut rng).unwrap();
            single.push(grads(&m));
        }
        m.store.zero_grad();
        for d in 0..2 {
            let (s, mut rng) = plan(d);
            accumulate_gradients(&mut m, &gs[d], &s[..2], &mut rng).unwrap();
        }
        for ((joint, a), b) in grads(&m).iter().zip(&single[0]).zip(&single[1]) {
            let mut sum = a.clone();
            sum.add_assign(b);
            assert!(joint.max_abs_diff(&sum) <= 1e-12);
        }
    }

    #[test]
    fn loss_decreases_on_a_repeating_pattern() {
        let g = toy(0, 60, 7);
        let mut cfg = tiny_config();
        cfg.train.epochs = 8;
        cfg.train.lr = 3e-3;
        let mut m = ClgModel::new(cfg, 8).unwrap();
        let r = train(&mut m, std::slice::from_ref(&g), &mut |_| {}).unwrap();
        assert!(r.records.iter().all(|x| x.loss.is_finite()));
        assert!(r.records.last().unwrap().loss < r.records[0].loss);
    }

    proptest! {
        #[test]
        fn grouped_sort_matches_brute_force(
            times in proptest::collection::vec(0.0f64..100.0, 0..40),
            seq_n in 1usize..10,
        ) {
            let mut got: Vec<_> = times.iter().map(|&t| triple(t)).collect();
            sort_in_seq_by_time(&mut got, seq_n);
            let mut start = 0;
            while start < times.len() {
                let end = (start + seq_n).min(times.len());
                let mut want = times[start..end].to_vec();
                want.sort_by(f64::total_cmp);
                let g: Vec<f64> = got[start..end].iter().map(|x| x.t).collect();
                prop_assert_eq!(g, want);
                start = end;
            }
        }
    }
}
