use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linkgen::graph::{chronological_split, negative_sample, reconnection_stats, sample_recent_neighbors};
use linkgen::infer::evaluate_ap;
use linkgen::model::clg_loss;
use linkgen::synth::{generate, GeneratorKind, GeneratorSpec};
use linkgen::{Tensor, TemporalEdge, TemporalGraph};

fn stream() -> impl Strategy<Value = Vec<(u32, u32, u8)>> {
    prop::collection::vec((1u32..12, 1u32..12, 0u8..20), 3..120)
}

fn graph(rows: &[(u32, u32, u8)]) -> TemporalGraph {
    let edges = rows.iter().map(|&(u, v, t)| TemporalEdge::new(u, v, t as f64)).collect();
    TemporalGraph::from_edges(0, edges, 12).unwrap()
}

proptest! {
    #[test]
    fn neighbors_are_strictly_earlier(rows in stream(), u in 1u32..12, t in 0u8..22, k in 1usize..10) {
        let g = graph(&rows);
        let seq = sample_recent_neighbors(&g, u, t as f64, k);
        prop_assert_eq!(seq.entries.len(), k);
        for e in seq.real() {
            prop_assert!(e.time < t as f64);
        }
    }

    #[test]
    fn split_views_concatenate_back(rows in stream()) {
        let g = graph(&rows);
        let s = chronological_split(&g, (0.7, 0.15, 0.15));
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        let joined: Vec<_> = [&s.train, &s.val, &s.test].iter().flat_map(|v| v.edges().to_vec()).collect();
        prop_assert_eq!(joined.as_slice(), g.edges());
    }

    #[test]
    fn possibility_is_a_fraction(rows in stream()) {
        let st = reconnection_stats(&graph(&rows)).unwrap();
        prop_assert!((0.0..=1.0).contains(&st.possibility));
        if let Some(r) = st.pearson {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }

    #[test]
    fn negative_is_never_the_excluded_node(rows in stream(), seed: u64) {
        let g = graph(&rows);
        prop_assume!(g.dst_set().len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &v in g.dst_set() {
            prop_assert_ne!(negative_sample(&g, 1, v, 0.0, &mut rng).unwrap(), v);
        }
    }

    #[test]
    fn ap_ignores_order_preserving_shuffles(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60),
        seed: u64,
    ) {
        prop_assume!(pairs.iter().any(|p| p.1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        let base = evaluate_ap(&scores, &labels).unwrap();
        // shuffle positions freely, then refill each equal-score group with
        // its labels in their original relative order
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut queues: Vec<std::collections::VecDeque<u8>> = vec![Default::default(); 6];
        for (s, l) in scores.iter().zip(&labels) {
            queues[*s as usize].push_back(*l);
        }
        let l2: Vec<u8> = shuffled.iter().map(|s| queues[*s as usize].pop_front().unwrap()).collect();
        prop_assert_eq!(evaluate_ap(&shuffled, &l2).unwrap(), base);
    }

    #[test]
    fn constant_scorer_on_balanced_labels_scores_half(n in 1usize..200) {
        let scores = vec![0.3; 2 * n];
        let labels: Vec<u8> = (0..2 * n).map(|i| (i % 2) as u8).collect();
        prop_assert!((evaluate_ap(&scores, &labels).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clg_loss_is_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 2..40), seed: u64) {
        let rows = logits.len() / 2;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, 2], logits[..2 * rows].to_vec()).unwrap();
        let labels: Vec<usize> = (0..rows).map(|i| ((seed >> (i % 64)) & 1) as usize).collect();
        prop_assert!(clg_loss(&t, &labels).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_seed_deterministic(seed: u64, p in 0.0f64..=1.0, kind in 0usize..3) {
        let kind = [GeneratorKind::Triadic, GeneratorKind::AntiTriadic, GeneratorKind::BipartiteReconnect][kind];
        let spec = GeneratorSpec::new(kind, 40, 300, p, seed);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(a.graph.edges(), b.graph.edges());
        for (i, e) in a.graph.edges().iter().enumerate() {
            prop_assert_eq!(e.t, (i + 1) as f64);
            prop_assert_ne!(e.src, e.dst);
        }
    }
}
