mod common;

use common::*;
use graphpool::graph::batch_graphs;
use graphpool::layers::{pooled_size, topk_pool, TopKPoolLayer};
use graphpool::{Model32, Model64, ModelConfig, ReadoutPosition, Tape64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pool ratios as exact fractions `a / b`.
const RATIOS: [(usize, usize); 7] = [(1, 2), (1, 3), (2, 3), (1, 4), (4, 5), (9, 10), (1, 1)];

struct DensePool {
    kept: Vec<usize>,
    features: Vec<Vec<f64>>,
    adjacency: Vec<Vec<bool>>,
}

/// Brute-force pooling on dense matrices: rank every node by score, keep
/// the top `⌈aN/b⌉`, gate by `tanh` and slice the adjacency matrix.
fn dense_pool(adj: &[Vec<bool>], x: &[Vec<f64>], p: &[f64], (a, b): (usize, usize)) -> DensePool {
    let n = x.len();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let unit: Vec<f64> = p.iter().map(|v| v / norm).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|row| {
            row.iter()
                .zip(&unit)
                .fold(0.0, |acc, (xi, ui)| acc + xi * ui)
        })
        .collect();
    let k = (a * n).div_ceil(b);
    let kept: Vec<usize> = (0..n)
        .filter(|&i| {
            let ahead = (0..n)
                .filter(|&j| y[j] > y[i] || (y[j] == y[i] && j < i))
                .count();
            ahead < k
        })
        .collect();
    let features = kept
        .iter()
        .map(|&i| x[i].iter().map(|v| v * y[i].tanh()).collect())
        .collect();
    let adjacency = kept
        .iter()
        .map(|&u| kept.iter().map(|&v| adj[u][v]).collect())
        .collect();
    DensePool {
        kept,
        features,
        adjacency,
    }
}

fn rows(x: &Tensor64) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|r| x.row(r).to_vec()).collect()
}

/// Either continuous features or small integers, which produce score ties.
fn pooling_case(rng: &mut ChaCha8Rng) -> (graphpool::SparseGraph, Tensor64, Vec<f64>) {
    let n = rng.gen_range(1..=20);
    let f = rng.gen_range(1..=4);
    let g = random_graph(rng, n, 0.3);
    let x = if rng.gen_bool(0.3) {
        random_tensor(rng, n, f).map(|v| v.round())
    } else {
        random_tensor(rng, n, f)
    };
    let p = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (g, x, p)
}

#[test]
fn topk_pool_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..300 {
        let (g, x, p) = pooling_case(&mut rng);
        let ratio = RATIOS[case % RATIOS.len()];
        let layer = TopKPoolLayer::new(p.clone(), ratio.0 as f64 / ratio.1 as f64).unwrap();
        let (pooled, features, kept) = topk_pool(&g, &x, &layer).unwrap();
        let oracle = dense_pool(&dense_adjacency(&g), &rows(&x), &p, ratio);
        assert_eq!(kept, oracle.kept, "case {case}");
        assert_eq!(rows(&features), oracle.features, "case {case}");
        assert_eq!(dense_adjacency(&pooled), oracle.adjacency, "case {case}");
        pooled.validate().unwrap();
    }
}

#[test]
fn pooled_size_is_exact_ceiling() {
    for n in 1..200 {
        for (a, b) in RATIOS {
            assert_eq!(
                pooled_size(n, a as f64 / b as f64),
                (a * n).div_ceil(b),
                "{n} {a}/{b}"
            );
        }
    }
}

fn tie_free_case(rng: &mut ChaCha8Rng) -> (Model64, graphpool::LabeledGraph<f64>) {
    loop {
        let n = rng.gen_range(2..=15);
        let g = random_labeled(rng, n, 3, 2);
        let mut cfg = ModelConfig::new(3, 8, 2);
        cfg.seed = rng.gen();
        let model = Model64::new(cfg).unwrap();
        let mut tape = Tape64::new();
        let pass = model
            .record_forward(&mut tape, &batch_graphs(&[&g]).unwrap(), false)
            .unwrap();
        if pass.selection_gap > 1e-6 {
            return (model, g);
        }
    }
}

#[test]
fn logits_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let (model, g) = tie_free_case(&mut rng);
        let base = model.forward(&batch_graphs(&[&g]).unwrap()).unwrap();
        let perm = random_permutation(&mut rng, g.num_nodes());
        let moved = graphpool::LabeledGraph::new(
            g.graph.permute(&perm).unwrap(),
            permute_rows(&g.features, &perm),
            g.label,
        )
        .unwrap();
        let again = model.forward(&batch_graphs(&[&moved]).unwrap()).unwrap();
        assert!(
            base.max_abs_diff(&again) < 1e-9,
            "case {case}: {base:?} vs {again:?}"
        );
    }
}

#[test]
fn batch_forward_equals_per_graph_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let graphs: Vec<_> = (0..rng.gen_range(1..6))
            .map(|_| {
                let n = rng.gen_range(1..15);
                random_labeled(&mut rng, n, 4, 3)
            })
            .collect();
        let model = Model64::new(ModelConfig::new(4, 8, 3)).unwrap();
        let refs: Vec<_> = graphs.iter().collect();
        let batched = model.forward(&batch_graphs(&refs).unwrap()).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            let single = model.forward(&batch_graphs(&[g]).unwrap()).unwrap();
            assert_eq!(batched.row(i), single.row(0));
        }
    }
}

#[test]
fn pooling_nests_and_shrinks_by_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let graphs: Vec<_> = (0..3)
            .map(|_| {
                let n = rng.gen_range(1..25);
                random_labeled(&mut rng, n, 2, 2)
            })
            .collect();
        let mut cfg = ModelConfig::new(2, 5, 2);
        cfg.pool_ratio = 0.5;
        let model = Model64::new(cfg).unwrap();
        let batch = batch_graphs(&graphs.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape64::new();
        let pass = model.record_forward(&mut tape, &batch, false).unwrap();
        let mut prev = batch.node_counts.clone();
        for (counts, kept) in pass.pooled_counts.iter().zip(&pass.kept) {
            let expect: Vec<usize> = prev.iter().map(|&n| n.div_ceil(2)).collect();
            assert_eq!(counts, &expect);
            assert!(counts.iter().zip(&prev).all(|(c, p)| c <= p && *c >= 1));
            assert_eq!(kept.len(), counts.iter().sum::<usize>());
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            assert!(kept.iter().all(|&k| k < prev.iter().sum::<usize>()));
            prev = counts.clone();
        }
    }
}

#[test]
fn readout_position_changes_summary_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_labeled(&mut rng, 9, 3, 2);
    let batch = batch_graphs(&[&g]).unwrap();
    let mut cfg = ModelConfig::new(3, 6, 2);
    let post = Model64::new(cfg.clone()).unwrap();
    cfg.readout_position = ReadoutPosition::PrePool;
    let pre = Model64::new(cfg).unwrap();
    assert_eq!(pre.parameters(), post.parameters());
    let (a, b) = (
        pre.summaries(&batch).unwrap(),
        post.summaries(&batch).unwrap(),
    );
    assert_eq!(a.shape(), [1, 12]);
    assert_ne!(a, b);
    assert!(pre.forward(&batch).unwrap().is_finite());
}

#[test]
fn single_precision_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m64, g) = tie_free_case(&mut rng);
    let m32 = Model32::new(m64.config.clone()).unwrap();
    let g32 =
        graphpool::LabeledGraph::new(g.graph.clone(), g.features.cast::<f32>(), g.label).unwrap();
    let l64 = m64.forward(&batch_graphs(&[&g]).unwrap()).unwrap();
    let l32 = m32
        .forward(&batch_graphs(&[&g32]).unwrap())
        .unwrap()
        .cast::<f64>();
    assert!(l64.max_abs_diff(&l32) < 1e-4, "{l64:?} vs {l32:?}");
}
