mod common;

use std::collections::HashSet;

use pragma_mcts::eval::{median, Budget, CachedEvaluator, Clock, SyntheticLandscape};
use pragma_mcts::loop_model::{load_loop_nest, render_pragmas, Configuration};
use pragma_mcts::mcts::{backpropagate, run, select, uct, MctsParams, SearchTree};
use pragma_mcts::reward::{quantile_split, EvalRecord, SampleKind};
use pragma_mcts::space::{child, child_count, child_index, index_path, random_walk, SpaceNode, SpaceParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_space() -> SpaceParams {
    SpaceParams { d_max: 3, ..SpaceParams::default() }
}

/// Node reached by following `indices` (modulo the child count) from `root`.
fn follow(root: &SpaceNode, indices: &[usize], params: &SpaceParams) -> SpaceNode {
    let mut node = root.clone();
    for &i in indices {
        let n = child_count(&node, params);
        if n == 0 {
            break;
        }
        node = child(&node, i % n, params).unwrap();
    }
    node
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn child_index_inverts_child(seed in 0u64..500, path in prop::collection::vec(0usize..400, 0..4)) {
        let params = small_space();
        let root = SpaceNode::root(common::random_nest(seed, 5));
        let node = follow(&root, &path, &params);
        prop_assert_eq!(index_path(&root, &node.config, &params).map(|p| p.len()), Some(node.depth()));
        let n = child_count(&node, &params);
        for i in 0..n.min(40) {
            let c = child(&node, i, &params).unwrap();
            prop_assert_eq!(child_index(&node, c.config.steps.last().unwrap(), &params), Some(i));
        }
    }

    #[test]
    fn child_count_matches_oracle(seed in 0u64..2000, path in prop::collection::vec(0usize..400, 0..3)) {
        let params = small_space();
        let root = SpaceNode::root(common::random_nest(seed, 6));
        let node = follow(&root, &path, &params);
        prop_assert_eq!(child_count(&node, &params), common::oracle_children(&node.nest, &params).len());
    }

    #[test]
    fn distinct_configs_render_distinctly(a in prop::collection::vec(0usize..100, 0..4), b in prop::collection::vec(0usize..100, 0..4)) {
        let params = small_space();
        let nest = load_loop_nest("arrays = [\"A\"]\n[[loops]]\nid = \"i\"\n").unwrap();
        let root = SpaceNode::root(nest.clone());
        let x = follow(&root, &a, &params);
        let y = follow(&root, &b, &params);
        let template = "/*@loop:i*/\nfor (i = 0; i < n; i++) s(i);\n";
        let rx = render_pragmas(&nest, &x.config, template).unwrap();
        let ry = render_pragmas(&nest, &y.config, template).unwrap();
        prop_assert_eq!(x.key() == y.key(), rx == ry, "{} / {}", x.key(), y.key());
    }

    #[test]
    fn random_walk_reaches_requested_depth_or_leaf(seed in any::<u64>(), depth in 1usize..6) {
        let params = SpaceParams::default();
        let root = SpaceNode::root(common::gemm());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node = random_walk(&root, depth, &params, &mut rng);
        prop_assert!(node.depth() == depth || (node.depth() < depth && child_count(&node, &params) == 0));
    }

    #[test]
    fn median_matches_sort_oracle(mut v in prop::collection::vec(-1e6f64..1e6, 1..40).prop_filter("odd", |v| v.len() % 2 == 1)) {
        let m = median(&v).unwrap();
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(m, v[v.len() / 2]);
    }

    #[test]
    fn uct_argmax_survives_uniform_scaling(
        stats in prop::collection::vec((1u64..20, 0u64..20), 2..8),
        k in 1u64..6,
        c in 0.0f64..1.0,
    ) {
        // Each child j: N_j visits, W_j wins (capped at N_j); rewards replayed k times.
        let stats: Vec<(u64, f64)> = stats.into_iter().map(|(n, w)| (n, w.min(n) as f64)).collect();
        let parent: u64 = stats.iter().map(|s| s.0).sum();
        let argmax = |scale: u64| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, &(n, w)) in stats.iter().enumerate() {
                let s = uct(w * scale as f64, n * scale, parent * scale, c);
                if s > best.0 {
                    best = (s, j);
                }
            }
            best.1
        };
        // Scaling multiplies every exploration bonus by the same factor, so
        // the choice is fixed whenever the bonus cannot reorder children.
        if c == 0.0 || stats.windows(2).all(|w| w[0].0 == w[1].0) {
            prop_assert_eq!(argmax(1), argmax(k));
        }
    }

    #[test]
    fn synthetic_is_pure(seed in any::<u64>(), path in prop::collection::vec(0usize..200, 0..5)) {
        let nest = common::gemm();
        let node = follow(&SpaceNode::root(nest.clone()), &path, &SpaceParams::default());
        let a = SyntheticLandscape::new(seed, nest.clone()).evaluate(&node.config);
        let b = SyntheticLandscape::new(seed, nest).evaluate(&node.config);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantile_tails_bracket_history(hs in prop::collection::vec(prop::option::weighted(0.8, 0.01f64..50.0), 1..60)) {
        let history: Vec<EvalRecord> = hs.iter().enumerate().map(|(i, h)| EvalRecord {
            iteration: i,
            phase: 0,
            kind: SampleKind::Sample,
            key: i.to_string(),
            config: Configuration::root(),
            outcome: pragma_mcts::eval::Outcome::Time { seconds: 1.0 },
            h: *h,
            best_so_far_h: 1.0,
            target_f: None,
            d_star: None,
            elapsed_s: 0.0,
        }).collect();
        match quantile_split(&history, 0.05) {
            Err(_) => prop_assert!(hs.iter().all(Option::is_none)),
            Ok((lower, upper)) => {
                let max = hs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(upper.iter().any(|r| r.h == Some(max)));
                prop_assert!(upper.iter().all(|r| r.h.is_some()));
                let failures = hs.iter().filter(|h| h.is_none()).count();
                prop_assert!(lower.iter().filter(|r| r.h.is_none()).count() == failures);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mcts_run_invariants(seed in any::<u64>(), budget in 1usize..120, per_run in 5usize..40) {
        let nest = common::gemm();
        let params = MctsParams { per_run_budget: per_run, space: small_space(), ..MctsParams::default() };
        let land = SyntheticLandscape::new(seed, nest.clone());
        let mut cache = CachedEvaluator::new(land, Budget::unique(budget), Clock::Virtual(0.0));
        let out = run(&nest, &params, &mut cache, seed).unwrap();
        prop_assert!(cache.unique_count() <= budget);
        prop_assert_eq!(out.history.len(), cache.unique_count() + 1);
        let keys: HashSet<&str> = out.history.iter().map(|r| r.key.as_str()).collect();
        prop_assert_eq!(keys.len(), out.history.len());
        for p in &out.phases {
            prop_assert!(p.evaluations <= per_run);
            prop_assert_eq!(p.evaluations, out.history.iter().filter(|r| r.phase == p.phase && r.kind != SampleKind::Root).count());
        }
        let fs: Vec<f64> = out.history.iter().filter_map(|r| r.target_f).collect();
        prop_assert!(fs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.history.iter().all(|r| r.depth() <= params.space.d_max));
        let best = out.history.iter().filter_map(|r| r.h).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(out.best.h, Some(best));
    }
}

#[test]
fn select_prefers_unvisited_children() {
    let params = SpaceParams { tile_sizes: vec![], unroll_factors: vec![], peel_variants: vec![false], d_max: 2 };
    let nest = load_loop_nest("[[loops]]\nid = \"i\"\n").unwrap();
    let mut tree = SearchTree::new(SpaceNode::root(nest), params);
    let n = tree.node(SearchTree::ROOT).child_count;
    let mut ids = Vec::new();
    for i in 0..n {
        ids.push(tree.child(SearchTree::ROOT, i).unwrap());
    }
    for &id in &ids[1..] {
        backpropagate(&mut tree, &[SearchTree::ROOT, id], 1.0);
    }
    // Child 0 is instantiated but never visited, so its score is infinite.
    assert_eq!(select(&tree, 2, 0.1), vec![SearchTree::ROOT, ids[0]]);
}
