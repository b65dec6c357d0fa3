//! Browser bindings for exploring the transformation space, the UCT score
//! and a search on a synthetic landscape.
//!
//! Every operation has a plain Rust function returning JSON, tested natively,
//! and a thin `wasm_bindgen` wrapper.

use pragma_mcts::baselines::{breadth_first, global_greedy, random_search};
use pragma_mcts::eval::{Budget, CachedEvaluator, Clock, SyntheticLandscape};
use pragma_mcts::loop_model::{load_loop_nest, placed_pragmas, Configuration, Loop};
use pragma_mcts::mcts::{run, uct, MctsParams, RunOutput};
use pragma_mcts::space::{child, child_count, child_transformation, SpaceNode, SpaceParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Children listed per node; the count is always exact.
pub const MAX_LISTED_CHILDREN: usize = 400;

#[derive(Serialize)]
struct LoopView {
    id: String,
    level: usize,
    origin: Option<&'static str>,
    transformable: bool,
}

#[derive(Serialize)]
struct ChildView {
    index: usize,
    label: String,
}

#[derive(Serialize)]
struct NodeView {
    key: String,
    depth: usize,
    d_max: usize,
    loops: Vec<LoopView>,
    pragmas: Vec<String>,
    child_count: usize,
    children: Vec<ChildView>,
}

fn space_params(d_max: usize) -> SpaceParams {
    SpaceParams { d_max, ..SpaceParams::default() }
}

fn loops_view(loops: &[Loop], level: usize, out: &mut Vec<LoopView>) {
    for l in loops {
        out.push(LoopView { id: l.id.clone(), level, origin: l.origin.map(|o| o.as_str()), transformable: l.transformable });
        loops_view(&l.children, level + 1, out);
    }
}

/// Follows child indices `path` from the root of `nest_toml` and describes
/// the node reached.
pub fn explore_json(nest_toml: &str, path: &[u32], d_max: usize) -> Result<String, String> {
    let root = load_loop_nest(nest_toml).map_err(|e| e.to_string())?;
    let params = space_params(d_max);
    params.validate().map_err(|e| e.to_string())?;
    let mut node = SpaceNode::root(root.clone());
    for &i in path {
        node = child(&node, i as usize, &params).map_err(|e| e.to_string())?;
    }
    let mut loops = Vec::new();
    loops_view(&node.nest.roots, 0, &mut loops);
    let pragmas = pragma_lines(&root, &node.config)?;
    let n = child_count(&node, &params);
    let children = (0..n.min(MAX_LISTED_CHILDREN))
        .map(|index| {
            let t = child_transformation(&node, index, &params).map_err(|e| e.to_string())?;
            Ok(ChildView { index, label: t.to_string() })
        })
        .collect::<Result<_, String>>()?;
    let view = NodeView { key: node.key(), depth: node.depth(), d_max, loops, pragmas, child_count: n, children };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct UctCurve {
    parent_visits: Vec<u64>,
    exploit: f64,
    scores: Vec<f64>,
}

/// UCT score of a child with `visits` visits and mean reward `mean` as the
/// parent's visit count grows from `visits` to `max_parent`.
pub fn uct_curve_json(mean: f64, visits: u64, c: f64, max_parent: u64) -> Result<String, String> {
    if visits == 0 || max_parent < visits {
        return Err("need 0 < visits <= max_parent".into());
    }
    let parent_visits: Vec<u64> = (visits..=max_parent).collect();
    let scores = parent_visits.iter().map(|&n| uct(mean * visits as f64, visits, n, c)).collect();
    serde_json::to_string(&UctCurve { parent_visits, exploit: mean, scores }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point {
    eval: usize,
    phase: usize,
    kind: String,
    depth: usize,
    h: Option<f64>,
    best_h: f64,
    target_f: Option<f64>,
}

#[derive(Serialize)]
struct SearchView {
    method: String,
    points: Vec<Point>,
    best_key: String,
    best_h: Option<f64>,
    best_pragmas: Vec<String>,
    phases: usize,
}

/// Runs `method` (mcts, rs, bf or gg) for `budget` unique evaluations on a
/// synthetic landscape and returns the evaluation trajectory.
pub fn search_json(nest_toml: &str, method: &str, budget: usize, seed: u64, d_max: usize) -> Result<String, String> {
    let root = load_loop_nest(nest_toml).map_err(|e| e.to_string())?;
    let space = space_params(d_max);
    space.validate().map_err(|e| e.to_string())?;
    let land = SyntheticLandscape::new(seed, root.clone());
    let mut cache = CachedEvaluator::new(land, Budget::unique(budget), Clock::Virtual(0.0));
    let out: RunOutput = match method {
        "mcts" => run(&root, &MctsParams { space, ..MctsParams::default() }, &mut cache, seed),
        "rs" => random_search(&root, &space, &mut cache, &mut ChaCha8Rng::seed_from_u64(seed), None),
        "bf" => breadth_first(&root, &space, &mut cache, None),
        "gg" => global_greedy(&root, &space, &mut cache, None),
        other => return Err(format!("unknown method {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    let points = out
        .history
        .iter()
        .map(|r| Point {
            eval: r.iteration,
            phase: r.phase,
            kind: serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            depth: r.depth(),
            h: r.h,
            best_h: r.best_so_far_h,
            target_f: r.target_f,
        })
        .collect();
    let best_pragmas = pragma_lines(&root, &out.best.config)?;
    let view = SearchView {
        method: method.to_owned(),
        points,
        best_key: out.best.key.clone(),
        best_h: out.best.h,
        best_pragmas,
        phases: out.phases.len(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn pragma_lines(root: &pragma_mcts::loop_model::LoopNest, config: &Configuration) -> Result<Vec<String>, String> {
    Ok(placed_pragmas(root, config)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| format!("{}: {}", p.anchor, p.text))
        .collect())
}

#[wasm_bindgen]
pub fn explore(nest_toml: &str, path: &[u32], d_max: usize) -> Result<String, JsValue> {
    explore_json(nest_toml, path, d_max).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn uct_curve(mean: f64, visits: u32, c: f64, max_parent: u32) -> Result<String, JsValue> {
    uct_curve_json(mean, visits.into(), c, max_parent.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn search(nest_toml: &str, method: &str, budget: usize, seed: u32, d_max: usize) -> Result<String, JsValue> {
    search_json(nest_toml, method, budget, seed.into(), d_max).map_err(|e| JsValue::from_str(&e))
}
