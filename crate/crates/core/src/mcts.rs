//! Customized Monte Carlo tree search.
//!
//! Each phase of [`run`] starts from an empty tree and:
//!
//! 1. performs `n_walks` random walks of uniformly random depth in
//!    `1..=d_max`, evaluating the configurations they reach, and takes the
//!    depth of the best one as the phase's terminal depth `d_star`;
//! 2. on restarts, reinforces the paths of the best and worst configurations
//!    seen so far (quantile transfer);
//! 3. iterates select, expand, random completion to `d_star`, evaluate and
//!    backpropagate until the phase converges or its evaluation budget runs out.
//!
//! Rewards come from [`crate::reward`]: a configuration wins when its speedup
//! beats a moving-average target and failures are penalized.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CachedEvaluator, Evaluator};
use crate::history::{Observer, Recorder};
use crate::loop_model::LoopNest;
use crate::reward::{penalty_filter, quantile_split, reward, EvalRecord, RewardParams, SampleKind, TargetState};
use crate::space::{child, child_count, index_path, SpaceNode, SpaceParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsParams {
    /// Exploration weight `C`.
    pub c: f64,
    /// Unique evaluations allowed per phase, random walks included.
    pub per_run_budget: usize,
    pub n_walks: usize,
    pub no_improve_limit: usize,
    pub same_config_limit: usize,
    /// End the phase after this many consecutive iterations that only hit
    /// the cache, so a phase cannot spin on known configurations.
    pub max_stale_iterations: usize,
    /// Stop after this many consecutive phases without a new evaluation.
    pub max_idle_phases: usize,
    /// Configured in its own table, shared with the baselines.
    #[serde(skip)]
    pub reward: RewardParams,
    #[serde(skip)]
    pub space: SpaceParams,
}

impl Default for MctsParams {
    fn default() -> Self {
        MctsParams {
            c: 0.1,
            per_run_budget: 300,
            n_walks: 10,
            no_improve_limit: 50,
            same_config_limit: 10,
            max_stale_iterations: 200,
            max_idle_phases: 20,
            reward: RewardParams::default(),
            space: SpaceParams::default(),
        }
    }
}

impl MctsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) {
            return Err(Error::Config("exploration weight must be non-negative".into()));
        }
        if self.per_run_budget == 0 || self.no_improve_limit == 0 || self.same_config_limit == 0 {
            return Err(Error::Config("MCTS limits must be positive".into()));
        }
        if self.max_stale_iterations == 0 || self.max_idle_phases == 0 {
            return Err(Error::Config("max_stale_iterations and max_idle_phases must be positive".into()));
        }
        self.reward.validate()?;
        self.space.validate()
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub space: SpaceNode,
    pub child_count: usize,
    pub visits: u64,
    pub total_reward: f64,
    /// Backpropagations that ended at this node.
    pub terminal_visits: u64,
    /// Expanded children by child index.
    pub children: BTreeMap<usize, NodeId>,
}

impl TreeNode {
    pub fn mean_reward(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.total_reward / self.visits as f64)
    }

    pub fn depth(&self) -> usize {
        self.space.depth()
    }

    pub fn has_unexpanded(&self) -> bool {
        self.children.len() < self.child_count
    }
}

/// Sparse MCTS tree over the search space. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    nodes: Vec<TreeNode>,
    params: SpaceParams,
}

impl SearchTree {
    pub fn new(root: SpaceNode, params: SpaceParams) -> Self {
        let mut tree = SearchTree {
            nodes: Vec::new(),
            params,
        };
        tree.insert(root);
        tree
    }

    fn insert(&mut self, space: SpaceNode) -> NodeId {
        let child_count = child_count(&space, &self.params);
        self.nodes.push(TreeNode {
            space,
            child_count,
            visits: 0,
            total_reward: 0.0,
            terminal_visits: 0,
            children: BTreeMap::new(),
        });
        self.nodes.len() - 1
    }

    pub const ROOT: NodeId = 0;

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &SpaceParams {
        &self.params
    }

    /// Returns child `index` of `parent`, instantiating it if needed.
    pub fn child(&mut self, parent: NodeId, index: usize) -> Result<NodeId> {
        if let Some(&id) = self.nodes[parent].children.get(&index) {
            return Ok(id);
        }
        let space = child(&self.nodes[parent].space, index, &self.params)?;
        let id = self.insert(space);
        self.nodes[parent].children.insert(index, id);
        Ok(id)
    }

    /// Every node's visits equal its children's visits plus the
    /// backpropagations that ended at it.
    pub fn statistics_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            let below: u64 = n.children.values().map(|&c| self.nodes[c].visits).sum();
            n.visits == below + n.terminal_visits
        })
    }
}

/// UCT score; unvisited children score `+inf`.
pub fn uct_score(child: &TreeNode, parent_visits: u64, c: f64) -> f64 {
    uct(child.total_reward, child.visits, parent_visits, c)
}

pub fn uct(total_reward: f64, visits: u64, parent_visits: u64, c: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    let n = visits as f64;
    let mean = total_reward / n;
    if c == 0.0 {
        return mean;
    }
    mean + 2.0 * c * (2.0 * (parent_visits.max(1) as f64).ln() / n).sqrt()
}

/// Tree policy: descends by maximal UCT score (lowest index on ties) until
/// `target_depth`, a node with an unexpanded child, or a node without
/// children.
pub fn select(tree: &SearchTree, target_depth: usize, c: f64) -> Vec<NodeId> {
    let mut path = vec![SearchTree::ROOT];
    loop {
        let node = tree.node(*path.last().unwrap());
        if node.depth() >= target_depth || node.child_count == 0 || node.has_unexpanded() {
            return path;
        }
        let mut best: Option<(f64, NodeId)> = None;
        for &id in node.children.values() {
            let score = uct_score(tree.node(id), node.visits, c);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, id));
            }
        }
        path.push(best.expect("fully expanded node has children").1);
    }
}

/// Instantiates a uniformly random unexpanded child of `leaf`.
pub fn expand<R: Rng + ?Sized>(tree: &mut SearchTree, leaf: NodeId, rng: &mut R) -> Result<NodeId> {
    let node = tree.node(leaf);
    let free = node.child_count - node.children.len();
    if free == 0 {
        return Err(Error::FullyExpanded);
    }
    let k = rng.gen_range(0..free);
    let index = (0..node.child_count)
        .filter(|i| !node.children.contains_key(i))
        .nth(k)
        .expect("k below the number of unexpanded children");
    tree.child(leaf, index)
}

pub fn backpropagate(tree: &mut SearchTree, path: &[NodeId], r: f64) {
    for &id in path {
        let n = &mut tree.nodes[id];
        n.visits += 1;
        n.total_reward += r;
    }
    if let Some(&last) = path.last() {
        tree.nodes[last].terminal_visits += 1;
    }
}

/// One MCTS iteration as seen by the convergence test.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationObs {
    pub key: String,
    pub h: Option<f64>,
    /// False for cache hits.
    pub fresh: bool,
}

/// Incremental form of [`detect_convergence`].
#[derive(Clone, Debug)]
pub struct ConvergenceDetector {
    no_improve_limit: usize,
    same_config_limit: usize,
    best: f64,
    since_improvement: usize,
    last_key: Option<String>,
    same_run: usize,
}

impl ConvergenceDetector {
    pub fn new(params: &MctsParams, initial_best: f64) -> Self {
        ConvergenceDetector {
            no_improve_limit: params.no_improve_limit,
            same_config_limit: params.same_config_limit,
            best: initial_best,
            since_improvement: 0,
            last_key: None,
            same_run: 0,
        }
    }

    /// Records one iteration and reports whether the phase has converged.
    /// Only fresh evaluations count toward the improvement limit; every
    /// iteration counts toward the same-configuration limit.
    pub fn observe(&mut self, obs: &IterationObs) -> bool {
        if obs.fresh {
            match obs.h {
                Some(h) if h > self.best => {
                    self.best = h;
                    self.since_improvement = 0;
                }
                _ => self.since_improvement += 1,
            }
        }
        if self.last_key.as_deref() == Some(obs.key.as_str()) {
            self.same_run += 1;
        } else {
            self.last_key = Some(obs.key.clone());
            self.same_run = 1;
        }
        self.converged()
    }

    pub fn converged(&self) -> bool {
        self.since_improvement >= self.no_improve_limit || self.same_run >= self.same_config_limit
    }
}

/// True when the best speedup has not improved for `no_improve_limit`
/// evaluations or the last `same_config_limit` iterations ended at the same
/// configuration.
pub fn detect_convergence(recent: &[IterationObs], params: &MctsParams) -> bool {
    let mut d = ConvergenceDetector::new(params, f64::NEG_INFINITY);
    let mut converged = false;
    for obs in recent {
        converged = d.observe(obs);
    }
    converged
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub reinforced: usize,
    pub penalized: usize,
}

/// Re-creates the paths of the history's upper-tail configurations with
/// reward 1 and of the penalized lower-tail configurations with the failure
/// penalty. Never evaluates anything.
pub fn apply_transfer(tree: &mut SearchTree, history: &[EvalRecord], params: &MctsParams) -> TransferStats {
    let Ok((lower, upper)) = quantile_split(history, params.reward.alpha) else {
        return TransferStats::default();
    };
    let penalized = penalty_filter(&lower, &upper);
    let root = tree.node(SearchTree::ROOT).space.clone();
    let mut stats = TransferStats::default();
    let reinforce = |tree: &mut SearchTree, rec: &EvalRecord, r: f64| -> bool {
        let Some(indices) = index_path(&root, &rec.config, tree.params()) else {
            return false;
        };
        let mut path = vec![SearchTree::ROOT];
        for i in indices {
            let next = tree.child(*path.last().unwrap(), i).expect("index from the same space");
            path.push(next);
        }
        backpropagate(tree, &path, r);
        true
    };
    for rec in &upper {
        stats.reinforced += usize::from(reinforce(tree, rec, 1.0));
    }
    for rec in &penalized {
        stats.penalized += usize::from(reinforce(tree, rec, params.reward.penalty));
    }
    stats
}

/// Per-phase summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub d_star: usize,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
    pub best_h: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub best: EvalRecord,
    pub history: Vec<EvalRecord>,
    pub phases: Vec<PhaseSummary>,
}

struct Phase<'r, 'o, E> {
    params: &'r MctsParams,
    cache: &'r mut CachedEvaluator<E>,
    recorder: &'r mut Recorder<'o>,
    target: &'r mut TargetState,
    index: usize,
    evaluations: usize,
}

impl<E: Evaluator> Phase<'_, '_, E> {
    fn out_of_budget(&self) -> bool {
        self.cache.exhausted() || self.evaluations >= self.params.per_run_budget
    }

    /// Evaluates the last node of `path`, updates the target and
    /// backpropagates the reward along the path.
    fn evaluate_path(&mut self, tree: &mut SearchTree, path: &[NodeId], kind: SampleKind, d_star: Option<usize>) -> IterationObs {
        let config = tree.node(*path.last().unwrap()).space.config.clone();
        let reward_params = self.params.reward;
        let target = &mut *self.target;
        let ev = self.recorder.evaluate(
            self.cache,
            &config,
            kind,
            self.index,
            |h| {
                if let Some(h) = h {
                    target.update(h, &reward_params);
                }
                Some(target.f)
            },
            d_star,
        );
        let r = reward(&ev.outcome, ev.h, self.target.f, &reward_params);
        backpropagate(tree, path, r);
        if ev.fresh {
            self.evaluations += 1;
        }
        IterationObs {
            key: config.key(),
            h: ev.h,
            fresh: ev.fresh,
        }
    }

    fn random_descent<R: Rng + ?Sized>(&self, tree: &mut SearchTree, path: &mut Vec<NodeId>, depth: usize, rng: &mut R) {
        loop {
            let last = *path.last().unwrap();
            let node = tree.node(last);
            if node.depth() >= depth || node.child_count == 0 {
                return;
            }
            let i = rng.gen_range(0..node.child_count);
            path.push(tree.child(last, i).expect("index below child count"));
        }
    }

    /// Random walks that pick the phase's terminal depth.
    fn learn_depth<R: Rng + ?Sized>(&mut self, tree: &mut SearchTree, rng: &mut R) -> (usize, Option<f64>) {
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..self.params.n_walks {
            if self.out_of_budget() {
                break;
            }
            let depth = rng.gen_range(1..=self.params.space.d_max);
            let mut path = vec![SearchTree::ROOT];
            self.random_descent(tree, &mut path, depth, rng);
            let obs = self.evaluate_path(tree, &path, SampleKind::Walk, None);
            let reached = tree.node(*path.last().unwrap()).depth();
            if let Some(h) = obs.h {
                if best.is_none_or(|(b, _)| h > b) {
                    best = Some((h, reached));
                }
            }
        }
        match best {
            Some((h, d)) => (d.max(1), Some(h)),
            None => (1, None),
        }
    }
}

/// Runs the customized MCTS until the cache's global budget is exhausted.
pub fn run<E: Evaluator>(
    root: &LoopNest,
    params: &MctsParams,
    cache: &mut CachedEvaluator<E>,
    seed: u64,
) -> Result<RunOutput> {
    run_observed(root, params, cache, seed, None)
}

/// [`run`] with a callback for each unique evaluation.
pub fn run_observed<E: Evaluator>(
    root: &LoopNest,
    params: &MctsParams,
    cache: &mut CachedEvaluator<E>,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recorder = Recorder::start(cache, observer)?;
    let mut target = TargetState::default();
    let root_node = SpaceNode::root(root.clone());
    let mut phases = Vec::new();
    let mut idle = 0;

    while !cache.exhausted() && idle < params.max_idle_phases {
        let index = phases.len();
        let mut tree = SearchTree::new(root_node.clone(), params.space.clone());
        let mut phase = Phase {
            params,
            cache: &mut *cache,
            recorder: &mut recorder,
            target: &mut target,
            index,
            evaluations: 0,
        };
        let (d_star, walk_best) = phase.learn_depth(&mut tree, &mut rng);
        if index > 0 {
            let stats = apply_transfer(&mut tree, phase.recorder.records(), params);
            debug!("phase {index}: transferred {stats:?}");
        }
        let mut detector = ConvergenceDetector::new(params, walk_best.unwrap_or(f64::NEG_INFINITY));
        let mut iterations = 0;
        let mut stale = 0;
        let mut converged = false;
        while !phase.out_of_budget() && stale < params.max_stale_iterations {
            let mut path = select(&tree, d_star, params.c);
            let leaf = *path.last().unwrap();
            if tree.node(leaf).depth() < d_star && tree.node(leaf).has_unexpanded() {
                path.push(expand(&mut tree, leaf, &mut rng)?);
            }
            phase.random_descent(&mut tree, &mut path, d_star, &mut rng);
            let obs = phase.evaluate_path(&mut tree, &path, SampleKind::Tree, Some(d_star));
            iterations += 1;
            stale = if obs.fresh { 0 } else { stale + 1 };
            debug_assert!(tree.statistics_consistent());
            if detector.observe(&obs) {
                converged = true;
                break;
            }
        }
        let evaluations = phase.evaluations;
        let best_h = recorder
            .records()
            .iter()
            .filter(|r| r.phase == index && r.kind != SampleKind::Root)
            .filter_map(|r| r.h)
            .max_by(f64::total_cmp);
        info!(
            "phase {index}: d*={d_star} evaluations={evaluations} iterations={iterations} converged={converged} best={best_h:?}"
        );
        phases.push(PhaseSummary {
            phase: index,
            d_star,
            evaluations,
            iterations,
            converged,
            best_h,
        });
        idle = if evaluations == 0 { idle + 1 } else { 0 };
    }
    let best = recorder.best().clone();
    Ok(RunOutput {
        best,
        history: recorder.into_records(),
        phases,
    })
}
