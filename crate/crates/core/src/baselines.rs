//! Comparison searchers: random search, breadth-first and global greedy.
//!
//! They share the cache, budget and history format of [`crate::mcts`], so
//! their logs are directly comparable. All records are phase 0.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;

use crate::eval::{CachedEvaluator, Evaluator};
use crate::history::{Observer, Recorder};
use crate::loop_model::LoopNest;
use crate::mcts::RunOutput;
use crate::reward::SampleKind;
use crate::space::{child, child_count, random_walk, SpaceNode, SpaceParams};
use crate::Result;

/// Random search gives up after this many consecutive draws that hit the
/// cache, which only happens once the space is (nearly) exhausted.
pub const MAX_STALE_DRAWS: usize = 10_000;

/// Which baseline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Random,
    BreadthFirst,
    GlobalGreedy,
}

fn finish(recorder: Recorder<'_>) -> RunOutput {
    RunOutput {
        best: recorder.best().clone(),
        history: recorder.into_records(),
        phases: Vec::new(),
    }
}

/// Children of `node` that lie within `d_max`.
fn bounded_children(node: &SpaceNode, params: &SpaceParams) -> usize {
    if node.depth() >= params.d_max {
        0
    } else {
        child_count(node, params)
    }
}

struct Driver<'r, 'o, E> {
    cache: &'r mut CachedEvaluator<E>,
    recorder: Recorder<'o>,
}

impl<'r, 'o, E: Evaluator> Driver<'r, 'o, E> {
    fn start(cache: &'r mut CachedEvaluator<E>, observer: Option<Observer<'o>>) -> Result<Self> {
        let recorder = Recorder::start(cache, observer)?;
        Ok(Driver { cache, recorder })
    }

    fn evaluate(&mut self, node: &SpaceNode) -> (Option<f64>, bool) {
        let ev = self
            .recorder
            .evaluate(self.cache, &node.config, SampleKind::Sample, 0, |_| None, None);
        (ev.h, ev.fresh)
    }
}

/// Samples a depth uniformly in `1..=d_max`, walks randomly to it and
/// evaluates the reached configuration, until the budget runs out.
pub fn random_search<E: Evaluator, R: Rng + ?Sized>(
    root: &LoopNest,
    params: &SpaceParams,
    cache: &mut CachedEvaluator<E>,
    rng: &mut R,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    params.validate()?;
    let mut d = Driver::start(cache, observer)?;
    let root = SpaceNode::root(root.clone());
    let mut stale = 0;
    while !d.cache.exhausted() && stale < MAX_STALE_DRAWS {
        let depth = rng.gen_range(1..=params.d_max);
        let node = random_walk(&root, depth, params, rng);
        if d.evaluate(&node).1 {
            stale = 0;
        } else {
            stale += 1;
        }
    }
    Ok(finish(d.recorder))
}

/// Evaluates the space level by level in child-index order. Children of
/// failed configurations are still visited.
pub fn breadth_first<E: Evaluator>(
    root: &LoopNest,
    params: &SpaceParams,
    cache: &mut CachedEvaluator<E>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    params.validate()?;
    let mut d = Driver::start(cache, observer)?;
    let mut queue = VecDeque::from([SpaceNode::root(root.clone())]);
    'outer: while let Some(node) = queue.pop_front() {
        for i in 0..bounded_children(&node, params) {
            if d.cache.exhausted() {
                break 'outer;
            }
            let c = child(&node, i, params)?;
            d.evaluate(&c);
            queue.push_back(c);
        }
    }
    Ok(finish(d.recorder))
}

struct Entry {
    h: f64,
    seq: u64,
    node: SpaceNode,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    /// Highest speedup first, earliest insertion on ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.h.total_cmp(&other.h).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Repeatedly pops the most promising evaluated configuration and evaluates
/// all its children. Failed configurations never enter the queue.
pub fn global_greedy<E: Evaluator>(
    root: &LoopNest,
    params: &SpaceParams,
    cache: &mut CachedEvaluator<E>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    params.validate()?;
    let mut d = Driver::start(cache, observer)?;
    let mut seq = 0;
    let mut queue = BinaryHeap::from([Entry {
        h: 1.0,
        seq,
        node: SpaceNode::root(root.clone()),
    }]);
    'outer: while let Some(Entry { node, .. }) = queue.pop() {
        for i in 0..bounded_children(&node, params) {
            if d.cache.exhausted() {
                break 'outer;
            }
            let c = child(&node, i, params)?;
            if let (Some(h), true) = d.evaluate(&c) {
                seq += 1;
                queue.push(Entry { h, seq, node: c });
            }
        }
    }
    Ok(finish(d.recorder))
}
