//! Speedup, the moving-average target, the win/loss reward, and the quantile
//! tails used to transfer history across restarts.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Outcome;
use crate::loop_model::{Configuration, Pragma};

/// How the previous target enters the new one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `f_t = max(f_{t-1}, mean of the last m speedups)`; never decreases.
    #[default]
    Monotone,
    /// `f_t = mean of the last m speedups`.
    MovingAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Moving-average window length.
    pub window: usize,
    /// Reward for a configuration that fails to compile or run. Negative.
    pub penalty: f64,
    /// Tail mass for the transfer quantiles, in (0, 0.5).
    pub alpha: f64,
    pub target_rule: TargetRule,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            window: 10,
            penalty: -1.0,
            alpha: 0.05,
            target_rule: TargetRule::Monotone,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("reward window must be positive".into()));
        }
        if !(self.penalty < 0.0) {
            return Err(Error::Config("penalty must be negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Config("alpha must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

pub fn speedup(root_time: f64, config_time: f64) -> Result<f64> {
    if !(root_time > 0.0) || !(config_time > 0.0) {
        return Err(Error::Domain(format!(
            "times must be positive (root {root_time}, config {config_time})"
        )));
    }
    Ok(root_time / config_time)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetState {
    pub f: f64,
    recent: VecDeque<f64>,
}

impl Default for TargetState {
    /// Starts at 1.0, the speedup of the untransformed program.
    fn default() -> Self {
        TargetState {
            f: 1.0,
            recent: VecDeque::new(),
        }
    }
}

impl TargetState {
    pub fn new(f: f64) -> Self {
        TargetState {
            f,
            recent: VecDeque::new(),
        }
    }

    pub fn recent(&self) -> impl Iterator<Item = f64> + '_ {
        self.recent.iter().copied()
    }

    /// Pushes a successful speedup into the window and recomputes the target.
    pub fn update(&mut self, h: f64, params: &RewardParams) -> f64 {
        self.recent.push_back(h);
        while self.recent.len() > params.window {
            self.recent.pop_front();
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.f = match params.target_rule {
            TargetRule::Monotone => self.f.max(mean),
            TargetRule::MovingAverage => mean,
        };
        self.f
    }
}

pub fn update_target(state: &TargetState, h: f64, params: &RewardParams) -> TargetState {
    let mut next = state.clone();
    next.update(h, params);
    next
}

/// `penalty` on failure, 1 when `h` beats the target strictly, 0 otherwise.
pub fn reward(outcome: &Outcome, h: Option<f64>, f: f64, params: &RewardParams) -> f64 {
    match (outcome.is_success(), h) {
        (true, Some(h)) if h > f => 1.0,
        (true, Some(_)) => 0.0,
        _ => params.penalty,
    }
}

/// How a configuration came to be evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Root,
    /// Depth-learning random walk at the start of an MCTS phase.
    Walk,
    /// MCTS tree iteration.
    Tree,
    /// Baseline searcher sample.
    Sample,
}

/// One unique evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub phase: usize,
    pub kind: SampleKind,
    pub key: String,
    pub config: Configuration,
    pub outcome: Outcome,
    pub h: Option<f64>,
    pub best_so_far_h: f64,
    /// MCTS target after this evaluation.
    #[serde(default)]
    pub target_f: Option<f64>,
    /// Terminal depth of the MCTS phase.
    #[serde(default)]
    pub d_star: Option<usize>,
    /// Budget clock reading when the evaluation finished.
    #[serde(default)]
    pub elapsed_s: f64,
}

impl EvalRecord {
    pub fn depth(&self) -> usize {
        self.config.depth()
    }
}

/// Nearest-rank count of a tail of mass `alpha` over `n` values.
fn tail_rank(alpha: f64, n: usize) -> usize {
    // Guard against 0.05 * 20 evaluating to 1.0000000000000002.
    ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Splits the history into its low and high speedup tails.
///
/// Thresholds are nearest-rank order statistics counted from each end: the
/// lower threshold is the `ceil(alpha n)`-th smallest speedup and the upper
/// threshold is the `ceil(alpha n)`-th largest. Failures always join the
/// lower tail.
pub fn quantile_split(history: &[EvalRecord], alpha: f64) -> Result<(Vec<&EvalRecord>, Vec<&EvalRecord>)> {
    let mut hs: Vec<f64> = history.iter().filter_map(|r| r.h).collect();
    if hs.is_empty() {
        return Err(Error::EmptyHistory);
    }
    hs.sort_by(f64::total_cmp);
    let rank = tail_rank(alpha, hs.len());
    let low = hs[rank - 1];
    let high = hs[hs.len() - rank];
    let lower = history
        .iter()
        .filter(|r| r.h.is_none_or(|h| h <= low))
        .collect();
    let upper = history
        .iter()
        .filter(|r| r.h.is_some_and(|h| h >= high))
        .collect();
    Ok((lower, upper))
}

fn pragmas(config: &Configuration) -> HashSet<Pragma> {
    config.steps.iter().map(|t| t.pragma()).collect()
}

/// Lower-tail records sharing no pragma with any upper-tail record.
pub fn penalty_filter<'a>(lower: &[&'a EvalRecord], upper: &[&EvalRecord]) -> Vec<&'a EvalRecord> {
    let good: HashSet<Pragma> = upper.iter().flat_map(|r| pragmas(&r.config)).collect();
    lower
        .iter()
        .filter(|r| r.config.steps.iter().all(|t| !good.contains(&t.pragma())))
        .copied()
        .collect()
}
