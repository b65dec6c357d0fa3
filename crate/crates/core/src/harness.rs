//! Experiment configuration, result logs and reports.
//!
//! An experiment file is TOML:
//!
//! ```toml
//! version = 1
//! nest = "gemm.nest.toml"     # relative to the experiment file
//! method = "mcts"             # mcts | rs | bf | gg
//! seed = 1
//! out_dir = "results"
//!
//! [budget]
//! max_unique = 1000
//! max_wall_clock_s = 21600.0
//!
//! [evaluator]
//! kind = "synthetic"          # or "external", see below
//!
//! [mcts]                      # c, per_run_budget, n_walks, ...
//! [space]                     # tile_sizes, unroll_factors, peel_variants, d_max
//! [reward]                    # window, penalty, alpha, target_rule
//! ```
//!
//! An external evaluator takes `source_template`, `compile_cmd` (with `{src}`
//! and `{out}`), `run_cmd` (with `{out}`), `repetitions`, `timeout_s` and
//! `reject_pattern`.

use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{breadth_first, global_greedy, random_search};
use crate::error::{Error, Result};
use crate::eval::{seeded_hash, Budget, CachedEvaluator, Clock, Evaluator, ExternalEvaluator, ExternalJobSpec, Outcome, SyntheticLandscape};
use crate::history::Observer;
use crate::loop_model::{load_loop_nest, placed_pragmas, LoopNest};
use crate::mcts::{run_observed, MctsParams, PhaseSummary, RunOutput};
use crate::reward::{EvalRecord, RewardParams, SampleKind};
use crate::space::{child_count, child_transformation, depth_profile, SpaceNode, SpaceParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[cfg_attr(feature = "cli", derive(clap::ValueEnum))]
pub enum Method {
    Mcts,
    Rs,
    Bf,
    Gg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mcts => "mcts",
            Method::Rs => "rs",
            Method::Bf => "bf",
            Method::Gg => "gg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcts" => Ok(Method::Mcts),
            "rs" => Ok(Method::Rs),
            "bf" => Ok(Method::Bf),
            "gg" => Ok(Method::Gg),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Landscape seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub base_time: f64,
    #[serde(default = "default_failure_rate")]
    pub failure_rate: f64,
    #[serde(default = "default_spread")]
    pub interaction_spread: f64,
}

fn one() -> f64 {
    1.0
}

fn default_failure_rate() -> f64 {
    0.10
}

fn default_spread() -> f64 {
    0.15
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: None,
            base_time: one(),
            failure_rate: default_failure_rate(),
            interaction_spread: default_spread(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Synthetic(SyntheticSpec),
    External(ExternalJobSpec),
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        EvaluatorSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    pub nest: PathBuf,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub mcts: MctsParams,
    #[serde(default)]
    pub space: SpaceParams,
    #[serde(default)]
    pub reward: RewardParams,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_version() -> u32 {
    CONFIG_VERSION
}

fn default_method() -> Method {
    Method::Mcts
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.budget.max_wall_clock_s > 0.0) {
            return Err(Error::Config("max_wall_clock_s must be positive".into()));
        }
        if let EvaluatorSpec::Synthetic(s) = &self.evaluator {
            if !(s.base_time > 0.0) || !(0.0..=1.0).contains(&s.failure_rate) || !(s.interaction_spread >= 0.0) {
                return Err(Error::Config("invalid synthetic evaluator parameters".into()));
            }
        }
        self.space.validate()?;
        self.reward.validate()?;
        self.mcts_params().validate()
    }

    pub fn mcts_params(&self) -> MctsParams {
        MctsParams {
            space: self.space.clone(),
            reward: self.reward,
            ..self.mcts.clone()
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn load_nest(&self) -> Result<LoopNest> {
        let path = self.resolve(&self.nest);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read nest {}: {e}", path.display())))?;
        load_loop_nest(&text)
    }

    /// Stream seed for one labeled component.
    pub fn component_seed(&self, label: &str) -> u64 {
        seeded_hash(self.seed, label)
    }

    pub fn log_path(&self) -> PathBuf {
        self.resolve(&self.out_dir)
            .join(format!("{}-seed{}.jsonl", self.method, self.seed))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.log_path().with_extension("summary.json")
    }
}

/// One line of the result log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub iteration: usize,
    pub phase: usize,
    pub method: Method,
    pub kind: SampleKind,
    pub key: String,
    /// `anchor: directive` per step, in application order.
    pub pragmas: Vec<String>,
    pub outcome: Outcome,
    pub h: Option<f64>,
    pub best_so_far_h: f64,
    pub depth: usize,
    #[serde(default)]
    pub target_f: Option<f64>,
    #[serde(default)]
    pub d_star: Option<usize>,
    /// Budget clock; virtual (summed program time) for synthetic runs.
    pub wall_clock_s: f64,
}

impl ResultRecord {
    pub fn new(rec: &EvalRecord, method: Method, root: &LoopNest) -> Self {
        let pragmas = placed_pragmas(root, &rec.config)
            .map(|ps| ps.into_iter().map(|p| format!("{}: {}", p.anchor, p.text)).collect())
            .unwrap_or_default();
        ResultRecord {
            iteration: rec.iteration,
            phase: rec.phase,
            method,
            kind: rec.kind,
            key: rec.key.clone(),
            pragmas,
            outcome: rec.outcome.clone(),
            h: rec.h,
            best_so_far_h: rec.best_so_far_h,
            depth: rec.depth(),
            target_f: rec.target_f,
            d_star: rec.d_star,
            wall_clock_s: rec.elapsed_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub unique: usize,
    pub best_key: String,
    pub best_h: f64,
    pub best_depth: usize,
    pub best_pragmas: Vec<String>,
    pub phases: Vec<PhaseSummary>,
    /// Budget clock at the end of the run.
    pub clock_s: f64,
    pub wall_time_s: f64,
    pub log: PathBuf,
}

/// Runs `method` against an already wrapped evaluator.
pub fn search<E: Evaluator>(
    method: Method,
    root: &LoopNest,
    cfg: &ExperimentConfig,
    cache: &mut CachedEvaluator<E>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    match method {
        Method::Mcts => run_observed(root, &cfg.mcts_params(), cache, cfg.component_seed("mcts"), observer),
        Method::Rs => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.component_seed("random_search"));
            random_search(root, &cfg.space, cache, &mut rng, observer)
        }
        Method::Bf => breadth_first(root, &cfg.space, cache, observer),
        Method::Gg => global_greedy(root, &cfg.space, cache, observer),
    }
}

pub fn synthetic_landscape(cfg: &ExperimentConfig, spec: &SyntheticSpec, root: &LoopNest) -> SyntheticLandscape {
    let seed = spec.seed.unwrap_or_else(|| cfg.component_seed("landscape"));
    SyntheticLandscape::new(seed, root.clone())
        .with_base_time(spec.base_time)
        .with_failure_rate(spec.failure_rate)
        .with_interaction_spread(spec.interaction_spread)
}

fn run_with_log<E: Evaluator>(
    cfg: &ExperimentConfig,
    root: &LoopNest,
    mut cache: CachedEvaluator<E>,
) -> Result<(RunOutput, usize, f64)> {
    let path = cfg.log_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = BufWriter::new(File::create(&path)?);
    let mut failure: Option<std::io::Error> = None;
    let method = cfg.method;
    let out = {
        let observer: Observer<'_> = Box::new(|rec: &EvalRecord| {
            if failure.is_some() {
                return;
            }
            let line = serde_json::to_string(&ResultRecord::new(rec, method, root)).expect("serializable record");
            if let Err(e) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
                failure = Some(e);
            }
        });
        search(method, root, cfg, &mut cache, Some(observer))?
    };
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok((out, cache.unique_count(), cache.elapsed_s()))
}

/// Runs the configured experiment, writing the result log and summary under
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let root = cfg.load_nest()?;
    let (out, unique, clock_s) = match &cfg.evaluator {
        EvaluatorSpec::Synthetic(spec) => {
            let landscape = synthetic_landscape(cfg, spec, &root);
            run_with_log(cfg, &root, CachedEvaluator::new(landscape, cfg.budget, Clock::Virtual(0.0)))?
        }
        EvaluatorSpec::External(job) => {
            let ev = ExternalEvaluator::new(job.clone(), root.clone(), &cfg.base_dir)?;
            run_with_log(cfg, &root, CachedEvaluator::new(ev, cfg.budget, Clock::wall()))?
        }
    };
    let best = ResultRecord::new(&out.best, cfg.method, &root);
    let summary = Summary {
        method: cfg.method,
        seed: cfg.seed,
        unique,
        best_key: best.key,
        best_h: best.h.unwrap_or(1.0),
        best_depth: best.depth,
        best_pragmas: best.pragmas,
        phases: out.phases,
        clock_s,
        wall_time_s: started.elapsed().as_secs_f64(),
        log: cfg.log_path(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("serializable summary");
    std::fs::write(cfg.summary_path(), json + "\n")?;
    Ok(summary)
}

pub fn parse_log(text: &str) -> Result<Vec<ResultRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("log line {}: {e}", n + 1))))
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_log(&text)
}

/// A result log with a display label.
#[derive(Clone, Debug)]
pub struct LabeledLog {
    pub label: String,
    pub records: Vec<ResultRecord>,
}

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

/// Per-evaluation rows of depth, speedup, best speedup and target.
/// `phase_start` is 1 on the first row of each phase.
pub fn emit_trajectory(records: &[ResultRecord]) -> String {
    let mut out = String::from("eval\tphase\tdepth\th\tbest_h\ttarget_f\tkind\tphase_start\n");
    let mut prev = None;
    for r in records {
        let start = u8::from(prev != Some(r.phase));
        prev = Some(r.phase);
        let kind = serde_json::to_value(r.kind).expect("serializable kind");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{start}",
            r.iteration,
            r.phase,
            r.depth,
            num(r.h),
            r.best_so_far_h,
            num(r.target_f),
            kind.as_str().unwrap_or_default(),
        );
    }
    out
}

/// Cutoff at the top `top` fraction of all non-root speedups pooled across
/// logs: the `ceil(top n)`-th largest value.
pub fn cutoff_value(logs: &[LabeledLog], top: f64) -> Option<f64> {
    let mut pool: Vec<f64> = logs
        .iter()
        .flat_map(|l| &l.records)
        .filter(|r| r.kind != SampleKind::Root)
        .filter_map(|r| r.h)
        .collect();
    if pool.is_empty() {
        return None;
    }
    pool.sort_by(|a, b| b.total_cmp(a));
    let rank = ((top * pool.len() as f64 - 1e-9).ceil() as usize).clamp(1, pool.len());
    Some(pool[rank - 1])
}

/// Cumulative count of configurations at or above the cutoff, per log, at
/// every evaluation.
pub fn cutoff_counts(log: &LabeledLog, cutoff: f64) -> Vec<(usize, usize)> {
    let mut count = 0;
    log.records
        .iter()
        .filter(|r| r.kind != SampleKind::Root)
        .map(|r| {
            count += usize::from(r.h.is_some_and(|h| h >= cutoff));
            (r.iteration, count)
        })
        .collect()
}

pub fn emit_cutoff_counts(logs: &[LabeledLog], top: f64) -> String {
    let mut out = String::new();
    let Some(cutoff) = cutoff_value(logs, top) else {
        out.push_str("# cutoff\tnone\nlog\teval\tcount\n");
        return out;
    };
    let _ = writeln!(out, "# cutoff\t{cutoff:.6}\ttop\t{top}");
    out.push_str("log\teval\tcount\n");
    for log in logs {
        for (eval, count) in cutoff_counts(log, cutoff) {
            let _ = writeln!(out, "{}\t{eval}\t{count}", log.label);
        }
    }
    out
}

/// The highest-speedup record of a log, earliest on ties.
pub fn best_record(records: &[ResultRecord]) -> Option<&ResultRecord> {
    records
        .iter()
        .filter(|r| r.h.is_some())
        .fold(None, |best: Option<&ResultRecord>, r| match best {
            Some(b) if b.h >= r.h => Some(b),
            _ => Some(r),
        })
}

pub fn emit_best_depth(logs: &[LabeledLog]) -> String {
    let mut out = String::from("log\tmethod\tbest_h\tdepth\tkey\n");
    for log in logs {
        if let Some(b) = best_record(&log.records) {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", log.label, b.method, num(b.h), b.depth, b.key);
        }
    }
    out
}

/// Node counts per depth, followed by the root's children.
pub fn dump_space(root: &LoopNest, params: &SpaceParams, max_depth: usize) -> Result<String> {
    let node = SpaceNode::root(root.clone());
    let mut out = String::from("depth\tnodes\tmin_children\tmax_children\n");
    for s in depth_profile(&node, params, max_depth) {
        if s.depth == max_depth {
            // The deepest level is counted but not expanded.
            let _ = writeln!(out, "{}\t{}\t-\t-", s.depth, s.nodes);
        } else {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.depth, s.nodes, s.min_children, s.max_children);
        }
    }
    out.push_str("\nindex\ttransformation\n");
    for i in 0..child_count(&node, params) {
        let _ = writeln!(out, "{i}\t{}", child_transformation(&node, i, params)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iteration: usize, phase: usize, h: Option<f64>) -> ResultRecord {
        ResultRecord {
            iteration,
            phase,
            method: Method::Rs,
            kind: if iteration == 0 { SampleKind::Root } else { SampleKind::Sample },
            key: format!("k{iteration}"),
            pragmas: vec![],
            outcome: Outcome::Time { seconds: 1.0 },
            h,
            best_so_far_h: 1.0,
            depth: iteration % 4,
            target_f: None,
            d_star: None,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn config_defaults_and_tagging() {
        let cfg = ExperimentConfig::parse("nest = \"n.toml\"\n", Path::new("/x")).unwrap();
        assert_eq!(cfg.budget, Budget::default());
        assert_eq!(cfg.budget.max_unique, 1000);
        assert_eq!(cfg.budget.max_wall_clock_s, 21600.0);
        assert_eq!(cfg.method, Method::Mcts);
        assert_eq!(cfg.mcts_params(), MctsParams::default());

        let text = "nest = \"n.toml\"\n[evaluator]\nkind = \"external\"\nsource_template = \"a.c\"\ncompile_cmd = \"cc {src} -o {out}\"\nrun_cmd = \"{out}\"\n";
        let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
        let EvaluatorSpec::External(job) = cfg.evaluator else { panic!() };
        assert_eq!(job.repetitions, 5);

        assert!(ExperimentConfig::parse("nest = \"n\"\nbogus = 1\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("nest = \"n\"\nversion = 2\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("nest = \"n\"\n[mcts]\nc = -1.0\n", Path::new(".")).is_err());
    }

    #[test]
    fn methods_round_trip() {
        for m in [Method::Mcts, Method::Rs, Method::Bf, Method::Gg] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("dfs".parse::<Method>().is_err());
    }

    #[test]
    fn trajectory_marks_phases() {
        assert_eq!(emit_trajectory(&[]).lines().count(), 1);
        let recs = vec![record(0, 0, Some(1.0)), record(1, 0, Some(2.0)), record(2, 1, None)];
        let text = emit_trajectory(&recs);
        let starts: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap()).collect();
        assert_eq!(starts, ["1", "0", "1"]);
        assert!(text.contains("\tnan\t"));
    }

    #[test]
    fn cutoff_nearest_rank() {
        let mut recs = vec![record(0, 0, Some(1.0))];
        recs.extend((1..=100).map(|i| record(i, 0, Some(i as f64))));
        let logs = [LabeledLog { label: "a".into(), records: recs }];
        let cutoff = cutoff_value(&logs, 0.05).unwrap();
        assert_eq!(cutoff, 96.0);
        assert_eq!(cutoff_counts(&logs[0], cutoff).last().unwrap().1, 5);

        let flat = [LabeledLog {
            label: "b".into(),
            records: (1..=4).map(|i| record(i, 0, Some(2.0))).collect(),
        }];
        let c = cutoff_value(&flat, 0.05).unwrap();
        assert_eq!(c, 2.0);
        assert_eq!(cutoff_counts(&flat[0], c).last().unwrap().1, 4);
    }

    #[test]
    fn best_depth_of_root_only_log() {
        let logs = [LabeledLog { label: "a".into(), records: vec![record(0, 0, Some(1.0))] }];
        let text = emit_best_depth(&logs);
        assert_eq!(text.lines().nth(1).unwrap(), "a\trs\t1.000000\t0\tk0");
    }
}
