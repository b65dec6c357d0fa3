//! Program evaluators: a deterministic synthetic landscape, an external
//! compile-and-run job, and the unique-configuration cache shared by all
//! searchers.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use log::{debug, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loop_model::{apply, render_pragmas, Configuration, LoopNest, Pragma, Transformation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Time { seconds: f64 },
    /// The compiler rejected the transformation sequence.
    CompileFailure { reason: String },
    /// The program crashed, timed out, or printed no time.
    RunFailure { reason: String },
}

impl Outcome {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            Outcome::Time { seconds } => Some(*seconds),
            _ => None,
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Time { .. })
    }
}

pub trait Evaluator {
    fn evaluate(&mut self, config: &Configuration) -> Outcome;
}

impl<F: FnMut(&Configuration) -> Outcome> Evaluator for F {
    fn evaluate(&mut self, config: &Configuration) -> Outcome {
        self(config)
    }
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of a label under a seed.
pub(crate) fn seeded_hash(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ fnv1a(label.as_bytes()))
}

fn unit(seed: u64, label: &str) -> f64 {
    (seeded_hash(seed, label) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic stand-in for compiler plus hardware.
///
/// The time of a configuration is `base_time` times one multiplier per step
/// and one interaction factor per ordered pair of steps. Both are drawn from
/// hashes of the seed and the step's pragma together with the source loop and
/// role (floor, tile, original) of its target, so equal configurations always
/// get equal times. Steps of the same kind on the same source loop have
/// diminishing effect (a second tiling of `i`, whatever its size, counts for
/// less than the first): the log-multiplier is halved for every earlier step
/// of that family. Packing after a tiling of size 128 or more fails to
/// compile, as does a seeded fraction of all other configurations.
#[derive(Clone, Debug)]
pub struct SyntheticLandscape {
    seed: u64,
    root: LoopNest,
    base_time: f64,
    failure_rate: f64,
    interaction_spread: f64,
    overrides: Vec<(Pragma, f64)>,
}

impl SyntheticLandscape {
    pub fn new(seed: u64, root: LoopNest) -> Self {
        SyntheticLandscape {
            seed,
            root,
            base_time: 1.0,
            failure_rate: 0.10,
            interaction_spread: 0.15,
            overrides: Vec::new(),
        }
    }

    pub fn with_base_time(mut self, seconds: f64) -> Self {
        assert!(seconds > 0.0, "base time must be positive");
        self.base_time = seconds;
        self
    }

    pub fn with_failure_rate(mut self, rate: f64) -> Self {
        self.failure_rate = rate.clamp(0.0, 1.0);
        self
    }

    /// Half-width of the log-uniform pairwise interaction factors.
    pub fn with_interaction_spread(mut self, spread: f64) -> Self {
        self.interaction_spread = spread.max(0.0);
        self
    }

    /// Fixes the multiplier of every step carrying `pragma`.
    pub fn with_multiplier(mut self, pragma: Pragma, multiplier: f64) -> Self {
        assert!(multiplier > 0.0, "multipliers must be positive");
        self.overrides.retain(|(p, _)| *p != pragma);
        self.overrides.push((pragma, multiplier));
        self
    }

    pub fn base_time(&self) -> f64 {
        self.base_time
    }

    fn step_label(nest: &LoopNest, t: &Transformation) -> (String, String) {
        let (anchor, role) = nest
            .find(t.target())
            .map(|l| (l.anchor.clone(), l.origin.map_or("src", |o| o.as_str())))
            .unwrap_or_default();
        let kind = match t {
            Transformation::Tile { .. } => "tile",
            Transformation::Interchange { .. } => "interchange",
            Transformation::ParallelizeThread { .. } => "parallelize",
            Transformation::Unroll { .. } => "unroll",
            Transformation::Reverse { .. } => "reverse",
            Transformation::Pack { .. } => "pack",
        };
        (format!("{:?}@{anchor}:{role}", t.pragma()), format!("{kind}@{anchor}"))
    }

    fn multiplier(&self, pragma: &Pragma, label: &str) -> f64 {
        if let Some((_, m)) = self.overrides.iter().find(|(p, _)| p == pragma) {
            return *m;
        }
        let (lo, hi) = match pragma {
            Pragma::ParallelizeThread => (-1.6, 0.1),
            Pragma::Tile { .. } => (-0.7, 0.4),
            Pragma::Interchange { .. } => (-0.5, 0.6),
            Pragma::Unroll { .. } => (-0.3, 0.3),
            Pragma::Reverse => (-0.1, 0.3),
            Pragma::Pack { .. } => (-0.4, 0.5),
        };
        (lo + (hi - lo) * unit(self.seed, &format!("m|{label}"))).exp()
    }

    pub fn evaluate(&self, config: &Configuration) -> Outcome {
        let mut nest = self.root.clone();
        let mut labels = Vec::with_capacity(config.depth());
        let mut families: Vec<String> = Vec::with_capacity(config.depth());
        let mut log_time = self.base_time.ln();
        let mut big_tile = false;
        for t in &config.steps {
            let (label, family) = Self::step_label(&nest, t);
            if let Transformation::Pack { .. } = t {
                if big_tile {
                    return Outcome::CompileFailure {
                        reason: "pack after tiling with size >= 128".into(),
                    };
                }
            }
            if let Transformation::Tile { size, .. } = t {
                big_tile |= *size >= 128;
            }
            let repeats = families.iter().filter(|f| **f == family).count().min(30) as i32;
            log_time += self.multiplier(&t.pragma(), &label).ln() * 0.5f64.powi(repeats);
            nest = match apply(&nest, t) {
                Ok(n) => n,
                Err(e) => return Outcome::CompileFailure { reason: e.to_string() },
            };
            labels.push(label);
            families.push(family);
        }
        if self.interaction_spread > 0.0 {
            for (i, a) in labels.iter().enumerate() {
                for b in &labels[i + 1..] {
                    let u = unit(self.seed, &format!("x|{a}|{b}"));
                    log_time += self.interaction_spread * (2.0 * u - 1.0);
                }
            }
        }
        if !config.is_root() && unit(self.seed, &format!("f|{}", config.key())) < self.failure_rate {
            return Outcome::CompileFailure {
                reason: "rejected by synthetic legality check".into(),
            };
        }
        Outcome::Time { seconds: log_time.exp() }
    }
}

impl Evaluator for SyntheticLandscape {
    fn evaluate(&mut self, config: &Configuration) -> Outcome {
        SyntheticLandscape::evaluate(self, config)
    }
}

fn default_repetitions() -> usize {
    5
}

fn default_timeout() -> f64 {
    600.0
}

/// How to build and time one program variant.
///
/// `compile_cmd` and `run_cmd` are shell command templates; `{src}` is
/// replaced by the rendered source path and `{out}` by the binary path. A
/// reference compile command for a pragma-enabled Clang with Polly is
/// `clang -O3 -march=native -mllvm -polly -mllvm -polly-position=early
/// -DPOLYBENCH_TIME {src} -o {out}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalJobSpec {
    pub source_template: PathBuf,
    pub compile_cmd: String,
    pub run_cmd: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Pattern on compiler diagnostics that marks a rejected transformation
    /// even when the compiler exits successfully.
    #[serde(default)]
    pub reject_pattern: Option<String>,
}

struct ProcessResult {
    success: bool,
    stdout: String,
    stderr: String,
}

fn run_shell(cmd: &str, timeout: Duration) -> std::io::Result<Option<ProcessResult>> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    Ok(status.map(|s| ProcessResult {
        success: s.success(),
        stdout,
        stderr,
    }))
}

/// Last floating-point number printed on standard output.
pub fn parse_time(stdout: &str) -> Option<f64> {
    static PATTERN: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = PATTERN.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex")
    });
    re.find_iter(stdout).last().and_then(|m| m.as_str().parse().ok())
}

fn tail(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(5)..].join("\n")
}

/// Compiles and times configurations with external commands.
pub struct ExternalEvaluator {
    spec: ExternalJobSpec,
    root: LoopNest,
    template: String,
    extension: String,
    reject: Option<Regex>,
    workdir: tempfile::TempDir,
    counter: usize,
}

impl ExternalEvaluator {
    /// `base_dir` resolves a relative `source_template` path.
    pub fn new(spec: ExternalJobSpec, root: LoopNest, base_dir: &Path) -> Result<Self> {
        if spec.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(spec.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        let path = base_dir.join(&spec.source_template);
        let template = std::fs::read_to_string(&path)?;
        for l in root.preorder() {
            if !template.contains(&format!("/*@loop:{}*/", l.id)) {
                return Err(Error::MissingAnchor(l.id.clone()));
            }
        }
        let reject = spec
            .reject_pattern
            .as_deref()
            .map(Regex::new)
            .transpose()
            .map_err(|e| Error::Config(format!("reject_pattern: {e}")))?;
        let extension = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("c")
            .to_string();
        Ok(ExternalEvaluator {
            spec,
            root,
            template,
            extension,
            reject,
            workdir: tempfile::tempdir()?,
            counter: 0,
        })
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.spec.timeout_s)
    }

    fn try_evaluate(&mut self, config: &Configuration) -> std::io::Result<Outcome> {
        let source = match render_pragmas(&self.root, config, &self.template) {
            Ok(s) => s,
            Err(e) => return Ok(Outcome::CompileFailure { reason: e.to_string() }),
        };
        self.counter += 1;
        let src = self.workdir.path().join(format!("variant{}.{}", self.counter, self.extension));
        let out = self.workdir.path().join(format!("variant{}.bin", self.counter));
        std::fs::write(&src, source)?;
        let fill = |cmd: &str| {
            cmd.replace("{src}", &src.display().to_string())
                .replace("{out}", &out.display().to_string())
        };
        let compile = fill(&self.spec.compile_cmd);
        debug!("compile: {compile}");
        let Some(c) = run_shell(&compile, self.timeout())? else {
            return Ok(Outcome::CompileFailure { reason: "compile timeout".into() });
        };
        if !c.success {
            return Ok(Outcome::CompileFailure { reason: tail(&c.stderr) });
        }
        if let Some(re) = &self.reject {
            if re.is_match(&c.stderr) || re.is_match(&c.stdout) {
                return Ok(Outcome::CompileFailure {
                    reason: format!("diagnostics matched reject pattern: {}", tail(&c.stderr)),
                });
            }
        }
        let run = fill(&self.spec.run_cmd);
        let mut times = Vec::with_capacity(self.spec.repetitions);
        for _ in 0..self.spec.repetitions {
            let Some(r) = run_shell(&run, self.timeout())? else {
                return Ok(Outcome::RunFailure { reason: "timeout".into() });
            };
            if !r.success {
                return Ok(Outcome::RunFailure {
                    reason: format!("nonzero exit: {}", tail(&r.stderr)),
                });
            }
            match parse_time(&r.stdout) {
                Some(t) if t > 0.0 => times.push(t),
                _ => return Ok(Outcome::RunFailure { reason: "unparsable".into() }),
            }
        }
        let _ = std::fs::remove_file(&out);
        Ok(Outcome::Time {
            seconds: median(&times).expect("at least one repetition"),
        })
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&mut self, config: &Configuration) -> Outcome {
        self.try_evaluate(config).unwrap_or_else(|e| {
            warn!("external evaluation failed: {e}");
            Outcome::RunFailure { reason: e.to_string() }
        })
    }
}

/// Renders, compiles and times one configuration.
pub fn evaluate_external(config: &Configuration, root: &LoopNest, job: &ExternalJobSpec, base_dir: &Path) -> Result<Outcome> {
    let mut ev = ExternalEvaluator::new(job.clone(), root.clone(), base_dir)?;
    Ok(ev.evaluate(config))
}

/// Elapsed time against which the wall-clock budget is checked.
#[derive(Clone, Debug)]
pub enum Clock {
    /// Real time since the search started.
    Wall(Instant),
    /// Sum of measured program times; deterministic for synthetic runs.
    Virtual(f64),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn elapsed_s(&self) -> f64 {
        match self {
            Clock::Wall(start) => start.elapsed().as_secs_f64(),
            Clock::Virtual(s) => *s,
        }
    }
}

/// Global stopping criterion: unique evaluations and elapsed time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub max_unique: usize,
    pub max_wall_clock_s: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_unique: 1000,
            max_wall_clock_s: 6.0 * 3600.0,
        }
    }
}

impl Budget {
    pub fn unique(max_unique: usize) -> Self {
        Budget {
            max_unique,
            ..Budget::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lookup {
    pub outcome: Outcome,
    /// True when the inner evaluator ran, false on a cache hit.
    pub fresh: bool,
}

/// Memoizes outcomes by canonical key and enforces the global budget.
///
/// The root configuration is the baseline and does not count as a unique
/// evaluation.
pub struct CachedEvaluator<E> {
    inner: E,
    cache: HashMap<String, Outcome>,
    unique: usize,
    budget: Budget,
    clock: Clock,
    root_time: Option<f64>,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E, budget: Budget, clock: Clock) -> Self {
        CachedEvaluator {
            inner,
            cache: HashMap::new(),
            unique: 0,
            budget,
            clock,
            root_time: None,
        }
    }

    /// Evaluates (once) and returns the root time.
    pub fn baseline(&mut self) -> Result<f64> {
        if let Some(t) = self.root_time {
            return Ok(t);
        }
        let root = Configuration::root();
        let outcome = self.inner.evaluate(&root);
        self.advance_clock(&outcome);
        self.cache.insert(root.key(), outcome.clone());
        match outcome {
            Outcome::Time { seconds } if seconds > 0.0 => {
                self.root_time = Some(seconds);
                Ok(seconds)
            }
            Outcome::Time { seconds } => Err(Error::RootFailed(format!("non-positive time {seconds}"))),
            Outcome::CompileFailure { reason } | Outcome::RunFailure { reason } => {
                Err(Error::RootFailed(reason))
            }
        }
    }

    pub fn root_time(&self) -> Option<f64> {
        self.root_time
    }

    fn advance_clock(&mut self, outcome: &Outcome) {
        if let (Clock::Virtual(s), Some(t)) = (&mut self.clock, outcome.seconds()) {
            *s += t;
        }
    }

    pub fn evaluate(&mut self, config: &Configuration) -> Lookup {
        let key = config.key();
        if let Some(outcome) = self.cache.get(&key) {
            return Lookup {
                outcome: outcome.clone(),
                fresh: false,
            };
        }
        let outcome = self.inner.evaluate(config);
        self.advance_clock(&outcome);
        self.unique += 1;
        self.cache.insert(key, outcome.clone());
        Lookup { outcome, fresh: true }
    }

    pub fn contains(&self, config: &Configuration) -> bool {
        self.cache.contains_key(&config.key())
    }

    pub fn unique_count(&self) -> usize {
        self.unique
    }

    pub fn elapsed_s(&self) -> f64 {
        self.clock.elapsed_s()
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn exhausted(&self) -> bool {
        self.unique >= self.budget.max_unique || self.elapsed_s() >= self.budget.max_wall_clock_s
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}
