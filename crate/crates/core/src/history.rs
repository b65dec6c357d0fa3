//! Search history shared by every searcher.

use crate::eval::{CachedEvaluator, Evaluator, Lookup, Outcome};
use crate::loop_model::Configuration;
use crate::reward::{speedup, EvalRecord, SampleKind};
use crate::Result;

/// Callback invoked for every unique evaluation as soon as it is recorded.
pub type Observer<'a> = Box<dyn FnMut(&EvalRecord) + 'a>;

/// Records unique evaluations in order and tracks the best speedup.
pub struct Recorder<'a> {
    root_time: f64,
    best_h: f64,
    best: usize,
    records: Vec<EvalRecord>,
    observer: Option<Observer<'a>>,
}

/// Result of evaluating one configuration through the cache.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub outcome: Outcome,
    pub h: Option<f64>,
    pub fresh: bool,
}

impl<'a> Recorder<'a> {
    /// Evaluates the root and records it as iteration 0.
    pub fn start<E: Evaluator>(cache: &mut CachedEvaluator<E>, observer: Option<Observer<'a>>) -> Result<Self> {
        let root_time = cache.baseline()?;
        let config = Configuration::root();
        let root = EvalRecord {
            iteration: 0,
            phase: 0,
            kind: SampleKind::Root,
            key: config.key(),
            config,
            outcome: Outcome::Time { seconds: root_time },
            h: Some(1.0),
            best_so_far_h: 1.0,
            target_f: None,
            d_star: None,
            elapsed_s: cache.elapsed_s(),
        };
        let mut rec = Recorder {
            root_time,
            best_h: 1.0,
            best: 0,
            records: Vec::new(),
            observer,
        };
        rec.push(root);
        Ok(rec)
    }

    fn push(&mut self, record: EvalRecord) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&record);
        }
        self.records.push(record);
    }

    pub fn speedup_of(&self, outcome: &Outcome) -> Option<f64> {
        outcome.seconds().and_then(|t| speedup(self.root_time, t).ok())
    }

    /// Evaluates `config`; fresh evaluations are appended to the history.
    /// `target_f` is computed from the speedup by the caller when needed.
    pub fn evaluate<E: Evaluator>(
        &mut self,
        cache: &mut CachedEvaluator<E>,
        config: &Configuration,
        kind: SampleKind,
        phase: usize,
        target_f: impl FnOnce(Option<f64>) -> Option<f64>,
        d_star: Option<usize>,
    ) -> Evaluated {
        let Lookup { outcome, fresh } = cache.evaluate(config);
        let h = self.speedup_of(&outcome);
        let target_f = target_f(h);
        if fresh {
            if let Some(h) = h {
                if h > self.best_h {
                    self.best_h = h;
                    self.best = self.records.len();
                }
            }
            self.push(EvalRecord {
                iteration: cache.unique_count(),
                phase,
                kind,
                key: config.key(),
                config: config.clone(),
                outcome: outcome.clone(),
                h,
                best_so_far_h: self.best_h,
                target_f,
                d_star,
                elapsed_s: cache.elapsed_s(),
            });
        }
        Evaluated { outcome, h, fresh }
    }

    pub fn root_time(&self) -> f64 {
        self.root_time
    }

    pub fn best_h(&self) -> f64 {
        self.best_h
    }

    pub fn best(&self) -> &EvalRecord {
        &self.records[self.best]
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EvalRecord> {
        self.records
    }
}
