//! Label sources: a simulated oracle backed by ground truth and an
//! interactive oracle that publishes each batch on a shared [`LabelDesk`]
//! and blocks until a human has labeled all of it.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::RoundRecord;
use crate::pool::Pool;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle contract violated: {0}")]
    Contract(String),
    #[error("timed out after {seconds:.1} s waiting for labels")]
    Timeout { seconds: f64 },
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
}

/// One queried sample as presented to an annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub index: usize,
    pub features: Vec<f64>,
    pub uncertainty: f64,
    pub diversity: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub round: usize,
    pub items: Vec<QueryItem>,
}

impl LabelRequest {
    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.index).collect()
    }
}

pub trait Oracle {
    /// Labels for `request.items`, in the same order.
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>, OracleError>;
}

/// Answers from stored ground truth; each index may be asked once.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    truth: Vec<Option<usize>>,
    answered: HashSet<usize>,
}

impl SimulatedOracle {
    pub fn new(truth: Vec<Option<usize>>) -> Self {
        Self {
            truth,
            answered: HashSet::new(),
        }
    }

    /// Ground truth of every pool index; labeled indices count as answered.
    pub fn from_pool(pool: &Pool) -> Self {
        let mut oracle = Self::new(pool.raw_labels().to_vec());
        oracle.answered.extend(pool.labeled().iter().copied());
        oracle
    }
}

impl Oracle for SimulatedOracle {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>, OracleError> {
        let mut seen = HashSet::new();
        for item in &request.items {
            if self.answered.contains(&item.index) || !seen.insert(item.index) {
                return Err(OracleError::Contract(format!("index {} is already labeled", item.index)));
            }
        }
        let labels = request
            .items
            .iter()
            .map(|item| {
                self.truth
                    .get(item.index)
                    .copied()
                    .flatten()
                    .ok_or_else(|| OracleError::Contract(format!("no ground truth for index {}", item.index)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.answered.extend(seen);
        Ok(labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Training,
    AwaitingLabels,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSnapshot {
    pub phase: Phase,
    pub round: usize,
    pub progress: f64,
    pub pending: Vec<QueryItem>,
    pub received: BTreeMap<usize, usize>,
    pub history: Vec<RoundRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("index {index} is not in the pending batch")]
    NotPending { index: usize },
    #[error("class {class} for index {index} is outside 0..{classes}")]
    ClassOutOfRange { index: usize, class: usize, classes: usize },
    #[error("index {index} already labeled {stored}, got {submitted}")]
    Conflict { index: usize, stored: usize, submitted: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub complete: bool,
    pub received: usize,
    pub remaining: usize,
}

#[derive(Debug)]
struct DeskState {
    phase: Phase,
    round: usize,
    progress: f64,
    pending: Vec<QueryItem>,
    received: BTreeMap<usize, usize>,
    /// Labels of the last completed batch, so that a retried submission is
    /// still a no-op after the round has moved on.
    completed: BTreeMap<usize, usize>,
    history: Vec<RoundRecord>,
    error: Option<String>,
}

/// Shared state between a running experiment and the HTTP front end.
/// Submissions are validated as a whole and applied atomically.
#[derive(Debug)]
pub struct LabelDesk {
    num_classes: usize,
    state: Mutex<DeskState>,
    changed: Condvar,
}

impl LabelDesk {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            state: Mutex::new(DeskState {
                phase: Phase::Training,
                round: 0,
                progress: 0.0,
                pending: Vec::new(),
                received: BTreeMap::new(),
                completed: BTreeMap::new(),
                history: Vec::new(),
                error: None,
            }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, DeskState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn snapshot(&self) -> DeskSnapshot {
        let s = self.lock();
        DeskSnapshot {
            phase: s.phase,
            round: s.round,
            progress: s.progress,
            pending: s.pending.clone(),
            received: s.received.clone(),
            history: s.history.clone(),
            error: s.error.clone(),
        }
    }

    pub fn begin_round(&self, round: usize) {
        let mut s = self.lock();
        if s.phase == Phase::Done {
            return;
        }
        s.round = round;
        s.progress = 0.0;
        s.phase = Phase::Training;
    }

    pub fn set_progress(&self, fraction: f64) {
        self.lock().progress = fraction.clamp(0.0, 1.0);
    }

    pub fn push_record(&self, record: RoundRecord) {
        self.lock().history.push(record);
    }

    /// Marks the session finished, optionally with an error message, and
    /// wakes any waiter.
    pub fn finish(&self, error: Option<String>) {
        let mut s = self.lock();
        s.phase = Phase::Done;
        s.pending.clear();
        s.error = error;
        drop(s);
        self.changed.notify_all();
    }

    /// Publishes `request` and blocks until every item has a label, the
    /// timeout elapses, or the desk is finished. Labels already received for
    /// a re-published index are kept.
    pub fn wait_for_labels(&self, request: &LabelRequest, timeout: Option<Duration>) -> Result<Vec<usize>, OracleError> {
        let mut s = self.lock();
        if s.phase == Phase::Done {
            return Err(OracleError::Unavailable("session is finished".into()));
        }
        let wanted: HashSet<usize> = request.items.iter().map(|it| it.index).collect();
        s.received.retain(|i, _| wanted.contains(i));
        s.pending = request.items.clone();
        s.round = request.round;
        s.phase = Phase::AwaitingLabels;
        drop(s);
        self.changed.notify_all();

        let start = Instant::now();
        let mut s = self.lock();
        loop {
            if s.phase == Phase::Done {
                return Err(OracleError::Unavailable("session finished while awaiting labels".into()));
            }
            if request.items.iter().all(|it| s.received.contains_key(&it.index)) {
                let labels = request.items.iter().map(|it| s.received[&it.index]).collect();
                s.pending.clear();
                s.received.clear();
                s.phase = Phase::Training;
                return Ok(labels);
            }
            s = match timeout {
                None => self.changed.wait(s).unwrap_or_else(|p| p.into_inner()),
                Some(limit) => {
                    let elapsed = start.elapsed();
                    if elapsed >= limit {
                        return Err(OracleError::Timeout {
                            seconds: limit.as_secs_f64(),
                        });
                    }
                    self.changed
                        .wait_timeout(s, limit - elapsed)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    /// Records a (possibly partial) label map for the pending batch.
    /// Resubmitting an identical label is a no-op.
    pub fn submit(&self, labels: &BTreeMap<usize, usize>) -> Result<SubmitOutcome, SubmitError> {
        let mut s = self.lock();
        if !labels.is_empty() && labels.iter().all(|(i, c)| s.completed.get(i) == Some(c)) {
            return Ok(SubmitOutcome {
                complete: true,
                received: s.completed.len(),
                remaining: 0,
            });
        }
        let pending: HashSet<usize> = if s.phase == Phase::AwaitingLabels {
            s.pending.iter().map(|it| it.index).collect()
        } else {
            HashSet::new()
        };
        for (&index, &class) in labels {
            if !pending.contains(&index) {
                return Err(SubmitError::NotPending { index });
            }
            if class >= self.num_classes {
                return Err(SubmitError::ClassOutOfRange {
                    index,
                    class,
                    classes: self.num_classes,
                });
            }
            if let Some(&stored) = s.received.get(&index) {
                if stored != class {
                    return Err(SubmitError::Conflict {
                        index,
                        stored,
                        submitted: class,
                    });
                }
            }
        }
        s.received.extend(labels.iter().map(|(&i, &c)| (i, c)));
        let received = s.received.len();
        let remaining = pending.len() - received;
        if remaining == 0 {
            // the waiter collects the labels; readers already see training
            s.pending.clear();
            s.phase = Phase::Training;
            s.completed = s.received.clone();
        }
        drop(s);
        self.changed.notify_all();
        Ok(SubmitOutcome {
            complete: remaining == 0,
            received,
            remaining,
        })
    }
}

/// Oracle that hands each batch to a [`LabelDesk`].
#[derive(Clone, Debug)]
pub struct InteractiveOracle {
    desk: std::sync::Arc<LabelDesk>,
    timeout: Option<Duration>,
}

impl InteractiveOracle {
    pub fn new(desk: std::sync::Arc<LabelDesk>, timeout: Option<Duration>) -> Self {
        Self { desk, timeout }
    }
}

impl Oracle for InteractiveOracle {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>, OracleError> {
        self.desk.wait_for_labels(request, self.timeout)
    }
}
