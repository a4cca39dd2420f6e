//! In-process session registry behind the HTTP interface: registered test
//! sets, incremental rating sessions, running estimates and transcripts.
//!
//! Transport lives in the CLI crate; everything here is synchronous and
//! safe to share across threads.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::bounds::{hoeffding_bound, BoundSpec};
use crate::control_variates::CovarianceEstimator;
use crate::error::{Error, Result};
use crate::incremental::{Session, SessionStatus, Strategy};
use crate::knn::DEFAULT_K;
use crate::model::{EstimateFlag, SampleDraw, TestSet};
use crate::pipeline::{estimate, Prepared, Strata, VariateChoice};
use crate::rng::stream;
use crate::stratification::Partition;

/// Scale maximum used for the bound when no range is given (MQM 0–25).
pub const DEFAULT_RANGE: f64 = 25.0;

fn default_strategy() -> String {
    "proportional".into()
}

fn default_partition() -> String {
    "docs".into()
}

fn default_gamma() -> f64 {
    0.95
}

fn default_range() -> f64 {
    DEFAULT_RANGE
}

fn default_k() -> usize {
    DEFAULT_K
}

/// Body of `POST /sessions`; also the first line of a transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub test_set: String,
    pub budget: usize,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "default_partition")]
    pub partition: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_range")]
    pub range: f64,
    #[serde(default = "default_k")]
    pub knn_k: usize,
}

impl SessionConfig {
    pub fn new(test_set: impl Into<String>, budget: usize) -> Self {
        SessionConfig {
            test_set: test_set.into(),
            budget,
            strategy: default_strategy(),
            partition: default_partition(),
            seed: 0,
            gamma: default_gamma(),
            range: default_range(),
            knn_k: default_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub budget: usize,
}

/// Running estimate after some number of ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningEstimate {
    pub estimate: f64,
    /// Hoeffding half-width at the session's confidence level.
    pub bound: f64,
    pub n: usize,
    /// Whether a control variate was applied.
    pub cv: bool,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub test_set: String,
    pub budget: usize,
    pub population: usize,
    pub strategy: String,
    pub partition: String,
}

/// Response of `GET /sessions/{id}/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextSegment {
    Pending {
        session_id: String,
        segment_id: String,
        doc_id: String,
        progress: Progress,
    },
    Complete {
        session_id: String,
        progress: Progress,
        result: RunningEstimate,
    },
}

/// Body of `POST /sessions/{id}/ratings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rating {
    pub segment_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub session_id: String,
    pub status: SessionStatus,
    pub progress: Progress,
    pub result: RunningEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub segment_id: String,
    pub score: f64,
    pub estimate: f64,
    pub bound: f64,
    pub cv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub config: SessionConfig,
    pub status: SessionStatus,
    pub progress: Progress,
    pub rows: Vec<TranscriptRow>,
    /// Latest estimate; absent before the first rating.
    pub result: Option<RunningEstimate>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LogEvent {
    Create { session_id: String, config: SessionConfig },
    Rating { segment_id: String, score: f64 },
}

/// A registered test set with its cached side information.
#[derive(Debug)]
struct Registered {
    test_set: Arc<TestSet>,
    prepared: Arc<Prepared>,
}

/// One live session plus the data needed to estimate from it.
#[derive(Debug)]
pub struct LiveSession {
    id: String,
    config: SessionConfig,
    strata: Strata,
    session: Session,
    prepared: Arc<Prepared>,
    rows: Vec<TranscriptRow>,
    log: Option<File>,
}

fn progress(session: &Session) -> Progress {
    Progress {
        rated: session.revealed().len(),
        budget: session.budget(),
    }
}

/// Estimate from revealed ratings: stratified + cv-knn when the knn
/// variate is usable, otherwise stratified alone (plain mean without
/// strata).
pub fn running_estimate(
    prepared: &Prepared,
    test_set: &TestSet,
    draw: &SampleDraw,
    strata: Strata,
    config: &SessionConfig,
) -> Result<RunningEstimate> {
    let with_cv = prepared.features().is_some();
    let mut est = None;
    if with_cv {
        let e = estimate(
            prepared,
            test_set,
            draw,
            strata,
            VariateChoice::Knn(config.knn_k),
            CovarianceEstimator::Uncentered,
        )?;
        let fell_back = e
            .estimate
            .flags
            .iter()
            .any(|f| matches!(f, EstimateFlag::VariateFallback(_)));
        if !fell_back {
            est = Some((e, true));
        }
    }
    let (e, cv) = match est {
        Some(x) => x,
        None => (
            estimate(
                prepared,
                test_set,
                draw,
                strata,
                VariateChoice::None,
                CovarianceEstimator::Uncentered,
            )?,
            false,
        ),
    };
    let spec = BoundSpec::new(config.gamma, config.range, draw.len(), test_set.len())?;
    Ok(RunningEstimate {
        estimate: e.estimate.value,
        bound: hoeffding_bound(&spec)?,
        n: draw.len(),
        cv,
        method: e.estimate.method,
    })
}

impl LiveSession {
    fn build(id: String, config: SessionConfig, reg: &Registered) -> Result<Self> {
        let strategy: Strategy = config.strategy.parse()?;
        let strata: Strata = config.partition.parse()?;
        if !(config.gamma > 0.0 && config.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} must lie in (0, 1)",
                config.gamma
            )));
        }
        if !(config.range >= 0.0 && config.range.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "range {} must be finite and non-negative",
                config.range
            )));
        }
        if config.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be at least 1".into()));
        }
        let partition = match reg.prepared.partition(strata)? {
            Some(p) => p.clone(),
            None => Partition::single(reg.test_set.len())?,
        };
        let session = Session::new(
            reg.test_set.clone(),
            reg.prepared.features().cloned(),
            partition,
            config.budget,
            strategy,
            stream(config.seed),
        )?;
        Ok(LiveSession {
            id,
            config,
            strata,
            session,
            prepared: reg.prepared.clone(),
            rows: Vec::new(),
            log: None,
        })
    }

    fn current(&self) -> Result<Option<RunningEstimate>> {
        match self.session.draw() {
            None => Ok(None),
            Some(draw) => running_estimate(
                &self.prepared,
                self.session.test_set(),
                &draw,
                self.strata,
                &self.config,
            )
            .map(Some),
        }
    }

    pub fn next_segment(&mut self) -> Result<NextSegment> {
        if self.session.status() == SessionStatus::Complete {
            return Ok(NextSegment::Complete {
                session_id: self.id.clone(),
                progress: progress(&self.session),
                result: self.current()?.expect("complete sessions have ratings"),
            });
        }
        let i = self.session.next_segment()?;
        let seg = self.session.test_set().segment(i);
        Ok(NextSegment::Pending {
            session_id: self.id.clone(),
            segment_id: seg.id.clone(),
            doc_id: seg.doc_id.clone(),
            progress: progress(&self.session),
        })
    }

    pub fn submit(&mut self, rating: &Rating) -> Result<SubmitResponse> {
        let index = self
            .session
            .test_set()
            .index_of(&rating.segment_id)
            .ok_or_else(|| Error::NotPending(rating.segment_id.clone()))?;
        let status = self.session.submit_rating(index, rating.score)?;
        let result = self.current()?.expect("just rated");
        self.rows.push(TranscriptRow {
            segment_id: rating.segment_id.clone(),
            score: rating.score,
            estimate: result.estimate,
            bound: result.bound,
            cv: result.cv,
        });
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&LogEvent::Rating {
                segment_id: rating.segment_id.clone(),
                score: rating.score,
            })
            .expect("serializable");
            // logging is best effort; the in-memory state stays authoritative
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log::warn!("transcript log write failed for session {}: {e}", self.id);
            }
        }
        Ok(SubmitResponse {
            session_id: self.id.clone(),
            status,
            progress: progress(&self.session),
            result,
        })
    }

    pub fn report(&self) -> Result<SessionReport> {
        Ok(SessionReport {
            session_id: self.id.clone(),
            config: self.config.clone(),
            status: self.session.status(),
            progress: progress(&self.session),
            rows: self.rows.clone(),
            result: self.current()?,
        })
    }
}

/// Registry of test sets and sessions. Different sessions can be used
/// concurrently; each session is guarded by its own mutex.
#[derive(Debug, Default)]
pub struct Service {
    test_sets: RwLock<HashMap<String, Arc<Registered>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
    counter: AtomicU64,
    log_dir: Option<PathBuf>,
}

fn poisoned<T>(_: T) -> Error {
    Error::InvalidArgument("internal lock poisoned".into())
}

impl Service {
    pub fn new() -> Self {
        Service::default()
    }

    /// Append one JSON line per event to `<dir>/<session id>.jsonl`.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    pub fn register_test_set(&self, name: impl Into<String>, test_set: TestSet) -> Result<()> {
        let prepared = Prepared::with_default_bins(&test_set)?;
        let reg = Registered {
            test_set: Arc::new(test_set),
            prepared: Arc::new(prepared),
        };
        self.test_sets
            .write()
            .map_err(poisoned)?
            .insert(name.into(), Arc::new(reg));
        Ok(())
    }

    pub fn test_set_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .test_sets
            .read()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        names.sort();
        names
    }

    fn registered(&self, name: &str) -> Result<Arc<Registered>> {
        self.test_sets
            .read()
            .map_err(poisoned)?
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("test set `{name}`")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>> {
        self.sessions
            .read()
            .map_err(poisoned)?
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session `{id}`")))
    }

    pub fn create_session(&self, config: SessionConfig) -> Result<CreatedSession> {
        let reg = self.registered(&config.test_set)?;
        let id = format!("s{:06}", self.counter.fetch_add(1, Ordering::SeqCst) + 1);
        let mut live = LiveSession::build(id.clone(), config.clone(), &reg)?;
        if let Some(dir) = &self.log_dir {
            let path = dir.join(format!("{id}.jsonl"));
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(&LogEvent::Create {
                session_id: id.clone(),
                config: config.clone(),
            })
            .expect("serializable");
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
            live.log = Some(file);
        }
        let created = CreatedSession {
            session_id: id.clone(),
            test_set: config.test_set,
            budget: config.budget,
            population: reg.test_set.len(),
            strategy: config.strategy,
            partition: config.partition,
        };
        self.sessions
            .write()
            .map_err(poisoned)?
            .insert(id, Arc::new(Mutex::new(live)));
        Ok(created)
    }

    pub fn next(&self, id: &str) -> Result<NextSegment> {
        self.session(id)?.lock().map_err(poisoned)?.next_segment()
    }

    pub fn submit(&self, id: &str, rating: &Rating) -> Result<SubmitResponse> {
        self.session(id)?.lock().map_err(poisoned)?.submit(rating)
    }

    pub fn report(&self, id: &str) -> Result<SessionReport> {
        self.session(id)?.lock().map_err(poisoned)?.report()
    }
}

/// Re-run a session from its configuration and rating sequence, checking
/// that every rated segment is the one the session would select. Returns
/// the transcript the live session would have produced.
pub fn replay(test_set: TestSet, config: &SessionConfig, ratings: &[Rating]) -> Result<Vec<TranscriptRow>> {
    let service = Service::new();
    service.register_test_set(config.test_set.clone(), test_set)?;
    let id = service.create_session(config.clone())?.session_id;
    let mut rows = Vec::with_capacity(ratings.len());
    for r in ratings {
        match service.next(&id)? {
            NextSegment::Pending { segment_id, .. } if segment_id == r.segment_id => {}
            NextSegment::Pending { segment_id, .. } => {
                return Err(Error::InvalidArgument(format!(
                    "replay diverged: expected `{segment_id}`, transcript has `{}`",
                    r.segment_id
                )))
            }
            NextSegment::Complete { .. } => return Err(Error::SessionComplete),
        }
        let resp = service.submit(&id, r)?;
        rows.push(TranscriptRow {
            segment_id: r.segment_id.clone(),
            score: r.score,
            estimate: resp.result.estimate,
            bound: resp.result.bound,
            cv: resp.result.cv,
        });
    }
    Ok(rows)
}

/// Read a transcript log written by a service with a log directory.
pub fn read_log(path: &Path) -> Result<(SessionConfig, Vec<Rating>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut config = None;
    let mut ratings = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match event {
            LogEvent::Create { config: c, .. } => config = Some(c),
            LogEvent::Rating { segment_id, score } => ratings.push(Rating { segment_id, score }),
        }
    }
    let config = config.ok_or_else(|| Error::Parse {
        line: 1,
        message: "log has no create event".into(),
    })?;
    Ok((config, ratings))
}
