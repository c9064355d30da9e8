//! Job queue: FIFO execution on a pool of worker threads, at most one
//! training job at a time, per-job event logs and result caching.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::workspace::Workspace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    TrainDdpm,
    TrainClassifiers,
    EstimateMap,
    Edit,
    Interpolate,
    Eval,
}

impl JobKind {
    pub fn is_training(self) -> bool {
        matches!(self, JobKind::TrainDdpm | JobKind::TrainClassifiers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    State {
        state: JobState,
    },
    Step {
        candidate: usize,
        t: usize,
        snr: f64,
        accuracy: f64,
        /// Hash of a preview image under `/v1/images/`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        thumbnail: Option<String>,
    },
    Progress {
        fraction: f64,
        message: String,
    },
    Done {
        result: String,
    },
    Failed {
        code: String,
        error: String,
    },
}

impl EventBody {
    pub fn name(&self) -> &'static str {
        match self {
            EventBody::State { .. } => "state",
            EventBody::Step { .. } => "step",
            EventBody::Progress { .. } => "progress",
            EventBody::Done { .. } => "done",
            EventBody::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::Done { .. } | EventBody::Failed { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    /// Position in the job's event log, from 0.
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// A job failure with a stable machine-readable code.
#[derive(Clone, Debug, PartialEq)]
pub struct JobError {
    pub code: String,
    pub message: String,
}

impl From<pixguide::Error> for JobError {
    fn from(e: pixguide::Error) -> Self {
        JobError {
            code: crate::api::error_code(&e).into(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    /// Key of the result under `/v1/results/`.
    pub result: Option<String>,
    pub error: Option<String>,
    pub events: usize,
    pub created_ms: u128,
}

struct JobRecord {
    view: JobView,
    key: String,
    log: Vec<JobEvent>,
}

pub type Task = Box<dyn FnOnce(&JobContext) -> Result<serde_json::Value, JobError> + Send>;

struct Queued {
    id: String,
    kind: JobKind,
    task: Task,
}

struct Inner {
    ws: Arc<Workspace>,
    jobs: Mutex<HashMap<String, JobRecord>>,
    queue: Mutex<(VecDeque<Queued>, bool)>,
    ready: Condvar,
    changed: watch::Sender<u64>,
}

/// Handle given to a running task for reporting progress.
pub struct JobContext {
    id: String,
    inner: Arc<Inner>,
}

impl JobContext {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn workspace(&self) -> &Workspace {
        &self.inner.ws
    }

    pub fn emit(&self, body: EventBody) {
        self.inner.push_event(&self.id, body);
    }

    pub fn progress(&self, fraction: f64, message: impl Into<String>) {
        if let Some(j) = self.inner.jobs.lock().expect("jobs lock").get_mut(&self.id) {
            j.view.progress = fraction.clamp(0.0, 1.0);
        }
        self.emit(EventBody::Progress {
            fraction,
            message: message.into(),
        });
    }
}

impl Inner {
    fn push_event(&self, id: &str, body: EventBody) {
        {
            let mut jobs = self.jobs.lock().expect("jobs lock");
            let Some(j) = jobs.get_mut(id) else { return };
            let seq = j.log.len() as u64;
            j.log.push(JobEvent { seq, body });
            j.view.events = j.log.len();
        }
        self.changed.send_modify(|v| *v += 1);
    }

    fn set_state(&self, id: &str, state: JobState) {
        if let Some(j) = self.jobs.lock().expect("jobs lock").get_mut(id) {
            j.view.state = state;
        }
        self.push_event(id, EventBody::State { state });
    }

    fn finish(&self, id: &str, outcome: Result<serde_json::Value, JobError>) {
        let key = match self.jobs.lock().expect("jobs lock").get(id) {
            Some(j) => j.key.clone(),
            None => return,
        };
        let outcome = outcome.and_then(|v| self.ws.put_result(&key, &v).map_err(JobError::from));
        match outcome {
            Ok(()) => {
                if let Some(j) = self.jobs.lock().expect("jobs lock").get_mut(id) {
                    j.view.result = Some(key.clone());
                    j.view.progress = 1.0;
                }
                self.set_state(id, JobState::Done);
                self.push_event(id, EventBody::Done { result: key });
            }
            Err(e) => {
                log::warn!("job {id} failed: {}", e.message);
                if let Some(j) = self.jobs.lock().expect("jobs lock").get_mut(id) {
                    j.view.error = Some(e.message.clone());
                }
                self.set_state(id, JobState::Failed);
                self.push_event(
                    id,
                    EventBody::Failed {
                        code: e.code,
                        error: e.message,
                    },
                );
            }
        }
    }

    /// Next job in FIFO order that may start now; training jobs wait while
    /// another training job runs.
    fn next(&self) -> Queued {
        let mut q = self.queue.lock().expect("queue lock");
        loop {
            let training = q.1;
            if let Some(pos) = q.0.iter().position(|j| !(training && j.kind.is_training())) {
                let job = q.0.remove(pos).expect("position is in range");
                if job.kind.is_training() {
                    q.1 = true;
                }
                return job;
            }
            q = self.ready.wait(q).expect("queue lock");
        }
    }

    fn worker(self: Arc<Self>) {
        loop {
            let job = self.next();
            self.set_state(&job.id, JobState::Running);
            let ctx = JobContext {
                id: job.id.clone(),
                inner: self.clone(),
            };
            let outcome =
                std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (job.task)(&ctx)))
                    .unwrap_or_else(|_| {
                        Err(JobError {
                            code: "internal".into(),
                            message: "job panicked".into(),
                        })
                    });
            self.finish(&job.id, outcome);
            if job.kind.is_training() {
                self.queue.lock().expect("queue lock").1 = false;
                self.ready.notify_all();
            }
        }
    }
}

#[derive(Clone)]
pub struct JobManager {
    inner: Arc<Inner>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl JobManager {
    pub fn new(ws: Arc<Workspace>, workers: usize) -> Self {
        let inner = Arc::new(Inner {
            ws,
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
            changed: watch::channel(0).0,
        });
        for i in 0..workers.max(1) {
            let w = inner.clone();
            thread::Builder::new()
                .name(format!("pixguide-worker-{i}"))
                .spawn(move || w.worker())
                .expect("spawn worker thread");
        }
        JobManager { inner }
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.inner.ws
    }

    /// Submits a job keyed by its request hash. A stored result completes the
    /// job immediately; an identical queued or running job is returned as is.
    pub fn submit(&self, kind: JobKind, key: String, task: Task) -> JobView {
        let id = uuid::Uuid::new_v4().to_string();
        let cached = self.inner.ws.result(&key).is_some();
        {
            let mut jobs = self.inner.jobs.lock().expect("jobs lock");
            if !cached {
                if let Some(j) = jobs
                    .values()
                    .find(|j| j.key == key && !j.view.state.is_terminal())
                {
                    return j.view.clone();
                }
            }
            jobs.insert(
                id.clone(),
                JobRecord {
                    view: JobView {
                        id: id.clone(),
                        kind,
                        state: JobState::Queued,
                        progress: 0.0,
                        result: None,
                        error: None,
                        events: 0,
                        created_ms: now_ms(),
                    },
                    key: key.clone(),
                    log: Vec::new(),
                },
            );
        }
        self.inner.push_event(
            &id,
            EventBody::State {
                state: JobState::Queued,
            },
        );
        if cached {
            self.inner.set_state(&id, JobState::Running);
            self.inner.finish(&id, Ok(serde_json::Value::Null));
        } else {
            self.inner
                .queue
                .lock()
                .expect("queue lock")
                .0
                .push_back(Queued {
                    id: id.clone(),
                    kind,
                    task,
                });
            self.inner.ready.notify_all();
        }
        self.get(&id).expect("job was just inserted")
    }

    pub fn get(&self, id: &str) -> Option<JobView> {
        self.inner
            .jobs
            .lock()
            .expect("jobs lock")
            .get(id)
            .map(|j| j.view.clone())
    }

    /// Events with `seq >= from`.
    pub fn events_since(&self, id: &str, from: u64) -> Option<Vec<JobEvent>> {
        let jobs = self.inner.jobs.lock().expect("jobs lock");
        jobs.get(id)
            .map(|j| j.log.iter().skip(from as usize).cloned().collect())
    }

    /// True while a training job is queued or running.
    pub fn training_in_flight(&self) -> bool {
        let jobs = self.inner.jobs.lock().expect("jobs lock");
        jobs.values()
            .any(|j| j.view.kind.is_training() && !j.view.state.is_terminal())
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.inner.changed.subscribe()
    }

    /// Blocks until the job reaches a terminal state.
    pub fn wait(&self, id: &str) -> Option<JobView> {
        loop {
            let v = self.get(id)?;
            if v.state.is_terminal() {
                return Some(v);
            }
            thread::sleep(std::time::Duration::from_millis(10));
        }
    }
}
