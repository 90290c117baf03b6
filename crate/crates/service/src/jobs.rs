//! Explanation jobs and the single worker that runs them.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, OnceLock, RwLock, Weak};
use std::time::{Duration, Instant};

use perceptvis::compose::ExplanationSummary;
use perceptvis::digest::{Digest, DigestBuilder};
use perceptvis::render::write_bytes;
use perceptvis::workbench::{AssetKind, Workbench};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    pub fn can_advance_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!((self, next), (Queued, Running) | (Running, Done) | (Running, Failed))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JobFailure {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub sample_id: String,
    pub class_index: usize,
    pub status: JobStatus,
    /// Every status the job has held, oldest first.
    pub history: Vec<JobStatus>,
    /// Position in submission order.
    pub sequence: u64,
    pub summary: Option<ExplanationSummary>,
    pub assets: BTreeMap<AssetKind, Digest>,
    pub failure: Option<JobFailure>,
}

impl Job {
    fn advance(&mut self, next: JobStatus) {
        assert!(
            self.status.can_advance_to(next),
            "illegal job transition {:?} -> {:?}",
            self.status,
            next
        );
        self.status = next;
        self.history.push(next);
    }
}

/// Stable id for a `(sample, class)` request against one decoder.
pub fn job_id(sample_id: &str, class_index: usize, decoder: Digest) -> String {
    let mut b = DigestBuilder::new();
    b.str(sample_id).usize(class_index).bytes(decoder.as_bytes());
    b.finish().short(20)
}

/// Shared state: the loaded workbench, the job table and the asset cache.
pub struct ServiceState {
    workbench: OnceLock<Arc<Workbench>>,
    load_error: OnceLock<String>,
    jobs: Mutex<JobTable>,
    changed: Condvar,
    assets: RwLock<HashMap<Digest, Arc<Vec<u8>>>>,
    asset_dir: Option<PathBuf>,
    queue: Mutex<mpsc::Sender<String>>,
}

#[derive(Default)]
struct JobTable {
    jobs: HashMap<String, Job>,
    submitted: u64,
    completed: Vec<String>,
}

pub enum Submission {
    Created(Job),
    Existing(Job),
}

impl ServiceState {
    /// Starts the worker thread. The worker exits once the state is dropped.
    pub fn new(asset_dir: Option<PathBuf>) -> Arc<Self> {
        let (tx, rx) = mpsc::channel::<String>();
        let state = Arc::new(ServiceState {
            workbench: OnceLock::new(),
            load_error: OnceLock::new(),
            jobs: Mutex::new(JobTable::default()),
            changed: Condvar::new(),
            assets: RwLock::new(HashMap::new()),
            asset_dir,
            queue: Mutex::new(tx),
        });
        let weak = Arc::downgrade(&state);
        std::thread::Builder::new()
            .name("explain-worker".into())
            .spawn(move || worker(weak, rx))
            .expect("spawn worker thread");
        state
    }

    pub fn with_workbench(wb: Workbench, asset_dir: Option<PathBuf>) -> Arc<Self> {
        let state = Self::new(asset_dir);
        state.set_workbench(wb);
        state
    }

    pub fn set_workbench(&self, wb: Workbench) {
        let _ = self.workbench.set(Arc::new(wb));
    }

    pub fn set_load_error(&self, message: String) {
        let _ = self.load_error.set(message);
    }

    pub fn workbench(&self) -> Option<&Arc<Workbench>> {
        self.workbench.get()
    }

    pub fn load_error(&self) -> Option<&str> {
        self.load_error.get().map(String::as_str)
    }

    /// Queues a job, or returns the existing one for the same request.
    pub fn submit(&self, sample_id: &str, class_index: usize, decoder: Digest) -> Submission {
        let id = job_id(sample_id, class_index, decoder);
        let mut table = self.jobs.lock().expect("job table");
        if let Some(job) = table.jobs.get(&id) {
            return Submission::Existing(job.clone());
        }
        let job = Job {
            id: id.clone(),
            sample_id: sample_id.to_string(),
            class_index,
            status: JobStatus::Queued,
            history: vec![JobStatus::Queued],
            sequence: table.submitted,
            summary: None,
            assets: BTreeMap::new(),
            failure: None,
        };
        table.submitted += 1;
        table.jobs.insert(id.clone(), job.clone());
        drop(table);
        self.queue
            .lock()
            .expect("queue")
            .send(id)
            .expect("worker outlives the state");
        Submission::Created(job)
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().expect("job table").jobs.get(id).cloned()
    }

    /// Ids of finished jobs in the order the worker completed them.
    pub fn completion_order(&self) -> Vec<String> {
        self.jobs.lock().expect("job table").completed.clone()
    }

    /// Blocks until the job reaches a terminal state or `timeout` passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        let mut table = self.jobs.lock().expect("job table");
        loop {
            match table.jobs.get(id) {
                None => return None,
                Some(j) if j.status.is_terminal() => return Some(j.clone()),
                Some(_) => {}
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            table = self.changed.wait_timeout(table, left).expect("job table").0;
        }
    }

    pub fn asset(&self, digest: &Digest) -> Option<Arc<Vec<u8>>> {
        if let Some(bytes) = self.assets.read().expect("assets").get(digest) {
            return Some(Arc::clone(bytes));
        }
        let path = self.asset_dir.as_ref()?.join(format!("{digest}.png"));
        let bytes = std::fs::read(path).ok()?;
        (Digest::of_bytes(&bytes) == *digest).then(|| Arc::new(bytes))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        let mut table = self.jobs.lock().expect("job table");
        if let Some(job) = table.jobs.get_mut(id) {
            f(job);
            if job.status.is_terminal() {
                table.completed.push(id.to_string());
            }
        }
        drop(table);
        self.changed.notify_all();
    }

    fn run(&self, id: &str) {
        let Some(job) = self.job(id) else { return };
        self.update(id, |j| j.advance(JobStatus::Running));
        let outcome = match self.workbench() {
            None => Err(JobFailure {
                stage: "load".into(),
                kind: "unavailable".into(),
                message: "model is not loaded".into(),
            }),
            Some(wb) => {
                match catch_unwind(AssertUnwindSafe(|| wb.explain_sample(&job.sample_id, Some(job.class_index)))) {
                    Ok(Ok(art)) => Ok(art),
                    Ok(Err(e)) => Err(JobFailure {
                        stage: e.stage().unwrap_or("explain").to_string(),
                        kind: e.kind().to_string(),
                        message: e.to_string(),
                    }),
                    Err(_) => Err(JobFailure {
                        stage: "worker".into(),
                        kind: "panic".into(),
                        message: "explanation worker panicked".into(),
                    }),
                }
            }
        };
        match outcome {
            Ok(art) => {
                let mut digests = BTreeMap::new();
                {
                    let mut cache = self.assets.write().expect("assets");
                    for (kind, asset) in &art.assets {
                        digests.insert(*kind, asset.digest);
                        cache
                            .entry(asset.digest)
                            .or_insert_with(|| Arc::new(asset.bytes.clone()));
                    }
                }
                if let Some(dir) = &self.asset_dir {
                    for asset in art.assets.values() {
                        if let Err(e) = write_bytes(&dir.join(asset.file_name()), &asset.bytes) {
                            tracing::warn!("asset cache write failed: {e}");
                        }
                    }
                }
                self.update(id, |j| {
                    j.summary = Some(art.summary);
                    j.assets = digests;
                    j.advance(JobStatus::Done);
                });
            }
            Err(failure) => {
                tracing::warn!(job = id, stage = %failure.stage, "explanation failed: {}", failure.message);
                self.update(id, |j| {
                    j.failure = Some(failure);
                    j.advance(JobStatus::Failed);
                });
            }
        }
    }
}

fn worker(state: Weak<ServiceState>, rx: mpsc::Receiver<String>) {
    for id in rx {
        let Some(state) = state.upgrade() else { break };
        state.run(&id);
    }
}
