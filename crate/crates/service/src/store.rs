//! On-disk run persistence.
//!
//! Layout under the store root:
//!
//! ```text
//! index.jsonl            one line per run, append-only
//! runs/<run_id>/job.json current job record
//! runs/<run_id>/request.json
//! runs/<run_id>/*.png, metrics.json, results.csv
//! images/<id>.png        uploaded source images
//! ```
//!
//! All writes go through one lock, so the index and folders never interleave.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Edit,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub run_id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Set when `state` is `failed`.
    pub reason: Option<String>,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub created: DateTime<Utc>,
    pub started: Option<DateTime<Utc>>,
    pub finished: Option<DateTime<Utc>>,
    /// Files available under the run folder once done.
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl Job {
    pub fn new(run_id: String, kind: JobKind, checkpoint: String, checkpoint_hash: String) -> Self {
        Self {
            run_id,
            kind,
            state: JobState::Queued,
            reason: None,
            checkpoint,
            checkpoint_hash,
            created: Utc::now(),
            started: None,
            finished: None,
            outputs: Vec::new(),
        }
    }

    /// Moves to `next`, refusing anything but queued → running → done/failed.
    pub fn transition(&mut self, next: JobState, reason: Option<String>) -> Result<(), ServiceError> {
        let ok = matches!(
            (self.state, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
                | (JobState::Queued, JobState::Failed)
        );
        if !ok {
            return Err(ServiceError::Conflict(format!(
                "run {}: cannot go from {:?} to {next:?}",
                self.run_id, self.state
            )));
        }
        let now = Utc::now();
        match next {
            JobState::Running => self.started = Some(now),
            JobState::Done | JobState::Failed => self.finished = Some(now),
            JobState::Queued => {}
        }
        self.state = next;
        self.reason = reason;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    run_id: String,
    kind: JobKind,
    created: DateTime<Utc>,
}

pub struct RunStore {
    root: PathBuf,
    lock: Mutex<()>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed id: request hash prefix plus a random nonce, so identical
/// requests still get distinct runs.
pub fn new_run_id(canonical_request: &str) -> String {
    format!("{}-{:08x}", &sha256_hex(canonical_request.as_bytes())[..12], rand::random::<u32>())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl RunStore {
    /// Opens (creating if needed) a store and repairs it after a crash:
    /// unfinished jobs become failed("interrupted") and run folders missing
    /// from the index are appended to it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        fs::create_dir_all(root.join("images"))?;
        let store = Self { root, lock: Mutex::new(()) };
        store.recover()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.jsonl")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn read_index(&self) -> Result<Vec<IndexLine>, ServiceError> {
        let text = match fs::read_to_string(self.index_path()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        // A torn final line from a crash mid-append is dropped.
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }

    fn append_index(&self, job: &Job) -> Result<(), ServiceError> {
        let line =
            serde_json::to_string(&IndexLine { run_id: job.run_id.clone(), kind: job.kind, created: job.created })?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.index_path())?;
        writeln!(f, "{line}")?;
        f.sync_data()?;
        Ok(())
    }

    fn recover(&self) -> Result<(), ServiceError> {
        let _g = self.lock.lock().expect("store lock");
        let indexed: std::collections::HashSet<String> = self.read_index()?.into_iter().map(|l| l.run_id).collect();
        for entry in fs::read_dir(self.root.join("runs"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with(".tmp-") {
                fs::remove_dir_all(entry.path())?;
                continue;
            }
            let Ok(mut job) = self.read_job(&name) else { continue };
            if matches!(job.state, JobState::Queued | JobState::Running) {
                tracing::warn!(run_id = %job.run_id, "marking interrupted run as failed");
                job.state = JobState::Failed;
                job.reason = Some("interrupted".into());
                job.finished = Some(Utc::now());
                self.write_job(&job)?;
            }
            if !indexed.contains(&name) {
                self.append_index(&job)?;
            }
        }
        Ok(())
    }

    fn read_job(&self, run_id: &str) -> Result<Job, ServiceError> {
        let text = fs::read_to_string(self.run_dir(run_id).join("job.json"))
            .map_err(|_| ServiceError::NotFound(format!("run {run_id}")))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_job(&self, job: &Job) -> Result<(), ServiceError> {
        write_atomic(&self.run_dir(&job.run_id).join("job.json"), serde_json::to_string_pretty(job)?.as_bytes())?;
        Ok(())
    }

    /// Persists a new queued run with its request document.
    pub fn create(&self, job: &Job, request_json: &str) -> Result<(), ServiceError> {
        let _g = self.lock.lock().expect("store lock");
        let dir = self.run_dir(&job.run_id);
        if dir.exists() {
            return Err(ServiceError::Conflict(format!("run {} already exists", job.run_id)));
        }
        let tmp = self.root.join("runs").join(format!(".tmp-{}", job.run_id));
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join("request.json"), request_json)?;
        fs::write(tmp.join("job.json"), serde_json::to_string_pretty(job)?)?;
        fs::rename(&tmp, &dir)?;
        self.append_index(job)
    }

    pub fn get(&self, run_id: &str) -> Result<Job, ServiceError> {
        if !valid_id(run_id) {
            return Err(ServiceError::NotFound(format!("run {run_id}")));
        }
        self.read_job(run_id)
    }

    pub fn update(&self, job: &Job) -> Result<(), ServiceError> {
        let _g = self.lock.lock().expect("store lock");
        self.write_job(job)
    }

    pub fn request_json(&self, run_id: &str) -> Result<String, ServiceError> {
        self.get(run_id)?;
        Ok(fs::read_to_string(self.run_dir(run_id).join("request.json"))?)
    }

    pub fn write_output(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<(), ServiceError> {
        let _g = self.lock.lock().expect("store lock");
        write_atomic(&self.run_dir(run_id).join(name), bytes)?;
        Ok(())
    }

    /// Reads an output file of a finished run.
    pub fn read_output(&self, run_id: &str, name: &str) -> Result<Vec<u8>, ServiceError> {
        let job = self.get(run_id)?;
        if job.state != JobState::Done {
            return Err(ServiceError::Conflict(format!("run {run_id} is {:?}, outputs are not ready", job.state)));
        }
        if !job.outputs.iter().any(|o| o == name) {
            return Err(ServiceError::NotFound(format!("output {name} of run {run_id}")));
        }
        Ok(fs::read(self.run_dir(run_id).join(name))?)
    }

    /// Runs in creation order, newest last.
    pub fn list(&self, offset: usize, limit: usize) -> Result<(usize, Vec<Job>), ServiceError> {
        let index = self.read_index()?;
        let jobs = index.iter().skip(offset).take(limit).filter_map(|l| self.read_job(&l.run_id).ok()).collect();
        Ok((index.len(), jobs))
    }

    pub fn index_len(&self) -> Result<usize, ServiceError> {
        Ok(self.read_index()?.len())
    }

    pub fn folder_count(&self) -> Result<usize, ServiceError> {
        Ok(fs::read_dir(self.root.join("runs"))?
            .filter_map(|e| e.ok())
            .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
            .count())
    }

    /// Stores an uploaded PNG under its content hash.
    pub fn put_image(&self, png: &[u8]) -> Result<String, ServiceError> {
        let id = sha256_hex(png)[..16].to_string();
        let _g = self.lock.lock().expect("store lock");
        write_atomic(&self.root.join("images").join(format!("{id}.png")), png)?;
        Ok(id)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf, ServiceError> {
        let path = self.root.join("images").join(format!("{id}.png"));
        if !valid_id(id) || !path.exists() {
            return Err(ServiceError::NotFound(format!("image {id}")));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job(id: &str) -> Job {
        Job::new(id.into(), JobKind::Edit, "smoke".into(), "h".into())
    }

    #[test]
    fn transitions_are_one_way() {
        let mut j = job("a");
        assert!(j.transition(JobState::Done, None).is_err());
        j.transition(JobState::Running, None).unwrap();
        j.transition(JobState::Done, None).unwrap();
        assert!(j.transition(JobState::Running, None).is_err());
    }

    #[test]
    fn run_ids_share_a_prefix_but_differ() {
        let a = new_run_id("{}");
        let b = new_run_id("{}");
        assert_ne!(a, b);
        assert_eq!(a[..12], b[..12]);
    }

    #[test]
    fn reopening_fails_unfinished_runs_and_reindexes_orphans() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = RunStore::open(dir.path()).unwrap();
            s.create(&job("queued"), "{}").unwrap();
            let mut done = job("done");
            s.create(&done, "{}").unwrap();
            done.transition(JobState::Running, None).unwrap();
            done.transition(JobState::Done, None).unwrap();
            s.update(&done).unwrap();
        }
        // A folder that made it to disk without its index line.
        let orphan = dir.path().join("runs/orphan");
        fs::create_dir_all(&orphan).unwrap();
        fs::write(orphan.join("job.json"), serde_json::to_string(&job("orphan")).unwrap()).unwrap();
        fs::create_dir_all(dir.path().join("runs/.tmp-half")).unwrap();

        let s = RunStore::open(dir.path()).unwrap();
        let q = s.get("queued").unwrap();
        assert_eq!((q.state, q.reason.as_deref()), (JobState::Failed, Some("interrupted")));
        assert_eq!(s.get("done").unwrap().state, JobState::Done);
        assert_eq!(s.get("orphan").unwrap().state, JobState::Failed);
        assert_eq!(s.index_len().unwrap(), 3);
        assert_eq!(s.folder_count().unwrap(), 3);
    }

    #[test]
    fn outputs_need_a_finished_run() {
        let dir = tempfile::tempdir().unwrap();
        let s = RunStore::open(dir.path()).unwrap();
        let mut j = job("r");
        s.create(&j, "{}").unwrap();
        assert!(matches!(s.read_output("r", "edited.png"), Err(ServiceError::Conflict(_))));
        assert!(matches!(s.get("../etc"), Err(ServiceError::NotFound(_))));
        j.transition(JobState::Running, None).unwrap();
        s.write_output("r", "edited.png", b"png").unwrap();
        j.outputs.push("edited.png".into());
        j.transition(JobState::Done, None).unwrap();
        s.update(&j).unwrap();
        assert_eq!(s.read_output("r", "edited.png").unwrap(), b"png");
        assert!(matches!(s.read_output("r", "other.png"), Err(ServiceError::NotFound(_))));
    }
}
