use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use skipforge_core::checkpoint::{describe, Checkpoint};
use skipforge_core::imageio::{encode_png, load_png, tensor_png};
use skipforge_core::pipeline::{EditRequest, Engine, SweepGrid};
use tokio::sync::mpsc;

use crate::error::ServiceError;
use crate::store::{JobKind, JobState, RunStore};

/// Checkpoints found in one directory, loaded on first use.
pub struct CheckpointRegistry {
    dir: PathBuf,
    default: Option<String>,
    loaded: Mutex<HashMap<String, Arc<Checkpoint>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointInfo {
    pub name: String,
    pub path: PathBuf,
    pub default: bool,
    pub details: serde_json::Value,
}

impl CheckpointRegistry {
    pub fn new(dir: PathBuf, default: Option<String>) -> Self {
        Self { dir, default, loaded: Mutex::new(HashMap::new()) }
    }

    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter_map(|e| {
                        let p = e.path();
                        if p.extension()? != "ckpt" {
                            return None;
                        }
                        Some(p.file_stem()?.to_string_lossy().into_owned())
                    })
                    .collect()
            })
            .unwrap_or_default();
        names.sort();
        names
    }

    /// The configured default, or the only checkpoint present.
    pub fn default_name(&self) -> Option<String> {
        if let Some(d) = &self.default {
            return Some(d.clone());
        }
        let names = self.names();
        (names.len() == 1).then(|| names[0].clone())
    }

    pub fn list(&self) -> Vec<CheckpointInfo> {
        let default = self.default_name();
        self.names()
            .into_iter()
            .map(|name| {
                let path = self.dir.join(format!("{name}.ckpt"));
                let details = describe(&path).unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() }));
                CheckpointInfo { default: default.as_deref() == Some(name.as_str()), name, path, details }
            })
            .collect()
    }

    pub fn resolve(&self, name: Option<&str>) -> Result<String, ServiceError> {
        match name.map(String::from).or_else(|| self.default_name()) {
            Some(n) if self.names().contains(&n) => Ok(n),
            Some(n) => Err(ServiceError::NotFound(format!("checkpoint {n}"))),
            None => Err(ServiceError::NotFound("default checkpoint (none configured)".into())),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<Checkpoint>, ServiceError> {
        if let Some(ck) = self.loaded.lock().expect("registry lock").get(name) {
            return Ok(ck.clone());
        }
        if !self.names().iter().any(|n| n == name) {
            return Err(ServiceError::NotFound(format!("checkpoint {name}")));
        }
        let ck = Arc::new(Checkpoint::load(&self.dir.join(format!("{name}.ckpt")))?);
        self.loaded.lock().expect("registry lock").insert(name.to_string(), ck.clone());
        Ok(ck)
    }
}

/// Body of `POST /sweeps`: a grid plus the request every point starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSubmission {
    #[serde(default = "default_sweep_base")]
    pub base: EditRequest,
    #[serde(default)]
    pub grid: SweepGrid,
}

fn default_sweep_base() -> EditRequest {
    EditRequest::canonical_default()
}

/// FIFO job queue drained by a fixed number of workers.
#[derive(Clone)]
pub struct JobQueue {
    tx: mpsc::UnboundedSender<String>,
}

impl JobQueue {
    pub fn start(
        store: Arc<RunStore>,
        registry: Arc<CheckpointRegistry>,
        workers: usize,
        sweep_workers: usize,
    ) -> Self {
        let (tx, rx) = mpsc::unbounded_channel::<String>();
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for w in 0..workers {
            let (rx, store, registry) = (rx.clone(), store.clone(), registry.clone());
            tokio::spawn(async move {
                loop {
                    // Holding the lock only while waiting keeps admission first-in first-out.
                    let Some(run_id) = rx.lock().await.recv().await else { break };
                    let (store, registry) = (store.clone(), registry.clone());
                    let id = run_id.clone();
                    let res = tokio::task::spawn_blocking(move || execute(&store, &registry, &id, sweep_workers)).await;
                    if let Err(e) = res {
                        tracing::error!(worker = w, %run_id, error = %e, "job panicked");
                    }
                }
            });
        }
        Self { tx }
    }

    pub fn enqueue(&self, run_id: String) -> Result<(), ServiceError> {
        self.tx.send(run_id).map_err(|_| ServiceError::Config("job queue is closed".into()))
    }
}

/// Runs one queued job to completion, recording failure instead of propagating it.
pub fn execute(store: &RunStore, registry: &CheckpointRegistry, run_id: &str, sweep_workers: usize) {
    let mut job = match store.get(run_id) {
        Ok(j) => j,
        Err(e) => {
            tracing::error!(%run_id, error = %e, "queued run vanished");
            return;
        }
    };
    if job.transition(JobState::Running, None).is_err() || store.update(&job).is_err() {
        return;
    }
    tracing::info!(%run_id, kind = ?job.kind, "run started");
    let result = run_job(store, registry, run_id, job.kind, &job.checkpoint, sweep_workers);
    match result {
        Ok(outputs) => {
            job.outputs = outputs;
            let _ = job.transition(JobState::Done, None);
            tracing::info!(%run_id, "run done");
        }
        Err(e) => {
            tracing::warn!(%run_id, error = %e, "run failed");
            let _ = job.transition(JobState::Failed, Some(e.to_string()));
        }
    }
    if let Err(e) = store.update(&job) {
        tracing::error!(%run_id, error = %e, "could not record run outcome");
    }
}

fn run_job(
    store: &RunStore,
    registry: &CheckpointRegistry,
    run_id: &str,
    kind: JobKind,
    checkpoint: &str,
    sweep_workers: usize,
) -> Result<Vec<String>, ServiceError> {
    let ck = registry.get(checkpoint)?;
    let engine = Engine::new(&ck)?;
    let request = store.request_json(run_id)?;
    let mut outputs = Vec::new();
    match kind {
        JobKind::Edit => {
            let req: EditRequest = serde_json::from_str(&request)?;
            let loader = |id: &str| -> skipforge_core::Result<skipforge_core::Tensor> {
                let path =
                    store.image_path(id).map_err(|e| skipforge_core::Error::invalid("source.image", e.to_string()))?;
                load_png(&path)
            };
            let out = engine.run_request(&req, &loader)?;
            for (name, img) in &out.images {
                let file = format!("{name}.png");
                store.write_output(run_id, &file, &tensor_png(img)?)?;
                outputs.push(file);
            }
            if let Some(m) = &out.montage {
                store.write_output(run_id, "montage.png", &encode_png(m)?)?;
                outputs.push("montage.png".into());
            }
            store.write_output(run_id, "metrics.json", serde_json::to_string_pretty(&out.metrics)?.as_bytes())?;
            outputs.push("metrics.json".into());
        }
        JobKind::Sweep => {
            let sub: SweepSubmission = serde_json::from_str(&request)?;
            let table = engine.run_sweep(&sub.base, &sub.grid, sweep_workers)?;
            store.write_output(run_id, "results.csv", table.to_csv()?.as_bytes())?;
            outputs.push("results.csv".into());
        }
    }
    Ok(outputs)
}
