//! Asynchronous fit jobs on a bounded worker pool.
//!
//! Job state lives in memory behind one mutex and is mirrored to the store
//! on every transition, so ids and outcomes survive restarts. Jobs that were
//! queued or running when the service stopped are queued again on start.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use ionlds_core::fitting::{fit_model_with_progress, ModelFamily, ModelSpec};
use ionlds_core::{InfusionProtocol, VitalSignSeries, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{AppError, AppResult};
use crate::records::{default_spec, new_id, now, AppErrorDoc, ModelRecord};
use crate::store::Store;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    /// Shorthand for the family's default specification.
    #[serde(default)]
    pub family: Option<ModelFamily>,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    pub series: VitalSignSeries,
    pub protocol: InfusionProtocol,
    #[serde(default)]
    pub patient_id: Option<String>,
}

impl FitRequest {
    pub fn resolved_spec(&self) -> AppResult<ModelSpec> {
        match (&self.spec, self.family) {
            (Some(spec), Some(f)) if spec.family() != f => Err(AppError::invalid(
                "config",
                format!(
                    "family {:?} contradicts spec family {:?}",
                    f.label(),
                    spec.family().label()
                ),
            )),
            (Some(spec), _) => Ok(spec.clone()),
            (None, Some(f)) => Ok(default_spec(f)),
            (None, None) => Err(AppError::invalid("config", "fit request needs a family or a spec")),
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        self.resolved_spec()?;
        self.protocol.check_aligned(&self.series)?;
        if self.series.len() < 2 {
            return Err(AppError::invalid("config", "series needs at least 2 steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn label(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Succeeded => "succeeded",
            JobStatus::Failed => "failed",
            JobStatus::Cancelled => "cancelled",
        }
    }

    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed | JobStatus::Cancelled)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub iteration: usize,
    pub log_likelihood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub schema_version: u32,
    pub id: String,
    pub status: JobStatus,
    pub family: ModelFamily,
    /// Hash of the fit specification and data.
    pub config_hash: String,
    pub progress: JobProgress,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub error: Option<AppErrorDoc>,
    pub created_at: String,
    pub updated_at: String,
}

struct Live {
    record: JobRecord,
    cancel: Arc<AtomicBool>,
}

pub struct JobManager {
    store: Store,
    permits: Arc<Semaphore>,
    workers: usize,
    live: Mutex<HashMap<String, Live>>,
}

impl JobManager {
    pub fn new(store: Store, workers: usize) -> Arc<Self> {
        let workers = workers.max(1);
        Arc::new(Self {
            store,
            permits: Arc::new(Semaphore::new(workers)),
            workers,
            live: Mutex::new(HashMap::new()),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Re-queues unfinished jobs found in the store. Call from inside a runtime.
    pub fn resume(self: &Arc<Self>) -> AppResult<usize> {
        let mut n = 0;
        for id in self.store.job_ids()? {
            let record: JobRecord = match self.store.job(&id) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("skipping job {id}: {e}");
                    continue;
                }
            };
            if record.status.is_final() {
                continue;
            }
            let request: FitRequest = match self.store.job_request(&id) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("job {id} has no readable request: {e}");
                    continue;
                }
            };
            let mut record = record;
            record.status = JobStatus::Queued;
            record.updated_at = now();
            self.store.put_job(&id, &record)?;
            self.spawn(record, request);
            n += 1;
        }
        Ok(n)
    }

    pub fn submit(self: &Arc<Self>, request: FitRequest) -> AppResult<JobRecord> {
        request.validate()?;
        let spec = request.resolved_spec()?;
        let id = new_id("job");
        let stamp = now();
        let record = JobRecord {
            schema_version: SCHEMA_VERSION,
            id: id.clone(),
            status: JobStatus::Queued,
            family: spec.family(),
            config_hash: ionlds_core::hash_json(&(&spec, &request.series, &request.protocol)),
            progress: JobProgress::default(),
            model_id: None,
            error: None,
            created_at: stamp.clone(),
            updated_at: stamp,
        };
        self.store.put_job_request(&id, &request)?;
        self.store.put_job(&id, &record)?;
        self.spawn(record.clone(), request);
        Ok(record)
    }

    fn spawn(self: &Arc<Self>, record: JobRecord, request: FitRequest) {
        let cancel = Arc::new(AtomicBool::new(false));
        let id = record.id.clone();
        self.live.lock().unwrap().insert(
            id.clone(),
            Live {
                record,
                cancel: cancel.clone(),
            },
        );
        let me = self.clone();
        tokio::spawn(async move {
            let Ok(_permit) = me.permits.clone().acquire_owned().await else {
                return;
            };
            if cancel.load(Ordering::SeqCst) {
                me.live.lock().unwrap().remove(&id);
                return;
            }
            me.transition(&id, |r| {
                if r.status == JobStatus::Queued {
                    r.status = JobStatus::Running;
                }
            });
            let worker = me.clone();
            let job_id = id.clone();
            let outcome = tokio::task::spawn_blocking(move || worker.execute(&job_id, &request, &cancel)).await;
            let outcome = outcome.unwrap_or_else(|e| Err(AppError::internal(format!("fit worker panicked: {e}"))));
            me.finish(&id, outcome);
        });
    }

    fn execute(&self, id: &str, request: &FitRequest, cancel: &AtomicBool) -> AppResult<Option<ModelRecord>> {
        let spec = request.resolved_spec()?;
        let mut progress = |rec: &ionlds_core::learning::IterationRecord| {
            if let Some(live) = self.live.lock().unwrap().get_mut(id) {
                live.record.progress = JobProgress {
                    iteration: rec.iteration,
                    log_likelihood: Some(rec.log_likelihood),
                };
            }
            !cancel.load(Ordering::SeqCst)
        };
        let fitted = fit_model_with_progress(&spec, &request.series, &request.protocol, &mut progress)?;
        if cancel.load(Ordering::SeqCst) {
            return Ok(None);
        }
        let mut record = ModelRecord::new(
            new_id("model"),
            &spec,
            fitted,
            request.series.channel_names.clone(),
            Some(request.protocol.clone()),
        );
        record.patient_id = request.patient_id.clone();
        self.store.insert_model(&record)?;
        Ok(Some(record))
    }

    /// Applies `f` to the live record and persists it.
    fn transition(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> Option<JobRecord> {
        let mut live = self.live.lock().unwrap();
        let entry = live.get_mut(id)?;
        f(&mut entry.record);
        entry.record.updated_at = now();
        let snapshot = entry.record.clone();
        if let Err(e) = self.store.put_job(id, &snapshot) {
            log::error!("could not persist job {id}: {e}");
        }
        Some(snapshot)
    }

    fn finish(&self, id: &str, outcome: AppResult<Option<ModelRecord>>) {
        let done = self.transition(id, |r| {
            if r.status.is_final() {
                return;
            }
            match &outcome {
                Ok(Some(model)) => {
                    r.status = JobStatus::Succeeded;
                    r.model_id = Some(model.id.clone());
                }
                Ok(None) => r.status = JobStatus::Cancelled,
                Err(e) => {
                    r.status = JobStatus::Failed;
                    r.error = Some(e.into());
                }
            }
        });
        if let Some(r) = done {
            log::info!("fit job {id} finished: {:?}", r.status);
        }
        self.live.lock().unwrap().remove(id);
    }

    pub fn get(&self, id: &str) -> AppResult<JobRecord> {
        if let Some(live) = self.live.lock().unwrap().get(id) {
            return Ok(live.record.clone());
        }
        self.store.job(id)
    }

    /// Cancels a queued or running job; finished jobs are a conflict.
    pub fn cancel(&self, id: &str) -> AppResult<JobRecord> {
        let mut live = self.live.lock().unwrap();
        match live.get_mut(id) {
            Some(entry) if !entry.record.status.is_final() => {
                entry.cancel.store(true, Ordering::SeqCst);
                entry.record.status = JobStatus::Cancelled;
                entry.record.updated_at = now();
                let snapshot = entry.record.clone();
                self.store.put_job(id, &snapshot)?;
                Ok(snapshot)
            }
            _ => {
                drop(live);
                let record: JobRecord = self.store.job(id)?;
                Err(AppError::conflict(format!(
                    "job {id} is already {}",
                    record.status.label()
                )))
            }
        }
    }
}
