//! Background jobs with polled status. At most one job runs per dataset.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Download,
    Ingest,
    Precompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running { progress: f64 },
    Done,
    Failed { reason: String },
}

impl JobState {
    pub fn is_finished(&self) -> bool {
        matches!(self, JobState::Done | JobState::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub dataset_id: String,
    #[serde(flatten)]
    pub state: JobState,
}

#[derive(Debug, Default)]
struct Inner {
    next: u64,
    jobs: HashMap<String, JobStatus>,
    /// dataset id -> id of its unfinished job
    active: HashMap<String, String>,
}

#[derive(Debug, Default, Clone)]
pub struct Jobs {
    inner: Arc<Mutex<Inner>>,
}

impl Jobs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a queued job, or fails with `conflict` if the dataset
    /// already has one that has not finished.
    pub fn submit(&self, kind: JobKind, dataset_id: &str) -> Result<JobHandle, ApiError> {
        let mut g = self.inner.lock().unwrap();
        if let Some(existing) = g.active.get(dataset_id) {
            let existing = g.jobs[existing].clone();
            return Err(ApiError::conflict(format!(
                "dataset {dataset_id} already has a {:?} job running",
                existing.kind
            ))
            .with_detail(serde_json::to_value(existing).expect("plain struct")));
        }
        g.next += 1;
        let job_id = format!("job-{}", g.next);
        g.jobs.insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                kind,
                dataset_id: dataset_id.to_string(),
                state: JobState::Queued,
            },
        );
        g.active.insert(dataset_id.to_string(), job_id.clone());
        Ok(JobHandle {
            jobs: self.clone(),
            job_id,
            dataset_id: dataset_id.to_string(),
            finished: false,
        })
    }

    pub fn get(&self, job_id: &str) -> Option<JobStatus> {
        self.inner.lock().unwrap().jobs.get(job_id).cloned()
    }

    fn set(&self, job_id: &str, dataset_id: &str, state: JobState) {
        let mut g = self.inner.lock().unwrap();
        let finished = state.is_finished();
        if let Some(j) = g.jobs.get_mut(job_id) {
            j.state = state;
        }
        if finished && g.active.get(dataset_id).map(String::as_str) == Some(job_id) {
            g.active.remove(dataset_id);
        }
    }
}

/// Owned by the task running a job. Dropping it without finishing marks
/// the job failed, so a panicking task never leaves the dataset locked.
#[derive(Debug)]
pub struct JobHandle {
    jobs: Jobs,
    job_id: String,
    dataset_id: String,
    finished: bool,
}

impl JobHandle {
    pub fn id(&self) -> &str {
        &self.job_id
    }

    pub fn status(&self) -> JobStatus {
        self.jobs.get(&self.job_id).expect("registered on submit")
    }

    pub fn progress(&self, fraction: f64) {
        self.jobs.set(
            &self.job_id,
            &self.dataset_id,
            JobState::Running {
                progress: fraction.clamp(0.0, 1.0),
            },
        );
    }

    pub fn finish<E: std::fmt::Display>(mut self, result: Result<(), E>) {
        let state = match result {
            Ok(()) => JobState::Done,
            Err(e) => JobState::Failed {
                reason: e.to_string(),
            },
        };
        self.jobs.set(&self.job_id, &self.dataset_id, state);
        self.finished = true;
    }
}

impl Drop for JobHandle {
    fn drop(&mut self) {
        if !self.finished {
            self.jobs.set(
                &self.job_id,
                &self.dataset_id,
                JobState::Failed {
                    reason: "job aborted".into(),
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;

    #[test]
    fn one_job_per_dataset() {
        let jobs = Jobs::new();
        let a = jobs.submit(JobKind::Ingest, "d").unwrap();
        let err = jobs.submit(JobKind::Precompute, "d").unwrap_err();
        assert_eq!(err.code, ErrorCode::Conflict);
        let other = jobs.submit(JobKind::Ingest, "e").unwrap();
        a.progress(0.5);
        assert_eq!(
            jobs.get("job-1").unwrap().state,
            JobState::Running { progress: 0.5 }
        );
        a.finish::<String>(Ok(()));
        assert_eq!(jobs.get("job-1").unwrap().state, JobState::Done);
        let b = jobs.submit(JobKind::Precompute, "d").unwrap();
        b.finish(Err("boom"));
        assert_eq!(
            jobs.get("job-3").unwrap().state,
            JobState::Failed {
                reason: "boom".into()
            }
        );
        drop(other);
        assert!(matches!(jobs.get("job-2").unwrap().state, JobState::Failed { .. }));
        assert!(jobs.submit(JobKind::Ingest, "e").is_ok());
    }

    #[test]
    fn status_json() {
        let s = JobStatus {
            job_id: "job-1".into(),
            kind: JobKind::Download,
            dataset_id: "d".into(),
            state: JobState::Running { progress: 0.25 },
        };
        assert_eq!(
            serde_json::to_value(&s).unwrap(),
            serde_json::json!({"job_id": "job-1", "kind": "download", "dataset_id": "d",
                               "state": "running", "progress": 0.25})
        );
    }
}
