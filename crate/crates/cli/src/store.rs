//! Directory-backed JSON document store.
//!
//! Layout: `models/<id>.json`, `jobs/<id>.json` and `jobs/<id>.request.json`.
//! Every write goes to a temporary file in the same directory and is then
//! renamed over the target, so readers see either the old or the new
//! document and never a partial one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppError, AppResult};
use crate::records::ModelRecord;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn unavailable(path: &Path, e: std::io::Error) -> AppError {
    AppError::unavailable(format!("{}: {e}", path.display()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("doc");
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> AppResult<Self> {
        let store = Self { root: root.into() };
        for sub in ["models", "jobs"] {
            let dir = store.root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| unavailable(&dir, e))?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn doc_path(&self, kind: &str, id: &str, suffix: &str) -> AppResult<PathBuf> {
        if !valid_id(id) {
            return Err(AppError::not_found(format!("no {kind} with id {id:?}")));
        }
        Ok(self.root.join(kind).join(format!("{id}{suffix}.json")))
    }

    /// Fails with 503-class errors when the store directory is gone or unwritable.
    pub fn check(&self) -> AppResult<()> {
        for sub in ["models", "jobs"] {
            let dir = self.root.join(sub);
            let meta = fs::metadata(&dir).map_err(|e| unavailable(&dir, e))?;
            if !meta.is_dir() {
                return Err(AppError::unavailable(format!("{} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    fn put<T: Serialize + ?Sized>(&self, path: &Path, value: &T) -> AppResult<()> {
        self.check()?;
        write_json_atomic(path, value).map_err(|e| unavailable(path, e))
    }

    fn get<T: DeserializeOwned>(&self, path: &Path, kind: &str, id: &str) -> AppResult<T> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| AppError::internal(format!("corrupt {kind} document {id}: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.check()?;
                Err(AppError::not_found(format!("no {kind} with id {id:?}")))
            }
            Err(e) => Err(unavailable(path, e)),
        }
    }

    fn ids(&self, kind: &str) -> AppResult<Vec<String>> {
        let dir = self.root.join(kind);
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| unavailable(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let id = name.strip_suffix(".json")?;
                (valid_id(id) && !id.ends_with(".request")).then(|| id.to_string())
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Writes a new model record; existing ids are never overwritten.
    pub fn insert_model(&self, record: &ModelRecord) -> AppResult<()> {
        let path = self.doc_path("models", &record.id, "")?;
        if path.exists() {
            return Err(AppError::conflict(format!("model {} already exists", record.id)));
        }
        self.put(&path, record)
    }

    pub fn model(&self, id: &str) -> AppResult<ModelRecord> {
        let path = self.doc_path("models", id, "")?;
        self.get(&path, "model", id)
    }

    pub fn models(&self) -> AppResult<Vec<ModelRecord>> {
        let mut out = Vec::new();
        for id in self.ids("models")? {
            match self.model(&id) {
                Ok(r) => out.push(r),
                Err(e) if e.class == crate::error::ErrorClass::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn put_job<T: Serialize>(&self, id: &str, job: &T) -> AppResult<()> {
        let path = self.doc_path("jobs", id, "")?;
        self.put(&path, job)
    }

    pub fn job<T: DeserializeOwned>(&self, id: &str) -> AppResult<T> {
        let path = self.doc_path("jobs", id, "")?;
        self.get(&path, "fit job", id)
    }

    pub fn job_ids(&self) -> AppResult<Vec<String>> {
        self.ids("jobs")
    }

    pub fn put_job_request<T: Serialize>(&self, id: &str, request: &T) -> AppResult<()> {
        let path = self.doc_path("jobs", id, ".request")?;
        self.put(&path, request)
    }

    pub fn job_request<T: DeserializeOwned>(&self, id: &str) -> AppResult<T> {
        let path = self.doc_path("jobs", id, ".request")?;
        self.get(&path, "fit request", id)
    }
}
