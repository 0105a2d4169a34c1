//! The dataset catalog: one human-readable manifest in the data directory.
//!
//! ```text
//! # cellvista catalog
//!
//! [dataset]
//! id = 0895c838-e550-48a3-a777-dbcd35d30272
//! title = Lung atlas
//! source = cellxgene
//! state = both
//! raw_path = /data/raw/0895c838.h5ad
//! store_path = /data/stores/0895c838.crvo
//! ```
//!
//! Values escape backslash as `\\` and newline as `\n`. Every mutation
//! rewrites the whole manifest to a temporary file and renames it into place.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

pub const MANIFEST_NAME: &str = "catalog.txt";

static UPDATE_LOCK: Mutex<()> = Mutex::new(());
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("cannot {action} dataset {id} in state {state}")]
    IllegalState {
        id: String,
        state: DatasetState,
        action: &'static str,
    },
    #[error("malformed catalog manifest at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Cellxgene,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetState {
    RawOnly,
    Processed,
    Both,
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetSource::Cellxgene => "cellxgene",
            DatasetSource::Local => "local",
        })
    }
}

impl FromStr for DatasetSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cellxgene" => Ok(DatasetSource::Cellxgene),
            "local" => Ok(DatasetSource::Local),
            _ => Err(format!("unknown source {s:?}")),
        }
    }
}

impl fmt::Display for DatasetState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetState::RawOnly => "raw_only",
            DatasetState::Processed => "processed",
            DatasetState::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub dataset_id: String,
    pub title: String,
    pub source: DatasetSource,
    pub raw_path: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
}

impl CatalogEntry {
    pub fn state(&self) -> DatasetState {
        match (&self.raw_path, &self.store_path) {
            (Some(_), Some(_)) => DatasetState::Both,
            (None, Some(_)) => DatasetState::Processed,
            _ => DatasetState::RawOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    data_dir: PathBuf,
    entries: Vec<CatalogEntry>,
}

impl Catalog {
    /// Loads the manifest from `data_dir`, or starts an empty catalog if
    /// there is none yet.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let path = data_dir.join(MANIFEST_NAME);
        let entries = match fs::read_to_string(&path) {
            Ok(text) => parse_manifest(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(source) => return Err(CatalogError::Io { path, source }),
        };
        Ok(Catalog { data_dir, entries })
    }

    /// Loads the current manifest, applies `f` and lets it save, with all
    /// such updates in this process serialized. Use this rather than a
    /// long-lived `Catalog` when several tasks may mutate the manifest.
    pub fn update<R>(
        data_dir: impl AsRef<Path>,
        f: impl FnOnce(&mut Catalog) -> Result<R, CatalogError>,
    ) -> Result<R, CatalogError> {
        let _guard = UPDATE_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let mut catalog = Catalog::open(data_dir)?;
        f(&mut catalog)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join(MANIFEST_NAME)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.dataset_id == id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut CatalogEntry, CatalogError> {
        self.entries
            .iter_mut()
            .find(|e| e.dataset_id == id)
            .ok_or_else(|| CatalogError::UnknownDataset(id.to_string()))
    }

    /// Records a raw file for `id`, creating the entry if needed.
    pub fn register_raw(
        &mut self,
        id: &str,
        title: &str,
        source: DatasetSource,
        raw_path: impl Into<PathBuf>,
    ) -> Result<&CatalogEntry, CatalogError> {
        let raw_path = raw_path.into();
        match self.entries.iter().position(|e| e.dataset_id == id) {
            Some(i) => {
                let e = &mut self.entries[i];
                e.title = title.to_string();
                e.source = source;
                e.raw_path = Some(raw_path);
            }
            None => self.entries.push(CatalogEntry {
                dataset_id: id.to_string(),
                title: title.to_string(),
                source,
                raw_path: Some(raw_path),
                store_path: None,
            }),
        }
        self.save()?;
        Ok(self.get(id).expect("just inserted"))
    }

    pub fn mark_processed(
        &mut self,
        id: &str,
        store_path: impl Into<PathBuf>,
    ) -> Result<&CatalogEntry, CatalogError> {
        self.get_mut(id)?.store_path = Some(store_path.into());
        self.save()?;
        Ok(self.get(id).expect("checked above"))
    }

    /// Forgets the raw file, deleting it when it lives inside the data
    /// directory. Only allowed once a store exists.
    pub fn delete_raw(&mut self, id: &str) -> Result<&CatalogEntry, CatalogError> {
        let data_dir = self.data_dir.clone();
        let entry = self.get_mut(id)?;
        if entry.state() != DatasetState::Both {
            return Err(CatalogError::IllegalState {
                id: id.to_string(),
                state: entry.state(),
                action: "delete raw file of",
            });
        }
        let raw = entry.raw_path.take().expect("state both");
        remove_owned(&data_dir, &raw)?;
        self.save()?;
        Ok(self.get(id).expect("checked above"))
    }

    /// Removes the store file. An entry left with neither file is dropped.
    pub fn delete_store(&mut self, id: &str) -> Result<Option<&CatalogEntry>, CatalogError> {
        let data_dir = self.data_dir.clone();
        let entry = self.get_mut(id)?;
        let Some(store) = entry.store_path.take() else {
            return Err(CatalogError::IllegalState {
                id: id.to_string(),
                state: entry.state(),
                action: "delete store of",
            });
        };
        let now_empty = entry.raw_path.is_none();
        remove_owned(&data_dir, &store)?;
        if now_empty {
            self.entries.retain(|e| e.dataset_id != id);
        }
        self.save()?;
        Ok(self.get(id))
    }

    /// Atomically replaces the manifest with the in-memory catalog.
    pub fn save(&self) -> Result<(), CatalogError> {
        let path = self.manifest_path();
        let io = |source| CatalogError::Io {
            path: path.clone(),
            source,
        };
        fs::create_dir_all(&self.data_dir).map_err(io)?;
        let tmp = self
            .data_dir
            .join(format!(
                ".{MANIFEST_NAME}.tmp-{}-{}",
                std::process::id(),
                TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
            ));
        let text = render_manifest(&self.entries);
        let written = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()
        })();
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            return Err(io(e));
        }
        fs::rename(&tmp, &path).map_err(io)
    }
}

fn remove_owned(data_dir: &Path, file: &Path) -> Result<(), CatalogError> {
    if !file.starts_with(data_dir) {
        return Ok(());
    }
    match fs::remove_file(file) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(source) => Err(CatalogError::Io {
            path: file.to_path_buf(),
            source,
        }),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

pub(crate) fn render_manifest(entries: &[CatalogEntry]) -> String {
    let mut out = String::from("# cellvista catalog\n");
    for e in entries {
        out.push_str("\n[dataset]\n");
        out.push_str(&format!("id = {}\n", escape(&e.dataset_id)));
        out.push_str(&format!("title = {}\n", escape(&e.title)));
        out.push_str(&format!("source = {}\n", e.source));
        out.push_str(&format!("state = {}\n", e.state()));
        if let Some(p) = &e.raw_path {
            out.push_str(&format!("raw_path = {}\n", escape(&p.to_string_lossy())));
        }
        if let Some(p) = &e.store_path {
            out.push_str(&format!("store_path = {}\n", escape(&p.to_string_lossy())));
        }
    }
    out
}

#[derive(Default)]
struct Partial {
    start: usize,
    id: Option<String>,
    title: Option<String>,
    source: Option<DatasetSource>,
    state: Option<String>,
    raw_path: Option<PathBuf>,
    store_path: Option<PathBuf>,
}

impl Partial {
    fn finish(self) -> Result<CatalogEntry, CatalogError> {
        let bad = |reason: &str| CatalogError::Malformed {
            line: self.start,
            reason: reason.to_string(),
        };
        let entry = CatalogEntry {
            dataset_id: self.id.clone().ok_or_else(|| bad("missing id"))?,
            title: self.title.clone().unwrap_or_default(),
            source: self.source.ok_or_else(|| bad("missing source"))?,
            raw_path: self.raw_path.clone(),
            store_path: self.store_path.clone(),
        };
        if entry.raw_path.is_none() && entry.store_path.is_none() {
            return Err(bad("entry has neither raw_path nor store_path"));
        }
        if let Some(s) = &self.state {
            if *s != entry.state().to_string() {
                return Err(bad(&format!(
                    "state {s} disagrees with paths (expected {})",
                    entry.state()
                )));
            }
        }
        Ok(entry)
    }
}

pub(crate) fn parse_manifest(text: &str) -> Result<Vec<CatalogEntry>, CatalogError> {
    let mut entries: Vec<CatalogEntry> = Vec::new();
    let mut current: Option<Partial> = None;
    let push = |p: Partial, entries: &mut Vec<CatalogEntry>| -> Result<(), CatalogError> {
        let line = p.start;
        let e = p.finish()?;
        if entries.iter().any(|x| x.dataset_id == e.dataset_id) {
            return Err(CatalogError::Malformed {
                line,
                reason: format!("duplicate id {}", e.dataset_id),
            });
        }
        entries.push(e);
        Ok(())
    };
    for (n, raw_line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[dataset]" {
            if let Some(p) = current.take() {
                push(p, &mut entries)?;
            }
            current = Some(Partial {
                start: line_no,
                ..Partial::default()
            });
            continue;
        }
        let bad = |reason: String| CatalogError::Malformed {
            line: line_no,
            reason,
        };
        let p = current
            .as_mut()
            .ok_or_else(|| bad("key outside a [dataset] block".into()))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad("expected key = value".into()))?;
        let value = unescape(value.trim());
        match key.trim() {
            "id" => p.id = Some(value),
            "title" => p.title = Some(value),
            "source" => p.source = Some(value.parse().map_err(bad)?),
            "state" => p.state = Some(value),
            "raw_path" => p.raw_path = Some(PathBuf::from(value)),
            "store_path" => p.store_path = Some(PathBuf::from(value)),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    if let Some(p) = current.take() {
        push(p, &mut entries)?;
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        assert!(cat.entries().is_empty());
        assert!(parse_manifest("# cellvista catalog\n").unwrap().is_empty());
    }

    #[test]
    fn state_machine_walk() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.h5ad");
        let store = dir.path().join("x.crvo");
        fs::write(&raw, b"raw").unwrap();
        fs::write(&store, b"store").unwrap();
        let mut cat = Catalog::open(dir.path()).unwrap();
        assert_eq!(
            cat.register_raw("X", "t", DatasetSource::Local, &raw).unwrap().state(),
            DatasetState::RawOnly
        );
        assert_eq!(cat.mark_processed("X", &store).unwrap().state(), DatasetState::Both);
        assert_eq!(cat.delete_raw("X").unwrap().state(), DatasetState::Processed);
        assert!(!raw.exists());

        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened, cat);
        assert_eq!(reopened.get("X").unwrap().state(), DatasetState::Processed);
    }

    #[test]
    fn delete_raw_requires_both() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open(dir.path()).unwrap();
        cat.register_raw("X", "t", DatasetSource::Cellxgene, dir.path().join("r"))
            .unwrap();
        assert!(matches!(
            cat.delete_raw("X"),
            Err(CatalogError::IllegalState {
                state: DatasetState::RawOnly,
                ..
            })
        ));
        assert!(matches!(cat.delete_raw("nope"), Err(CatalogError::UnknownDataset(_))));
        assert!(matches!(
            cat.mark_processed("nope", "s"),
            Err(CatalogError::UnknownDataset(_))
        ));
    }

    #[test]
    fn delete_store_drops_entry_without_raw() {
        let dir = tempfile::tempdir().unwrap();
        let mut cat = Catalog::open(dir.path()).unwrap();
        cat.register_raw("X", "t", DatasetSource::Local, "/elsewhere/r.h5ad")
            .unwrap();
        cat.mark_processed("X", dir.path().join("s")).unwrap();
        assert_eq!(
            cat.delete_store("X").unwrap().unwrap().state(),
            DatasetState::RawOnly
        );
        assert!(matches!(cat.delete_store("X"), Err(CatalogError::IllegalState { .. })));
        cat.mark_processed("X", dir.path().join("s")).unwrap();
        cat.delete_raw("X").unwrap();
        assert!(cat.delete_store("X").unwrap().is_none());
        assert!(Catalog::open(dir.path()).unwrap().entries().is_empty());
    }

    #[test]
    fn files_outside_data_dir_are_left_alone() {
        let data = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        let raw = outside.path().join("mine.h5ad");
        fs::write(&raw, b"x").unwrap();
        let mut cat = Catalog::open(data.path()).unwrap();
        cat.register_raw("X", "t", DatasetSource::Local, &raw).unwrap();
        cat.mark_processed("X", data.path().join("s")).unwrap();
        cat.delete_raw("X").unwrap();
        assert!(raw.exists());
    }

    #[test]
    fn concurrent_updates_are_not_lost() {
        let dir = tempfile::tempdir().unwrap();
        std::thread::scope(|s| {
            for t in 0..8 {
                let d = dir.path();
                s.spawn(move || {
                    for i in 0..5 {
                        Catalog::update(d, |c| {
                            c.register_raw(&format!("{t}-{i}"), "t", DatasetSource::Local, "/r")
                                .map(|_| ())
                        })
                        .unwrap();
                    }
                });
            }
        });
        assert_eq!(Catalog::open(dir.path()).unwrap().entries().len(), 40);
    }

    #[test]
    fn escaping_round_trips() {
        let e = CatalogEntry {
            dataset_id: "a b".into(),
            title: "multi\nline \\ title = x".into(),
            source: DatasetSource::Cellxgene,
            raw_path: Some("/tmp/a=b".into()),
            store_path: None,
        };
        let text = render_manifest(std::slice::from_ref(&e));
        assert_eq!(parse_manifest(&text).unwrap(), vec![e]);
    }

    #[test]
    fn inconsistent_state_is_rejected() {
        let text = "[dataset]\nid = X\nsource = local\nstate = both\nraw_path = /r\n";
        assert!(matches!(parse_manifest(text), Err(CatalogError::Malformed { .. })));
        let dup = "[dataset]\nid = X\nsource = local\nraw_path = /r\n[dataset]\nid = X\nsource = local\nraw_path = /q\n";
        assert!(matches!(parse_manifest(dup), Err(CatalogError::Malformed { .. })));
    }
}
