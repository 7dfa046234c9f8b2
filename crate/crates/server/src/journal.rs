//! The durable store file: an append-only JSON-lines journal of task records
//! and device snapshots. The latest line for a key wins on reload.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use vqpu_core::{DeviceSnapshot, TaskRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entry {
    Task(Box<TaskRecord>),
    Device(Box<DeviceSnapshot>),
    DeviceDeleted { device_id: String },
}

/// State recovered from a journal on startup.
#[derive(Debug, Default)]
pub struct Recovered {
    pub tasks: BTreeMap<String, TaskRecord>,
    /// Every snapshot ever written, per device, in version order.
    pub device_versions: BTreeMap<String, Vec<DeviceSnapshot>>,
    /// Devices whose latest entry is a deletion.
    pub deleted: Vec<String>,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    /// Opens (creating if needed) the journal at `path` and replays it.
    pub fn open(path: &Path) -> io::Result<(Self, Recovered)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut recovered = Recovered::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: Entry = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    // A torn final line from a crash mid-append is dropped.
                    Err(e) => {
                        tracing::warn!("journal {}: skipping line {}: {e}", path.display(), n + 1);
                        continue;
                    }
                };
                match entry {
                    Entry::Task(t) => {
                        recovered.tasks.insert(t.task_id.clone(), *t);
                    }
                    Entry::Device(d) => {
                        recovered.deleted.retain(|id| id != &d.device_id);
                        recovered.device_versions.entry(d.device_id.clone()).or_default().push(*d);
                    }
                    Entry::DeviceDeleted { device_id } => {
                        if !recovered.deleted.contains(&device_id) {
                            recovered.deleted.push(device_id);
                        }
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, recovered))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &Entry) -> io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line)?;
        f.flush()
    }
}

/// Appends one JSON line to an arbitrary log file.
#[derive(Debug)]
pub struct LineLog {
    file: Mutex<File>,
}

impl LineLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn append<T: Serialize>(&self, value: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(&line)?;
        f.flush()
    }
}
