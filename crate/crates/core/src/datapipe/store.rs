//! Append-only JSONL files plus a content-addressed blob directory.
//!
//! Each record is one line written with a single `write_all` under a lock, so
//! a crash leaves at most one torn final line. Readers skip lines that do not
//! parse and count them.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::{Stage, TrajectoryRecord};
use crate::backends::{ImagePayload, ImageRef};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const BALANCED_FILE: &str = "balanced.jsonl";
pub const SFT_FILE: &str = "sft.jsonl";
pub const RL_FILE: &str = "rl.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("image blob: {0}")]
    Image(#[from] crate::backends::ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Single-writer handle on one JSONL file. Share it by reference across
/// threads; appends are serialized internally.
pub struct JsonlWriter {
    path: PathBuf,
    file: Mutex<File>,
    keys: Mutex<HashSet<String>>,
}

impl JsonlWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err(&path))?;
        // Terminate a torn tail so the next record starts on its own line.
        let len = file.metadata().map_err(io_err(&path))?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::End(-1)).map_err(io_err(&path))?;
            file.read_exact(&mut last).map_err(io_err(&path))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io_err(&path))?;
            }
        }
        Ok(JsonlWriter {
            path,
            file: Mutex::new(file),
            keys: Mutex::new(HashSet::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().expect("writer lock poisoned");
        file.write_all(&line).map_err(io_err(&self.path))
    }

    /// Registers keys already present so [`JsonlWriter::append_unique`] skips them.
    pub fn remember_keys(&self, keys: impl IntoIterator<Item = String>) {
        self.keys.lock().expect("key set poisoned").extend(keys);
    }

    /// Appends unless a record with the same key was seen; returns whether
    /// it was written.
    pub fn append_unique<T: Serialize>(&self, key: String, record: &T) -> Result<bool, StoreError> {
        let mut keys = self.keys.lock().expect("key set poisoned");
        if keys.contains(&key) {
            return Ok(false);
        }
        self.append(record)?;
        keys.insert(key);
        Ok(true)
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        let file = self.file.lock().expect("writer lock poisoned");
        file.sync_all().map_err(io_err(&self.path))
    }
}

/// Streaming reader. Unparseable lines are skipped, logged and counted in
/// [`JsonlScanner::corrupt`].
pub struct JsonlScanner<T> {
    path: PathBuf,
    reader: Option<BufReader<File>>,
    line_no: usize,
    corrupt: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlScanner<T> {
    /// A missing file reads as empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let reader = match File::open(&path) {
            Ok(f) => Some(BufReader::new(f)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(JsonlScanner {
            path,
            reader,
            line_no: 0,
            corrupt: 0,
            _marker: PhantomData,
        })
    }

    pub fn corrupt(&self) -> usize {
        self.corrupt
    }
}

impl<T: DeserializeOwned> Iterator for JsonlScanner<T> {
    type Item = Result<T, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        let reader = self.reader.as_mut()?;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            }
            self.line_no += 1;
            let line = buf.strip_suffix(b"\n").unwrap_or(&buf);
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice(line) {
                Ok(record) => return Some(Ok(record)),
                Err(e) => {
                    self.corrupt += 1;
                    log::warn!("{}:{}: skipping corrupt line: {e}", self.path.display(), self.line_no);
                }
            }
        }
    }
}

/// All records of a file plus the number of skipped lines.
#[derive(Debug)]
pub struct Scan<T> {
    pub records: Vec<T>,
    pub corrupt: usize,
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Scan<T>, StoreError> {
    let mut scanner = JsonlScanner::open(path)?;
    let records = scanner.by_ref().collect::<Result<Vec<T>, _>>()?;
    Ok(Scan {
        records,
        corrupt: scanner.corrupt(),
    })
}

/// Replaces `path` with exactly `records`, via a temporary file and rename.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), StoreError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// A store directory: trajectory log, stage outputs and image blobs.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let blobs = root.join(BLOB_DIR);
        fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writer on the trajectory log, primed with the keys of the records
    /// already in it so re-running a stage appends nothing new.
    pub fn trajectory_writer(&self) -> Result<JsonlWriter, StoreError> {
        let path = self.path(TRAJECTORIES_FILE);
        let existing: Scan<TrajectoryRecord> = read_jsonl(&path)?;
        let writer = JsonlWriter::open(&path)?;
        writer.remember_keys(existing.records.iter().map(TrajectoryRecord::content_key));
        Ok(writer)
    }

    /// Moves pixel payloads into `blobs/` and appends the record. Returns
    /// false when an identical record is already stored.
    pub fn append_trajectory(&self, writer: &JsonlWriter, record: &TrajectoryRecord) -> Result<bool, StoreError> {
        let mut record = record.clone();
        self.externalize(&mut record.trajectory.task.source)?;
        for step in &mut record.trajectory.steps {
            self.externalize(&mut step.image)?;
        }
        writer.append_unique(record.content_key(), &record)
    }

    /// Records of the given stages (all stages when `stages` is empty).
    pub fn scan_trajectories(&self, stages: &[Stage]) -> Result<Scan<TrajectoryRecord>, StoreError> {
        let mut scan: Scan<TrajectoryRecord> = read_jsonl(self.path(TRAJECTORIES_FILE))?;
        scan.records.retain(|r| stages.is_empty() || stages.contains(&r.stage));
        for record in &mut scan.records {
            self.resolve(&mut record.trajectory.task.source);
            for step in &mut record.trajectory.steps {
                self.resolve(&mut step.image);
            }
        }
        Ok(scan)
    }

    /// Writes the image's bytes to `blobs/<hash>.<ext>` (once) and points
    /// the reference at that file, relative to the store root.
    fn externalize(&self, image: &mut ImageRef) -> Result<(), StoreError> {
        if image.is_vector() {
            return Ok(());
        }
        let rel = PathBuf::from(BLOB_DIR).join(format!("{}.{}", image.content_hash, image.extension()));
        if let ImagePayload::File { path } = &image.payload {
            if *path == rel || *path == self.root.join(&rel) {
                image.payload = ImagePayload::File { path: rel };
                return Ok(());
            }
        }
        let target = self.root.join(&rel);
        if !target.exists() {
            let bytes = image.bytes()?;
            write_atomic(&target, &bytes)?;
        }
        image.payload = ImagePayload::File { path: rel };
        Ok(())
    }

    fn resolve(&self, image: &mut ImageRef) {
        if let ImagePayload::File { path } = &mut image.payload {
            if path.is_relative() && path.starts_with(BLOB_DIR) {
                *path = self.root.join(&*path);
            }
        }
    }
}
