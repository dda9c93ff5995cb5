//! Append-only event storage.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use super::{Event, ExperimentError};

pub trait EventStore: Send {
    /// Every persisted event, oldest first. Line numbers in errors are 1-based.
    fn load(&mut self) -> Result<Vec<Event>, ExperimentError>;
    /// Durably append one event.
    fn append(&mut self, event: &Event) -> Result<(), ExperimentError>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    pub lines: Vec<String>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

fn parse_line(line: &str, n: usize) -> Result<Event, ExperimentError> {
    serde_json::from_str(line).map_err(|e| ExperimentError::Replay { line: n, reason: e.to_string() })
}

impl EventStore for MemoryStore {
    fn load(&mut self) -> Result<Vec<Event>, ExperimentError> {
        self.lines.iter().enumerate().map(|(i, l)| parse_line(l, i + 1)).collect()
    }

    fn append(&mut self, event: &Event) -> Result<(), ExperimentError> {
        self.lines.push(serde_json::to_string(event)?);
        Ok(())
    }
}

/// One JSON event per line. A final line without a trailing newline is a
/// torn write from a crash; it is discarded and truncated away on load.
pub struct FileStore {
    path: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl FileStore {
    pub fn open(path: &Path) -> Result<Self, ExperimentError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(Self { path: path.to_path_buf(), writer: None })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn writer(&mut self) -> Result<&mut BufWriter<File>, ExperimentError> {
        if self.writer.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&self.path)?;
            self.writer = Some(BufWriter::new(f));
        }
        Ok(self.writer.as_mut().expect("just set"))
    }
}

impl EventStore for FileStore {
    fn load(&mut self) -> Result<Vec<Event>, ExperimentError> {
        self.writer = None;
        let raw = match fs::read_to_string(&self.path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let complete = raw.rfind('\n').map_or(0, |i| i + 1);
        if complete < raw.len() {
            tracing::warn!(path = %self.path.display(), "discarding torn final log line");
            let f = OpenOptions::new().write(true).open(&self.path)?;
            f.set_len(complete as u64)?;
        }
        raw[..complete]
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_line(l, i + 1))
            .collect()
    }

    fn append(&mut self, event: &Event) -> Result<(), ExperimentError> {
        let line = serde_json::to_string(event)?;
        let w = self.writer()?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Advances by one millisecond per reading.
#[derive(Debug, Default)]
pub struct TickClock(AtomicU64);

impl TickClock {
    pub fn starting_at(ms: u64) -> Self {
        Self(AtomicU64::new(ms))
    }
}

impl Clock for TickClock {
    fn now_ms(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}
