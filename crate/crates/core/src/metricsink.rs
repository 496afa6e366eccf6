//! Per-node progress lines and CSV persistence of federation metrics.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "timestamp,node,round,task,name,value,weight";

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric {name} has non-finite value {value}")]
    NonFinite { name: String, value: f64 },
    #[error("metric {name} has non-finite or negative weight {weight}")]
    BadWeight { name: String, weight: f64 },
    #[error("round {round} is outside 0..{rounds_to_train}")]
    RoundOutOfRange { round: u32, rounds_to_train: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub timestamp: String,
    pub node: String,
    pub round: u32,
    pub task: String,
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

impl MetricRecord {
    pub fn new(
        node: impl Into<String>,
        round: u32,
        task: impl Into<String>,
        name: impl Into<String>,
        value: f64,
        weight: f64,
    ) -> Result<Self, MetricError> {
        Self::at(Utc::now(), node, round, task, name, value, weight)
    }

    pub fn at(
        timestamp: DateTime<Utc>,
        node: impl Into<String>,
        round: u32,
        task: impl Into<String>,
        name: impl Into<String>,
        value: f64,
        weight: f64,
    ) -> Result<Self, MetricError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(MetricError::NonFinite { name, value });
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(MetricError::BadWeight { name, weight });
        }
        Ok(MetricRecord {
            timestamp: timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            node: node.into(),
            round,
            task: task.into(),
            name,
            value,
            weight,
        })
    }

    pub fn log_line(&self) -> String {
        format!(
            "[{}] round={} {}/{}={} (w={})",
            self.node, self.round, self.task, self.name, self.value, self.weight
        )
    }
}

struct Inner {
    records: Vec<MetricRecord>,
    out: Box<dyn Write + Send>,
}

/// Collects records from any thread. Every emit prints one whole line.
pub struct MetricSink {
    rounds_to_train: Option<u32>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for MetricSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricSink")
            .field("rounds_to_train", &self.rounds_to_train)
            .field("records", &self.len())
            .finish()
    }
}

impl Default for MetricSink {
    fn default() -> Self {
        Self::with_writer(Box::new(io::stdout()))
    }
}

impl MetricSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records lines into `out` instead of stdout.
    pub fn with_writer(out: Box<dyn Write + Send>) -> Self {
        MetricSink {
            rounds_to_train: None,
            inner: Mutex::new(Inner {
                records: Vec::new(),
                out,
            }),
        }
    }

    /// A sink that prints nothing, only keeps records.
    pub fn quiet() -> Self {
        Self::with_writer(Box::new(io::sink()))
    }

    /// Rejects records whose round is not below `rounds`.
    pub fn bounded(mut self, rounds: u32) -> Self {
        self.rounds_to_train = Some(rounds);
        self
    }

    pub fn emit(&self, record: MetricRecord) -> Result<(), MetricError> {
        if let Some(rounds_to_train) = self.rounds_to_train {
            if record.round >= rounds_to_train {
                return Err(MetricError::RoundOutOfRange {
                    round: record.round,
                    rounds_to_train,
                });
            }
        }
        let mut line = record.log_line();
        line.push('\n');
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        // A broken console must not lose the record.
        let _ = inner.out.write_all(line.as_bytes());
        let _ = inner.out.flush();
        inner.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .records
            .clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every record so far to `path` atomically.
    pub fn flush_csv(&self, path: &Path) -> Result<(), MetricError> {
        write_csv(path, &self.records())
    }
}

pub fn write_csv(path: &Path, records: &[MetricRecord]) -> Result<(), MetricError> {
    let io_err = |source| MetricError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::Builder::new()
        .permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644))
        .tempfile_in(dir)
        .map_err(io_err)?;
    {
        let mut w = csv::Writer::from_writer(tmp.as_file());
        if records.is_empty() {
            w.write_record(CSV_HEADER.split(','))?;
        }
        for r in records {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord>, MetricError> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(Into::into)
}
