use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub conversation: String,
    pub turn: u32,
    pub summary: String,
}

/// Destination for chat summaries, which never enter the cache.
pub trait SummarySink {
    fn record(&mut self, entry: SummaryEntry) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub entries: Vec<SummaryEntry>,
}

impl SummarySink for MemorySink {
    fn record(&mut self, entry: SummaryEntry) -> Result<()> {
        self.entries.push(entry);
        Ok(())
    }
}

/// Append-only JSON-lines file.
#[derive(Debug)]
pub struct JsonlSink {
    file: File,
}

impl JsonlSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }
}

impl SummarySink for JsonlSink {
    fn record(&mut self, entry: SummaryEntry) -> Result<()> {
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}
