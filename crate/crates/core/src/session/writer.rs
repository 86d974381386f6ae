use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{EpisodeHeader, LogError, StepRecord};
use crate::canonical;

/// Append-only episode writer. Records must arrive with strictly increasing `t`.
pub struct EpisodeWriter<W: Write> {
    out: Option<BufWriter<W>>,
    last_t: Option<f64>,
    records: u64,
    flush_every: u32,
    since_flush: u32,
}

impl EpisodeWriter<File> {
    pub fn create(path: &Path, header: &EpisodeHeader, flush_every: u32) -> Result<Self, LogError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Self::new(File::create(path)?, header, flush_every)
    }
}

impl<W: Write> EpisodeWriter<W> {
    /// Writes the header line. `flush_every` is the number of records between
    /// flushes of the underlying sink (at least 1).
    pub fn new(sink: W, header: &EpisodeHeader, flush_every: u32) -> Result<Self, LogError> {
        let mut out = BufWriter::with_capacity(1 << 16, sink);
        canonical::write(&mut out, header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self {
            out: Some(out),
            last_t: None,
            records: 0,
            flush_every: flush_every.max(1),
            since_flush: 0,
        })
    }

    pub fn append_step(&mut self, record: &StepRecord) -> Result<(), LogError> {
        let out = self.out.as_mut().ok_or(LogError::Closed)?;
        if let Some(last) = self.last_t {
            if !(record.t > last) {
                return Err(LogError::Ordering { t: record.t, last });
            }
        }
        canonical::write(&mut *out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        self.last_t = Some(record.t);
        self.records += 1;
        self.since_flush += 1;
        if self.since_flush >= self.flush_every {
            out.flush()?;
            self.since_flush = 0;
        }
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn last_t(&self) -> Option<f64> {
        self.last_t
    }

    pub fn is_closed(&self) -> bool {
        self.out.is_none()
    }

    /// Flushes and closes; later appends fail with [`LogError::Closed`].
    pub fn close(&mut self) -> Result<(), LogError> {
        if let Some(mut out) = self.out.take() {
            out.flush()?;
        }
        Ok(())
    }

    /// Closes and hands back the sink.
    pub fn into_inner(mut self) -> Result<W, LogError> {
        let out = self.out.take().ok_or(LogError::Closed)?;
        out.into_inner().map_err(|e| LogError::Io(e.into_error()))
    }
}

impl<W: Write> Drop for EpisodeWriter<W> {
    fn drop(&mut self) {
        if let Some(out) = self.out.as_mut() {
            let _ = out.flush();
        }
    }
}
