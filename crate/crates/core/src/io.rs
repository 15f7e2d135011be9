//! File artifacts: atomic CSV writing and the versioned binary event log.
//!
//! Every artifact is written to a temporary file in the destination
//! directory and renamed into place, so re-running a scenario overwrites
//! outputs atomically. CSV writers validate the column count of every row
//! against the header at write time.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::measurement::{DetectionEvent, DetectorId, OriginKind};
use crate::protocol::Ticks;

/// Magic bytes of the binary event log.
pub const EVENT_LOG_MAGIC: [u8; 4] = *b"TFEV";
/// Current event log format version.
pub const EVENT_LOG_VERSION: u16 = 1;

/// CSV table writer with schema validation and atomic rename-on-finish.
pub struct CsvWriter {
    path: PathBuf,
    tmp_path: PathBuf,
    writer: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<CsvWriter> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp_path = tmp_sibling(&path);
        let mut writer = BufWriter::new(File::create(&tmp_path)?);
        writeln!(writer, "{}", header.join(","))?;
        Ok(CsvWriter {
            path,
            tmp_path,
            writer,
            columns: header.len(),
        })
    }

    pub fn write_row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Pipeline(format!(
                "csv row has {} fields, header declares {} ({})",
                fields.len(),
                self.columns,
                self.path.display()
            )));
        }
        writeln!(self.writer, "{}", fields.join(","))?;
        Ok(())
    }

    /// Flush and atomically move the table into place.
    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        drop(self.writer);
        fs::rename(&self.tmp_path, &self.path)?;
        Ok(())
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write a detection-event stream as the versioned binary log: an 8-byte
/// header (magic, version u16 LE, reserved u16) followed by 9-byte records
/// of (timestamp i64 LE in 0.1 ns ticks, detector u8). The simulator-truth
/// origin tag is deliberately not part of the on-disk protocol data.
pub fn write_event_log(path: impl AsRef<Path>, events: &[DetectionEvent]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_sibling(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&EVENT_LOG_MAGIC)?;
        w.write_all(&EVENT_LOG_VERSION.to_le_bytes())?;
        w.write_all(&[0u8; 2])?;
        for e in events {
            w.write_all(&e.time.to_le_bytes())?;
            w.write_all(&[detector_code(e.detector)])?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a binary event log written by [`write_event_log`]. Origin tags are
/// not stored, so all events come back tagged [`OriginKind::Signal`].
pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<DetectionEvent>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut header = [0u8; 8];
    r.read_exact(&mut header)?;
    if header[0..4] != EVENT_LOG_MAGIC {
        return Err(Error::Pipeline("event log: bad magic".to_string()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != EVENT_LOG_VERSION {
        return Err(Error::Pipeline(format!(
            "event log: unsupported version {version}"
        )));
    }
    let mut events = Vec::new();
    let mut rec = [0u8; 9];
    loop {
        match r.read_exact(&mut rec) {
            Ok(()) => {
                let time = Ticks::from_le_bytes(rec[0..8].try_into().unwrap());
                let detector = detector_from_code(rec[8])?;
                events.push(DetectionEvent {
                    time,
                    detector,
                    origin: OriginKind::Signal,
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(events)
}

fn detector_code(d: DetectorId) -> u8 {
    match d {
        DetectorId::D0 => 0,
        DetectorId::D1 => 1,
        DetectorId::ProbeA => 2,
        DetectorId::ProbeB => 3,
    }
}

fn detector_from_code(c: u8) -> Result<DetectorId> {
    Ok(match c {
        0 => DetectorId::D0,
        1 => DetectorId::D1,
        2 => DetectorId::ProbeA,
        3 => DetectorId::ProbeB,
        other => {
            return Err(Error::Pipeline(format!(
                "event log: unknown detector code {other}"
            )))
        }
    })
}

/// Export events as CSV (timestamp_ticks, detector).
pub fn write_event_csv(path: impl AsRef<Path>, events: &[DetectionEvent]) -> Result<()> {
    let mut w = CsvWriter::create(path, &["timestamp_ticks", "detector"])?;
    for e in events {
        w.write_row(&[e.time.to_string(), format!("{:?}", e.detector)])?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.bin");
        let events = vec![
            DetectionEvent {
                time: 0,
                detector: DetectorId::D0,
                origin: OriginKind::Signal,
            },
            DetectionEvent {
                time: 123_456_789_012,
                detector: DetectorId::ProbeB,
                origin: OriginKind::Dark,
            },
        ];
        write_event_log(&path, &events).unwrap();
        let back = read_event_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].time, 0);
        assert_eq!(back[1].time, 123_456_789_012);
        assert_eq!(back[1].detector, DetectorId::ProbeB);
    }

    #[test]
    fn csv_rejects_wrong_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = CsvWriter::create(&path, &["a", "b"]).unwrap();
        assert!(w.write_row(&["1".into()]).is_err());
        assert!(w.write_row(&["1".into(), "2".into()]).is_ok());
        w.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,2\n");
    }

    #[test]
    fn csv_overwrites_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        for val in ["1", "2"] {
            let mut w = CsvWriter::create(&path, &["a"]).unwrap();
            w.write_row(&[val.to_string()]).unwrap();
            w.finish().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a\n2\n");
    }
}
