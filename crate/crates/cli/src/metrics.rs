//! Append-only CSV metrics with a config-hash comment line.
//!
//! Every row's first column is the step counter. Resuming from a checkpoint
//! at step `s` drops rows with step > `s` before appending, so an
//! interrupted and resumed run ends with the same file as an uninterrupted
//! one.

use sbgan_core::{Error, Result};
use serde::Serialize;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

fn header_line<R: Serialize + Default>() -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(R::default()).map_err(|e| Error::State(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
    let text = String::from_utf8(bytes).expect("utf8");
    Ok(text.lines().next().unwrap_or_default().to_string())
}

fn row_line<R: Serialize>(row: &R) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(row).map_err(|e| Error::State(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf8"))
}

impl MetricsLog {
    /// Fresh log (truncates), or a resumed one keeping rows up to `resume_step`.
    pub fn open<R: Serialize + Default>(path: &Path, config_hash: &str, resume_step: Option<u64>) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let comment = format!("# config_hash={config_hash}");
        let header = header_line::<R>()?;
        let mut keep = vec![comment.clone(), header.clone()];
        if let Some(s) = resume_step {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = text.lines();
            if lines.next() != Some(comment.as_str()) {
                return Err(Error::Load(format!("{} was written by a different run config", path.display())));
            }
            if lines.next() != Some(header.as_str()) {
                return Err(Error::Load(format!("{} has an unexpected header", path.display())));
            }
            for l in lines {
                let step: u64 = l
                    .split(',')
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Load(format!("bad metrics row in {}: {l}", path.display())))?;
                if step <= s {
                    keep.push(l.to_string());
                }
            }
        }
        let mut text = keep.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), file })
    }

    pub fn append<R: Serialize>(&mut self, row: &R) -> Result<()> {
        let line = row_line(row)?;
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Write a whole table at once (used for the ablation report).
pub fn write_table<R: Serialize>(path: &Path, config_hash: &str, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::State(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
    let mut out = format!("# config_hash={config_hash}\n").into_bytes();
    out.extend(body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Default)]
    struct Row {
        step: u64,
        loss: f64,
    }

    #[test]
    fn resume_truncates_rows_past_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::open::<Row>(&p, "abc", None).unwrap();
        for s in 1..=4 {
            log.append(&Row { step: s, loss: 0.5 * s as f64 }).unwrap();
        }
        let full = fs::read_to_string(&p).unwrap();
        let mut log = MetricsLog::open::<Row>(&p, "abc", Some(2)).unwrap();
        for s in 3..=4 {
            log.append(&Row { step: s, loss: 0.5 * s as f64 }).unwrap();
        }
        assert_eq!(fs::read_to_string(&p).unwrap(), full);
        assert!(full.starts_with("# config_hash=abc\nstep,loss\n1,0.5\n"));
        assert!(MetricsLog::open::<Row>(&p, "other", Some(2)).is_err());
    }
}
