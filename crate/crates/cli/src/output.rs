//! Artifact writing. Every JSON file is `{"payload": ..., "metadata": ...}`;
//! the payload depends only on config and seed, the metadata carries the
//! wall-clock time and the execution settings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use degenhedge::Result;
use serde::Serialize;
use serde_json::json;

pub struct Sink {
    pub dir: PathBuf,
    pub workers: usize,
    pub command: &'static str,
}

impl Sink {
    pub fn new(dir: PathBuf, workers: usize, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, workers, command })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf> {
        let doc = json!({
            "payload": payload,
            "metadata": {
                "command": self.command,
                "timestamp": chrono::Utc::now().to_rfc3339(),
                "version": env!("CARGO_PKG_VERSION"),
                "workers": self.workers,
            }
        });
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| degenhedge::Error::Io(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn csv(&self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        write(&mut w)?;
        w.flush()?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

/// Reads the payload of a JSON artifact.
pub fn read_payload(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| degenhedge::Error::Schema(format!("{}: {e}", path.display())))?;
    doc.get_mut("payload")
        .map(serde_json::Value::take)
        .ok_or_else(|| degenhedge::Error::Schema(format!("{}: no payload", path.display())))
}

/// Two-column table on standard output.
pub fn table(title: &str, rows: &[(&str, String)]) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    println!("{title}");
    for (k, v) in rows {
        println!("  {k:<width$}  {v}");
    }
}
