//! Artifact writers. Every CSV starts with `# replay: {json}` and every JSON
//! report carries a `replay` field; the embedded config reruns the command.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub struct OutputDir {
    dir: PathBuf,
    replay: ExperimentConfig,
    command: &'static str,
}

pub type CsvWriter = csv::Writer<BufWriter<File>>;

impl OutputDir {
    pub fn create(
        dir: PathBuf,
        replay: ExperimentConfig,
        command: &'static str,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            replay,
            command,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn header(&self) -> Value {
        json!({"command": self.command, "seed": self.replay.seed, "config": self.replay})
    }

    /// CSV writer whose first line is the replay comment, followed by `columns`.
    pub fn csv(&self, name: &str, columns: &[String]) -> Result<CsvWriter, CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| io(&path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# replay: {}", self.header()).map_err(|e| io(&path, e))?;
        let mut csv = csv::WriterBuilder::new().from_writer(w);
        csv.write_record(columns).map_err(|e| io(&path, e))?;
        Ok(csv)
    }

    /// Pretty JSON report `{command, seed, replay, result}`.
    pub fn report(&self, name: &str, result: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut doc = self.header();
        doc["result"] = serde_json::to_value(result).map_err(|e| CliError::Io(e.to_string()))?;
        self.json(name, &doc)
    }

    pub fn json(&self, name: &str, value: &Value) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

pub fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn finish(mut w: CsvWriter, name: &str) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::Io(format!("{name}: {e}")))
}

/// Appends one row; numbers are written in shortest round-trip form.
pub fn row(w: &mut CsvWriter, fields: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    w.write_record(fields)
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

/// `prefix_1..prefix_n`.
pub fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}
