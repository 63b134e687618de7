use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::failure::{CmdResult, Failure};

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: &'static str,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    /// Seconds per named phase.
    pub timings: BTreeMap<String, f64>,
    pub exit_code: i32,
    pub error: Option<String>,
    /// Command-specific results.
    pub summary: BTreeMap<String, Value>,
    #[serde(skip)]
    started: Option<Instant>,
    #[serde(skip)]
    phase: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: 0.0,
            timings: BTreeMap::new(),
            exit_code: 0,
            error: None,
            summary: BTreeMap::new(),
            started: Some(Instant::now()),
            phase: None,
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).unwrap_or(Value::Null);
        self.summary.insert(key.to_string(), value);
    }

    /// Starts timing `name`, closing any phase still open.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.phase.take() {
            *self.timings.entry(name).or_default() += t.elapsed().as_secs_f64();
        }
    }

    pub fn finish(&mut self, result: &CmdResult<()>) {
        self.end_phase();
        self.wall_clock_secs = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        if let Err(f) = result {
            self.exit_code = f.code;
            self.error = Some(f.message.clone());
        }
    }

    pub fn write(&self, path: &Path) -> CmdResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| Failure::io(path, e))
    }
}

/// `manifest.json` inside `dir`.
pub fn beside(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// `manifest.json` in the directory holding `file`.
pub fn next_to(file: &Path) -> PathBuf {
    beside(file.parent().unwrap_or(Path::new("")))
}
