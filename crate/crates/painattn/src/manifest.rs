//! Per-run manifests.
//!
//! The `[config]` section holds every resolved setting, so passing a manifest
//! back through `--config` repeats the run. Result sections follow it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone)]
pub struct Manifest {
    text: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut text = String::from("# painattn run manifest\n[config]\n");
        for (k, v) in cfg.to_kv() {
            let _ = writeln!(text, "{k}={v}");
        }
        let _ = writeln!(
            text,
            "[run]\ncommand={command}\nversion={}",
            env!("CARGO_PKG_VERSION")
        );
        Self { text }
    }

    /// Appends a section of `key=value` pairs.
    pub fn section<K: AsRef<str>, V: AsRef<str>>(
        &mut self,
        name: &str,
        entries: impl IntoIterator<Item = (K, V)>,
    ) {
        let _ = writeln!(self.text, "[{name}]");
        for (k, v) in entries {
            let _ = writeln!(self.text, "{}={}", k.as_ref(), v.as_ref());
        }
    }

    /// Appends a section whose body is already formatted.
    pub fn block(&mut self, name: &str, body: &str) {
        let _ = writeln!(self.text, "[{name}]");
        self.text.push_str(body);
        if !body.ends_with('\n') {
            self.text.push('\n');
        }
    }

    pub fn finish(mut self, elapsed: Duration) -> String {
        let _ = writeln!(
            self.text,
            "[timing]\nwall_time_secs={:.3}",
            elapsed.as_secs_f64()
        );
        self.text
    }
}

pub fn write_text(path: &Path, text: &str) -> AppResult<()> {
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}
