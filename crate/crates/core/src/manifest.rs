//! Run manifests: enough recorded state to re-run a command
//! bit-identically. Plain ordered `key: value` text.

use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::Path;
use std::time::Duration;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        let mut m = Self::default();
        m.add("tool_version", TOOL_VERSION);
        m.add("command", command);
        m.add("argv", &argv.join(" "));
        m
    }

    pub fn add(&mut self, key: &str, value: &str) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn add_multiline(&mut self, key: &str, value: &str) {
        // indent continuation lines so the file stays line-parseable
        let indented = value.replace('\n', "\n    ");
        self.entries.push((key.to_string(), indented));
    }

    pub fn add_file_hash(&mut self, label: &str, path: &Path) -> io::Result<()> {
        let hash = sha256_file(path)?;
        self.add(
            &format!("sha256.{label}"),
            &format!("{hash}  {}", path.display()),
        );
        Ok(())
    }

    pub fn add_timing(&mut self, label: &str, d: Duration) {
        self.add(&format!("seconds.{label}"), &format!("{:.3}", d.as_secs_f64()));
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# run manifest\n");
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.render())
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}
