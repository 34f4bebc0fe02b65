//! Provenance embedded in every artifact, and where artifacts go.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

#[derive(Debug, Clone)]
pub struct Provenance {
    pub version: &'static str,
    /// Re-runnable command line; always carries the effective seed.
    pub command: String,
    pub seed: u64,
    pub taint: Vec<String>,
    pub started: Instant,
}

impl Provenance {
    pub fn new(argv: &[String], seed: u64) -> Self {
        let mut toks: Vec<String> = vec!["hardchain".into()];
        let rest = &argv[1.min(argv.len())..];
        if !rest.iter().any(|a| a == "--seed" || a.starts_with("--seed=")) {
            toks.push("--seed".into());
            toks.push(seed.to_string());
        }
        toks.extend(rest.iter().cloned());
        Self { version: env!("CARGO_PKG_VERSION"), command: toks.join(" "), seed, taint: Vec::new(), started: Instant::now() }
    }

    pub fn with_taint(&self, taint: &[String]) -> Self {
        let mut p = self.clone();
        for t in taint {
            if !p.taint.contains(t) {
                p.taint.push(t.clone());
            }
        }
        p
    }

    pub fn to_json(&self) -> Value {
        json!({ "version": self.version, "command": self.command, "seed": self.seed, "taint": self.taint })
    }

    pub fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("version={}", self.version),
            format!("command={}", self.command),
            format!("seed={}", self.seed),
            format!("taint={}", self.taint.join(";")),
        ]
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

/// Timestamps live here only, so the artifact itself stays byte-reproducible.
pub fn sidecar(out: Option<&Path>, started: Instant) -> std::io::Result<()> {
    let Some(out) = out else { return Ok(()) };
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let meta = json!({ "created_unix_seconds": created, "elapsed_seconds": started.elapsed().as_secs_f64() });
    fs::write(sidecar_path(out), serde_json::to_string_pretty(&meta)? + "\n")
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
pub fn stdout(text: &str) -> std::io::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

pub struct Sink<'a> {
    out: Option<&'a Path>,
}

impl<'a> Sink<'a> {
    pub fn new(out: Option<&'a Path>) -> Self {
        Self { out }
    }

    pub fn text(&self, prov: &Provenance, text: &str) -> std::io::Result<()> {
        match self.out {
            Some(path) => {
                fs::write(path, text)?;
                sidecar(Some(path), prov.started)
            }
            None => stdout(text),
        }
    }

    /// Writes `{"provenance": …, …body}` as pretty JSON.
    pub fn json(&self, prov: &Provenance, body: Value) -> std::io::Result<()> {
        let mut doc = Map::new();
        doc.insert("provenance".into(), prov.to_json());
        match body {
            Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("result".into(), other);
            }
        }
        self.text(prov, &(serde_json::to_string_pretty(&Value::Object(doc))? + "\n"))
    }
}
