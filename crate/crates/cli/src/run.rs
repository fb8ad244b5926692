//! Timestamped run directories and their manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Sorted files under `dir`, recursively.
fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(entries) = fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    out
}

/// UTC `YYYYMMDD-HHMMSS` for a Unix timestamp.
pub fn timestamp(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    // days since 1970-01-01 to a civil date
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + (m <= 2) as i64;
    format!("{y:04}{m:02}{d:02}-{:02}{:02}{:02}", rem / 3600, rem / 60 % 60, rem % 60)
}

/// A fresh directory for one command invocation.
pub struct Run {
    pub dir: PathBuf,
    pub command: String,
    pub seed: u64,
    inputs: Vec<PathBuf>,
}

impl Run {
    /// Create `<out>/<command>-<timestamp>[-k]`; existing runs are never reused.
    pub fn create(out: &Path, command: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::from_io(out, e))?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let stem = format!("{command}-{}", timestamp(secs));
        let mut k = 1;
        loop {
            let name = if k == 1 { stem.clone() } else { format!("{stem}-{k}") };
            let dir = out.join(name);
            match fs::create_dir(&dir) {
                Ok(()) => {
                    return Ok(Self {
                        dir,
                        command: command.into(),
                        seed,
                        inputs: Vec::new(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(CliError::from_io(&dir, e)),
            }
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record an input file (or every file of an input directory).
    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::from_io(&p, e))?;
        Ok(p)
    }

    /// `manifest.toml`: command, version, seed, then every input and output
    /// file with its SHA-256.
    pub fn finish(&self) -> Result<PathBuf, CliError> {
        let mut m = String::new();
        let _ = writeln!(m, "command = \"{}\"", self.command);
        let _ = writeln!(m, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(m, "seed = {}", self.seed);
        let entries = |section: &str, files: Vec<PathBuf>, m: &mut String| -> Result<(), CliError> {
            for f in files {
                let _ = writeln!(m, "\n[[{section}]]");
                let shown = f.strip_prefix(&self.dir).unwrap_or(&f);
                let _ = writeln!(m, "path = {:?}", shown.display().to_string());
                let _ = writeln!(m, "sha256 = \"{}\"", sha256_file(&f)?);
            }
            Ok(())
        };
        let mut inputs = Vec::new();
        for p in &self.inputs {
            if p.is_dir() {
                inputs.extend(files_under(p));
            } else {
                inputs.push(p.clone());
            }
        }
        entries("inputs", inputs, &mut m)?;
        let outputs = files_under(&self.dir)
            .into_iter()
            .filter(|p| p.file_name().is_none_or(|n| n != "manifest.toml"))
            .collect();
        entries("outputs", outputs, &mut m)?;
        self.write("manifest.toml", m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_timestamps() {
        assert_eq!(timestamp(0), "19700101-000000");
        assert_eq!(timestamp(951_782_400), "20000229-000000");
        assert_eq!(timestamp(1_700_000_000), "20231114-221320");
    }

    #[test]
    fn runs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = Run::create(dir.path(), "bake", 0).unwrap();
        let b = Run::create(dir.path(), "bake", 0).unwrap();
        assert_ne!(a.dir, b.dir);
        a.write("x.txt", "hi").unwrap();
        let m = fs::read_to_string(a.finish().unwrap()).unwrap();
        assert!(m.contains("path = \"x.txt\""));
        assert!(m.contains("8f434346648f6b96df89dda901c5176b10a6d83961dd3c1ac88b59b2dc327aa4"));
    }
}
