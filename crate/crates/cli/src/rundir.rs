//! Output directory handling: lockfile guard, manifest, results file.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use mixco_core::training::RunConfig;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.cfg";
pub const LOCK: &str = ".mixco.lock";

/// An output directory owned by this process until dropped.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(CliError::Locked { path: lock }),
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Refuses to write to any of `inputs`.
    pub fn check_not_input(&self, name: &str, inputs: &[&Path]) -> CliResult<PathBuf> {
        let target = self.path(name);
        for input in inputs {
            if same_file(&target, input) {
                return Err(CliError::Usage(format!(
                    "{} is an input of this run and would be overwritten; choose another --out",
                    input.display()
                )));
            }
        }
        Ok(target)
    }

    /// Writes the effective configuration; it parses back to the same config.
    pub fn write_manifest(&self, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> CliResult<()> {
        let path = self.check_not_input(MANIFEST, inputs)?;
        let text = format!("# mixco {command}\n{}", cfg.to_text());
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn append_line(&self, name: &str, line: &str) -> CliResult<()> {
        let path = self.path(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn read_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)
            .map_err(|e| CliError::Usage(format!("--set {o}: {e}")))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}
