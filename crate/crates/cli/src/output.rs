//! Atomic artifact writes: each file is written to a hidden temp sibling,
//! synced, then renamed over the final name.
//!
//! `LIPARCH_FAULT` injects a crash for testing. `before_rename:<file>` exits
//! after the temp file for `<file>` is complete; `mid_write:<file>` exits after
//! half of it is written. `*` matches every file.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub const FAULT_ENV: &str = "LIPARCH_FAULT";
/// Exit status of an injected crash.
pub const FAULT_EXIT: i32 = 86;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Fault {
    MidWrite(String),
    BeforeRename(String),
}

impl Fault {
    fn from_env() -> Option<Fault> {
        let v = std::env::var(FAULT_ENV).ok()?;
        let (stage, file) = v.split_once(':')?;
        match stage {
            "mid_write" => Some(Fault::MidWrite(file.into())),
            "before_rename" => Some(Fault::BeforeRename(file.into())),
            _ => None,
        }
    }

    fn hits(pattern: &str, name: &str) -> bool {
        pattern == "*" || pattern == name
    }
}

pub struct OutputDir {
    dir: PathBuf,
    fault: Option<Fault>,
}

fn temp_name(name: &str) -> String {
    format!(".{name}.tmp")
}

impl OutputDir {
    /// Creates the directory and clears temp files left by a crashed run.
    pub fn create(dir: &Path) -> io::Result<OutputDir> {
        fs::create_dir_all(dir)?;
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with('.') && name.ends_with(".tmp") {
                fs::remove_file(entry.path())?;
            }
        }
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            fault: Fault::from_env(),
        })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        let tmp = self.dir.join(temp_name(name));
        let target = self.dir.join(name);
        let result = self.write_temp(&tmp, name, bytes).and_then(|()| {
            if let Some(Fault::BeforeRename(p)) = &self.fault {
                if Fault::hits(p, name) {
                    crash();
                }
            }
            fs::rename(&tmp, &target)
        });
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(io::Error::new(e.kind(), format!("{}: {e}", target.display())));
        }
        Ok(target)
    }

    fn write_temp(&self, tmp: &Path, name: &str, bytes: &[u8]) -> io::Result<()> {
        let mut f = File::create(tmp)?;
        if let Some(Fault::MidWrite(p)) = &self.fault {
            if Fault::hits(p, name) {
                f.write_all(&bytes[..bytes.len() / 2])?;
                f.sync_all()?;
                crash();
            }
        }
        f.write_all(bytes)?;
        f.sync_all()
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> io::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

fn crash() -> ! {
    eprintln!("liparch: injected fault");
    std::process::exit(FAULT_EXIT)
}
