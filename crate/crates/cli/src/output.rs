//! All writes go through [`OutputDir`], which only accepts plain relative
//! paths below its root.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use crate::error::{io_err, CliError, Result};

/// Environment variable overriding the directory experiment outputs live under.
pub const OUTPUT_ROOT_ENV: &str = "MLIRL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputDir {
    root: PathBuf,
}

/// Accepts only relative paths made of normal components (and `.`).
pub fn check_relative(rel: &Path) -> Result<()> {
    let ok = !rel.as_os_str().is_empty()
        && rel
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(CliError::OutsideOutput(rel.to_path_buf()))
    }
}

impl OutputDir {
    /// `root/rel`, created if missing. `rel` must stay below `root`.
    pub fn create(root: &Path, rel: &Path) -> Result<Self> {
        check_relative(rel)?;
        let dir = root.join(rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { root: dir })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Location of `rel` inside this directory; nothing is created.
    pub fn file(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        check_relative(rel.as_ref())?;
        Ok(self.root.join(rel))
    }

    pub fn subdir(&self, rel: impl AsRef<Path>) -> Result<Self> {
        Self::create(&self.root, rel.as_ref())
    }

    /// Write through a temporary sibling and rename, so readers never see a
    /// half-written file.
    pub fn write_atomic(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.file(rel.as_ref())?;
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut tmp_name = target.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = target.with_file_name(tmp_name);
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(bytes).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        Ok(target)
    }

    pub fn write_json<T: serde::Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| CliError::Json {
            path: self.root.join(rel),
            source,
        })?;
        bytes.push(b'\n');
        self.write_atomic(rel, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_escaping_paths() {
        for bad in ["../x", "/abs", "a/../../b", ""] {
            assert!(check_relative(Path::new(bad)).is_err(), "{bad}");
        }
        for good in ["a", "a/b.json", "./run"] {
            assert!(check_relative(Path::new(good)).is_ok(), "{good}");
        }
    }

    #[test]
    fn atomic_write_stays_inside() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutputDir::create(tmp.path(), Path::new("exp")).unwrap();
        let p = out.write_atomic("sub/f.txt", b"hi").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hi");
        assert!(p.starts_with(tmp.path().join("exp")));
        assert!(out.write_atomic("../f.txt", b"no").is_err());
        assert!(!tmp.path().join("f.txt").exists());
    }
}
