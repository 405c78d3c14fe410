//! Output directories are filled under a hidden staging name and renamed into
//! place only when the command succeeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rvekit_core::dataio::sha256_file;
use rvekit_core::{CoreError, Result};

pub struct Staged {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
}

impl Staged {
    pub fn new(target: PathBuf, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(CoreError::Config(format!(
                "output directory {} exists (use --force to replace it)",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CoreError::Config(format!("bad output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir_all(&staging)?;
        Ok(Self { target, staging, force })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    /// SHA-256 of every file written so far, keyed by relative path.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.staging.clone()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(&self.staging).unwrap().to_string_lossy().replace('\\', "/");
                    out.insert(rel, sha256_file(&p)?);
                }
            }
        }
        Ok(out)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(CoreError::Config(format!("{} appeared while running", self.target.display())));
            }
            std::fs::remove_dir_all(&self.target)?;
        }
        std::fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }

    pub fn abandon(self) {
        let _ = std::fs::remove_dir_all(&self.staging);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_and_refuses_overwrite() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        let s = Staged::new(target.clone(), false).unwrap();
        std::fs::write(s.path().join("a.txt"), "x").unwrap();
        assert!(!target.exists());
        assert_eq!(s.hashes().unwrap().len(), 1);
        s.commit().unwrap();
        assert!(target.join("a.txt").exists());
        assert!(Staged::new(target.clone(), false).is_err());
        let s = Staged::new(target.clone(), true).unwrap();
        s.commit().unwrap();
        assert!(!target.join("a.txt").exists());
    }
}
