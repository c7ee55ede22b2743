//! Versioned output paths: a rerun writes `name.2.ext`, `name.3.ext`, ...
//! instead of replacing an earlier result.

use std::path::{Path, PathBuf};

fn candidate(dir: &Path, stem: &str, ext: &str, n: u32) -> PathBuf {
    if n == 1 {
        dir.join(format!("{stem}.{ext}"))
    } else {
        dir.join(format!("{stem}.{n}.{ext}"))
    }
}

/// Smallest version of `stem` for which none of `exts` exists yet.
pub fn next_version(dir: &Path, stem: &str, exts: &[&str]) -> u32 {
    (1..)
        .find(|&n| exts.iter().all(|ext| !candidate(dir, stem, ext, n).exists()))
        .expect("unbounded range")
}

pub fn versioned(dir: &Path, stem: &str, ext: &str, n: u32) -> PathBuf {
    candidate(dir, stem, ext, n)
}

/// Newest existing version of `stem.ext`, if any.
pub fn latest(dir: &Path, stem: &str, ext: &str) -> Option<PathBuf> {
    let mut n = 1;
    let mut found = None;
    loop {
        let p = candidate(dir, stem, ext, n);
        if !p.exists() {
            return found;
        }
        found = Some(p);
        n += 1;
    }
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
