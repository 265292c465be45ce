//! Subject directories on disk: `har.fvol`, `lar.fvol`, `wm.fvol`,
//! `brain.fvol` under `subject_NNN/`.

use std::path::{Path, PathBuf};

use super::fvol::{read_mask, read_volume, write_mask, write_volume};
use super::phantom::Subject;
use crate::error::{Error, Result};

pub fn subject_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("subject_{index:03}"))
}

pub fn write_subject(dir: &Path, s: &Subject) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&s.har, &dir.join("har.fvol"))?;
    write_volume(&s.lar, &dir.join("lar.fvol"))?;
    write_mask(&s.wm, &dir.join("wm.fvol"))?;
    write_mask(&s.brain, &dir.join("brain.fvol"))
}

pub fn read_subject(dir: &Path) -> Result<Subject> {
    Ok(Subject {
        har: read_volume(&dir.join("har.fvol"))?,
        lar: read_volume(&dir.join("lar.fvol"))?,
        wm: read_mask(&dir.join("wm.fvol"))?,
        brain: read_mask(&dir.join("brain.fvol"))?,
    })
}

pub fn write_dataset(root: &Path, subjects: &[Subject]) -> Result<()> {
    for (i, s) in subjects.iter().enumerate() {
        write_subject(&subject_dir(root, i), s)?;
    }
    Ok(())
}

/// Reads every `subject_*` directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<Subject>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.file_name().to_string_lossy().starts_with("subject_") && e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Usage(format!("no subject_* directories in {}", root.display())));
    }
    dirs.iter().map(|d| read_subject(d)).collect()
}
