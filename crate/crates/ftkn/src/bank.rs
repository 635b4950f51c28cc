//! Focal store shared between inference workers, with optional on-disk
//! spill of every stored frame.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use ftkn_core::geometry::PointSet;
use ftkn_core::memory::FocalStore;

use crate::error::{io_err, Result};
use crate::io::{decode_frame, encode_frame};

/// Readers take the lock shared; a frame becomes visible only once its
/// write has completed.
#[derive(Debug)]
pub struct SharedBank {
    store: RwLock<FocalStore>,
    spill_dir: Option<PathBuf>,
}

impl SharedBank {
    pub fn new(t_max: usize) -> Self {
        Self { store: RwLock::new(FocalStore::new(t_max)), spill_dir: None }
    }

    /// Also write each frame to `dir`, so frames evicted from memory stay
    /// readable.
    pub fn with_spill(t_max: usize, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { store: RwLock::new(FocalStore::new(t_max)), spill_dir: Some(dir.to_path_buf()) })
    }

    fn spill_path(&self, frame: usize) -> Option<PathBuf> {
        self.spill_dir.as_ref().map(|d| d.join(format!("frame_{frame:06}.bin")))
    }

    fn spill(&self, frame: usize, points: &PointSet) -> Result<()> {
        if let Some(path) = self.spill_path(frame) {
            let mut bytes = Vec::new();
            encode_frame(&mut bytes, frame, points, &[])?;
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn store(&self, frame: usize, focal: PointSet) -> Result<()> {
        let mut s = self.store.write().expect("bank lock");
        s.store(frame, focal)?;
        if let Some(e) = s.fetch(frame) {
            self.spill(frame, &e.points())?;
        }
        Ok(())
    }

    pub fn augment(&self, frame: usize, extras: &PointSet) -> Result<()> {
        let mut s = self.store.write().expect("bank lock");
        s.augment(frame, extras)?;
        if let Some(e) = s.fetch(frame) {
            self.spill(frame, &e.points())?;
        }
        Ok(())
    }

    /// Focal plus augmentation points of `frame`. Spilled frames come back
    /// with ids reassigned by row.
    pub fn fetch(&self, frame: usize) -> Result<Option<PointSet>> {
        if let Some(e) = self.store.read().expect("bank lock").fetch(frame) {
            return Ok(Some(e.points()));
        }
        match self.spill_path(frame) {
            Some(path) if path.exists() => {
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                Ok(Some(decode_frame(&bytes, &mut 0)?.cloud))
            }
            _ => Ok(None),
        }
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.store.read().expect("bank lock").contains(frame)
    }

    pub fn stored_points(&self) -> usize {
        self.store.read().expect("bank lock").stored_points()
    }

    pub fn peak_points(&self) -> usize {
        self.store.read().expect("bank lock").peak_points()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.store.read().expect("bank lock").frames().collect()
    }
}
