//! Per-module state snapshots: one TOML file per module, replaced atomically.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmc_core::topology::CHILD_SLOTS;
use vmc_core::NodeVmcState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub module: String,
    pub state: NodeVmcState,
    /// Which leaf slots relayed a live child when the snapshot was taken.
    pub slot_occupancy: Vec<bool>,
    pub iteration: u64,
    pub written_at: String,
}

impl StateSnapshot {
    pub fn is_consistent(&self) -> bool {
        self.state.is_consistent()
            && self.state.child_slots() == CHILD_SLOTS as usize
            && self.slot_occupancy.len() == self.state.child_slots()
    }
}

/// Result of loading a module's snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Found(StateSnapshot),
    /// No snapshot exists; start cold.
    Missing,
    /// A snapshot exists but cannot be used; start cold and report why.
    Corrupt(String),
}

impl Loaded {
    /// State to boot from plus the iteration counter to continue at.
    pub fn into_state(self) -> (NodeVmcState, u64) {
        match self {
            Loaded::Found(s) => (s.state, s.iteration),
            _ => (NodeVmcState::cold_start(CHILD_SLOTS as usize), 0),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("encode: {0}")]
    Encode(#[from] toml::ser::Error),
}

/// Directory of snapshot files.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    dir: PathBuf,
}

impl SnapshotStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SnapshotError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(SnapshotStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, module: &str) -> PathBuf {
        self.dir.join(format!("{module}.toml"))
    }

    fn tmp_path_of(&self, module: &str) -> PathBuf {
        self.dir.join(format!("{module}.toml.tmp"))
    }

    /// Writes the new snapshot beside the old one, then renames it into place.
    /// A process crash at any point leaves either the old or the new file.
    pub fn write(&self, snapshot: &StateSnapshot) -> Result<(), SnapshotError> {
        let text = toml::to_string(snapshot)?;
        let tmp = self.tmp_path_of(&snapshot.module);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
        }
        fs::rename(&tmp, self.path_of(&snapshot.module))?;
        Ok(())
    }

    /// Writes with a few retries before giving up.
    pub fn write_with_retry(&self, snapshot: &StateSnapshot, attempts: u32) -> Result<(), SnapshotError> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match self.write(snapshot) {
                Ok(()) => return Ok(()),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn load(&self, module: &str) -> Loaded {
        let text = match fs::read_to_string(self.path_of(module)) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Loaded::Missing,
            Err(e) => return Loaded::Corrupt(e.to_string()),
        };
        match toml::from_str::<StateSnapshot>(&text) {
            Ok(s) if s.module != module => Loaded::Corrupt(format!("snapshot belongs to {}", s.module)),
            Ok(s) if !s.is_consistent() => Loaded::Corrupt("inconsistent slot bookkeeping".into()),
            Ok(s) => Loaded::Found(s),
            Err(e) => Loaded::Corrupt(e.to_string()),
        }
    }

    pub fn remove(&self, module: &str) -> Result<(), SnapshotError> {
        match fs::remove_file(self.path_of(module)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}
