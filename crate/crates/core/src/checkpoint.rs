//! Task-boundary persistence.
//!
//! A checkpoint captures everything a run needs to continue: model, buffer,
//! and the record accumulated so far. Randomness is derived from
//! `(root_seed, purpose, indices)` at the point of use, so no generator
//! state is stored; [`crate::train::continue_sequence`] from a loaded
//! checkpoint is bitwise identical to the uninterrupted run.
//!
//! Format: a single JSON document. f64 values serialize as their shortest
//! exact decimal representation, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::replay::ReplayBuffer;
use crate::train::RunRecord;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub root_seed: u64,
    /// Tasks completed; equals `record.outcomes.len()`.
    pub tasks_done: usize,
    pub model: ModelParams,
    pub buffer: ReplayBuffer,
    pub record: RunRecord,
}

impl Checkpoint {
    /// Snapshot of a run after its last completed task.
    pub fn new(model: ModelParams, buffer: ReplayBuffer, record: RunRecord) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            root_seed: record.root_seed,
            tasks_done: record.outcomes.len(),
            model,
            buffer,
            record,
        }
    }
}

pub fn to_json(cp: &Checkpoint) -> Result<String> {
    Ok(serde_json::to_string(cp)?)
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    // Peek at the version before strict decoding, so a newer format fails
    // with a version message instead of a schema error.
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.format_version > FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let cp: Checkpoint = serde_json::from_str(text)?;
    if cp.tasks_done != cp.record.outcomes.len() {
        return Err(Error::Config(format!(
            "checkpoint claims {} tasks done but records {}",
            cp.tasks_done,
            cp.record.outcomes.len()
        )));
    }
    Ok(cp)
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    fs::write(path, to_json(cp)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_json(&fs::read_to_string(path)?)
}
