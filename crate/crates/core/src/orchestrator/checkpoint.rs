//! Digest-protected state snapshots: `{"digest": <sha256 of state>, "state": {...}}`.

use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::state::State;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize)]
struct Out<'a> {
    digest: String,
    state: &'a RawValue,
}

#[derive(Deserialize)]
struct In<'a> {
    digest: String,
    #[serde(borrow)]
    state: &'a RawValue,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_bytes(state: &State) -> Vec<u8> {
    let raw = serde_json::value::to_raw_value(state).expect("state serializes");
    let doc = Out { digest: digest(raw.get().as_bytes()), state: &raw };
    let mut bytes = serde_json::to_vec(&doc).expect("checkpoint serializes");
    bytes.push(b'\n');
    bytes
}

pub fn from_bytes(bytes: &[u8]) -> Result<State, CheckpointError> {
    let doc: In<'_> = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let actual = digest(doc.state.get().as_bytes());
    if actual != doc.digest {
        return Err(CheckpointError::Corrupt(format!("digest mismatch: recorded {}, computed {actual}", doc.digest)));
    }
    let state: State = serde_json::from_str(doc.state.get()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    state.tree.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(state)
}

/// Writes through a temporary sibling so a crash never leaves a partial file.
pub fn save(state: &State, path: &FsPath) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, to_bytes(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &FsPath) -> Result<State, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

/// Recorded and recomputed digest of a checkpoint file's state.
pub fn digests(bytes: &[u8]) -> Result<(String, String), CheckpointError> {
    let doc: In<'_> = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok((doc.digest.clone(), digest(doc.state.get().as_bytes())))
}
