//! File formats: rig, camera, target and pose JSON documents.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64`.

mod cameras;
mod pose;
mod rig;
mod targets;

pub use cameras::{CameraDoc, CamerasDoc};
pub use pose::{BoneRotationDoc, PoseDoc, ViewRootDoc};
pub use rig::{BindingDoc, BoneDoc, LoadedRig, RigDoc};
pub use targets::{TargetKeypointDoc, TargetViewDoc, TargetsDoc};

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        context: format!("cannot read {what} '{}'", path.display()),
        source,
    })
}

/// Parses JSON, naming the offending field path on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Json { context: format!("{what}, field `{path}`"), source: e.into_inner() }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    parse_json(&read_text(path, what)?, what)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable document");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn finite3(v: [f64; 3], field: &str) -> Result<[f64; 3]> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::invalid(format!("{field}: non-finite component")))
    }
}
