//! `register`: rigid alignment of a moving volume onto a fixed one.

use std::path::Path;

use serde::Serialize;

use resect_core::registration::{register_rigid, resample, RigidTransform};
use resect_core::volume::read_volume;

use crate::artifacts::ArtifactLog;
use crate::errors::CliError;

/// Contents of `transform.json`.
#[derive(Debug, Serialize)]
pub struct TransformReport {
    #[serde(flatten)]
    pub transform: RigidTransform,
    pub ncc: f64,
}

pub fn run(fixed: &Path, moving: &Path, levels: usize, out: &Path) -> Result<(), CliError> {
    let fixed_v = read_volume(fixed)?;
    let moving_v = read_volume(moving)?;
    let (transform, ncc) = register_rigid(&fixed_v, &moving_v, levels)?;
    let mut log = ArtifactLog::new(out)?;
    log.write_json("transform.json", &TransformReport { transform, ncc })?;
    log.write_volume("registered", &resample(&moving_v, &transform, &fixed_v))?;
    log.write_manifest("ok", None)?;
    println!(
        "register: ncc {ncc:.6}, rotation {:?} rad, translation {:?} mm",
        transform.rotation, transform.translation
    );
    Ok(())
}
