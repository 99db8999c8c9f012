//! `mesh`: extracts an iso-surface from a stored volume.

use std::path::Path;

use resect_core::mesh::{marching_cubes, write_obj, write_stl};
use resect_core::volume::read_volume;

use crate::artifacts::ArtifactLog;
use crate::errors::CliError;

pub fn run(volume: &Path, iso: f64, out: &Path) -> Result<(), CliError> {
    let v = read_volume(volume)?;
    let mesh = marching_cubes(&v, iso)?;
    let stem = volume
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();

    let mut log = ArtifactLog::new(out)?;
    write_stl(&mesh, &log.root().join(format!("{stem}.stl")))?;
    log.record(&format!("{stem}.stl"))?;
    write_obj(&mesh, &log.root().join(format!("{stem}.obj")))?;
    log.record(&format!("{stem}.obj"))?;
    log.write_manifest("ok", None)?;
    println!(
        "mesh at iso {iso}: {} vertices, {} triangles",
        mesh.vertices().len(),
        mesh.triangles().len()
    );
    Ok(())
}
