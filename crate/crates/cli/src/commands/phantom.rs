//! `phantom`: generates one synthetic (pre, post, ground-truth) triple.

use std::path::Path;

use resect_core::phantom::generate_triple;

use crate::artifacts::ArtifactLog;
use crate::config::PipelineConfig;
use crate::errors::CliError;

pub fn run(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let (pre, post, gt) = generate_triple(&cfg.phantom)?;
    let mut log = ArtifactLog::new(out)?;
    log.write_json("spec.json", &cfg.phantom)?;
    log.write_volume("pre", &pre)?;
    log.write_volume("post", &post)?;
    log.write_volume("gt", &gt.to_volume(cfg.phantom.spacing_mm))?;
    log.write_manifest("ok", None)?;
    let [nx, ny, nz] = cfg.phantom.dims;
    println!(
        "phantom: wrote pre/post/gt ({nx}x{ny}x{nz}, removal fraction {:.4}) to {}",
        gt.foreground_fraction(),
        out.display()
    );
    Ok(())
}
