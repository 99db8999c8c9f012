//! Estimation of surgically removed regions in paired CT volumes.
//!
//! Given a preoperative volume and a (noisy, possibly misaligned) postoperative
//! volume of the same anatomy, this crate estimates a per-voxel removal
//! probability field without any labeled training data. The masked preoperative
//! volume is optimized to match the postoperative volume under a multi-scale
//! structural similarity criterion augmented with squared cross-correlation,
//! plus a smoothness penalty on the probability field.
//!
//! Modules:
//! - [`volume`]: dense 3-D scalar volumes, intensity normalization, filtering,
//!   downsampling, and file I/O.
//! - [`phantom`]: synthetic bone phantoms with known removal regions, for
//!   end-to-end validation at desk scale.
//! - [`registration`]: rigid alignment of the postoperative volume.
//! - [`similarity`]: the masking operator, similarity losses, and their
//!   analytic gradients.
//! - [`optimize`]: Adam-based optimization of the removal probability field.
//! - [`metrics`]: overlap and surface-distance evaluation against a reference
//!   mask.
//! - [`mesh`]: marching-cubes surface extraction and STL/OBJ export.

pub mod mesh;
pub(crate) mod mesh_tables;
pub mod metrics;
pub mod optimize;
pub mod phantom;
pub mod registration;
#[path = "similarity/mod.rs"]
pub mod similarity;
pub mod volume;

pub(crate) mod util;
