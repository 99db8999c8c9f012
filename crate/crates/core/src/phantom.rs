//! Synthetic bone phantoms with a known removal region.
//!
//! A phantom triple consists of a preoperative volume (ellipsoidal bone body
//! with air-cell cavities on an air background), a binary ground-truth removal
//! mask (overlapping spheres carved out of bone), and a postoperative volume
//! (removal region blended toward air, plus Gaussian noise, bright line
//! artifacts, a low-frequency fluid field in the lower half of the cavity, and
//! an optional rigid misalignment).
//!
//! All randomness is counter-based: every draw is a pure hash of
//! (seed, stream id, counter), so generation is order-independent and
//! bitwise reproducible for a given spec.

use serde::{Deserialize, Serialize};

use crate::registration::{resample, RigidTransform};
use crate::volume::{Volume3, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place removal blob inside bone after {attempts} attempts")]
    BlobPlacement { attempts: usize },
    #[error(
        "removal mask foreground fraction {fraction:.4} stayed outside [0.02, 0.35] after {regens} regenerations"
    )]
    MaskFraction { fraction: f64, regens: usize },
    #[error("dims mismatch: phantom {expected:?} vs input {actual:?}")]
    DimsMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Parameters of a synthetic phantom. All outputs are pure functions of this
/// struct (the seed covers every stochastic choice).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub seed: u64,
    /// Bone intensity in [0, 1].
    pub bone_level: f64,
    /// Background / air-cell intensity in [0, 1].
    pub air_level: f64,
    pub removal_blob_count: usize,
    /// Blob radius range as a fraction of the smallest dim.
    pub removal_radius_frac: [f64; 2],
    /// Std of the additive Gaussian noise on the postoperative volume.
    pub noise_sigma: f64,
    /// Number of bright 1-voxel line artifacts near the cavity.
    pub artifact_count: usize,
    /// Artifact intensity; may exceed 1 before the final clamp (<= 1.5).
    pub artifact_level: f64,
    /// Amplitude of the low-frequency fluid field in the lower cavity half.
    pub fluid_amplitude: f64,
    /// Rigid misalignment applied to the postoperative volume, if any.
    pub misalignment: Option<RigidTransform>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            spacing_mm: [1.0, 1.0, 1.0],
            seed: 0,
            bone_level: 0.85,
            air_level: 0.05,
            removal_blob_count: 3,
            removal_radius_frac: [0.20, 0.28],
            noise_sigma: 0.05,
            artifact_count: 3,
            artifact_level: 1.0,
            fluid_amplitude: 0.15,
            misalignment: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let err = |msg: String| Err(PhantomError::InvalidSpec(msg));
        if self.dims.iter().any(|&d| d < 8) {
            return err(format!("dims must each be >= 8, got {:?}", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return err(format!("spacing must be positive, got {:?}", self.spacing_mm));
        }
        for (name, v) in [
            ("bone_level", self.bone_level),
            ("air_level", self.air_level),
            ("noise_sigma", self.noise_sigma),
            ("fluid_amplitude", self.fluid_amplitude),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..=1.5).contains(&self.artifact_level) {
            return err(format!(
                "artifact_level must be in [0, 1.5] (pre-clamp), got {}",
                self.artifact_level
            ));
        }
        if self.bone_level <= self.air_level {
            return err(format!(
                "bone_level ({}) must exceed air_level ({})",
                self.bone_level, self.air_level
            ));
        }
        if self.removal_blob_count < 1 {
            return err("removal_blob_count must be >= 1".into());
        }
        let [lo, hi] = self.removal_radius_frac;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return err(format!(
                "removal_radius_frac must satisfy 0 < lo <= hi <= 0.5, got {:?}",
                self.removal_radius_frac
            ));
        }
        Ok(())
    }
}

/// Binary removal labels on the phantom grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    dims: [usize; 3],
    labels: Vec<bool>,
}

impl GroundTruthMask {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.labels.len() as f64
    }

    /// Mask as a 0.0/1.0 float volume (the on-disk representation).
    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Volume3 {
        let data = self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3::new(self.dims, spacing_mm, data).expect("mask geometry is valid")
    }
}

// ---------------------------------------------------------------------------
// Counter-based RNG
// ---------------------------------------------------------------------------

mod streams {
    pub const AIR_CELLS: u64 = 1;
    pub const BLOBS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const ARTIFACTS: u64 = 4;
    pub const FLUID: u64 = 5;
}

fn splitmix(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless hash of (seed, stream, counter); the basis of every draw.
fn hash3(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix(seed ^ splitmix(stream ^ splitmix(counter)))
}

fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate for a (seed, stream, index) triple via Box-Muller.
fn gaussian(seed: u64, stream: u64, index: u64) -> f64 {
    let u1 = unit_f64(hash3(seed, stream, 2 * index)).max(1e-300);
    let u2 = unit_f64(hash3(seed, stream, 2 * index + 1));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sequential draws within one stream (used where a variable number of draws
/// is needed, e.g. rejection sampling of blob centers).
pub(crate) struct StreamRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl StreamRng {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            counter: 0,
        }
    }

    pub(crate) fn next_unit(&mut self) -> f64 {
        let h = hash3(self.seed, self.stream, self.counter);
        self.counter += 1;
        unit_f64(h)
    }

    pub(crate) fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    pub(crate) fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_unit().max(1e-300);
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

// ---------------------------------------------------------------------------
// Preoperative volume
// ---------------------------------------------------------------------------

struct AirCell {
    center: [f64; 3],
    radius: f64,
}

fn air_cells(spec: &PhantomSpec) -> Vec<AirCell> {
    let dims = spec.dims;
    let mut rng = StreamRng::new(spec.seed, streams::AIR_CELLS);
    let target = (dims[0] * dims[1] * dims[2] / 1000).max(8);
    let semi: Vec<f64> = dims.iter().map(|&d| 0.42 * d as f64).collect();
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let mut cells = Vec::new();
    for _ in 0..target {
        let p = [
            rng.next_range(0.0, dims[0] as f64 - 1.0),
            rng.next_range(0.0, dims[1] as f64 - 1.0),
            rng.next_range(0.0, dims[2] as f64 - 1.0),
        ];
        let radius = rng.next_range(1.2, 2.6);
        // Keep cells well inside the bone body so the outer boundary stays
        // crisp; rejected draws still consume their random numbers, keeping
        // the sequence deterministic.
        let e: f64 = (0..3)
            .map(|a| ((p[a] - center[a]) / (0.9 * semi[a])).powi(2))
            .sum();
        if e <= 1.0 {
            cells.push(AirCell { center: p, radius });
        }
    }
    cells
}

/// Generates the preoperative volume: an ellipsoidal bone body (value
/// `bone_level`) with spherical air cells, on an `air_level` background.
pub fn generate_preop(spec: &PhantomSpec) -> Result<Volume3, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let semi: Vec<f64> = dims.iter().map(|&d| 0.42 * d as f64).collect();
    let center: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let cells = air_cells(spec);
    let v = Volume3::from_fn(dims, spec.spacing_mm, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let e: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
        if e > 1.0 {
            return spec.air_level as f32;
        }
        for c in &cells {
            let d2: f64 = (0..3).map(|a| (p[a] - c.center[a]).powi(2)).sum();
            if d2 <= c.radius * c.radius {
                return spec.air_level as f32;
            }
        }
        spec.bone_level as f32
    })?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Removal mask
// ---------------------------------------------------------------------------

fn is_bone(spec: &PhantomSpec, preop: &Volume3, idx: usize) -> bool {
    preop.data()[idx] as f64 >= 0.5 * spec.bone_level
}

struct BlobPlacement {
    /// Union of spheres intersected with bone, before smoothing.
    raw: Vec<bool>,
    /// Read only by tests that check placement against direct enumeration.
    #[cfg_attr(not(test), allow(dead_code))]
    centers: Vec<[usize; 3]>,
}

/// Places `removal_blob_count` overlapping spheres with centers in bone.
/// `regen` perturbs the random stream for regeneration rounds.
fn place_blobs(spec: &PhantomSpec, preop: &Volume3, regen: u64) -> Result<BlobPlacement, PhantomError> {
    const MAX_ATTEMPTS: usize = 100;
    let dims = spec.dims;
    let min_dim = *dims.iter().min().unwrap() as f64;
    let mut rng = StreamRng::new(spec.seed, streams::BLOBS + (regen << 8));
    let mut centers: Vec<[usize; 3]> = Vec::new();
    let mut radii: Vec<f64> = Vec::new();
    for blob in 0..spec.removal_blob_count {
        let radius =
            (rng.next_range(spec.removal_radius_frac[0], spec.removal_radius_frac[1]) * min_dim)
                .max(1.0);
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand: [i64; 3] = if blob == 0 {
                [
                    rng.next_range(0.0, dims[0] as f64 - 1.0).round() as i64,
                    rng.next_range(0.0, dims[1] as f64 - 1.0).round() as i64,
                    rng.next_range(0.0, dims[2] as f64 - 1.0).round() as i64,
                ]
            } else {
                // Subsequent blobs overlap an earlier one so the cavity is
                // a single connected excavation.
                let prev = centers[blob - 1];
                let spread = 0.8 * radii[blob - 1];
                [
                    prev[0] as i64 + rng.next_range(-spread, spread).round() as i64,
                    prev[1] as i64 + rng.next_range(-spread, spread).round() as i64,
                    prev[2] as i64 + rng.next_range(-spread, spread).round() as i64,
                ]
            };
            let inside = (0..3).all(|a| cand[a] >= 0 && cand[a] < dims[a] as i64);
            if !inside {
                continue;
            }
            let c = [cand[0] as usize, cand[1] as usize, cand[2] as usize];
            let idx = preop.index(c[0], c[1], c[2]);
            if is_bone(spec, preop, idx) {
                centers.push(c);
                radii.push(radius);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PhantomError::BlobPlacement {
                attempts: MAX_ATTEMPTS,
            });
        }
    }

    let mut raw = vec![false; preop.voxel_count()];
    for (c, r) in centers.iter().zip(&radii) {
        let r_ceil = r.ceil() as i64;
        for dz in -r_ceil..=r_ceil {
            for dy in -r_ceil..=r_ceil {
                for dx in -r_ceil..=r_ceil {
                    let (x, y, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                    if x < 0 || y < 0 || z < 0 {
                        continue;
                    }
                    let (x, y, z) = (x as usize, y as usize, z as usize);
                    if x >= dims[0] || y >= dims[1] || z >= dims[2] {
                        continue;
                    }
                    if ((dx * dx + dy * dy + dz * dz) as f64) <= r * r {
                        let idx = preop.index(x, y, z);
                        if is_bone(spec, preop, idx) {
                            raw[idx] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(BlobPlacement { raw, centers })
}

/// One pass of a 3x3x3 majority filter (neighborhoods clipped at borders;
/// a voxel becomes foreground iff foreground strictly dominates).
fn majority3(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let mut out = vec![false; mask.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut fg = 0usize;
                let mut total = 0usize;
                for dz in z.saturating_sub(1)..=(z + 1).min(dims[2] - 1) {
                    for dy in y.saturating_sub(1)..=(y + 1).min(dims[1] - 1) {
                        for dx in x.saturating_sub(1)..=(x + 1).min(dims[0] - 1) {
                            total += 1;
                            fg += mask[idx(dx, dy, dz)] as usize;
                        }
                    }
                }
                out[idx(x, y, z)] = 2 * fg > total;
            }
        }
    }
    out
}

const FRACTION_BOUNDS: (f64, f64) = (0.02, 0.35);
const MAX_REGENS: usize = 32;

/// Generates the ground-truth removal mask: overlapping spheres centered in
/// bone, intersected with the bone region, then smoothed by one majority
/// filter pass. Regenerates with a perturbed stream until the foreground
/// fraction lands in [0.02, 0.35].
pub fn generate_removal_mask(
    spec: &PhantomSpec,
    preop: &Volume3,
) -> Result<GroundTruthMask, PhantomError> {
    spec.validate()?;
    if preop.dims() != spec.dims {
        return Err(PhantomError::DimsMismatch {
            expected: spec.dims,
            actual: preop.dims(),
        });
    }
    let mut last_fraction = 0.0;
    for regen in 0..MAX_REGENS {
        let placement = place_blobs(spec, preop, regen as u64)?;
        let labels = majority3(&placement.raw, spec.dims);
        let fg = labels.iter().filter(|&&b| b).count();
        last_fraction = fg as f64 / labels.len() as f64;
        if last_fraction >= FRACTION_BOUNDS.0 && last_fraction <= FRACTION_BOUNDS.1 {
            return Ok(GroundTruthMask {
                dims: spec.dims,
                labels,
            });
        }
    }
    Err(PhantomError::MaskFraction {
        fraction: last_fraction,
        regens: MAX_REGENS,
    })
}

// ---------------------------------------------------------------------------
// Postoperative volume
// ---------------------------------------------------------------------------

fn mask_centroid(gt: &GroundTruthMask) -> [f64; 3] {
    let dims = gt.dims();
    let mut acc = [0.0f64; 3];
    let mut count = 0.0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if gt.labels[x + dims[0] * (y + dims[1] * z)] {
                    acc[0] += x as f64;
                    acc[1] += y as f64;
                    acc[2] += z as f64;
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        [
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        ]
    } else {
        [acc[0] / count, acc[1] / count, acc[2] / count]
    }
}

/// Simulates the postoperative volume from a preoperative volume and the
/// removal mask. Steps, in order: blend removed voxels toward air (weight
/// 0.9), add voxelwise Gaussian noise, draw bright line artifacts near the
/// cavity, add a low-frequency fluid field in the lower half of the cavity,
/// clamp to [0, 1], and finally apply the rigid misalignment if present.
pub fn generate_postop(
    preop: &Volume3,
    gt: &GroundTruthMask,
    spec: &PhantomSpec,
) -> Result<Volume3, PhantomError> {
    spec.validate()?;
    if preop.dims() != spec.dims || gt.dims() != spec.dims {
        return Err(PhantomError::DimsMismatch {
            expected: spec.dims,
            actual: if preop.dims() != spec.dims {
                preop.dims()
            } else {
                gt.dims()
            },
        });
    }
    let dims = spec.dims;
    let mut buf = preop.to_f64();

    // Removal: blend toward air, keeping faint residual texture.
    for (v, &removed) in buf.iter_mut().zip(gt.labels()) {
        if removed {
            *v += 0.9 * (spec.air_level - *v);
        }
    }

    // Voxelwise zero-mean Gaussian noise, indexed by voxel for order
    // independence.
    if spec.noise_sigma > 0.0 {
        for (i, v) in buf.iter_mut().enumerate() {
            *v += spec.noise_sigma * gaussian(spec.seed, streams::NOISE, i as u64);
        }
    }

    let centroid = mask_centroid(gt);

    // Bright 1-voxel line segments ("metal artifacts") near the cavity.
    let mut art_rng = StreamRng::new(spec.seed, streams::ARTIFACTS);
    for _ in 0..spec.artifact_count {
        let start = [
            centroid[0] + art_rng.next_range(-4.0, 4.0),
            centroid[1] + art_rng.next_range(-4.0, 4.0),
            centroid[2] + art_rng.next_range(-4.0, 4.0),
        ];
        let dir = {
            let d = [
                art_rng.next_gaussian(),
                art_rng.next_gaussian(),
                art_rng.next_gaussian(),
            ];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
            [d[0] / norm, d[1] / norm, d[2] / norm]
        };
        let length = art_rng.next_range(8.0, 16.0);
        let steps = (length / 0.4).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.4;
            let p = [start[0] + t * dir[0], start[1] + t * dir[1], start[2] + t * dir[2]];
            let x = p[0].round() as i64;
            let y = p[1].round() as i64;
            let z = p[2].round() as i64;
            if x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < dims[0]
                && (y as usize) < dims[1]
                && (z as usize) < dims[2]
            {
                buf[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] =
                    spec.artifact_level;
            }
        }
    }

    // Smooth low-frequency fluid field inside the lower half of the cavity.
    if spec.fluid_amplitude > 0.0 {
        let mut fluid_rng = StreamRng::new(spec.seed, streams::FLUID);
        let k = [
            fluid_rng.next_range(0.5, 1.5),
            fluid_rng.next_range(0.5, 1.5),
            fluid_rng.next_range(0.5, 1.5),
        ];
        let phase = fluid_rng.next_range(0.0, 2.0 * std::f64::consts::PI);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let idx = x + dims[0] * (y + dims[1] * z);
                    if gt.labels()[idx] && (z as f64) < centroid[2] {
                        let arg = 2.0 * std::f64::consts::PI
                            * (k[0] * x as f64 / dims[0] as f64
                                + k[1] * y as f64 / dims[1] as f64
                                + k[2] * z as f64 / dims[2] as f64)
                            + phase;
                        buf[idx] += spec.fluid_amplitude * 0.5 * (1.0 + arg.sin());
                    }
                }
            }
        }
    }

    for v in buf.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let aligned = Volume3::new(
        dims,
        spec.spacing_mm,
        buf.iter().map(|&v| v as f32).collect(),
    )?;
    match &spec.misalignment {
        Some(t) => Ok(resample(&aligned, t, &aligned)),
        None => Ok(aligned),
    }
}

/// Convenience: generates the full (preop, postop, ground truth) triple.
pub fn generate_triple(
    spec: &PhantomSpec,
) -> Result<(Volume3, Volume3, GroundTruthMask), PhantomError> {
    let pre = generate_preop(spec)?;
    let gt = generate_removal_mask(spec, &pre)?;
    let post = generate_postop(&pre, &gt, spec)?;
    Ok((pre, post, gt))
}
