//! Dense 3-D scalar volumes and basic operations on them.
//!
//! Voxels are stored x-fastest (`index = x + nx * (y + ny * z)`) as `f32`;
//! all reductions and filtering accumulate in `f64`. A volume on disk is a
//! pair of files: `<name>.json` (header) and `<name>.raw` (little-endian
//! IEEE-754 f32 payload).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::percentile_sorted;

/// Errors from volume construction, manipulation, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("dims must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {actual} does not match dims {dims:?} (expected {expected})")]
    DataLength {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at linear index {index}")]
    NonFinite { index: usize },
    #[error("volume dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("crop region out of bounds: offset {offset:?} size {size:?} in dims {dims:?}")]
    RegionOutOfBounds {
        offset: [usize; 3],
        size: [usize; 3],
        dims: [usize; 3],
    },
    #[error("filter window of {window} taps exceeds smallest dim of {dims:?}")]
    WindowTooLarge { window: usize, dims: [usize; 3] },
    #[error("downsample2 requires all dims >= 2, got {0:?}")]
    DimTooSmallForDownsample([usize; 3]),
    #[error("{path}: header field {field} has unsupported value {value:?}")]
    UnsupportedFormat {
        path: PathBuf,
        field: &'static str,
        value: String,
    },
    #[error("{path}: payload holds {actual} voxels but header dims {dims:?} require {expected}")]
    PayloadSize {
        path: PathBuf,
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("{path}: payload length {len} is not a multiple of 4 bytes")]
    PayloadAlignment { path: PathBuf, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid header: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// A dense 3-D scalar field with voxel spacing in millimeters.
///
/// Invariants: every dim >= 1, spacing positive and finite, data length equals
/// the dim product, and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume3 {
    /// Builds a volume, validating shape, spacing, and finiteness.
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::BadSpacing(spacing_mm));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Self {
            dims,
            spacing_mm,
            data,
        })
    }

    /// A volume filled with one value.
    pub fn constant(dims: [usize; 3], spacing_mm: [f64; 3], value: f32) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing_mm, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing_mm, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Linear index of voxel (x, y, z); x varies fastest in memory.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Sets one voxel. Panics on a non-finite value to preserve the finiteness
    /// invariant.
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        assert!(value.is_finite(), "volume values must be finite");
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Copies the payload into an `f64` buffer for high-precision math.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Rebuilds a volume from an `f64` buffer produced by [`Volume3::to_f64`]-style math.
    pub(crate) fn from_f64(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        data: &[f64],
    ) -> Result<Self, VolumeError> {
        Self::new(dims, spacing_mm, data.iter().map(|&v| v as f32).collect())
    }
}

/// An axis-aligned sub-box of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRegion {
    pub offset: [usize; 3],
    pub size: [usize; 3],
}

impl CropRegion {
    fn check(&self, dims: [usize; 3]) -> Result<(), VolumeError> {
        let fits = (0..3).all(|a| {
            self.size[a] >= 1 && self.offset[a].checked_add(self.size[a]).map_or(false, |end| end <= dims[a])
        });
        if fits {
            Ok(())
        } else {
            Err(VolumeError::RegionOutOfBounds {
                offset: self.offset,
                size: self.size,
                dims,
            })
        }
    }
}

/// Extracts a sub-volume; spacing is preserved.
pub fn crop(v: &Volume3, region: &CropRegion) -> Result<Volume3, VolumeError> {
    region.check(v.dims())?;
    let [sx, sy, sz] = region.size;
    let [ox, oy, oz] = region.offset;
    let mut data = Vec::with_capacity(sx * sy * sz);
    for z in 0..sz {
        for y in 0..sy {
            let start = v.index(ox, oy + y, oz + z);
            data.extend_from_slice(&v.data[start..start + sx]);
        }
    }
    Volume3::new(region.size, v.spacing_mm(), data)
}

/// Result of [`normalize_intensity`]: the rescaled volume plus a flag marking
/// a degenerate input range (all values equal, or the two percentile anchors
/// coincide), in which case the output is flat 0.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume3,
    pub degenerate: bool,
}

/// Rescales intensities so the `lo_pct` percentile maps to 0 and the `hi_pct`
/// percentile maps to 1, clamping the result to [0, 1].
///
/// Percentiles are fractions in [0, 1] with `lo_pct < hi_pct`, computed by
/// linear interpolation between closest ranks.
pub fn normalize_intensity(v: &Volume3, lo_pct: f64, hi_pct: f64) -> Result<Normalized, VolumeError> {
    assert!(
        (0.0..=1.0).contains(&lo_pct) && (0.0..=1.0).contains(&hi_pct) && lo_pct < hi_pct,
        "percentiles must satisfy 0 <= lo < hi <= 1"
    );
    let mut sorted = v.to_f64();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
        let volume = Volume3::constant(v.dims(), v.spacing_mm(), 0.0)?;
        return Ok(Normalized {
            volume,
            degenerate: true,
        });
    }
    let scale = 1.0 / (hi - lo);
    let data: Vec<f32> = v
        .data()
        .iter()
        .map(|&x| (((x as f64 - lo) * scale).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Normalized {
        volume: Volume3::new(v.dims(), v.spacing_mm(), data)?,
        degenerate: false,
    })
}

/// Normalized 1-D Gaussian kernel with `2 * radius + 1` taps.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// One separable filtering pass along `axis` with kernel renormalization over
/// in-bounds taps at the boundaries.
fn filter_axis_renorm(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; data.len()];
    // Iterate over all lines along `axis`.
    let (n1, n2, s1, s2) = match axis {
        0 => (dims[1], dims[2], dims[0], dims[0] * dims[1]),
        1 => (dims[0], dims[2], 1, dims[0] * dims[1]),
        _ => (dims[0], dims[1], 1, dims[0]),
    };
    for j2 in 0..n2 {
        for j1 in 0..n1 {
            let base = j1 * s1 + j2 * s2;
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for t in lo..=hi {
                    let w = kernel[t + radius - i];
                    acc += w * data[base + t * stride];
                    wsum += w;
                }
                out[base + i * stride] = acc / wsum;
            }
        }
    }
    out
}

/// Separable Gaussian smoothing with boundary kernel renormalization.
///
/// The window must fit the volume: `2 * radius + 1 <= min(dims)`.
pub fn gaussian_filter(v: &Volume3, sigma: f64, radius: usize) -> Result<Volume3, VolumeError> {
    let window = 2 * radius + 1;
    let dims = v.dims();
    if window > dims.iter().copied().min().unwrap() {
        return Err(VolumeError::WindowTooLarge { window, dims });
    }
    let kernel = gaussian_kernel(sigma, radius);
    let mut buf = v.to_f64();
    for axis in 0..3 {
        buf = filter_axis_renorm(&buf, dims, axis, &kernel);
    }
    Volume3::from_f64(dims, v.spacing_mm(), &buf)
}

/// Halves each dim by averaging disjoint 2x2x2 blocks.
///
/// Odd trailing slices are dropped (`out_dim = floor(dim / 2)`); spacing
/// doubles along every axis. All dims must be >= 2.
pub fn downsample2(v: &Volume3) -> Result<Volume3, VolumeError> {
    let dims = v.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(VolumeError::DimTooSmallForDownsample(dims));
    }
    let out_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut data = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let mut acc = 0.0f64;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += v.get(2 * x + dx, 2 * y + dy, 2 * z + dz) as f64;
                        }
                    }
                }
                data.push((acc / 8.0) as f32);
            }
        }
    }
    let s = v.spacing_mm();
    Volume3::new(out_dims, [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]], data)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

const DTYPE: &str = "f32";
const ORDER: &str = "x-fastest";

/// Splits a volume path into its `.json` and `.raw` siblings. The input may
/// name either the `.json` file or the bare stem.
fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().map_or(false, |e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("raw"))
}

/// Writes `<name>.json` + `<name>.raw`. Values are stored as little-endian f32.
pub fn write_volume(v: &Volume3, path: &Path) -> Result<(), VolumeError> {
    let (json_path, raw_path) = volume_paths(path);
    let header = VolumeHeader {
        dims: v.dims(),
        spacing_mm: v.spacing_mm(),
        dtype: DTYPE.to_string(),
        order: ORDER.to_string(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|source| VolumeError::Header {
        path: json_path.clone(),
        source,
    })?;
    std::fs::write(&json_path, text).map_err(|source| VolumeError::Io {
        path: json_path.clone(),
        source,
    })?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(&raw_path).map_err(|source| VolumeError::Io {
        path: raw_path.clone(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| VolumeError::Io {
        path: raw_path.clone(),
        source,
    })?;
    Ok(())
}

/// Reads a `<name>.json` + `<name>.raw` pair written by [`write_volume`].
pub fn read_volume(path: &Path) -> Result<Volume3, VolumeError> {
    let (json_path, raw_path) = volume_paths(path);
    let text = std::fs::read_to_string(&json_path).map_err(|source| VolumeError::Io {
        path: json_path.clone(),
        source,
    })?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|source| VolumeError::Header {
        path: json_path.clone(),
        source,
    })?;
    if header.dtype != DTYPE {
        return Err(VolumeError::UnsupportedFormat {
            path: json_path,
            field: "dtype",
            value: header.dtype,
        });
    }
    if header.order != ORDER {
        return Err(VolumeError::UnsupportedFormat {
            path: json_path,
            field: "order",
            value: header.order,
        });
    }
    let mut f = std::fs::File::open(&raw_path).map_err(|source| VolumeError::Io {
        path: raw_path.clone(),
        source,
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|source| VolumeError::Io {
        path: raw_path.clone(),
        source,
    })?;
    if bytes.len() % 4 != 0 {
        return Err(VolumeError::PayloadAlignment {
            path: raw_path,
            len: bytes.len(),
        });
    }
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(VolumeError::PayloadSize {
            path: raw_path,
            dims: header.dims,
            expected,
            actual,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3::new(header.dims, header.spacing_mm, data)
}
