//! Internal f64 field machinery for the similarity losses: zero-padded
//! separable window correlation, 2x down pooling, and their transposes.
//!
//! Everything here is deterministic under any thread count: parallel loops
//! write disjoint output rows and never reduce across threads.

use rayon::prelude::*;

use crate::volume::Volume3;

/// Dense f64 scalar field (same x-fastest layout as [`Volume3`]).
#[derive(Debug, Clone)]
pub(crate) struct Field {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_volume(v: &Volume3) -> Self {
        Self {
            dims: v.dims(),
            data: v.to_f64(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Isotropic Gaussian window, auto-shrunk to the largest odd length that is
/// at most `min(dims)` (floor of one tap = no filtering).
pub(crate) struct Window {
    pub kernels: [Vec<f64>; 3],
    pub radii: [usize; 3],
}

/// Largest odd window length <= min(2*base_radius+1, min(dims)).
pub(crate) fn shrunk_window_len(base_radius: usize, dims: [usize; 3]) -> usize {
    let min_dim = dims.into_iter().min().unwrap();
    let full = 2 * base_radius + 1;
    if min_dim >= full {
        full
    } else if min_dim % 2 == 1 {
        min_dim
    } else {
        min_dim - 1
    }
}

impl Window {
    pub fn build(base_radius: usize, sigma: f64, dims: [usize; 3]) -> Self {
        let w = shrunk_window_len(base_radius, dims);
        let kernel = if w <= 1 {
            vec![1.0]
        } else {
            crate::volume::gaussian_kernel(sigma, (w - 1) / 2)
        };
        let kernels: [Vec<f64>; 3] = [kernel.clone(), kernel.clone(), kernel];
        let radii = std::array::from_fn(|a| kernels[a].len() / 2);
        Self { kernels, radii }
    }

    /// Inclusive index range per axis where the window is fully in bounds.
    pub fn valid_range(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| (self.radii[a], dims[a] - 1 - self.radii[a]))
    }

    pub fn valid_count(&self, dims: [usize; 3]) -> usize {
        (0..3).map(|a| dims[a] - 2 * self.radii[a]).product()
    }
}

/// One zero-padded correlation pass along `axis`. Parallel over output x-rows.
fn correlate_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let [nx, ny, nz] = dims;
    let radius = kernel.len() / 2;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(row, out_row)| {
        let y = row % ny;
        let z = row / ny;
        match axis {
            0 => {
                let base = nx * row;
                for x in 0..nx {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(nx - 1);
                    let mut acc = 0.0;
                    for t in lo..=hi {
                        acc += kernel[t + radius - x] * data[base + t];
                    }
                    out_row[x] = acc;
                }
            }
            1 => {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(ny - 1);
                for t in lo..=hi {
                    let w = kernel[t + radius - y];
                    let src = nx * (t + ny * z);
                    for x in 0..nx {
                        out_row[x] += w * data[src + x];
                    }
                }
            }
            _ => {
                let lo = z.saturating_sub(radius);
                let hi = (z + radius).min(nz - 1);
                for t in lo..=hi {
                    let w = kernel[t + radius - z];
                    let src = nx * (y + ny * t);
                    for x in 0..nx {
                        out_row[x] += w * data[src + x];
                    }
                }
            }
        }
    });
    out
}

/// Separable zero-padded correlation with a symmetric per-axis window.
/// Symmetric kernels make this its own transpose (restricted to any support).
pub(crate) fn correlate(f: &Field, w: &Window) -> Field {
    let mut data = correlate_axis(&f.data, f.dims, 0, &w.kernels[0]);
    data = correlate_axis(&data, f.dims, 1, &w.kernels[1]);
    data = correlate_axis(&data, f.dims, 2, &w.kernels[2]);
    Field { dims: f.dims, data }
}

/// Output dims of one pooling step: halve axes >= 2 (dropping odd trailing
/// slices), keep axes of extent 1.
pub(crate) fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| if dims[a] >= 2 { dims[a] / 2 } else { 1 })
}

/// Mean pooling over 2x2x2 blocks, with the block extent clamped to 1 along
/// axes of size 1 (matches `downsample2` whenever all dims >= 2).
pub(crate) fn pool2(f: &Field) -> Field {
    let dims = f.dims;
    let out_dims = pooled_dims(dims);
    let ext: [usize; 3] = std::array::from_fn(|a| if dims[a] >= 2 { 2 } else { 1 });
    let inv = 1.0 / (ext[0] * ext[1] * ext[2]) as f64;
    let [nx, ny, _] = dims;
    let mut out = Field::zeros(out_dims);
    out.data
        .par_chunks_mut(out_dims[0])
        .enumerate()
        .for_each(|(row, out_row)| {
            let oy = row % out_dims[1];
            let oz = row / out_dims[1];
            for (ox, o) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for dz in 0..ext[2] {
                    for dy in 0..ext[1] {
                        let base = ext[0] * ox + nx * (ext[1] * oy + dy + ny * (ext[2] * oz + dz));
                        for dx in 0..ext[0] {
                            acc += f.data[base + dx];
                        }
                    }
                }
                *o = acc * inv;
            }
        });
    out
}

/// Transpose of [`pool2`]: distributes each coarse gradient equally over the
/// fine voxels of its block; dropped trailing voxels receive 0.
pub(crate) fn pool2_transpose(g: &Field, in_dims: [usize; 3]) -> Field {
    let out_dims = pooled_dims(in_dims);
    debug_assert_eq!(g.dims, out_dims);
    let ext: [usize; 3] = std::array::from_fn(|a| if in_dims[a] >= 2 { 2 } else { 1 });
    let inv = 1.0 / (ext[0] * ext[1] * ext[2]) as f64;
    let [nx, ny, _] = in_dims;
    let mut out = Field::zeros(in_dims);
    out.data
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(row, out_row)| {
            let y = row % ny;
            let z = row / ny;
            let (oy, oz) = (y / ext[1], z / ext[2]);
            if (ext[1] == 2 && y >= 2 * out_dims[1]) || (ext[2] == 2 && z >= 2 * out_dims[2]) {
                return;
            }
            for x in 0..nx {
                let ox = x / ext[0];
                if ext[0] == 2 && x >= 2 * out_dims[0] {
                    continue;
                }
                out_row[x] = g.data[ox + out_dims[0] * (oy + out_dims[1] * oz)] * inv;
            }
        });
    out
}
