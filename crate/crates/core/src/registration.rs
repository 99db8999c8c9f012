//! 6-DOF rigid alignment of the postoperative volume onto the preoperative one.
//!
//! The transform is parameterized by intrinsic Euler x-y-z rotations plus a
//! millimeter translation, applied about a reference physical center. Alignment
//! maximizes normalized cross-correlation over a coarse-to-fine pyramid with
//! per-level coordinate-wise golden-section refinement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{downsample2, Volume3, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("volume dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("NCC undefined: input volume has (near-)zero intensity variance")]
    ZeroVariance,
    #[error("registration requires levels >= 1")]
    NoLevels,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Rigid transform: intrinsic Euler x-y-z rotation (radians) about a reference
/// center, followed by a translation in millimeters.
///
/// Angles are kept in (-pi, pi]. As a point map about center `c`:
/// `t(p) = R (p - c) + c + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    #[serde(rename = "rot_rad")]
    pub rotation: [f64; 3],
    #[serde(rename = "trans_mm")]
    pub translation: [f64; 3],
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// 3x3 rotation matrix `Rx(rx) * Ry(ry) * Rz(rz)` (intrinsic x-y-z order).
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (sa, ca) = self.rotation[0].sin_cos();
        let (sb, cb) = self.rotation[1].sin_cos();
        let (sc, cc) = self.rotation[2].sin_cos();
        [
            [cb * cc, -cb * sc, sb],
            [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
            [sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb],
        ]
    }

    /// Recovers Euler x-y-z angles from a rotation matrix produced by
    /// [`RigidTransform::matrix`]. Near gimbal lock (|ry| = pi/2) the split
    /// between rx and rz is conventional (rx = 0).
    fn angles_from_matrix(m: &[[f64; 3]; 3]) -> [f64; 3] {
        let sy = m[0][2].clamp(-1.0, 1.0);
        let ry = sy.asin();
        if sy.abs() < 1.0 - 1e-12 {
            let rx = (-m[1][2]).atan2(m[2][2]);
            let rz = (-m[0][1]).atan2(m[0][0]);
            [rx, ry, rz]
        } else {
            [0.0, ry, m[1][0].atan2(m[1][1])]
        }
    }

    /// Composition as point maps: `compose(a, b)(p) = a(b(p))` about a shared
    /// center. Independent of the center choice.
    pub fn compose(a: &Self, b: &Self) -> Self {
        let ra = a.matrix();
        let rb = b.matrix();
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| ra[i][k] * rb[k][j]).sum();
            }
        }
        let mut translation = a.translation;
        for i in 0..3 {
            translation[i] += (0..3).map(|k| ra[i][k] * b.translation[k]).sum::<f64>();
        }
        Self {
            rotation: Self::angles_from_matrix(&r).map(wrap_angle),
            translation,
        }
    }

    /// Inverse map: `inverse().compose(self) = identity`.
    pub fn inverse(&self) -> Self {
        let r = self.matrix();
        // Transpose rotates back; translation becomes -R^T t.
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: Self::angles_from_matrix(&rt).map(wrap_angle),
            translation,
        }
    }

    /// Rotation angle (radians) of the combined rotation, for tolerance checks.
    pub fn rotation_magnitude(&self) -> f64 {
        let m = self.matrix();
        let trace = m[0][0] + m[1][1] + m[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_magnitude(&self) -> f64 {
        self.translation.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// Physical center of a volume's voxel-center grid.
fn physical_center(v: &Volume3) -> [f64; 3] {
    let d = v.dims();
    let s = v.spacing_mm();
    [
        (d[0] as f64 - 1.0) / 2.0 * s[0],
        (d[1] as f64 - 1.0) / 2.0 * s[1],
        (d[2] as f64 - 1.0) / 2.0 * s[2],
    ]
}

/// Trilinear sample of `v` at physical point `p`; out-of-bounds corners
/// contribute 0. The `bool` is true when the point has full interpolation
/// support (no zero padding involved).
fn sample_trilinear(v: &Volume3, p: [f64; 3]) -> (f64, bool) {
    let dims = v.dims();
    let sp = v.spacing_mm();
    let mut i0 = [0isize; 3];
    let mut f = [0.0f64; 3];
    let mut in_field = true;
    for a in 0..3 {
        let u = p[a] / sp[a];
        let fl = u.floor();
        i0[a] = fl as isize;
        f[a] = u - fl;
        if !(u >= -1e-9 && u <= dims[a] as f64 - 1.0 + 1e-9) {
            in_field = false;
        }
    }
    let mut acc = 0.0;
    for dz in 0..2isize {
        let z = i0[2] + dz;
        if z < 0 || z >= dims[2] as isize {
            continue;
        }
        let wz = if dz == 0 { 1.0 - f[2] } else { f[2] };
        for dy in 0..2isize {
            let y = i0[1] + dy;
            if y < 0 || y >= dims[1] as isize {
                continue;
            }
            let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
            for dx in 0..2isize {
                let x = i0[0] + dx;
                if x < 0 || x >= dims[0] as isize {
                    continue;
                }
                let wx = if dx == 0 { 1.0 - f[0] } else { f[0] };
                acc += wx * wy * wz * v.get(x as usize, y as usize, z as usize) as f64;
            }
        }
    }
    (acc, in_field)
}

/// Resamples `v` through `t` onto an explicit grid, rotating about `center`.
/// Used internally so every pyramid level optimizes the same parameterization.
fn resample_about(
    v: &Volume3,
    t: &RigidTransform,
    out_dims: [usize; 3],
    out_spacing: [f64; 3],
    center: [f64; 3],
) -> (Vec<f32>, Vec<bool>) {
    let inv = t.inverse();
    let r = inv.matrix();
    let n = out_dims[0] * out_dims[1] * out_dims[2];
    let mut data = vec![0.0f32; n];
    let mut mask = vec![false; n];
    let plane = out_dims[0] * out_dims[1];
    data.par_chunks_mut(plane)
        .zip(mask.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(z, (dslab, mslab))| {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let q = [
                        x as f64 * out_spacing[0] - center[0],
                        y as f64 * out_spacing[1] - center[1],
                        z as f64 * out_spacing[2] - center[2],
                    ];
                    // Inverse map: p = R_inv (q - c) + c + t_inv.
                    let p = [
                        r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2] + center[0] + inv.translation[0],
                        r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2] + center[1] + inv.translation[1],
                        r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2] + center[2] + inv.translation[2],
                    ];
                    let (val, ok) = sample_trilinear(v, p);
                    let i = x + out_dims[0] * y;
                    dslab[i] = val as f32;
                    mslab[i] = ok;
                }
            }
        });
    (data, mask)
}

/// Applies `t` to `v`, producing a volume on `reference`'s grid.
///
/// Rotation is about the reference volume's physical center; out-of-field
/// voxels are filled with 0.
pub fn resample(v: &Volume3, t: &RigidTransform, reference: &Volume3) -> Volume3 {
    let (data, _) = resample_about(
        v,
        t,
        reference.dims(),
        reference.spacing_mm(),
        physical_center(reference),
    );
    Volume3::new(reference.dims(), reference.spacing_mm(), data)
        .expect("resampled volume inherits valid reference geometry")
}

/// Variance below this fraction of the mean square is treated as zero: the
/// `sum(x^2) - sum(x)^2/n` form leaves O(n * eps) cancellation noise on
/// constant inputs, far below any real intensity signal.
const REL_VARIANCE_FLOOR: f64 = 1e-9;

pub(crate) fn effectively_zero_variance(var: f64, mean_square_scale: f64) -> bool {
    var <= REL_VARIANCE_FLOOR * mean_square_scale.max(1e-30)
}

/// Normalized cross-correlation (Pearson r) over all voxels.
pub fn ncc(a: &Volume3, b: &Volume3) -> Result<f64, RegistrationError> {
    if a.dims() != b.dims() {
        return Err(RegistrationError::DimsMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let stats = pair_stats(a.data(), b.data(), None);
    ncc_from_stats(&stats).ok_or(RegistrationError::ZeroVariance)
}

#[derive(Clone, Copy, Default)]
struct PairStats {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl PairStats {
    fn add(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        self.sa += a;
        self.sb += b;
        self.saa += a * a;
        self.sbb += b * b;
        self.sab += a * b;
    }
    fn merge(&mut self, o: &PairStats) {
        self.n += o.n;
        self.sa += o.sa;
        self.sb += o.sb;
        self.saa += o.saa;
        self.sbb += o.sbb;
        self.sab += o.sab;
    }
}

/// Accumulates pair statistics in fixed chunk order (bitwise deterministic for
/// any thread count).
fn pair_stats(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> PairStats {
    const CHUNK: usize = 8192;
    let partials: Vec<PairStats> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .enumerate()
        .map(|(ci, (ca, cb))| {
            let mut s = PairStats::default();
            for (i, (&x, &y)) in ca.iter().zip(cb).enumerate() {
                if mask.map_or(true, |m| m[ci * CHUNK + i]) {
                    s.add(x as f64, y as f64);
                }
            }
            s
        })
        .collect();
    let mut total = PairStats::default();
    for p in &partials {
        total.merge(p);
    }
    total
}

fn ncc_from_stats(s: &PairStats) -> Option<f64> {
    if s.n < 2.0 {
        return None;
    }
    let va = s.saa - s.sa * s.sa / s.n;
    let vb = s.sbb - s.sb * s.sb / s.n;
    if effectively_zero_variance(va, s.saa) || effectively_zero_variance(vb, s.sbb) {
        return None;
    }
    let cov = s.sab - s.sa * s.sb / s.n;
    Some(cov / (va * vb).sqrt())
}

/// NCC of `moving` resampled through `t` against `fixed`, restricted to voxels
/// with full interpolation support. Candidates overlapping less than half the
/// grid score -1: tiny overlaps of smooth volumes correlate spuriously well,
/// which would otherwise attract the search.
fn score(fixed: &Volume3, moving: &Volume3, t: &RigidTransform, center: [f64; 3]) -> f64 {
    let (data, mask) = resample_about(moving, t, fixed.dims(), fixed.spacing_mm(), center);
    let overlap = mask.iter().filter(|&&m| m).count();
    if overlap * 2 < mask.len() {
        return -1.0;
    }
    let stats = pair_stats(fixed.data(), &data, Some(&mask));
    ncc_from_stats(&stats).unwrap_or(-1.0)
}

/// Golden-section maximization of `f` on [lo, hi] with a fixed iteration
/// budget (deterministic).
fn golden_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..30 {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Estimates the rigid transform mapping `moving` onto `fixed`.
///
/// Coarse-to-fine search over a downsample-by-2 pyramid with up to `levels`
/// levels; the pyramid stops early rather than produce a level with any
/// dimension below 8 voxels. Each level runs 3 coordinate-wise sweeps of
/// golden-section refinement over the 6 parameters; translation brackets
/// start at +/-8 voxels and rotation at +/-15 degrees on the coarsest level
/// and halve per level. A candidate parameter value is only accepted when it
/// strictly improves the score, so a flat or degenerate stretch of the score
/// surface can never drag the estimate away from the incumbent. Returns the
/// transform and the final in-field NCC.
pub fn register_rigid(
    fixed: &Volume3,
    moving: &Volume3,
    levels: usize,
) -> Result<(RigidTransform, f64), RegistrationError> {
    if levels == 0 {
        return Err(RegistrationError::NoLevels);
    }
    // Registration only makes sense if both volumes carry signal.
    let check = |v: &Volume3| -> Result<(), RegistrationError> {
        let s = pair_stats(v.data(), v.data(), None);
        if effectively_zero_variance(s.saa - s.sa * s.sa / s.n, s.saa) {
            Err(RegistrationError::ZeroVariance)
        } else {
            Ok(())
        }
    };
    check(fixed)?;
    check(moving)?;

    let center = physical_center(fixed);
    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for _ in 1..levels {
        let f = fixed_pyr.last().unwrap();
        let m = moving_pyr.last().unwrap();
        // downsample2 halves (floor) every dim; don't build a level whose
        // evaluable interior would be too thin to score reliably.
        if f.dims().iter().any(|&d| d / 2 < 8) || m.dims().iter().any(|&d| d / 2 < 8) {
            break;
        }
        fixed_pyr.push(downsample2(f)?);
        moving_pyr.push(downsample2(m)?);
    }

    let mut t = RigidTransform::identity();
    let n_levels = fixed_pyr.len();
    for (step, level) in (0..n_levels).rev().enumerate() {
        let f_l = &fixed_pyr[level];
        let m_l = &moving_pyr[level];
        let shrink = 0.5f64.powi(step as i32);
        let tr_bracket: [f64; 3] = {
            let s = f_l.spacing_mm();
            [8.0 * s[0] * shrink, 8.0 * s[1] * shrink, 8.0 * s[2] * shrink]
        };
        let rot_bracket = 15f64.to_radians() * shrink;
        let mut best = score(f_l, m_l, &t, center);
        for _sweep in 0..3 {
            for axis in 0..3 {
                let cur = t.translation[axis];
                let cand_x = golden_max(cur - tr_bracket[axis], cur + tr_bracket[axis], |x| {
                    let mut cand = t;
                    cand.translation[axis] = x;
                    score(f_l, m_l, &cand, center)
                });
                let mut cand = t;
                cand.translation[axis] = cand_x;
                let cand_score = score(f_l, m_l, &cand, center);
                if cand_score > best {
                    t = cand;
                    best = cand_score;
                }
            }
            for axis in 0..3 {
                let cur = t.rotation[axis];
                let cand_x = wrap_angle(golden_max(cur - rot_bracket, cur + rot_bracket, |x| {
                    let mut cand = t;
                    cand.rotation[axis] = x;
                    score(f_l, m_l, &cand, center)
                }));
                let mut cand = t;
                cand.rotation[axis] = cand_x;
                let cand_score = score(f_l, m_l, &cand, center);
                if cand_score > best {
                    t = cand;
                    best = cand_score;
                }
            }
        }
    }
    let final_ncc = score(fixed, moving, &t, center);
    Ok((t, final_ncc))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth asymmetric multi-blob phantom; registration needs texture.
    fn blobs(dims: [usize; 3]) -> Volume3 {
        let centers = [
            (0.35, 0.4, 0.5, 0.16),
            (0.65, 0.55, 0.45, 0.22),
            (0.5, 0.7, 0.6, 0.12),
        ];
        Volume3::from_fn(dims, [1.0; 3], |x, y, z| {
            let mut v = 0.0f64;
            for &(cx, cy, cz, r) in &centers {
                let dx = x as f64 / dims[0] as f64 - cx;
                let dy = y as f64 / dims[1] as f64 - cy;
                let dz = z as f64 / dims[2] as f64 - cz;
                v += (-((dx * dx + dy * dy + dz * dz) / (r * r))).exp();
            }
            v.min(1.0) as f32
        })
        .unwrap()
    }

    #[test]
    fn euler_angles_round_trip_through_matrix() {
        let t = RigidTransform {
            rotation: [0.3, -0.7, 1.1],
            translation: [0.0; 3],
        };
        let back = RigidTransform::angles_from_matrix(&t.matrix());
        for a in 0..3 {
            assert!((back[a] - t.rotation[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_compose_is_identity() {
        let t = RigidTransform {
            rotation: [0.2, 0.4, -0.5],
            translation: [3.0, -2.0, 1.5],
        };
        let id = RigidTransform::compose(&t.inverse(), &t);
        for a in 0..3 {
            assert!(id.rotation[a].abs() < 1e-9, "rotation {:?}", id.rotation);
            assert!(id.translation[a].abs() < 1e-9, "translation {:?}", id.translation);
        }
    }

    #[test]
    fn resample_identity_is_exact_at_grid_points() {
        let v = blobs([12, 10, 8]);
        let r = resample(&v, &RigidTransform::identity(), &v);
        for (a, b) in v.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_one_voxel_shift_moves_indices() {
        let v = Volume3::from_fn([6, 5, 4], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let t = RigidTransform {
            rotation: [0.0; 3],
            translation: [1.0, 0.0, 0.0],
        };
        let r = resample(&v, &t, &v);
        for z in 0..4 {
            for y in 0..5 {
                assert_eq!(r.get(0, y, z), 0.0, "leading boundary must be zero-filled");
                for x in 1..6 {
                    assert!((r.get(x, y, z) - v.get(x - 1, y, z)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn resample_pi_rotation_preserves_symmetric_volume() {
        // Rotationally symmetric about the z-axis through the volume center.
        let dims = [16, 16, 8];
        let v = Volume3::from_fn(dims, [1.0; 3], |x, y, z| {
            let dx = x as f64 - 7.5;
            let dy = y as f64 - 7.5;
            let dz = z as f64 - 3.5;
            (-((dx * dx + dy * dy) / 18.0 + dz * dz / 6.0)).exp() as f32
        })
        .unwrap();
        let t = RigidTransform {
            rotation: [0.0, 0.0, std::f64::consts::PI],
            translation: [0.0; 3],
        };
        let r = resample(&v, &t, &v);
        let mut sq = 0.0f64;
        for (a, b) in v.data().iter().zip(r.data()) {
            sq += ((a - b) as f64).powi(2);
        }
        let rms = (sq / v.voxel_count() as f64).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn ncc_is_affine_invariant_and_rejects_constants() {
        // Values on a dyadic grid and exactly-representable affine constants
        // keep the rescaling itself free of f32 rounding.
        let quantize = |v: f32| (v * 1024.0).round() / 1024.0;
        let v = Volume3::from_fn([10, 10, 10], [1.0; 3], |x, y, z| {
            quantize(blobs([10, 10, 10]).get(x, y, z))
        })
        .unwrap();
        let w = Volume3::from_fn([10, 10, 10], [1.0; 3], |x, y, z| {
            quantize(((x * 7 + y * 3 + z * 11) % 13) as f32 / 13.0)
        })
        .unwrap();
        let scaled = Volume3::new(
            w.dims(),
            w.spacing_mm(),
            w.data().iter().map(|&x| 2.0 * x + 0.25).collect(),
        )
        .unwrap();
        let r1 = ncc(&v, &w).unwrap();
        let r2 = ncc(&v, &scaled).unwrap();
        assert!((r1 - r2).abs() < 1e-9, "{r1} vs {r2}");
        assert!((ncc(&v, &v).unwrap() - 1.0).abs() < 1e-9);

        let flat = Volume3::constant([10, 10, 10], [1.0; 3], 0.4).unwrap();
        assert!(matches!(ncc(&v, &flat), Err(RegistrationError::ZeroVariance)));
    }

    #[test]
    fn register_identical_volumes_returns_near_identity() {
        let v = blobs([24, 24, 16]);
        let (t, score) = register_rigid(&v, &v, 2).unwrap();
        assert!(score >= 0.999, "ncc {score}");
        assert!(t.translation_magnitude() < 0.5);
        assert!(t.rotation_magnitude() < 1f64.to_radians());
    }

    #[test]
    fn register_recovers_two_voxel_shift() {
        let v = blobs([32, 32, 24]);
        let shift = RigidTransform {
            rotation: [0.0; 3],
            translation: [2.0, 0.0, 0.0],
        };
        let moving = resample(&v, &shift, &v);
        let (t, _) = register_rigid(&v, &moving, 3).unwrap();
        // Registration should undo the injected shift: t = shift^-1.
        assert!(
            (t.translation[0] + 2.0).abs() <= 0.25,
            "recovered tx {}",
            t.translation[0]
        );
        assert!(t.translation[1].abs() <= 0.25 && t.translation[2].abs() <= 0.25);
        let residual = RigidTransform::compose(&t, &shift);
        assert!(residual.translation_magnitude() <= 0.3);
    }

    #[test]
    fn register_recovers_combined_transform_inverse() {
        let v = blobs([32, 32, 24]);
        let inject = RigidTransform {
            rotation: [0.0, 0.0, 6f64.to_radians()],
            translation: [2.0, -1.5, 1.0],
        };
        let moving = resample(&v, &inject, &v);
        let (t, ncc_val) = register_rigid(&v, &moving, 3).unwrap();
        let residual = RigidTransform::compose(&t, &inject);
        assert!(
            residual.translation_magnitude() <= 0.5,
            "translation residual {} mm",
            residual.translation_magnitude()
        );
        assert!(
            residual.rotation_magnitude() <= 1f64.to_radians(),
            "rotation residual {} deg",
            residual.rotation_magnitude().to_degrees()
        );
        assert!(ncc_val > 0.98, "ncc {ncc_val}");
    }
}
