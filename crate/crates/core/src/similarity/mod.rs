//! Similarity losses between a masked preoperative volume and a
//! postoperative volume, with exact analytic gradients.
//!
//! The removal probability field δ lives in (0,1) as the logistic of an
//! unbounded latent field ([`MaskField`]). Masking a preoperative volume ρ
//! means attenuating it voxelwise to ρ·(1−δ), which drives removed voxels
//! toward the near-zero intensity that resected regions show after surgery.
//!
//! The main objective compares ρ·(1−δ) against the postoperative volume ω
//! with a multi-scale structural similarity score: at each of M dyadic
//! scales, Gaussian-windowed contrast (c) and structure (s) component maps
//! are averaged over the fully-in-bounds region, a global squared
//! cross-correlation (SCC) of the whole scale is added to the mean contrast,
//! and the coarsest scale contributes a luminance mean. The loss is
//!
//! ```text
//! 1 − l_M^{w_M} · Π_j (c̄_j + SCC_j)^{w_j} · s̄_j^{w_j}
//! ```
//!
//! optionally combined with a squared-forward-difference smoothness penalty
//! on δ. Two ablation variants move the SCC term onto the structure factor
//! or drop it entirely ([`LossVariant`]).
//!
//! All internal arithmetic is f64 with deterministic reduction order, so
//! results are bitwise reproducible for any thread count. Gradients with
//! respect to the latent field are exact derivatives chained through the
//! logistic, the masking, the Gaussian windows (self-adjoint correlation),
//! the mean-pool pyramid (transposed pooling), and the component algebra.

mod engine;

use engine::{correlate, pool2, pool2_transpose, shrunk_window_len, Field, Window};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registration::effectively_zero_variance;
use crate::util::{det_sum, det_sum2};
use crate::volume::Volume3;

/// Errors from similarity computations.
#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("input volume has (near-)zero variance; correlation is undefined")]
    ZeroVariance,
    #[error("dims {dims:?} cannot fit a 3-tap window at scale {scale_index}")]
    VolumeTooSmall { dims: [usize; 3], scale_index: usize },
    #[error("invalid similarity parameters: {0}")]
    BadParams(String),
    #[error("non-positive {which} base {value:.6e} at scale {scale_index}")]
    NonPositiveBase {
        which: &'static str,
        scale_index: usize,
        value: f64,
    },
    #[error("loss evaluation produced a non-finite value")]
    NonFinite,
}

/// Parameters of the multi-scale similarity score.
///
/// `weights` holds the per-scale exponent applied to both the contrast and
/// structure factors; the coarsest scale's weight is also the luminance
/// exponent. The Gaussian window auto-shrinks per scale to the largest odd
/// length that fits `min(dims)` at that scale (down to a single tap, at
/// which point contrast and structure are identically 1 and only the global
/// correlation and luminance carry signal).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsssimParams {
    /// Number of dyadic scales M.
    pub scales: usize,
    /// Per-scale exponents (must sum to 1 within 1e-3).
    pub weights: Vec<f64>,
    /// Luminance stabilizer coefficient; C1 = (k1·L)².
    pub k1: f64,
    /// Contrast/structure stabilizer coefficient; C2 = (k2·L)², C3 = C2/2.
    pub k2: f64,
    /// Dynamic range L of the (normalized) inputs.
    pub dynamic_range: f64,
    /// Gaussian window radius before auto-shrink (11 taps at radius 5).
    pub window_radius: usize,
    /// Gaussian window standard deviation in voxels.
    pub window_sigma: f64,
}

impl Default for MsssimParams {
    fn default() -> Self {
        Self {
            scales: 5,
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window_radius: 5,
            window_sigma: 1.5,
        }
    }
}

impl MsssimParams {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        let bad = |msg: String| Err(SimilarityError::BadParams(msg));
        if self.scales == 0 {
            return bad("scales must be >= 1".into());
        }
        if self.weights.len() != self.scales {
            return bad(format!(
                "expected {} weights, got {}",
                self.scales,
                self.weights.len()
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return bad("weights must be finite and positive".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return bad(format!("weights must sum to 1 within 1e-3, got {sum}"));
        }
        if !(self.k1.is_finite() && self.k1 > 0.0 && self.k1 < 1.0) {
            return bad(format!("k1 must be in (0,1), got {}", self.k1));
        }
        if !(self.k2.is_finite() && self.k2 > 0.0 && self.k2 < 1.0) {
            return bad(format!("k2 must be in (0,1), got {}", self.k2));
        }
        if !(self.dynamic_range.is_finite() && self.dynamic_range > 0.0) {
            return bad("dynamic_range must be positive".into());
        }
        if self.window_radius == 0 {
            return bad("window_radius must be >= 1".into());
        }
        if !(self.window_sigma.is_finite() && self.window_sigma > 0.0) {
            return bad("window_sigma must be positive".into());
        }
        Ok(())
    }

    fn consts(&self) -> Consts {
        let c1 = (self.k1 * self.dynamic_range).powi(2);
        let c2 = (self.k2 * self.dynamic_range).powi(2);
        Consts { c1, c2, c3: c2 / 2.0 }
    }
}

/// Where the global squared cross-correlation enters the per-scale score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Plain multi-scale structural similarity, no correlation term.
    Msssim,
    /// Correlation added to the structure factor: (s̄ + SCC)^w.
    MsssimScc,
    /// Correlation added to the contrast factor: (c̄ + SCC)^w.
    #[default]
    MsssimCscc,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Msssim => "msssim",
            LossVariant::MsssimScc => "msssim_scc",
            LossVariant::MsssimCscc => "msssim_cscc",
        }
    }
}

/// Per-scale diagnostic values of one loss evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleReport {
    /// Mean contrast component over the valid window region.
    pub c_mean: f64,
    /// Mean structure component over the valid window region.
    pub s_mean: f64,
    /// Global squared cross-correlation at this scale (0 when degenerate).
    pub scc: f64,
    /// True when either side had (near-)zero variance at this scale, in
    /// which case the correlation is defined as 0 with zero gradient.
    pub scc_degenerate: bool,
    /// Mean luminance component; present only at the coarsest scale.
    pub l_mean: Option<f64>,
}

/// Decomposition of one total-loss evaluation.
///
/// The `msssim_cscc` field holds the multi-scale similarity part under
/// whichever [`LossVariant`] was evaluated; `smooth` holds the smoothness
/// penalty exactly as weighted into `total` (i.e. already divided by the
/// voxel count when normalization is enabled), so that
/// `total = msssim_cscc + lambda * smooth` holds as summed.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub msssim_cscc: f64,
    pub smooth: f64,
    pub per_scale: Vec<ScaleReport>,
}

// ---------------------------------------------------------------------------
// Mask field
// ---------------------------------------------------------------------------

/// Latent values are clamped to this magnitude; the logistic of ±36 is
/// within 2.4e-16 of the open-interval bounds while keeping δ strictly
/// inside (0,1) in f64.
const LATENT_CLAMP: f64 = 36.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Voxelwise removal probability field δ parameterized by an unbounded
/// latent z with δ = logistic(z), kept consistent under every update.
#[derive(Debug, Clone)]
pub struct MaskField {
    dims: [usize; 3],
    latent: Vec<f64>,
    delta: Vec<f64>,
}

impl MaskField {
    /// Field with every voxel at probability `delta0` ∈ (0,1).
    pub fn uniform(dims: [usize; 3], delta0: f64) -> Result<Self, SimilarityError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SimilarityError::BadParams(
                "mask dims must be non-zero".into(),
            ));
        }
        if !(delta0.is_finite() && delta0 > 0.0 && delta0 < 1.0) {
            return Err(SimilarityError::BadParams(format!(
                "initial delta must be in (0,1), got {delta0}"
            )));
        }
        let z = logit(delta0).clamp(-LATENT_CLAMP, LATENT_CLAMP);
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            latent: vec![z; n],
            delta: vec![sigmoid(z); n],
        })
    }

    /// Field from explicit latent values (clamped to the working range).
    pub fn from_latent(dims: [usize; 3], latent: Vec<f64>) -> Result<Self, SimilarityError> {
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 || latent.len() != n {
            return Err(SimilarityError::BadParams(format!(
                "latent length {} does not match dims {:?}",
                latent.len(),
                dims
            )));
        }
        if latent.iter().any(|z| !z.is_finite()) {
            return Err(SimilarityError::BadParams(
                "latent values must be finite".into(),
            ));
        }
        let latent: Vec<f64> = latent
            .into_iter()
            .map(|z| z.clamp(-LATENT_CLAMP, LATENT_CLAMP))
            .collect();
        let delta = latent.iter().map(|&z| sigmoid(z)).collect();
        Ok(Self { dims, latent, delta })
    }

    /// Builds the field from probabilities in [0, 1]; values at or beyond the
    /// open interval's ends land on the latent clamp (δ within 2e-16 of 0/1).
    pub fn from_delta(dims: [usize; 3], delta: &[f64]) -> Result<Self, SimilarityError> {
        if delta.iter().any(|d| !d.is_finite() || !(0.0..=1.0).contains(d)) {
            return Err(SimilarityError::BadParams(
                "delta values must lie in [0, 1]".into(),
            ));
        }
        let latent = delta
            .iter()
            .map(|&d| logit(d).clamp(-LATENT_CLAMP, LATENT_CLAMP))
            .collect();
        Self::from_latent(dims, latent)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.latent.len()
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn mean_delta(&self) -> f64 {
        det_sum(&self.delta) / self.delta.len() as f64
    }

    /// Rewrites every latent value as `f(index, current)`, clamps it, and
    /// recomputes δ.
    pub fn update_latent(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for (i, z) in self.latent.iter_mut().enumerate() {
            *z = f(i, *z).clamp(-LATENT_CLAMP, LATENT_CLAMP);
            self.delta[i] = sigmoid(*z);
        }
    }

    /// δ as an f32 volume with the given spacing.
    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Volume3 {
        Volume3::from_f64(self.dims, spacing_mm, &self.delta)
            .expect("logistic values are finite")
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Masked volume ρ·(1−δ): removed voxels are attenuated toward zero.
pub fn apply_mask(rho: &Volume3, delta: &MaskField) -> Result<Volume3, SimilarityError> {
    if rho.dims() != delta.dims() {
        return Err(SimilarityError::DimsMismatch {
            a: rho.dims(),
            b: delta.dims(),
        });
    }
    let data: Vec<f64> = rho
        .data()
        .iter()
        .zip(delta.delta())
        .map(|(&r, &d)| r as f64 * (1.0 - d))
        .collect();
    Ok(Volume3::from_f64(rho.dims(), rho.spacing_mm(), &data)
        .expect("attenuated intensities are finite"))
}

/// Global squared Pearson correlation between two volumes, in [0,1].
///
/// Errors with [`SimilarityError::ZeroVariance`] if either side is
/// (numerically) constant; the in-loss pyramid instead maps that case to a
/// flagged 0 so a degenerate iterate cannot poison an optimization.
pub fn scc(a: &Volume3, b: &Volume3) -> Result<f64, SimilarityError> {
    if a.dims() != b.dims() {
        return Err(SimilarityError::DimsMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let av = a.to_f64();
    let bv = b.to_f64();
    let n = av.len() as f64;
    let am = det_sum(&av) / n;
    let bm = det_sum(&bv) / n;
    let saa = det_sum2(&av, &av, |x, _| (x - am) * (x - am));
    let sbb = det_sum2(&bv, &bv, |x, _| (x - bm) * (x - bm));
    let a_msq = det_sum2(&av, &av, |x, _| x * x) / n;
    let b_msq = det_sum2(&bv, &bv, |x, _| x * x) / n;
    if effectively_zero_variance(saa / n, a_msq) || effectively_zero_variance(sbb / n, b_msq) {
        return Err(SimilarityError::ZeroVariance);
    }
    let sab = det_sum2(&av, &bv, |x, y| (x - am) * (y - bm));
    Ok((sab * sab / (saa * sbb)).min(1.0))
}

/// Mean luminance/contrast/structure components of a single scale.
///
/// `scale_index` only identifies the pyramid level in error messages; the
/// inputs are expected to be already downsampled to that scale. Errors when
/// the auto-shrunk window would fall below 3 taps (min dim < 3).
pub fn ssim_components(
    a: &Volume3,
    b: &Volume3,
    p: &MsssimParams,
    scale_index: usize,
) -> Result<(f64, f64, f64), SimilarityError> {
    p.validate()?;
    if a.dims() != b.dims() {
        return Err(SimilarityError::DimsMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let dims = a.dims();
    if shrunk_window_len(p.window_radius, dims) < 3 {
        return Err(SimilarityError::VolumeTooSmall { dims, scale_index });
    }
    let window = Window::build(p.window_radius, p.window_sigma, dims);
    let k = p.consts();
    let af = Field::from_volume(a);
    let bf = Field::from_volume(b);
    let aa = elementwise(&af, &af, |x, y| x * y);
    let bb = elementwise(&bf, &bf, |x, y| x * y);
    let ab = elementwise(&af, &bf, |x, y| x * y);
    let ma = correlate(&af, &window);
    let mb = correlate(&bf, &window);
    let maa = correlate(&aa, &window);
    let mbb = correlate(&bb, &window);
    let mab = correlate(&ab, &window);
    let moments = ScaleMoments {
        ma: &ma,
        mb: &mb,
        maa: &maa,
        mbb: &mbb,
        mab: &mab,
    };
    let (l_sum, c_sum, s_sum) = component_sums(&moments, &window, &k);
    let vn = window.valid_count(dims) as f64;
    Ok((l_sum / vn, c_sum / vn, s_sum / vn))
}

/// Multi-scale similarity loss between two volumes under a given variant,
/// along with the per-scale diagnostics.
pub fn msssim_loss(
    a: &Volume3,
    b: &Volume3,
    p: &MsssimParams,
    variant: LossVariant,
) -> Result<(f64, Vec<ScaleReport>), SimilarityError> {
    let stack = LossStack::new(b, p.clone(), variant)?;
    if a.dims() != b.dims() {
        return Err(SimilarityError::DimsMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let states = stack.forward(Field::from_volume(a));
    let (loss, _) = stack.compose(&states)?;
    Ok((loss, stack.reports(&states)))
}

/// The default loss: multi-scale similarity with the global correlation
/// lifted onto each scale's contrast factor.
pub fn loss_msssim_cscc(
    masked: &Volume3,
    omega: &Volume3,
    p: &MsssimParams,
) -> Result<f64, SimilarityError> {
    msssim_loss(masked, omega, p, LossVariant::MsssimCscc).map(|(loss, _)| loss)
}

/// Smoothness penalty: sum over voxels and axes of squared forward
/// differences of δ. Far faces contribute nothing along their axis. This is
/// the raw (unnormalized) sum.
pub fn loss_smooth(delta: &MaskField) -> f64 {
    smooth_value_grad(delta.delta(), delta.dims()).0
}

/// Total objective and its exact gradient with respect to the latent field:
/// `loss(ρ·(1−δ), ω) + λ·loss_smooth(δ)` with the raw smoothness sum, under
/// the default contrast-correlation variant.
pub fn total_loss_and_gradient(
    rho: &Volume3,
    omega: &Volume3,
    delta: &MaskField,
    lambda: f64,
    p: &MsssimParams,
) -> Result<(LossReport, Vec<f64>), SimilarityError> {
    let eval = LossEvaluator::new(
        rho,
        omega,
        p.clone(),
        LossOptions {
            lambda,
            smooth_normalize: false,
            variant: LossVariant::MsssimCscc,
        },
    )?;
    eval.evaluate(delta)
}

/// How a [`LossEvaluator`] assembles the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    /// Weight of the smoothness penalty.
    pub lambda: f64,
    /// Divide the smoothness sum by the voxel count before weighting
    /// (scale-free across resolutions).
    pub smooth_normalize: bool,
    pub variant: LossVariant,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            smooth_normalize: true,
            variant: LossVariant::MsssimCscc,
        }
    }
}

/// Reusable evaluator of the total objective for one (ρ, ω) pair.
///
/// The ω-side pyramid, window moments, and correlation statistics are fixed
/// across iterations, so they are computed once here; each [`evaluate`]
/// recomputes only the masked side.
///
/// [`evaluate`]: LossEvaluator::evaluate
pub struct LossEvaluator {
    rho: Field,
    spacing_mm: [f64; 3],
    stack: LossStack,
    opts: LossOptions,
}

impl LossEvaluator {
    pub fn new(
        rho: &Volume3,
        omega: &Volume3,
        params: MsssimParams,
        opts: LossOptions,
    ) -> Result<Self, SimilarityError> {
        if rho.dims() != omega.dims() {
            return Err(SimilarityError::DimsMismatch {
                a: rho.dims(),
                b: omega.dims(),
            });
        }
        if !(opts.lambda.is_finite() && opts.lambda >= 0.0) {
            return Err(SimilarityError::BadParams(format!(
                "lambda must be finite and >= 0, got {}",
                opts.lambda
            )));
        }
        let stack = LossStack::new(omega, params, opts.variant)?;
        Ok(Self {
            rho: Field::from_volume(rho),
            spacing_mm: rho.spacing_mm(),
            stack,
            opts,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.rho.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    fn masked(&self, mask: &MaskField) -> Result<Field, SimilarityError> {
        if mask.dims() != self.rho.dims {
            return Err(SimilarityError::DimsMismatch {
                a: self.rho.dims,
                b: mask.dims(),
            });
        }
        let data: Vec<f64> = self
            .rho
            .data
            .par_iter()
            .zip(mask.delta().par_iter())
            .map(|(&r, &d)| r * (1.0 - d))
            .collect();
        Ok(Field {
            dims: self.rho.dims,
            data,
        })
    }

    fn report(
        &self,
        states: &[LevelState],
        msssim: f64,
        smooth_raw: f64,
    ) -> (LossReport, f64) {
        let n = self.rho.len() as f64;
        let (smooth, lambda_eff) = if self.opts.smooth_normalize {
            (smooth_raw / n, self.opts.lambda / n)
        } else {
            (smooth_raw, self.opts.lambda)
        };
        let report = LossReport {
            total: msssim + self.opts.lambda * smooth,
            msssim_cscc: msssim,
            smooth,
            per_scale: self.stack.reports(states),
        };
        (report, lambda_eff)
    }

    /// Loss decomposition only (no gradient work).
    pub fn evaluate_value(&self, mask: &MaskField) -> Result<LossReport, SimilarityError> {
        let states = self.stack.forward(self.masked(mask)?);
        let (msssim, _) = self.stack.compose(&states)?;
        let (smooth_raw, _) = smooth_value_grad(mask.delta(), mask.dims());
        Ok(self.report(&states, msssim, smooth_raw).0)
    }

    /// Loss decomposition and the exact gradient with respect to the latent.
    pub fn evaluate(
        &self,
        mask: &MaskField,
    ) -> Result<(LossReport, Vec<f64>), SimilarityError> {
        let states = self.stack.forward(self.masked(mask)?);
        let (msssim, f) = self.stack.compose(&states)?;
        let g1 = self.stack.backward(&states, f)?;
        let (smooth_raw, smooth_grad) = smooth_value_grad(mask.delta(), mask.dims());
        let (report, lambda_eff) = self.report(&states, msssim, smooth_raw);
        let grad: Vec<f64> = g1
            .data
            .par_iter()
            .zip(self.rho.data.par_iter())
            .zip(smooth_grad.par_iter())
            .zip(mask.delta().par_iter())
            .map(|(((&g, &r), &gs), &d)| (-r * g + lambda_eff * gs) * d * (1.0 - d))
            .collect();
        Ok((report, grad))
    }
}

// ---------------------------------------------------------------------------
// Internal loss machinery
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Consts {
    c1: f64,
    c2: f64,
    c3: f64,
}

/// ω-side state of one pyramid level, fixed across evaluations.
struct OmegaLevel {
    b: Field,
    mb: Field,
    mbb: Field,
    window: Window,
    b_mean: f64,
    sbb: f64,
    degenerate: bool,
}

/// Masked-side state of one pyramid level for one evaluation.
struct LevelState {
    a: Field,
    ma: Field,
    maa: Field,
    mab: Field,
    c_mean: f64,
    s_mean: f64,
    l_mean: Option<f64>,
    a_mean: f64,
    saa: f64,
    sab: f64,
    scc: f64,
    scc_degenerate: bool,
}

/// The fixed ω-side pyramid plus loss parameters.
struct LossStack {
    levels: Vec<OmegaLevel>,
    params: MsssimParams,
    variant: LossVariant,
    consts: Consts,
}

/// Window moments of one scale: means of a, b, a², b², and a·b.
struct ScaleMoments<'a> {
    ma: &'a Field,
    mb: &'a Field,
    maa: &'a Field,
    mbb: &'a Field,
    mab: &'a Field,
}

impl LossStack {
    fn new(
        omega: &Volume3,
        params: MsssimParams,
        variant: LossVariant,
    ) -> Result<Self, SimilarityError> {
        params.validate()?;
        let consts = params.consts();
        let mut levels = Vec::with_capacity(params.scales);
        let mut b = Field::from_volume(omega);
        for j in 0..params.scales {
            let window = Window::build(params.window_radius, params.window_sigma, b.dims);
            let bb = elementwise(&b, &b, |x, y| x * y);
            let mb = correlate(&b, &window);
            let mbb = correlate(&bb, &window);
            let n = b.len() as f64;
            let b_mean = det_sum(&b.data) / n;
            let sbb = det_sum2(&b.data, &b.data, |x, _| (x - b_mean) * (x - b_mean));
            let b_msq = det_sum2(&b.data, &b.data, |x, _| x * x) / n;
            let degenerate = effectively_zero_variance(sbb / n, b_msq);
            let next = (j + 1 < params.scales).then(|| pool2(&b));
            levels.push(OmegaLevel {
                b,
                mb,
                mbb,
                window,
                b_mean,
                sbb,
                degenerate,
            });
            match next {
                Some(v) => b = v,
                None => break,
            }
        }
        Ok(Self {
            levels,
            params,
            variant,
            consts,
        })
    }

    fn forward(&self, a0: Field) -> Vec<LevelState> {
        let m = self.levels.len();
        let mut states = Vec::with_capacity(m);
        let mut a = a0;
        for (j, om) in self.levels.iter().enumerate() {
            let aa = elementwise(&a, &a, |x, y| x * y);
            let ab = elementwise(&a, &om.b, |x, y| x * y);
            let ma = correlate(&a, &om.window);
            let maa = correlate(&aa, &om.window);
            let mab = correlate(&ab, &om.window);
            let moments = ScaleMoments {
                ma: &ma,
                mb: &om.mb,
                maa: &maa,
                mbb: &om.mbb,
                mab: &mab,
            };
            let (l_sum, c_sum, s_sum) = component_sums(&moments, &om.window, &self.consts);
            let vn = om.window.valid_count(a.dims) as f64;
            let n = a.len() as f64;
            let a_mean = det_sum(&a.data) / n;
            let saa = det_sum2(&a.data, &a.data, |x, _| (x - a_mean) * (x - a_mean));
            let a_msq = det_sum2(&a.data, &a.data, |x, _| x * x) / n;
            let scc_degenerate =
                om.degenerate || effectively_zero_variance(saa / n, a_msq);
            let (sab, scc) = if scc_degenerate {
                (0.0, 0.0)
            } else {
                let sab = det_sum2(&a.data, &om.b.data, |x, y| {
                    (x - a_mean) * (y - om.b_mean)
                });
                (sab, sab * sab / (saa * om.sbb))
            };
            let next = (j + 1 < m).then(|| pool2(&a));
            states.push(LevelState {
                a,
                ma,
                maa,
                mab,
                c_mean: c_sum / vn,
                s_mean: s_sum / vn,
                l_mean: (j + 1 == m).then_some(l_sum / vn),
                a_mean,
                saa,
                sab,
                scc,
                scc_degenerate,
            });
            match next {
                Some(v) => a = v,
                None => break,
            }
        }
        states
    }

    /// Exponent bases of one scale under the active variant.
    fn bases(&self, st: &LevelState) -> (f64, f64) {
        match self.variant {
            LossVariant::Msssim => (st.c_mean, st.s_mean),
            LossVariant::MsssimScc => (st.c_mean, st.s_mean + st.scc),
            LossVariant::MsssimCscc => (st.c_mean + st.scc, st.s_mean),
        }
    }

    /// Loss value `1 − F` and the product `F` itself.
    fn compose(&self, states: &[LevelState]) -> Result<(f64, f64), SimilarityError> {
        let m = states.len();
        let mut ln_f = 0.0;
        for (j, st) in states.iter().enumerate() {
            let w = self.params.weights[j];
            let (cb, sb) = self.bases(st);
            if cb <= 0.0 {
                return Err(SimilarityError::NonPositiveBase {
                    which: "contrast",
                    scale_index: j,
                    value: cb,
                });
            }
            if sb <= 0.0 {
                return Err(SimilarityError::NonPositiveBase {
                    which: "structure",
                    scale_index: j,
                    value: sb,
                });
            }
            ln_f += w * (cb.ln() + sb.ln());
            if j + 1 == m {
                let l = st.l_mean.expect("coarsest scale carries luminance");
                if l <= 0.0 {
                    return Err(SimilarityError::NonPositiveBase {
                        which: "luminance",
                        scale_index: j,
                        value: l,
                    });
                }
                ln_f += w * l.ln();
            }
        }
        let f = ln_f.exp();
        if !f.is_finite() {
            return Err(SimilarityError::NonFinite);
        }
        Ok((1.0 - f, f))
    }

    fn reports(&self, states: &[LevelState]) -> Vec<ScaleReport> {
        states
            .iter()
            .map(|st| ScaleReport {
                c_mean: st.c_mean,
                s_mean: st.s_mean,
                scc: st.scc,
                scc_degenerate: st.scc_degenerate,
                l_mean: st.l_mean,
            })
            .collect()
    }

    /// Gradient of the loss with respect to the finest-scale masked volume.
    fn backward(&self, states: &[LevelState], f: f64) -> Result<Field, SimilarityError> {
        let m = states.len();
        let mut g: Option<Field> = None;
        for j in (0..m).rev() {
            let st = &states[j];
            let om = &self.levels[j];
            let w = self.params.weights[j];
            let (cb, sb) = self.bases(st);
            // d(1−F)/dc̄ = −F·w/cb, and likewise for the other factors.
            let sc = -f * w / cb;
            let ss = -f * w / sb;
            let sl = if j + 1 == m {
                -f * w / st.l_mean.expect("coarsest scale carries luminance")
            } else {
                0.0
            };
            let sscc = if st.scc_degenerate {
                0.0
            } else {
                match self.variant {
                    LossVariant::Msssim => 0.0,
                    LossVariant::MsssimScc => ss,
                    LossVariant::MsssimCscc => sc,
                }
            };
            let direct = self.direct_gradient(st, om, sc, ss, sl, sscc);
            g = Some(match g {
                None => direct,
                Some(prev) => {
                    let up = pool2_transpose(&prev, st.a.dims);
                    elementwise(&up, &direct, |x, y| x + y)
                }
            });
        }
        g.ok_or(SimilarityError::NonFinite)
    }

    /// In-scale gradient contribution dLoss/da_j (window components + SCC).
    fn direct_gradient(
        &self,
        st: &LevelState,
        om: &OmegaLevel,
        sc: f64,
        ss: f64,
        sl: f64,
        sscc: f64,
    ) -> Field {
        let dims = st.a.dims;
        let vn = om.window.valid_count(dims) as f64;
        let (wc, ws, wl) = (sc / vn, ss / vn, sl / vn);
        let k = &self.consts;
        let [(xlo, xhi), (ylo, yhi), (zlo, zhi)] = om.window.valid_range(dims);
        let [nx, ny, _] = dims;
        let plane = nx * ny;

        // Scatter per-voxel component partials into moment-space fields.
        let mut ga = Field::zeros(dims);
        let mut gp = Field::zeros(dims);
        let mut gr = Field::zeros(dims);
        ga.data
            .par_chunks_mut(plane)
            .zip(gp.data.par_chunks_mut(plane))
            .zip(gr.data.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(z, ((pa, pp), pr))| {
                if z < zlo || z > zhi {
                    return;
                }
                for y in ylo..=yhi {
                    let row = nx * y;
                    for x in xlo..=xhi {
                        let j = row + x;
                        let i = j + plane * z;
                        let e = voxel_eval(
                            st.ma.data[i],
                            om.mb.data[i],
                            st.maa.data[i],
                            om.mbb.data[i],
                            st.mab.data[i],
                            k,
                        );
                        let q = wc * e.dc_dva + ws * e.ds_dva;
                        pa[j] = q * (-2.0 * e.ma) * e.va_gate - ws * e.ds_dcab * e.mb
                            + wl * e.dl_dma;
                        pp[j] = q * e.va_gate;
                        pr[j] = ws * e.ds_dcab;
                    }
                }
            });

        // The window is symmetric, so correlation is its own adjoint:
        // dL/da = corr(gA) + 2a·corr(gP) + b·corr(gR), plus the global
        // correlation term.
        let ca = correlate(&ga, &om.window);
        let cp = correlate(&gp, &om.window);
        let cr = correlate(&gr, &om.window);
        let scc_on = sscc != 0.0 && !st.scc_degenerate;
        let (kb, ka) = if scc_on {
            (
                2.0 * sscc * st.sab / (st.saa * om.sbb),
                2.0 * sscc * st.scc / st.saa,
            )
        } else {
            (0.0, 0.0)
        };
        let mut out = Field::zeros(dims);
        out.data
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(z, orow)| {
                let base = plane * z;
                for (j, o) in orow.iter_mut().enumerate() {
                    let i = base + j;
                    let mut v = ca.data[i]
                        + 2.0 * st.a.data[i] * cp.data[i]
                        + om.b.data[i] * cr.data[i];
                    if scc_on {
                        v += kb * (om.b.data[i] - om.b_mean) - ka * (st.a.data[i] - st.a_mean);
                    }
                    *o = v;
                }
            });
        out
    }
}

/// Elementwise combination of two fields (deterministic, parallel).
fn elementwise(a: &Field, b: &Field, f: impl Fn(f64, f64) -> f64 + Sync) -> Field {
    debug_assert_eq!(a.dims, b.dims);
    let data: Vec<f64> = a
        .data
        .par_iter()
        .zip(b.data.par_iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Field { dims: a.dims, data }
}

/// Per-voxel component values and the partial derivatives needed for the
/// masked-side gradient. The variance clamp gate zeroes derivative flow
/// through a negative (round-off) variance.
struct VoxelEval {
    l: f64,
    c: f64,
    s: f64,
    ma: f64,
    mb: f64,
    dc_dva: f64,
    ds_dva: f64,
    ds_dcab: f64,
    dl_dma: f64,
    va_gate: f64,
}

#[inline]
fn voxel_eval(ma: f64, mb: f64, maa: f64, mbb: f64, mab: f64, k: &Consts) -> VoxelEval {
    let va_raw = maa - ma * ma;
    let vb_raw = mbb - mb * mb;
    let va = va_raw.max(0.0);
    let vb = vb_raw.max(0.0);
    let cab = mab - ma * mb;
    let u = (va * vb).sqrt();
    let d = va + vb + k.c2;
    let e = u + k.c3;
    let c_num = 2.0 * u + k.c2;
    let c = c_num / d;
    let s = (cab + k.c3) / e;
    let l_den = ma * ma + mb * mb + k.c1;
    let l_num = 2.0 * ma * mb + k.c1;
    let l = l_num / l_den;
    // ∂u/∂va = vb/(2u); at u = 0 the loss is locally |ε|-shaped and the
    // symmetric subgradient 0 matches central differences.
    let du_dva = if u > 0.0 { vb / (2.0 * u) } else { 0.0 };
    let dc_dva = (2.0 * du_dva * d - c_num) / (d * d);
    let ds_du = -(cab + k.c3) / (e * e);
    let ds_dva = ds_du * du_dva;
    let ds_dcab = 1.0 / e;
    let dl_dma = (2.0 * mb * l_den - l_num * 2.0 * ma) / (l_den * l_den);
    let va_gate = if va_raw >= 0.0 { 1.0 } else { 0.0 };
    VoxelEval {
        l,
        c,
        s,
        ma,
        mb,
        dc_dva,
        ds_dva,
        ds_dcab,
        dl_dma,
        va_gate,
    }
}

/// Sums of the (l, c, s) component maps over the valid window region,
/// parallel over slabs with a serial ordered fold.
fn component_sums(m: &ScaleMoments, w: &Window, k: &Consts) -> (f64, f64, f64) {
    let dims = m.ma.dims;
    let [(xlo, xhi), (ylo, yhi), (zlo, zhi)] = w.valid_range(dims);
    let [nx, ny, _] = dims;
    let partials: Vec<(f64, f64, f64)> = (zlo..=zhi)
        .into_par_iter()
        .map(|z| {
            let (mut ls, mut cs, mut ss) = (0.0, 0.0, 0.0);
            for y in ylo..=yhi {
                let row = nx * (y + ny * z);
                for x in xlo..=xhi {
                    let i = row + x;
                    let e = voxel_eval(
                        m.ma.data[i],
                        m.mb.data[i],
                        m.maa.data[i],
                        m.mbb.data[i],
                        m.mab.data[i],
                        k,
                    );
                    ls += e.l;
                    cs += e.c;
                    ss += e.s;
                }
            }
            (ls, cs, ss)
        })
        .collect();
    partials
        .into_iter()
        .fold((0.0, 0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2))
}

/// Raw smoothness sum and its gradient with respect to δ.
fn smooth_value_grad(delta: &[f64], dims: [usize; 3]) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let partials: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut acc = 0.0;
            for y in 0..ny {
                let row = nx * (y + ny * z);
                for x in 0..nx {
                    let i = row + x;
                    if x + 1 < nx {
                        let d = delta[i + 1] - delta[i];
                        acc += d * d;
                    }
                    if y + 1 < ny {
                        let d = delta[i + nx] - delta[i];
                        acc += d * d;
                    }
                    if z + 1 < nz {
                        let d = delta[i + plane] - delta[i];
                        acc += d * d;
                    }
                }
            }
            acc
        })
        .collect();
    let value = partials.into_iter().fold(0.0, |a, b| a + b);
    let mut grad = vec![0.0; delta.len()];
    grad.par_chunks_mut(plane).enumerate().for_each(|(z, gp)| {
        for y in 0..ny {
            for x in 0..nx {
                let j = x + nx * y;
                let i = j + plane * z;
                let center = delta[i];
                let mut g = 0.0;
                if x > 0 {
                    g += 2.0 * (center - delta[i - 1]);
                }
                if x + 1 < nx {
                    g -= 2.0 * (delta[i + 1] - center);
                }
                if y > 0 {
                    g += 2.0 * (center - delta[i - nx]);
                }
                if y + 1 < ny {
                    g -= 2.0 * (delta[i + nx] - center);
                }
                if z > 0 {
                    g += 2.0 * (center - delta[i - plane]);
                }
                if z + 1 < nz {
                    g -= 2.0 * (delta[i + plane] - center);
                }
                gp[j] = g;
            }
        }
    });
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_triple, PhantomSpec, StreamRng};
    use crate::volume::normalize_intensity;
    use proptest::prelude::*;

    const SP: [f64; 3] = [1.0, 1.0, 1.0];

    fn rand_volume(dims: [usize; 3], seed: u64, lo: f64, hi: f64) -> Volume3 {
        let mut rng = StreamRng::new(seed, 0x5157);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|_| rng.next_range(lo, hi) as f32).collect();
        Volume3::new(dims, SP, data).unwrap()
    }

    /// Random volume quantized to multiples of 1/1024 so that affine maps
    /// with dyadic coefficients are exact in both f32 and f64.
    fn dyadic_volume(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = StreamRng::new(seed, 0x5158);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n)
            .map(|_| ((rng.next_unit() * 1024.0).round() / 1024.0) as f32)
            .collect();
        Volume3::new(dims, SP, data).unwrap()
    }

    fn small_phantom(seed: u64, dims: [usize; 3]) -> (Volume3, Volume3, crate::phantom::GroundTruthMask) {
        let spec = PhantomSpec {
            dims,
            seed,
            // At 16-voxel scales the default blob radius cannot reach the
            // generator's minimum removal fraction; use larger blobs.
            removal_radius_frac: [0.30, 0.40],
            ..PhantomSpec::default()
        };
        let (pre, post, gt) = generate_triple(&spec).unwrap();
        let pre_n = normalize_intensity(&pre, 0.005, 0.995).unwrap().volume;
        let post_n = normalize_intensity(&post, 0.005, 0.995).unwrap().volume;
        (pre_n, post_n, gt)
    }

    #[test]
    fn apply_mask_limits_and_arithmetic() {
        let rho = rand_volume([8, 8, 8], 1, 0.0, 1.0);
        let nearly_zero = MaskField::from_latent([8, 8, 8], vec![-40.0; 512]).unwrap();
        let kept = apply_mask(&rho, &nearly_zero).unwrap();
        assert_eq!(kept.data(), rho.data());

        let nearly_one = MaskField::uniform([8, 8, 8], 1.0 - 1e-7).unwrap();
        let removed = apply_mask(&rho, &nearly_one).unwrap();
        assert!(removed.data().iter().all(|v| v.abs() <= 1e-6));

        let flat = Volume3::constant([8, 8, 8], SP, 0.8).unwrap();
        let half = MaskField::uniform([8, 8, 8], 0.5).unwrap();
        let out = apply_mask(&flat, &half).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() <= 1e-7));

        let other = MaskField::uniform([8, 8, 4], 0.5).unwrap();
        assert!(matches!(
            apply_mask(&rho, &other),
            Err(SimilarityError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn mask_field_keeps_latent_and_delta_consistent() {
        let mut m = MaskField::from_latent([4, 4, 2], (0..32).map(|i| i as f64 - 16.0).collect())
            .unwrap();
        for (&z, &d) in m.latent().iter().zip(m.delta()) {
            assert!((d - sigmoid(z)).abs() < 1e-15);
            assert!(d > 0.0 && d < 1.0);
        }
        m.update_latent(|_, z| z + 100.0);
        for (&z, &d) in m.latent().iter().zip(m.delta()) {
            assert!(z <= LATENT_CLAMP);
            assert!(d < 1.0);
            assert!((d - sigmoid(z)).abs() < 1e-15);
        }
        assert!(MaskField::uniform([4, 4, 4], 0.0).is_err());
        assert!(MaskField::uniform([4, 4, 4], 1.0).is_err());
        assert!(MaskField::from_latent([4, 4, 4], vec![f64::NAN; 64]).is_err());
        assert!(MaskField::from_latent([4, 4, 4], vec![0.0; 3]).is_err());
    }

    #[test]
    fn mask_field_from_delta_round_trips_probabilities() {
        let probs: Vec<f64> = vec![0.0, 0.1, 0.5, 0.9, 1.0, 0.25, 0.75, 1e-9];
        let m = MaskField::from_delta([2, 2, 2], &probs).unwrap();
        for (&want, &got) in probs.iter().zip(m.delta()) {
            assert!((want - got).abs() < 1e-12, "{want} vs {got}");
            assert!(got > 0.0 && got < 1.0);
        }
        assert!(m.latent().iter().all(|z| z.abs() <= LATENT_CLAMP));
        assert!(MaskField::from_delta([2, 2, 2], &vec![1.5; 8]).is_err());
        assert!(MaskField::from_delta([2, 2, 2], &vec![f64::NAN; 8]).is_err());
        assert!(MaskField::from_delta([2, 2, 2], &vec![0.5; 3]).is_err());
    }

    #[test]
    fn scc_detects_perfect_and_absent_correlation() {
        let v = dyadic_volume([8, 8, 8], 3);
        assert!((scc(&v, &v).unwrap() - 1.0).abs() <= 1e-12);

        let neg = Volume3::new(v.dims(), SP, v.data().iter().map(|x| -x).collect()).unwrap();
        assert!((scc(&v, &neg).unwrap() - 1.0).abs() <= 1e-12);

        let w = dyadic_volume([8, 8, 8], 4);
        let affine =
            Volume3::new(v.dims(), SP, v.data().iter().map(|x| 2.0 * x + 0.25).collect())
                .unwrap();
        assert!((scc(&affine, &w).unwrap() - scc(&v, &w).unwrap()).abs() <= 1e-9);
        assert!((scc(&v, &affine).unwrap() - 1.0).abs() <= 1e-12);

        assert!(scc(&w, &w).unwrap() <= 1.0);
        assert!(scc(&v, &w).unwrap() < 0.2);

        let flat = Volume3::constant([8, 8, 8], SP, 0.4).unwrap();
        assert!(matches!(
            scc(&flat, &v),
            Err(SimilarityError::ZeroVariance)
        ));
        assert!(matches!(
            scc(&v, &flat),
            Err(SimilarityError::ZeroVariance)
        ));
    }

    #[test]
    fn ssim_components_identity_is_one() {
        let v = rand_volume([16, 16, 16], 5, 0.2, 0.9);
        let p = MsssimParams::default();
        let (l, c, s) = ssim_components(&v, &v, &p, 0).unwrap();
        assert!((l - 1.0).abs() <= 1e-9, "l = {l}");
        assert!((c - 1.0).abs() <= 1e-9, "c = {c}");
        assert!((s - 1.0).abs() <= 1e-9, "s = {s}");
    }

    #[test]
    fn ssim_components_pure_luminance_shift() {
        let v = rand_volume([16, 16, 16], 6, 0.05, 0.75);
        let shifted =
            Volume3::new(v.dims(), SP, v.data().iter().map(|x| x + 0.1).collect()).unwrap();
        let p = MsssimParams::default();
        let (l, c, s) = ssim_components(&v, &shifted, &p, 0).unwrap();
        assert!(l < 0.999 && l > 0.5, "l = {l}");
        assert!((c - 1.0).abs() <= 1e-6, "c = {c}");
        assert!((s - 1.0).abs() <= 1e-6, "s = {s}");
    }

    #[test]
    fn ssim_components_structure_low_for_independent_volumes() {
        let v = rand_volume([16, 16, 16], 7, 0.0, 1.0);
        let w = rand_volume([16, 16, 16], 8, 0.0, 1.0);
        let p = MsssimParams::default();
        let (_, _, s) = ssim_components(&v, &w, &p, 0).unwrap();
        assert!(s < 0.5, "s = {s}");
    }

    #[test]
    fn ssim_components_rejects_tiny_volumes_and_bad_params() {
        let v = rand_volume([2, 8, 8], 9, 0.0, 1.0);
        let p = MsssimParams::default();
        assert!(matches!(
            ssim_components(&v, &v, &p, 3),
            Err(SimilarityError::VolumeTooSmall { scale_index: 3, .. })
        ));

        let v3 = rand_volume([3, 8, 8], 9, 0.0, 1.0);
        assert!(ssim_components(&v3, &v3, &p, 0).is_ok());

        let mut bad = MsssimParams::default();
        bad.weights[0] += 0.1;
        assert!(matches!(
            ssim_components(&v3, &v3, &bad, 0),
            Err(SimilarityError::BadParams(_))
        ));
        let mut bad = MsssimParams::default();
        bad.weights.pop();
        assert!(bad.validate().is_err());
        let bad = MsssimParams {
            scales: 0,
            weights: vec![],
            ..MsssimParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = MsssimParams {
            k2: 0.0,
            ..MsssimParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_identity_matches_analytic_value() {
        let v = rand_volume([32, 32, 32], 10, 0.0, 1.0);
        let p = MsssimParams::default();
        let weight_sum: f64 = p.weights.iter().sum();
        let expected = 1.0 - 2f64.powf(weight_sum);
        let got = loss_msssim_cscc(&v, &v, &p).unwrap();
        assert!(
            (got - expected).abs() <= 1e-6,
            "got {got}, expected {expected}"
        );

        // The structure-side variant reaches the same identity value; the
        // plain variant has no correlation lift and bottoms out at 0.
        let (scc_loss, _) = msssim_loss(&v, &v, &p, LossVariant::MsssimScc).unwrap();
        assert!((scc_loss - expected).abs() <= 1e-6);
        let (plain, _) = msssim_loss(&v, &v, &p, LossVariant::Msssim).unwrap();
        assert!(plain.abs() <= 1e-6, "plain = {plain}");
    }

    #[test]
    fn loss_identity_is_minimal_against_independent_volume() {
        let v = rand_volume([32, 32, 32], 11, 0.0, 1.0);
        let w = rand_volume([32, 32, 32], 12, 0.0, 1.0);
        let p = MsssimParams::default();
        let self_loss = loss_msssim_cscc(&v, &v, &p).unwrap();
        let cross_loss = loss_msssim_cscc(&v, &w, &p).unwrap();
        assert!(cross_loss > self_loss);
    }

    #[test]
    fn loss_true_mask_beats_no_mask_on_phantom() {
        let (pre, post, gt) = small_phantom(7, [32, 32, 16]);
        let p = MsssimParams::default();
        let masked: Vec<f64> = pre
            .data()
            .iter()
            .zip(gt.labels())
            .map(|(&r, &m)| if m { 0.0 } else { r as f64 })
            .collect();
        let masked = Volume3::from_f64(pre.dims(), SP, &masked).unwrap();
        let with_mask = loss_msssim_cscc(&masked, &post, &p).unwrap();
        let without = loss_msssim_cscc(&pre, &post, &p).unwrap();
        assert!(
            with_mask < without,
            "masked loss {with_mask} should beat unmasked {without}"
        );
    }

    #[test]
    fn loss_flags_degenerate_correlation_for_constant_omega() {
        let v = rand_volume([16, 16, 16], 13, 0.0, 1.0);
        let flat = Volume3::constant([16, 16, 16], SP, 0.3).unwrap();
        let p = MsssimParams::default();
        let (loss, reports) = msssim_loss(&v, &flat, &p, LossVariant::MsssimCscc).unwrap();
        assert!(loss.is_finite());
        assert!(reports.iter().all(|r| r.scc_degenerate && r.scc == 0.0));
    }

    #[test]
    fn smooth_oracle_values() {
        let flat = MaskField::uniform([4, 4, 4], 0.37).unwrap();
        assert_eq!(loss_smooth(&flat), 0.0);

        // One interior voxel at (approximately) 1 against a 0 background:
        // three +1 and three −1 forward differences.
        let mut latent = vec![-36.0; 64];
        latent[1 + 4 * (2 + 4 * 1)] = 36.0;
        let spike = MaskField::from_latent([4, 4, 4], latent).unwrap();
        assert!((loss_smooth(&spike) - 6.0).abs() <= 1e-12);

        // Ramp along x on a 5^3 grid: 4 x-differences of (1/4)^2 per line,
        // 25 lines.
        let mut latent = Vec::with_capacity(125);
        for _z in 0..5 {
            for _y in 0..5 {
                for x in 0..5 {
                    let p = x as f64 / 4.0;
                    let z = if p <= 0.0 {
                        -36.0
                    } else if p >= 1.0 {
                        36.0
                    } else {
                        logit(p)
                    };
                    latent.push(z);
                }
            }
        }
        let ramp = MaskField::from_latent([5, 5, 5], latent).unwrap();
        assert!((loss_smooth(&ramp) - 6.25).abs() <= 1e-9);
    }

    #[test]
    fn total_loss_is_additive_in_lambda() {
        let (pre, post, _) = small_phantom(21, [16, 16, 8]);
        let n = 16 * 16 * 8;
        let latent: Vec<f64> = (0..n)
            .map(|i| {
                let x = i % 16;
                let y = (i / 16) % 16;
                let z = i / 256;
                if (x + y + z) % 2 == 0 {
                    1.5
                } else {
                    -1.5
                }
            })
            .collect();
        let mask = MaskField::from_latent([16, 16, 8], latent).unwrap();
        let p = MsssimParams::default();
        let smooth = loss_smooth(&mask);
        let (r0, _) = total_loss_and_gradient(&pre, &post, &mask, 0.0, &p).unwrap();
        let (r1, _) = total_loss_and_gradient(&pre, &post, &mask, 1.0, &p).unwrap();
        assert!(((r1.total - r0.total) - smooth).abs() <= 1e-12 * smooth.max(1.0));
        assert_eq!(r0.msssim_cscc, r1.msssim_cscc);

        let (r, _) = total_loss_and_gradient(&pre, &post, &mask, 0.05, &p).unwrap();
        assert_eq!(r.total, r.msssim_cscc + 0.05 * r.smooth);
        assert_eq!(r.smooth, smooth);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (pre, post, _) = small_phantom(11, [16, 16, 8]);
        let dims = [16, 16, 8];
        let n = 16 * 16 * 8;
        let mut rng = StreamRng::new(11, 0x6D61);
        let latent: Vec<f64> = (0..n).map(|_| rng.next_range(-2.5, -0.5)).collect();
        let mask = MaskField::from_latent(dims, latent.clone()).unwrap();
        let p = MsssimParams::default();
        let lambda = 0.05;
        let (_, grad) = total_loss_and_gradient(&pre, &post, &mask, lambda, &p).unwrap();

        let h = 1e-3;
        let mut worst = 0.0f64;
        for _ in 0..64 {
            let idx = (rng.next_unit() * n as f64) as usize % n;
            let mut plus = latent.clone();
            plus[idx] += h;
            let mut minus = latent.clone();
            minus[idx] -= h;
            let mp = MaskField::from_latent(dims, plus).unwrap();
            let mm = MaskField::from_latent(dims, minus).unwrap();
            let (rp, _) = total_loss_and_gradient(&pre, &post, &mp, lambda, &p).unwrap();
            let (rm, _) = total_loss_and_gradient(&pre, &post, &mm, lambda, &p).unwrap();
            let numeric = (rp.total - rm.total) / (2.0 * h);
            let analytic = grad[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "coord {idx}: analytic {analytic:.9e}, numeric {numeric:.9e}, rel {rel:.3e}"
            );
        }
        assert!(worst > 0.0, "finite differences degenerate");

        // Where ρ = 0 the mask term cannot flow into the gradient.
        let (_, grad0) = total_loss_and_gradient(&pre, &post, &mask, 0.0, &p).unwrap();
        let zero_idx = pre
            .data()
            .iter()
            .position(|&v| v == 0.0)
            .expect("normalized phantom has exact-zero air");
        assert_eq!(grad0[zero_idx], 0.0);
    }

    #[test]
    fn components_are_symmetric_in_their_arguments() {
        let v = rand_volume([16, 16, 16], 14, 0.0, 1.0);
        let w = rand_volume([16, 16, 16], 15, 0.0, 1.0);
        let p = MsssimParams::default();
        let (l_ab, c_ab, s_ab) = ssim_components(&v, &w, &p, 0).unwrap();
        let (l_ba, c_ba, s_ba) = ssim_components(&w, &v, &p, 0).unwrap();
        assert!((c_ab - c_ba).abs() <= 1e-9);
        assert!((s_ab - s_ba).abs() <= 1e-9);
        assert!((l_ab - l_ba).abs() <= 1e-9);
        assert_eq!(scc(&v, &w).unwrap(), scc(&w, &v).unwrap());
    }

    #[test]
    fn full_scale_count_runs_on_min_dim_16() {
        // Correlated pair (as the optimizer sees): independent noise can
        // push the mean structure component negative, which is an error.
        let v = rand_volume([16, 16, 16], 16, 0.0, 1.0);
        let noise = rand_volume([16, 16, 16], 17, 0.0, 1.0);
        let w = Volume3::new(
            v.dims(),
            SP,
            v.data()
                .iter()
                .zip(noise.data())
                .map(|(&a, &e)| 0.7 * a + 0.3 * e)
                .collect(),
        )
        .unwrap();
        let p = MsssimParams::default();
        let (loss, reports) = msssim_loss(&v, &w, &p, LossVariant::MsssimCscc).unwrap();
        assert!(loss.is_finite());
        assert_eq!(reports.len(), 5);

        let eval = LossEvaluator::new(&v, &w, p, LossOptions::default()).unwrap();
        let mask = MaskField::uniform([16, 16, 16], 0.1).unwrap();
        let (report, grad) = eval.evaluate(&mask).unwrap();
        assert!(report.total.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn evaluator_normalizes_smooth_when_asked() {
        let (pre, post, _) = small_phantom(31, [16, 16, 8]);
        let n = (16 * 16 * 8) as f64;
        let mut rng = StreamRng::new(5, 0x6E6F);
        let latent: Vec<f64> = (0..16 * 16 * 8).map(|_| rng.next_range(-3.0, 1.0)).collect();
        let mask = MaskField::from_latent([16, 16, 8], latent).unwrap();
        let p = MsssimParams::default();

        let raw = LossEvaluator::new(
            &pre,
            &post,
            p.clone(),
            LossOptions {
                lambda: 0.05,
                smooth_normalize: false,
                variant: LossVariant::MsssimCscc,
            },
        )
        .unwrap();
        let normed = LossEvaluator::new(&pre, &post, p.clone(), LossOptions::default()).unwrap();
        let unsmoothed = LossEvaluator::new(
            &pre,
            &post,
            p,
            LossOptions {
                lambda: 0.0,
                smooth_normalize: false,
                variant: LossVariant::MsssimCscc,
            },
        )
        .unwrap();
        let (rr, gr) = raw.evaluate(&mask).unwrap();
        let (rn, gn) = normed.evaluate(&mask).unwrap();
        let (_, gm) = unsmoothed.evaluate(&mask).unwrap();
        assert!((rn.smooth * n - rr.smooth).abs() <= 1e-9 * rr.smooth.max(1.0));
        assert_eq!(rr.msssim_cscc, rn.msssim_cscc);
        // Identical masked term; the smoothness part scales by exactly 1/N.
        for ((r, m), ng) in gr.iter().zip(&gm).zip(&gn) {
            let raw_part = r - m;
            let normed_part = ng - m;
            assert!((normed_part * n - raw_part).abs() <= 1e-9 * raw_part.abs().max(1e-6));
        }

        let value_only = normed.evaluate_value(&mask).unwrap();
        assert_eq!(value_only.total, rn.total);
    }

    proptest! {
        #[test]
        fn smooth_is_nonnegative_and_zero_only_for_constants(
            latent in proptest::collection::vec(-5.0f64..5.0, 27)
        ) {
            let mask = MaskField::from_latent([3, 3, 3], latent.clone()).unwrap();
            let s = loss_smooth(&mask);
            prop_assert!(s >= 0.0);
            let constant = latent.iter().all(|z| (z - latent[0]).abs() < 1e-12);
            if !constant {
                prop_assert!(s > 0.0);
            }
        }
    }
}
