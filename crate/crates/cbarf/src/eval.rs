//! Ground-truth-aware evaluation: similarity (Umeyama) alignment of
//! estimated poses, rotation/translation error reporting and PSNR/SSIM.
//!
//! Ground-truth poses are consumed only here; the optimization path never
//! sees them.

use crate::error::{CbarfError, Result};
use crate::img::ImageRgb;
use crate::se3::{rotation_geodesic, PoseSE3};
use nalgebra::{Matrix3, Vector3, SVD};

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Apply the similarity to a full pose: center is mapped, orientation is
    /// rotated by the alignment rotation.
    pub fn apply_pose(&self, p: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(self.rotation * p.rotation, self.apply(&p.translation))
    }
}

/// Per-view rotation error (degrees) and translation error (scene units
/// x100, matching the usual reporting convention).
#[derive(Clone, Debug)]
pub struct PoseErrorReport {
    pub rotation_deg: Vec<f64>,
    pub translation_x100: Vec<f64>,
    pub mean_rotation_deg: f64,
    pub mean_translation_x100: f64,
}

#[derive(Clone, Debug)]
pub struct ImageQualityReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Closed-form similarity Procrustes (Umeyama) on camera centers:
/// minimizes sum ||s R c_est + t - c_gt||^2.
pub fn procrustes_align(est: &[PoseSE3], gt: &[PoseSE3]) -> Result<AlignmentTransform> {
    if est.len() != gt.len() || est.len() < 3 {
        return Err(CbarfError::DegenerateAlignment(format!(
            "need >= 3 matched poses, got {} / {}",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len() as f64;
    let src: Vec<Vector3<f64>> = est.iter().map(|p| p.center()).collect();
    let dst: Vec<Vector3<f64>> = gt.iter().map(|p| p.center()).collect();
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-12 {
        return Err(CbarfError::DegenerateAlignment(
            "estimated centers are coincident".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| {
        CbarfError::DegenerateAlignment("SVD failed on center covariance".into())
    })?;
    let v_t = svd.v_t.unwrap();
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    // collinear center sets leave the rotation about the line unconstrained
    let rank_gap = svd.singular_values[1] / svd.singular_values[0].max(1e-300);
    if rank_gap < 1e-9 {
        return Err(CbarfError::DegenerateAlignment(
            "camera centers are collinear".into(),
        ));
    }
    let trace_ds = svd.singular_values.dot(&s_diag);
    let scale = trace_ds / var_s;
    if scale <= 0.0 {
        return Err(CbarfError::DegenerateAlignment("non-positive scale".into()));
    }
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(AlignmentTransform {
        scale,
        rotation,
        translation,
    })
}

/// Rotation geodesic in degrees and aligned center distance x100 per view.
pub fn pose_errors(
    est: &[PoseSE3],
    gt: &[PoseSE3],
    alignment: &AlignmentTransform,
) -> PoseErrorReport {
    assert_eq!(est.len(), gt.len());
    let mut rotation_deg = Vec::with_capacity(est.len());
    let mut translation_x100 = Vec::with_capacity(est.len());
    for (e, g) in est.iter().zip(gt) {
        let aligned = alignment.apply_pose(e);
        rotation_deg.push(rotation_geodesic(&aligned.rotation, &g.rotation).to_degrees());
        translation_x100.push((aligned.center() - g.center()).norm() * 100.0);
    }
    let n = est.len() as f64;
    PoseErrorReport {
        mean_rotation_deg: rotation_deg.iter().sum::<f64>() / n,
        mean_translation_x100: translation_x100.iter().sum::<f64>() / n,
        rotation_deg,
        translation_x100,
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99 dB.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let mse = crate::img::mse(a, b)?;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1; computed per channel then averaged.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(CbarfError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let mut total = 0.0;
    for ch in 0..3 {
        total += ssim_channel(a, b, ch);
    }
    Ok(total / 3.0)
}

fn gaussian_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *wi = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    w
}

fn ssim_channel(a: &ImageRgb, b: &ImageRgb, ch: usize) -> f64 {
    let w = gaussian_window();
    let (width, height) = (a.width, a.height);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let at = |img: &ImageRgb, x: i64, y: i64| -> f64 {
        // clamp-to-edge at the borders
        let x = x.clamp(0, width as i64 - 1) as usize;
        let y = y.clamp(0, height as i64 - 1) as usize;
        img.data[(y * width + x) * 3 + ch]
    };
    let mut sum = 0.0;
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            for (dy, wy) in w.iter().enumerate() {
                for (dx, wx) in w.iter().enumerate() {
                    let wgt = wy * wx;
                    let va = at(a, x + dx as i64 - 5, y + dy as i64 - 5);
                    let vb = at(b, x + dx as i64 - 5, y + dy as i64 - 5);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            sum += num / den;
        }
    }
    sum / (width * height) as f64
}

/// PSNR/SSIM per view pair plus means.
pub fn image_quality(rendered: &[ImageRgb], references: &[ImageRgb]) -> Result<ImageQualityReport> {
    assert_eq!(rendered.len(), references.len());
    let mut ps = Vec::with_capacity(rendered.len());
    let mut ss = Vec::with_capacity(rendered.len());
    for (r, g) in rendered.iter().zip(references) {
        ps.push(psnr(r, g)?);
        ss.push(ssim(r, g)?);
    }
    let n = rendered.len().max(1) as f64;
    Ok(ImageQualityReport {
        mean_psnr: ps.iter().sum::<f64>() / n,
        mean_ssim: ss.iter().sum::<f64>() / n,
        psnr: ps,
        ssim: ss,
    })
}
