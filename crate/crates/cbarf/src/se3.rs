//! SE(3) machinery for camera poses.
//!
//! Poses are stored as a rotation matrix plus a translation vector (the
//! `[R|t]` block of a 4x4 rigid transform). Twists are 6-vectors split into a
//! translational part `rho` and a rotational part `omega` (axis-angle).
//!
//! Two compositions are deliberately *not* the SE(3) matrix product: noise
//! perturbation and refinement both multiply rotations while adding
//! translations, i.e. `[R_p R_n | t_p + t_n]`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Below this angle the Rodrigues / left-Jacobian coefficients switch to
/// 4th-order Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Element of se(3): translational part `rho`, rotational part `omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistVector {
    pub rho: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl TwistVector {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { rho, omega }
    }

    pub fn zero() -> Self {
        Self {
            rho: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            omega: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.rho.x, self.rho.y, self.rho.z, self.omega.x, self.omega.y, self.omega.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.omega.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.omega.iter()).all(|v| v.is_finite())
    }
}

/// Rigid camera pose `[R|t]`. `R` maps camera coordinates to world
/// coordinates and `t` is the camera center in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Orthonormality / determinant check, tolerance 1e-9.
    pub fn is_valid(&self) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).norm() < 1e-9 * 3.0;
        let det = (self.rotation.determinant() - 1.0).abs() < 1e-9 * 3.0;
        ortho && det && self.translation.iter().all(|v| v.is_finite())
    }

    /// Row-major `[R|t]` as 12 numbers, the pose-file layout.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }
}

/// Calibrated isotropic twist noise: `coefficient * N(0, I_6)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub coefficient: f64,
    pub seed: u64,
}

/// Single-owner seeded sampler; create one per worker for parallel use.
pub struct NoiseSampler {
    coefficient: f64,
    rng: ChaCha12Rng,
}

impl NoiseSampler {
    pub fn new(cfg: NoiseConfig) -> Self {
        assert!(cfg.coefficient >= 0.0, "noise coefficient must be >= 0");
        Self {
            coefficient: cfg.coefficient,
            rng: ChaCha12Rng::seed_from_u64(cfg.seed),
        }
    }

    /// Six independent normal draws scaled by the coefficient: rho first,
    /// then omega.
    pub fn sample(&mut self) -> TwistVector {
        let mut v = [0.0f64; 6];
        for x in v.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *x = self.coefficient * z;
        }
        TwistVector::from_slice(&v)
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues coefficients A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// SO(3) exponential (Rodrigues formula).
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// SE(3) left Jacobian V(omega), such that t = V * rho in the exponential.
pub fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + w * b + w * w * c
}

fn left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let d = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// SO(3) logarithm; returns omega with norm <= pi.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < SMALL_ANGLE {
        // omega ~ vee(R - R^T)/2 with O(theta^3) error
        return vee(&((r - r.transpose()) * 0.5));
    }
    if theta < std::f64::consts::PI - 1e-6 {
        // direction from the antisymmetric part, magnitude from the trace;
        // better conditioned near pi than theta / (2 sin theta)
        return vee(&(r - r.transpose())).normalize() * theta;
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part: (R + R^T)/2 = I + (1 - cos t)(u u^T - I).
    let s = (r + r.transpose()) * 0.5;
    let uut = (s - Matrix3::identity()) / (1.0 - cos_theta) + Matrix3::identity();
    // Largest diagonal entry gives the best-conditioned axis component.
    let k = (0..3)
        .max_by(|&i, &j| uut[(i, i)].partial_cmp(&uut[(j, j)]).unwrap())
        .unwrap();
    let mut u = Vector3::new(
        uut[(0, k)] / uut[(k, k)].sqrt(),
        uut[(1, k)] / uut[(k, k)].sqrt(),
        uut[(2, k)] / uut[(k, k)].sqrt(),
    );
    u.normalize_mut();
    // Fix the sign using the (possibly tiny) antisymmetric part.
    let v = vee(&(r - r.transpose()));
    if u.dot(&v) < 0.0 {
        u = -u;
    }
    u * theta
}

/// SE(3) exponential: R via Rodrigues on omega, t = V(omega) * rho.
pub fn exp_map(xi: &TwistVector) -> PoseSE3 {
    PoseSE3 {
        rotation: exp_so3(&xi.omega),
        translation: left_jacobian(&xi.omega) * xi.rho,
    }
}

/// SE(3) logarithm, inverse of [`exp_map`] for rotation angles below pi.
pub fn log_map(p: &PoseSE3) -> TwistVector {
    let omega = log_so3(&p.rotation);
    let rho = left_jacobian_inv(&omega) * p.translation;
    TwistVector { rho, omega }
}

/// Noise composition `[R_p R_n | t_p + t_n]`: rotations multiply,
/// translations add.
pub fn perturb_pose(p: &PoseSE3, n: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: p.rotation * n.rotation,
        translation: p.translation + n.translation,
    }
}

/// Refinement composition applied on top of a perturbed pose; same
/// multiplicative-rotation / additive-translation structure as
/// [`perturb_pose`].
pub fn refine_pose(p_tilde: &PoseSE3, p_r: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: p_tilde.rotation * p_r.rotation,
        translation: p_tilde.translation + p_r.translation,
    }
}

/// Geodesic angle between two rotations, in radians, clamped to [0, pi].
pub fn rotation_geodesic(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let m = r1.transpose() * r2;
    (((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// SO(3) right Jacobian J_r(omega); used by the renderer's pose gradients
/// (d Exp(w)/d w_k = Exp(w) hat(J_r e_k)).
pub fn right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    // J_r(w) = J_l(-w); reuse the coefficients with a sign flip on W.
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() - w * b + w * w * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rot_x(a: f64) -> Matrix3<f64> {
        exp_so3(&Vector3::new(a, 0.0, 0.0))
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        exp_so3(&Vector3::new(0.0, 0.0, a))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = exp_map(&TwistVector::zero());
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        let xi = TwistVector::new(Vector3::zeros(), Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let p = exp_map(&xi);
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(p.rotation, expected, epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn perturb_identity_noise_is_noop() {
        let p = exp_map(&TwistVector::from_slice(&[0.1, -0.2, 0.3, 0.2, 0.1, -0.3]));
        let q = perturb_pose(&p, &PoseSE3::identity());
        assert_eq!(q, p);
    }

    #[test]
    fn perturb_of_identity_is_noise() {
        let n = exp_map(&TwistVector::from_slice(&[0.4, 0.0, -0.1, -0.2, 0.3, 0.1]));
        let q = perturb_pose(&PoseSE3::identity(), &n);
        assert_eq!(q, n);
    }

    #[test]
    fn perturb_rot_z_case() {
        let p = PoseSE3::new(rot_z(FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let n = PoseSE3::new(rot_z(FRAC_PI_2), Vector3::new(0.0, 1.0, 0.0));
        let q = perturb_pose(&p, &n);
        assert_relative_eq!(q.rotation, rot_z(PI), epsilon = 1e-12);
        assert_relative_eq!(q.translation, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn refine_with_identity_is_noop() {
        let p = exp_map(&TwistVector::from_slice(&[0.1, 0.5, -0.2, 0.3, -0.1, 0.2]));
        assert_eq!(refine_pose(&p, &PoseSE3::identity()), p);
    }

    #[test]
    fn refine_inverts_perturbation_exactly() {
        let p = exp_map(&TwistVector::from_slice(&[0.3, -0.4, 0.2, 0.5, 0.1, -0.6]));
        let n = exp_map(&TwistVector::from_slice(&[-0.1, 0.2, 0.4, -0.3, 0.2, 0.1]));
        let p_tilde = perturb_pose(&p, &n);
        let inverse = PoseSE3::new(n.rotation.transpose(), -n.translation);
        let q = refine_pose(&p_tilde, &inverse);
        assert_relative_eq!(q.rotation, p.rotation, epsilon = 1e-12);
        assert_relative_eq!(q.translation, p.translation, epsilon = 1e-12);
    }

    #[test]
    fn refine_matches_direct_composition() {
        let p = PoseSE3::new(rot_x(0.3), Vector3::new(0.1, 0.2, 0.3));
        let n = PoseSE3::new(rot_z(-0.4), Vector3::new(-0.2, 0.0, 0.5));
        let r = PoseSE3::new(rot_x(0.1) * rot_z(0.2), Vector3::new(0.3, -0.1, 0.0));
        let q = refine_pose(&perturb_pose(&p, &n), &r);
        assert_relative_eq!(
            q.rotation,
            p.rotation * n.rotation * r.rotation,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            q.translation,
            p.translation + n.translation + r.translation,
            epsilon = 1e-12
        );
    }

    #[test]
    fn geodesic_same_rotation_is_zero() {
        let r = rot_x(0.7) * rot_z(-0.3);
        assert!(rotation_geodesic(&r, &r) < 1e-12);
    }

    #[test]
    fn geodesic_quarter_turn() {
        let r1 = rot_z(0.4) * rot_x(0.2);
        let r2 = r1 * rot_x(FRAC_PI_2);
        assert_relative_eq!(rotation_geodesic(&r1, &r2), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_matches_quaternion_oracle() {
        use nalgebra::UnitQuaternion;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let w1 = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let w2 = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let r1 = exp_so3(&w1);
            let r2 = exp_so3(&w2);
            let q1 = UnitQuaternion::from_matrix(&r1);
            let q2 = UnitQuaternion::from_matrix(&r2);
            let oracle = q1.angle_to(&q2);
            assert_relative_eq!(rotation_geodesic(&r1, &r2), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_coefficient_noise_is_zero_twist() {
        let mut s = NoiseSampler::new(NoiseConfig {
            coefficient: 0.0,
            seed: 3,
        });
        for _ in 0..10 {
            assert_eq!(s.sample(), TwistVector::zero());
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let cfg = NoiseConfig {
            coefficient: 0.35,
            seed: 42,
        };
        let a: Vec<_> = {
            let mut s = NoiseSampler::new(cfg);
            (0..16).map(|_| s.sample()).collect()
        };
        let b: Vec<_> = {
            let mut s = NoiseSampler::new(cfg);
            (0..16).map(|_| s.sample()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn noise_calibration_matches_reported_deviation() {
        // coefficient 0.35 -> mean rotation ~30.4 deg, mean translation ~0.56
        let mut s = NoiseSampler::new(NoiseConfig {
            coefficient: 0.35,
            seed: 1,
        });
        let n = 10_000;
        let (mut rot_sum, mut trans_sum) = (0.0, 0.0);
        for _ in 0..n {
            let xi = s.sample();
            let pose = exp_map(&xi);
            rot_sum += rotation_geodesic(&Matrix3::identity(), &pose.rotation);
            trans_sum += pose.translation.norm();
        }
        let mean_rot_deg = (rot_sum / n as f64).to_degrees();
        let mean_trans = trans_sum / n as f64;
        assert!(
            (mean_rot_deg - 30.4).abs() < 2.0,
            "mean rotation {mean_rot_deg} deg"
        );
        assert!(
            (mean_trans - 0.56).abs() < 0.05,
            "mean translation {mean_trans}"
        );
    }

    #[test]
    fn noise_mean_rotation_scales_linearly_for_small_coefficients() {
        let mean_rot = |c: f64| {
            let mut s = NoiseSampler::new(NoiseConfig {
                coefficient: c,
                seed: 5,
            });
            let n = 4000;
            (0..n)
                .map(|_| s.sample().omega.norm())
                .sum::<f64>()
                / n as f64
        };
        let m1 = mean_rot(0.1);
        let m2 = mean_rot(0.2);
        let m35 = mean_rot(0.35);
        assert_relative_eq!(m2 / m1, 2.0, epsilon = 0.1);
        assert_relative_eq!(m35 / m1, 3.5, epsilon = 0.15);
    }

    #[test]
    fn log_near_pi_round_trips() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        for &theta in &[PI - 1e-3, PI - 1e-5, 3.0] {
            let xi = TwistVector::new(Vector3::new(0.2, -0.1, 0.4), axis * theta);
            let back = log_map(&exp_map(&xi));
            assert!((back.omega - xi.omega).norm() < 1e-7, "theta = {theta}");
            assert!((back.rho - xi.rho).norm() < 1e-7, "theta = {theta}");
        }
    }

    #[test]
    fn pose_row_major_round_trip() {
        let p = exp_map(&TwistVector::from_slice(&[0.1, 0.2, -0.3, 0.4, -0.5, 0.6]));
        let q = PoseSE3::from_row_major(&p.to_row_major());
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(
            r in prop::array::uniform3(-5.0f64..5.0),
            axis in prop::array::uniform3(-1.0f64..1.0),
            theta in 0.0f64..(PI - 1e-3),
        ) {
            let a = Vector3::new(axis[0], axis[1], axis[2]);
            prop_assume!(a.norm() > 1e-3);
            let xi = TwistVector::new(
                Vector3::new(r[0], r[1], r[2]),
                a.normalize() * theta,
            );
            let back = log_map(&exp_map(&xi));
            prop_assert!((back.rho - xi.rho).norm() < 1e-9);
            prop_assert!((back.omega - xi.omega).norm() < 1e-9);
        }

        #[test]
        fn exp_map_is_always_valid(v in prop::array::uniform6(-3.0f64..3.0)) {
            let p = exp_map(&TwistVector::from_slice(&v));
            prop_assert!(p.is_valid());
        }

        #[test]
        fn perturb_then_inverse_refine_is_identity(
            pv in prop::array::uniform6(-1.5f64..1.5),
            nv in prop::array::uniform6(-1.5f64..1.5),
        ) {
            let p = exp_map(&TwistVector::from_slice(&pv));
            let n = exp_map(&TwistVector::from_slice(&nv));
            let inv = PoseSE3::new(n.rotation.transpose(), -n.translation);
            let q = refine_pose(&perturb_pose(&p, &n), &inv);
            prop_assert!((q.rotation - p.rotation).norm() < 1e-12);
            prop_assert!((q.translation - p.translation).norm() < 1e-12);
        }
    }
}
