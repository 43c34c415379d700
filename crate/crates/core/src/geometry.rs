//! Rigid and similarity transforms, the se(3) exponential map, and the pinhole
//! camera with inverse-depth back-projection.
//!
//! Poses are stored as rotation matrices plus translations. A keyframe pose maps
//! camera coordinates into the world frame (`p_world = T * p_cam`), so the
//! transform taking host-camera points into a target camera is
//! `relative(T_target, T_host) = T_target^{-1} * T_host`.
//!
//! Twists are ordered `(v; ω)`: translational part first, rotational part last.
//! Increments are applied by left composition, `T <- exp(δ) * T`.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed-form exp/log coefficients switch to
/// their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Log is refused within this distance of a half turn, where the rotation axis
/// is ambiguous.
const HALF_TURN_GUARD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    DegenerateRotation(f64),
    #[error("point has nonpositive depth {0}")]
    BehindCamera(f64),
    #[error("inverse depth must be positive, got {0}")]
    InvalidInverseDepth(f64),
}

/// Skew-symmetric cross-product matrix, `hat(a) * b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula for the rotation exponential.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let w = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation logarithm; fails near a half turn.
pub fn so3_log(rotation: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let skew = vee(&(rotation - rotation.transpose())) * 0.5;
    let sin_theta = skew.norm();
    let cos_theta = 0.5 * (rotation.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if theta > std::f64::consts::PI - HALF_TURN_GUARD {
        return Err(GeometryError::DegenerateRotation(theta));
    }
    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return Ok(skew * (1.0 + theta * theta / 6.0));
    }
    Ok(skew * (theta / sin_theta))
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let w = hat(omega);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let w = hat(omega);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta_sq
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// An se(3) increment ordered `(v; ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Twist(self.0 * factor)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid-body transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Se3 {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Se3::new(Matrix3::identity(), translation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Se3::new(q.to_rotation_matrix().into_inner(), translation)
    }

    /// Quaternion of the rotation with a nonnegative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn exp(twist: &Twist) -> Self {
        let omega = twist.rotation();
        Se3 {
            rotation: so3_exp(&omega),
            translation: so3_left_jacobian(&omega) * twist.translation(),
        }
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        let omega = so3_log(&self.rotation)?;
        let v = so3_left_jacobian_inverse(&omega) * self.translation;
        Ok(Twist::new(v, omega))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies `exp(δ) * self`.
    pub fn left_perturbed(&self, delta: &Twist) -> Se3 {
        Se3::exp(delta).compose(self)
    }

    /// For a world-from-camera pose this is the camera center in the world.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Re-orthonormalizes the rotation after long chains of compositions.
    pub fn normalized(&self) -> Se3 {
        let rot = nalgebra::Rotation3::from_matrix(&self.rotation);
        Se3::new(rot.into_inner(), self.translation)
    }
}

impl std::ops::Mul for Se3 {
    type Output = Se3;
    fn mul(self, rhs: Se3) -> Se3 {
        self.compose(&rhs)
    }
}

/// `T_j^{-1} * T_i`: maps points from camera `i` into camera `j`.
pub fn relative(target: &Se3, host: &Se3) -> Se3 {
    target.inverse().compose(host)
}

/// Similarity transform `p -> s R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0, "Sim3 scale must be positive");
        Sim3 {
            scale,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Sim3 {
            scale: inv_scale,
            rotation: rt,
            translation: -(rt * self.translation) * inv_scale,
        }
    }

    /// Maps a world-from-camera pose through the similarity; the result is
    /// again rigid.
    pub fn apply_pose(&self, pose: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

/// `sim3_apply(S, p) = s R p + t`.
pub fn sim3_apply(s: &Sim3, p: &Vector3<f64>) -> Vector3<f64> {
    s.apply(p)
}

/// Pinhole intrinsics for undistorted images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= self.width as f64
            && self.cy <= self.height as f64
    }

    /// Intrinsics of the next pyramid level under 2x2 box averaging, where a
    /// coarse pixel center sits at the middle of its four fine pixels:
    /// `u_coarse = (u_fine + 0.5) / 2 - 0.5`.
    pub fn downscaled(&self) -> CameraModel {
        CameraModel {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let iz = 1.0 / p.z;
        Vector2::new(self.fx * p.x * iz + self.cx, self.fy * p.y * iz + self.cy)
    }

    /// `K^{-1} (u, 1)`: the ray through `u` with unit z.
    #[inline]
    pub fn unproject_ray(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, u: &Vector2<f64>, inverse_depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(inverse_depth > 0.0) {
            return Err(GeometryError::InvalidInverseDepth(inverse_depth));
        }
        Ok(self.unproject_ray(u) / inverse_depth)
    }

    /// Derivative of the projection with respect to the camera-frame point.
    #[inline]
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    pub fn contains(&self, u: &Vector2<f64>, margin: f64) -> bool {
        u.x >= margin
            && u.y >= margin
            && u.x <= self.width as f64 - 1.0 - margin
            && u.y <= self.height as f64 - 1.0 - margin
    }
}

/// Angle in radians between two vectors.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cross = a.cross(b).norm();
    cross.atan2(a.dot(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Twist::new(t, axis * angle)
    }

    fn assert_se3_close(a: &Se3, b: &Se3, tol: f64) {
        assert!((a.rotation - b.rotation).amax() < tol, "{a:?} vs {b:?}");
        assert!((a.translation - b.translation).amax() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(Se3::exp(&Twist::zero()), Se3::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let t = Se3::exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros()));
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(Se3::identity().log().unwrap(), Twist::zero());
    }

    #[test]
    fn log_of_quarter_turn_about_z() {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let t = Se3::new(r.into_inner(), Vector3::zeros());
        let xi = t.log().unwrap();
        let expected = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!((xi.0 - expected.0).amax() < 1e-12);
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        let t = Se3::new(r.into_inner(), Vector3::new(1.0, 0.0, 0.0));
        assert!(matches!(t.log(), Err(GeometryError::DegenerateRotation(_))));
    }

    #[test]
    fn exp_log_round_trip_on_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, std::f64::consts::PI - 1e-3);
            let back = Se3::exp(&xi).log().unwrap();
            assert!((back.0 - xi.0).amax() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn tiny_angles_use_the_series_branch_consistently() {
        let xi = Twist::new(Vector3::new(0.3, -0.1, 0.2), Vector3::new(1e-10, -2e-10, 5e-11));
        let back = Se3::exp(&xi).log().unwrap();
        assert!((back.0 - xi.0).amax() < 1e-12);
    }

    #[test]
    fn exp_produces_orthonormal_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let t = Se3::exp(&random_twist(&mut rng, 3.0));
            assert!((t.rotation * t.rotation.transpose() - Matrix3::identity()).amax() < 1e-9);
            assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
            assert_se3_close(&t.compose(&t.inverse()), &Se3::identity(), 1e-9);
        }
    }

    #[test]
    fn relative_pose_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let ti = Se3::exp(&random_twist(&mut rng, 3.0));
            let tj = Se3::exp(&random_twist(&mut rng, 3.0));
            assert_se3_close(&relative(&ti, &ti), &Se3::identity(), 1e-9);
            assert_se3_close(&relative(&Se3::identity(), &ti), &ti, 1e-12);
            let round = relative(&tj, &ti).compose(&ti.inverse()).compose(&tj);
            assert_se3_close(&round, &Se3::identity(), 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let unit = CameraModel::new(1.0, 1.0, 0.0, 0.0, 10, 10);
        assert_eq!(unit.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(0.0, 0.0));
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 200, 200);
        let u = cam.project(&Vector3::new(1.0, 2.0, 2.0)).unwrap();
        assert!((u - Vector2::new(100.0, 150.0)).norm() < 1e-12);
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn backprojection_examples() {
        let cam = CameraModel::new(100.0, 90.0, 40.0, 30.0, 80, 60);
        let c = Vector2::new(40.0, 30.0);
        assert_eq!(cam.backproject(&c, 1.0).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(cam.backproject(&c, 0.5).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert!(matches!(
            cam.backproject(&c, 0.0),
            Err(GeometryError::InvalidInverseDepth(_))
        ));
    }

    #[test]
    fn projection_round_trip() {
        let cam = CameraModel::new(120.0, 115.0, 79.5, 59.5, 160, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.1..10.0),
            );
            let u = cam.project(&p).unwrap();
            let back = cam.backproject(&u, 1.0 / p.z).unwrap();
            assert!((back - p).amax() < 1e-9);
        }
    }

    #[test]
    fn downscaled_camera_maps_pixel_centers() {
        let cam = CameraModel::new(100.0, 100.0, 63.5, 47.5, 128, 96);
        let coarse = cam.downscaled();
        let p = Vector3::new(0.3, -0.2, 2.0);
        let fine = cam.project(&p).unwrap();
        let c = coarse.project(&p).unwrap();
        assert!((c - (fine.add_scalar(0.5) * 0.5).add_scalar(-0.5)).norm() < 1e-12);
    }

    #[test]
    fn sim3_examples() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(Sim3::identity().apply(&p), p);
        let s = Sim3::new(2.0, Matrix3::identity(), Vector3::zeros());
        assert_eq!(sim3_apply(&s, &p), Vector3::new(2.0, 2.0, 2.0));
    }

    fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3 {
        let t = Se3::exp(&random_twist(rng, 3.0));
        Sim3::new(rng.random_range(0.2..5.0), t.rotation, t.translation)
    }

    #[test]
    fn sim3_composition_and_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let (a, b, c) = (random_sim3(&mut rng), random_sim3(&mut rng), random_sim3(&mut rng));
            let p = Vector3::new(rng.random_range(-2.0..2.0), 0.5, rng.random_range(-2.0..2.0));
            let lhs = a.compose(&b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            assert!((lhs - rhs).amax() < 1e-9);
            let ab_c = a.compose(&b).compose(&c);
            let a_bc = a.compose(&b.compose(&c));
            assert!((ab_c.apply(&p) - a_bc.apply(&p)).amax() < 1e-9);
            assert!((ab_c.scale - a_bc.scale).abs() < 1e-9);
            assert!((a.inverse().apply(&a.apply(&p)) - p).amax() < 1e-9);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let t = Se3::exp(&random_twist(&mut rng, 3.0));
            let q = t.quaternion();
            assert!(q.w >= 0.0);
            let back = Se3::from_quaternion(&q, t.translation);
            assert_se3_close(&back, &t, 1e-12);
        }
    }
}
