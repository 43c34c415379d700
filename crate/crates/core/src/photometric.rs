//! Photometric residuals between a host and a target keyframe, gradient
//! weights and analytic Jacobians under left-composed pose increments.

use nalgebra::{Matrix3x6, RowVector3, Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hat, Se3};
use crate::image::{PatchPattern, PyramidLevel};

/// Default gradient-weight constant, in intensity units.
pub const DEFAULT_GRADIENT_C: f64 = 50.0;
/// Pattern pixels must stay this many pixels inside both images.
pub const INTERIOR_MARGIN: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotometricError {
    #[error("no pattern pixel of the observation is valid")]
    AllInvalid,
}

/// Per-keyframe brightness transfer: intensity = e^a * radiance + b.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
}

impl AffineBrightness {
    pub fn new(a: f64, b: f64) -> Self {
        AffineBrightness { a, b }
    }

    /// Factor e^{a_self - a_target} mapping target intensities into this frame.
    pub fn gain_over(&self, target: &AffineBrightness) -> f64 {
        (self.a - target.a).exp()
    }
}

/// Everything the residual needs to know about one keyframe at one level.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub level: &'a PyramidLevel,
    pub pose: &'a Se3,
    pub affine: AffineBrightness,
}

/// Partial derivatives of one residual.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResidualJacobian {
    pub host_pose: Vector6<f64>,
    pub target_pose: Vector6<f64>,
    pub inverse_depth: f64,
    /// Ordered (a_i, b_i, a_j, b_j).
    pub affine: Vector4<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResidualEval {
    pub valid: bool,
    pub residual: f64,
    pub gradient_weight: f64,
    pub target_pixel: Vector2<f64>,
    pub jacobian: ResidualJacobian,
}

impl ResidualEval {
    fn invalid() -> Self {
        ResidualEval::default()
    }
}

/// c² / (c² + |∇I|²).
pub fn gradient_weight(grad: &Vector2<f64>, c: f64) -> f64 {
    let c2 = c * c;
    c2 / (c2 + grad.norm_squared())
}

fn evaluate(
    host: &FrameView,
    target: &FrameView,
    host_pixel: &Vector2<f64>,
    rho: f64,
    c: f64,
    with_jacobian: bool,
) -> ResidualEval {
    if !(rho > 0.0) || !rho.is_finite() || !host.level.is_inside(host_pixel, INTERIOR_MARGIN) {
        return ResidualEval::invalid();
    }
    let Some(host_intensity) = host.level.intensity(host_pixel) else {
        return ResidualEval::invalid();
    };
    let p_host = host.level.camera.unproject_ray(host_pixel) / rho;
    let p_world = host.pose.transform(&p_host);
    let rt = target.pose.rotation.transpose();
    let p_target = rt * (p_world - target.pose.translation);
    if !(p_target.z > 0.0) {
        return ResidualEval::invalid();
    }
    let cam = &target.level.camera;
    let u_target = cam.project_unchecked(&p_target);
    if !target.level.is_inside(&u_target, INTERIOR_MARGIN) {
        return ResidualEval::invalid();
    }
    let Some(sample) = target.level.sample(&u_target) else {
        return ResidualEval::invalid();
    };
    let gain = host.affine.gain_over(&target.affine);
    let corrected = sample.intensity - target.affine.b;
    let residual = (host_intensity - host.affine.b) - gain * corrected;
    let mut eval = ResidualEval {
        valid: true,
        residual,
        gradient_weight: gradient_weight(&sample.gradient, c),
        target_pixel: u_target,
        jacobian: ResidualJacobian::default(),
    };
    if with_jacobian {
        let d_r_d_u = -gain * sample.gradient.transpose();
        let d_r_d_p: RowVector3<f64> = d_r_d_u * cam.projection_jacobian(&p_target);
        let mut d_pw = Matrix3x6::zeros();
        d_pw.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
        d_pw.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&p_world)));
        let host_pose = (d_r_d_p * rt * d_pw).transpose();
        let d_p_d_rho = -(rt * host.pose.rotation * p_host) / rho;
        eval.jacobian = ResidualJacobian {
            host_pose,
            target_pose: -host_pose,
            inverse_depth: d_r_d_p.dot(&d_p_d_rho.transpose()),
            affine: Vector4::new(-gain * corrected, -1.0, gain * corrected, gain),
        };
    }
    eval
}

/// Residual of one pattern pixel; the Jacobian field is left zero.
pub fn residual(
    host: &FrameView,
    target: &FrameView,
    point_pixel: &Vector2<f64>,
    rho: f64,
    offset: &Vector2<f64>,
    c: f64,
) -> ResidualEval {
    evaluate(host, target, &(point_pixel + offset), rho, c, false)
}

/// Residual of one pattern pixel together with its analytic partials.
pub fn residual_jacobian(
    host: &FrameView,
    target: &FrameView,
    point_pixel: &Vector2<f64>,
    rho: f64,
    offset: &Vector2<f64>,
    c: f64,
) -> ResidualEval {
    evaluate(host, target, &(point_pixel + offset), rho, c, true)
}

/// Evaluates every pixel of `pattern`.
pub fn patch_residuals(
    host: &FrameView,
    target: &FrameView,
    point_pixel: &Vector2<f64>,
    rho: f64,
    pattern: &PatchPattern,
    c: f64,
    with_jacobian: bool,
) -> [ResidualEval; 8] {
    let mut out = [ResidualEval::invalid(); 8];
    for (slot, offset) in out.iter_mut().zip(pattern.iter()) {
        *slot = evaluate(host, target, &(point_pixel + offset), rho, c, with_jacobian);
    }
    out
}

/// Σ w_r(r_k) · w_g · r_k² over the valid pattern pixels, with the valid count.
pub fn point_energy(
    host: &FrameView,
    target: &FrameView,
    point_pixel: &Vector2<f64>,
    rho: f64,
    pattern: &PatchPattern,
    c: f64,
    residual_weight: impl Fn(f64) -> f64,
) -> Result<(f64, usize), PhotometricError> {
    let evals = patch_residuals(host, target, point_pixel, rho, pattern, c, false);
    let mut energy = 0.0;
    let mut count = 0;
    for e in evals.iter().filter(|e| e.valid) {
        energy += residual_weight(e.residual) * e.gradient_weight * e.residual * e.residual;
        count += 1;
    }
    if count == 0 {
        return Err(PhotometricError::AllInvalid);
    }
    Ok((energy, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Twist};
    use crate::image::GrayImage;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: usize = 80;
    const H: usize = 60;

    fn cam() -> CameraModel {
        CameraModel::new(60.0, 60.0, 39.5, 29.5, W, H)
    }

    fn random_image(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..W * H).map(|_| rng.random_range(0.0..255.0f32)).collect();
        GrayImage::new(W, H, data).unwrap()
    }

    fn level(img: GrayImage) -> PyramidLevel {
        PyramidLevel::new(img, cam())
    }

    fn view<'a>(level: &'a PyramidLevel, pose: &'a Se3, a: f64, b: f64) -> FrameView<'a> {
        FrameView {
            level,
            pose,
            affine: AffineBrightness::new(a, b),
        }
    }

    #[test]
    fn gradient_weight_examples() {
        assert_eq!(gradient_weight(&Vector2::zeros(), 50.0), 1.0);
        assert!((gradient_weight(&Vector2::new(30.0, 40.0), 50.0) - 0.5).abs() < 1e-15);
        assert!((gradient_weight(&Vector2::new(0.0, 100.0), 50.0) - 0.2).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..100 {
            let w = gradient_weight(&Vector2::new(k as f64, 0.0), 50.0);
            assert!(w > 0.0 && w < prev);
            prev = w;
        }
    }

    #[test]
    fn identical_frames_give_zero_residual() {
        let lvl = level(random_image(1));
        let pose = Se3::identity();
        let host = view(&lvl, &pose, 0.3, 12.0);
        let target = view(&lvl, &pose, 0.3, 12.0);
        for offset in PatchPattern::SPREAD.iter() {
            let r = residual(&host, &target, &Vector2::new(30.0, 20.0), 0.7, &offset, 50.0);
            assert!(r.valid);
            assert!(r.residual.abs() < 1e-9);
        }
        let (e, n) = point_energy(
            &host,
            &target,
            &Vector2::new(30.0, 20.0),
            0.7,
            &PatchPattern::SPREAD,
            50.0,
            |_| 1.0,
        )
        .unwrap();
        assert_eq!(n, 8);
        assert!(e < 1e-15);
    }

    #[test]
    fn equal_affine_reduces_to_intensity_difference() {
        let host_level = level(random_image(2));
        let target_level = level(random_image(3));
        let hp = Se3::identity();
        let tp = Se3::from_translation(Vector3::new(0.05, -0.02, 0.01));
        let host = view(&host_level, &hp, 0.2, 17.0);
        let target = view(&target_level, &tp, 0.2, 17.0);
        let u = Vector2::new(40.0, 30.0);
        let r = residual(&host, &target, &u, 0.5, &Vector2::zeros(), 50.0);
        assert!(r.valid);
        let ij = target_level.image.sample_bilinear(&r.target_pixel).unwrap();
        let ii = host_level.image.get(40, 30) as f64;
        assert!((r.residual - (ii - ij)).abs() < 1e-9);
    }

    #[test]
    fn invalid_outside_interior_or_behind() {
        let lvl = level(random_image(4));
        let pose = Se3::identity();
        let host = view(&lvl, &pose, 0.0, 0.0);
        let r = residual(&host, &host, &Vector2::new(2.0, 30.0), 1.0, &Vector2::zeros(), 50.0);
        assert!(!r.valid);
        let behind = Se3::from_translation(Vector3::new(0.0, 0.0, 5.0));
        let target = view(&lvl, &behind, 0.0, 0.0);
        let r = residual(&host, &target, &Vector2::new(40.0, 30.0), 1.0, &Vector2::zeros(), 50.0);
        assert!(!r.valid);
        assert!(!residual(&host, &host, &Vector2::new(40.0, 30.0), 0.0, &Vector2::zeros(), 50.0).valid);
        assert_eq!(
            point_energy(&host, &target, &Vector2::new(40.0, 30.0), 1.0, &PatchPattern::SPREAD, 50.0, |_| 1.0),
            Err(PhotometricError::AllInvalid)
        );
    }

    /// Analytic texture on the plane z = depth.
    fn plane_texture(x: f64, y: f64) -> f64 {
        128.0 + 60.0 * (1.3 * x).sin() * (0.9 * y + 0.4).cos() + 30.0 * (0.7 * x - 1.1 * y).sin()
    }

    fn render_plane(center_x: f64, depth: f64, a: f64, b: f64) -> GrayImage {
        let c = cam();
        GrayImage::from_fn(W, H, |x, y| {
            let ray = c.unproject_ray(&Vector2::new(x as f64, y as f64));
            let (px, py) = (center_x + ray.x * depth, ray.y * depth);
            (a.exp() * plane_texture(px, py) + b) as f32
        })
    }

    #[test]
    fn plane_scene_residual_vanishes_at_ground_truth() {
        let depth = 4.0;
        let host_level = level(render_plane(0.0, depth, 0.1, 5.0));
        let target_level = level(render_plane(0.3, depth, -0.2, 12.0));
        let hp = Se3::identity();
        let tp = Se3::from_translation(Vector3::new(0.3, 0.0, 0.0));
        let host = view(&host_level, &hp, 0.1, 5.0);
        let target = view(&target_level, &tp, -0.2, 12.0);
        let mut n = 0;
        let mut max_r: f64 = 0.0;
        for y in 5..H - 5 {
            for x in 5..W - 5 {
                let r = residual(&host, &target, &Vector2::new(x as f64, y as f64), 1.0 / depth, &Vector2::zeros(), 50.0);
                if r.valid {
                    n += 1;
                    max_r = max_r.max(r.residual.abs());
                }
            }
        }
        assert!(n > 1000);
        assert!(max_r < 0.5, "max residual {max_r}");
    }

    fn affine_image(alpha: f64, beta: f64, gamma: f64) -> GrayImage {
        GrayImage::from_fn(W, H, |x, y| (alpha + beta * x as f64 + gamma * y as f64) as f32)
    }

    fn check_close(an: f64, fd: f64, what: &str) {
        let err = (an - fd).abs() / fd.abs().max(1e-6);
        assert!(err < 1e-3, "{what}: analytic {an} vs fd {fd}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let host_level = level(random_image(6));
        let h = 1e-5;
        let mut checked = 0;
        while checked < 500 {
            // Dyadic coefficients keep every stored f32 value exact.
            let target_level = level(affine_image(
                rng.random_range(60..120) as f64,
                rng.random_range(-96..=96) as f64 / 64.0,
                rng.random_range(-96..=96) as f64 / 64.0,
            ));
            let hp = Se3::exp(&Twist(Vector6::from_fn(|_, _| rng.random_range(-0.1..0.1))));
            let tp = hp.left_perturbed(&Twist(Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05))));
            let (ai, bi, aj, bj) = (
                rng.random_range(-0.3..0.3),
                rng.random_range(-10.0..10.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-10.0..10.0),
            );
            let u = Vector2::new(rng.random_range(15.0..65.0), rng.random_range(12.0..48.0));
            let rho = rng.random_range(0.2..1.0);
            let offset = Vector2::zeros();
            let eval_at = |hp: &Se3, tp: &Se3, rho: f64, aff: [f64; 4]| {
                residual(
                    &view(&host_level, hp, aff[0], aff[1]),
                    &view(&target_level, tp, aff[2], aff[3]),
                    &u,
                    rho,
                    &offset,
                    50.0,
                )
            };
            let aff = [ai, bi, aj, bj];
            let base = residual_jacobian(
                &view(&host_level, &hp, ai, bi),
                &view(&target_level, &tp, aj, bj),
                &u,
                rho,
                &offset,
                50.0,
            );
            if !base.valid || !target_level.is_inside(&base.target_pixel, 5.0) {
                continue;
            }
            let j = base.jacobian;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = eval_at(&hp.left_perturbed(&Twist(d)), &tp, rho, aff);
                let minus = eval_at(&hp.left_perturbed(&Twist(-d)), &tp, rho, aff);
                check_close(j.host_pose[k], (plus.residual - minus.residual) / (2.0 * h), "host pose");
                let plus = eval_at(&hp, &tp.left_perturbed(&Twist(d)), rho, aff);
                let minus = eval_at(&hp, &tp.left_perturbed(&Twist(-d)), rho, aff);
                check_close(j.target_pose[k], (plus.residual - minus.residual) / (2.0 * h), "target pose");
            }
            let plus = eval_at(&hp, &tp, rho + h, aff);
            let minus = eval_at(&hp, &tp, rho - h, aff);
            check_close(j.inverse_depth, (plus.residual - minus.residual) / (2.0 * h), "inverse depth");
            for k in 0..4 {
                let mut ap = aff;
                let mut am = aff;
                ap[k] += h;
                am[k] -= h;
                let fd = (eval_at(&hp, &tp, rho, ap).residual - eval_at(&hp, &tp, rho, am).residual) / (2.0 * h);
                check_close(j.affine[k], fd, "affine");
            }
            checked += 1;
        }
    }

    #[test]
    fn offset_partials_have_unit_magnitude_at_equal_exposure() {
        let lvl = level(random_image(7));
        let pose = Se3::identity();
        let r = residual_jacobian(
            &view(&lvl, &pose, 0.4, 3.0),
            &view(&lvl, &pose, 0.4, 9.0),
            &Vector2::new(40.0, 30.0),
            1.0,
            &Vector2::zeros(),
            50.0,
        );
        assert_eq!(r.jacobian.affine[1], -1.0);
        assert_eq!(r.jacobian.affine[3], 1.0);
    }

    #[test]
    fn zero_target_gradient_zeroes_geometric_partials() {
        let host_level = level(random_image(8));
        let flat = level(GrayImage::from_fn(W, H, |_, _| 90.0));
        let hp = Se3::identity();
        let tp = Se3::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let r = residual_jacobian(
            &view(&host_level, &hp, 0.0, 0.0),
            &view(&flat, &tp, 0.0, 0.0),
            &Vector2::new(40.0, 30.0),
            0.5,
            &Vector2::zeros(),
            50.0,
        );
        assert!(r.valid);
        assert_eq!(r.jacobian.host_pose, Vector6::zeros());
        assert_eq!(r.jacobian.target_pose, Vector6::zeros());
        assert_eq!(r.jacobian.inverse_depth, 0.0);
    }

    #[test]
    fn common_left_increment_leaves_residual_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let host_level = level(random_image(10));
        let target_level = level(render_plane(0.0, 3.0, 0.0, 0.0));
        for _ in 0..200 {
            let hp = Se3::exp(&Twist(Vector6::from_fn(|_, _| rng.random_range(-0.1..0.1))));
            let tp = hp.left_perturbed(&Twist(Vector6::from_fn(|_, _| rng.random_range(-0.03..0.03))));
            let u = Vector2::new(rng.random_range(20.0..60.0), rng.random_range(15.0..45.0));
            let base = residual_jacobian(
                &view(&host_level, &hp, 0.0, 0.0),
                &view(&target_level, &tp, 0.0, 0.0),
                &u,
                0.4,
                &Vector2::zeros(),
                50.0,
            );
            if !base.valid {
                continue;
            }
            let common = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sum = base.jacobian.host_pose + base.jacobian.target_pose;
            assert!(sum.dot(&common).abs() < 1e-6);
            let d = Twist(common * 1e-3);
            let (hp2, tp2) = (hp.left_perturbed(&d), tp.left_perturbed(&d));
            let moved = residual(
                &view(&host_level, &hp2, 0.0, 0.0),
                &view(&target_level, &tp2, 0.0, 0.0),
                &u,
                0.4,
                &Vector2::zeros(),
                50.0,
            );
            assert!((moved.residual - base.residual).abs() < 1e-6);
        }
    }

    #[test]
    fn brightness_offset_shift_cancels() {
        let host_level = level(random_image(11));
        let target_level = level(random_image(12));
        let hp = Se3::identity();
        let tp = Se3::from_translation(Vector3::new(0.02, 0.0, 0.0));
        let u = Vector2::new(35.0, 25.0);
        let base = residual(
            &view(&host_level, &hp, 0.1, 4.0),
            &view(&target_level, &tp, 0.1, 6.0),
            &u,
            0.5,
            &Vector2::zeros(),
            50.0,
        );
        let host_img = host_level.image.map(|v| v + 7.0);
        let target_img = target_level.image.map(|v| v + 7.0);
        let (hl, tl) = (level(host_img), level(target_img));
        let shifted = residual(
            &view(&hl, &hp, 0.1, 11.0),
            &view(&tl, &tp, 0.1, 13.0),
            &u,
            0.5,
            &Vector2::zeros(),
            50.0,
        );
        assert!((base.residual - shifted.residual).abs() < 1e-9);
    }

    #[test]
    fn point_energy_is_sum_of_pixel_residuals() {
        let host_level = level(random_image(13));
        let target_level = level(random_image(14));
        let hp = Se3::identity();
        let tp = Se3::from_translation(Vector3::new(0.03, 0.01, 0.0));
        let host = view(&host_level, &hp, 0.05, 2.0);
        let target = view(&target_level, &tp, -0.05, 1.0);
        let u = Vector2::new(41.0, 28.0);
        let wr = |r: f64| 6.0 / (5.0 + r * r / 100.0);
        let (e, n) = point_energy(&host, &target, &u, 0.6, &PatchPattern::SPREAD, 50.0, wr).unwrap();
        let mut oracle = 0.0;
        let mut count = 0;
        for off in PatchPattern::SPREAD.iter() {
            let r = residual(&host, &target, &u, 0.6, &off, 50.0);
            if r.valid {
                oracle += wr(r.residual) * r.gradient_weight * r.residual * r.residual;
                count += 1;
            }
        }
        assert_eq!(n, count);
        assert!((e - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}
