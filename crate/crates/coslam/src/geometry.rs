//! SE(3) / Sim(3) transform algebra, pinhole projection and triangulation.
//!
//! Pose convention is camera-from-world everywhere: an [`SE3Pose`] maps world
//! points into the camera frame. [`Sim3Transform`] adds a positive uniform
//! scale and is the currency of map anchoring, fusion and trajectory
//! alignment.

use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// 7-vector of Sim(3) Lie-algebra coordinates: [rotation(3), translation(3), log-scale].
/// The SE(3) case is the restriction with log-scale fixed at 0.
pub type TangentVector7 = SVector<f64, 7>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth (z = {z})")]
    PointBehindCamera { z: f64 },
    #[error("triangulation baseline degenerate: {reason}")]
    DegenerateBaseline { reason: &'static str },
}

/// Rigid-body transform, camera-from-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl SE3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation: renormalized(rotation), translation }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, t: Vec3) -> Self {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        Self::new(UnitQuaternion::from_quaternion(q), t)
    }

    /// Applies `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let r_inv = self.rotation.inverse();
        SE3Pose::new(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle (rad) and translation distance to another pose.
    pub fn distance_to(&self, other: &SE3Pose) -> (f64, f64) {
        let dq = self.rotation.inverse() * other.rotation;
        (dq.angle(), (self.translation - other.translation).norm())
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// 7-DoF similarity transform: p ↦ s·R·p + t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl Sim3Transform {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3, scale: f64) -> Self {
        assert!(scale > 0.0, "Sim3 scale must be strictly positive, got {scale}");
        Self { rotation: renormalized(rotation), translation, scale }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros(), scale: 1.0 }
    }

    pub fn from_se3(pose: &SE3Pose) -> Self {
        Self { rotation: pose.rotation, translation: pose.translation, scale: 1.0 }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Applies `other` first, then `self`; scales multiply.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform::new(
            self.rotation * other.rotation,
            self.scale * (self.rotation * other.translation) + self.translation,
            self.scale * other.scale,
        )
    }

    pub fn inverse(&self) -> Sim3Transform {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Sim3Transform::new(r_inv, -s_inv * (r_inv * self.translation), s_inv)
    }

    /// Re-expresses a camera-from-world pose after the world frame is moved
    /// by this transform (x' = T(x)). The camera-side scale is renormalized
    /// away so the result stays a rigid pose.
    pub fn transport_pose(&self, pose: &SE3Pose) -> SE3Pose {
        let p = Sim3Transform::from_se3(pose).compose(&self.inverse());
        SE3Pose::new(p.rotation, p.translation / p.scale)
    }

    pub fn exp(v: &TangentVector7) -> Sim3Transform {
        let omega = Vec3::new(v[0], v[1], v[2]);
        let upsilon = Vec3::new(v[3], v[4], v[5]);
        let sigma = v[6];
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        let t = sim3_w_matrix(&omega, sigma) * upsilon;
        Sim3Transform::new(rotation, t, sigma.exp())
    }

    /// Inverse of [`Sim3Transform::exp`]; valid for rotation angle < π.
    pub fn log(&self) -> TangentVector7 {
        let omega = self.rotation.scaled_axis();
        let sigma = self.scale.ln();
        let w = sim3_w_matrix(&omega, sigma);
        let upsilon = w.try_inverse().expect("W matrix invertible for angle < pi") * self.translation;
        let mut v = TangentVector7::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&omega);
        v.fixed_rows_mut::<3>(3).copy_from(&upsilon);
        v[6] = sigma;
        v
    }

    /// Adjoint: exp(Adj(T)·v) = T·exp(v)·T⁻¹, in [ω, υ, σ] ordering.
    pub fn adjoint(&self) -> nalgebra::SMatrix<f64, 7, 7> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let mut adj = nalgebra::SMatrix::<f64, 7, 7>::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.translation) * r));
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(self.scale * r));
        adj.fixed_view_mut::<3, 1>(3, 6).copy_from(&(-self.translation));
        adj[(6, 6)] = 1.0;
        adj
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.scale * self.rotation.to_rotation_matrix().into_inner()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(*q.quaternion())
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// W(ω, σ) = ∫₀¹ e^{σu}·exp(u·ω̂) du = Σ_k (σI + ω̂)^k / (k+1)!,
/// the matrix coupling the translational tangent to the Sim(3) translation.
/// The series converges fast for rotation angle ≤ π and |σ| of a few units.
fn sim3_w_matrix(omega: &Vec3, sigma: f64) -> Matrix3<f64> {
    let x = sigma * Matrix3::identity() + skew(omega);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity(); // k = 0 term, 1/(1)! = 1
    for k in 1..60 {
        term = (term * x) / (k as f64 + 1.0);
        sum += term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    sum
}

/// Left Jacobian of Sim(3) at v, via the series Σ ad(v)^n / (n+1)!.
pub fn sim3_left_jacobian(v: &TangentVector7) -> nalgebra::SMatrix<f64, 7, 7> {
    let ad = sim3_ad(v);
    let mut term = nalgebra::SMatrix::<f64, 7, 7>::identity();
    let mut sum = term;
    for k in 1..80 {
        term = (term * ad) / (k as f64 + 1.0);
        sum += term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    sum
}

/// adjoint representation of the Sim(3) algebra element v = [ω, υ, σ]:
/// ad(v)·w = [v, w].
pub fn sim3_ad(v: &TangentVector7) -> nalgebra::SMatrix<f64, 7, 7> {
    let omega = Vec3::new(v[0], v[1], v[2]);
    let upsilon = Vec3::new(v[3], v[4], v[5]);
    let sigma = v[6];
    let mut ad = nalgebra::SMatrix::<f64, 7, 7>::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&omega));
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&upsilon));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&(skew(&omega) + sigma * Matrix3::identity()));
    ad.fixed_view_mut::<3, 1>(3, 6).copy_from(&(-upsilon));
    ad
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(cx > 0.0 && cx < width as f64, "cx out of image");
        assert!(cy > 0.0 && cy < height as f64, "cy out of image");
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.x <= self.width as f64 && px.y >= 0.0 && px.y <= self.height as f64
    }
}

/// Projects a camera-frame point to pixels. Fails when z ≤ 0 so callers can
/// drop the observation.
pub fn project(k: &CameraIntrinsics, p_cam: &Vec3) -> Result<Vec2, GeometryError> {
    if p_cam.z <= 0.0 {
        return Err(GeometryError::PointBehindCamera { z: p_cam.z });
    }
    Ok(Vec2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy))
}

/// Back-projects a pixel to the camera-frame ray at the given depth.
pub fn unproject(k: &CameraIntrinsics, px: &Vec2, depth: f64) -> Vec3 {
    Vec3::new((px.x - k.cx) / k.fx * depth, (px.y - k.cy) / k.fy * depth, depth)
}

/// Midpoint triangulation: intersects the two back-projected rays at the
/// midpoint of their common perpendicular, in world coordinates.
pub fn triangulate(
    pose_a: &SE3Pose,
    pose_b: &SE3Pose,
    obs_a: &Vec2,
    obs_b: &Vec2,
    k: &CameraIntrinsics,
) -> Result<Vec3, GeometryError> {
    let center_a = pose_a.center();
    let center_b = pose_b.center();
    let baseline = center_b - center_a;
    if baseline.norm() < 1e-12 {
        return Err(GeometryError::DegenerateBaseline { reason: "zero baseline" });
    }
    let dir_a = (pose_a.rotation.inverse() * unproject(k, obs_a, 1.0)).normalize();
    let dir_b = (pose_b.rotation.inverse() * unproject(k, obs_b, 1.0)).normalize();
    // Ray angle below 1e-6 rad leaves the normal-equation system singular.
    if dir_a.cross(&dir_b).norm() < 1e-6 {
        return Err(GeometryError::DegenerateBaseline { reason: "parallel rays" });
    }
    // Minimize |(C_a + s·d_a) - (C_b + u·d_b)|².
    let d_ab = dir_a.dot(&dir_b);
    let d_ac = dir_a.dot(&baseline);
    let d_bc = dir_b.dot(&baseline);
    let denom = 1.0 - d_ab * d_ab;
    let s = (d_ac - d_ab * d_bc) / denom;
    let u = (d_ab * d_ac - d_bc) / denom;
    Ok(0.5 * ((center_a + s * dir_a) + (center_b + u * dir_b)))
}

/// Angle (rad) between the rays from the two camera centers to a world point.
pub fn triangulation_angle(pose_a: &SE3Pose, pose_b: &SE3Pose, point: &Vec3) -> f64 {
    let ra = (point - pose_a.center()).normalize();
    let rb = (point - pose_b.center()).normalize();
    ra.dot(&rb).clamp(-1.0, 1.0).acos()
}

/// Two-view relative pose from normalized (unit-depth) image coordinates via
/// the eight-point essential matrix: returns the camera2-from-camera1
/// rotation and unit-norm translation, disambiguated among the four
/// decompositions by a cheirality vote.
pub fn relative_pose_from_correspondences(
    pairs: &[(Vec3, Vec3)],
) -> Result<(UnitQuaternion<f64>, Vec3), GeometryError> {
    if pairs.len() < 8 {
        return Err(GeometryError::DegenerateBaseline { reason: "fewer than 8 correspondences" });
    }
    // Rows of the homogeneous system a . vec(E) = 0 with x2^T E x1 = 0.
    let mut a = nalgebra::DMatrix::<f64>::zeros(pairs.len(), 9);
    for (row, (x1, x2)) in pairs.iter().enumerate() {
        a.set_row(
            row,
            &nalgebra::RowDVector::from_row_slice(&[
                x2.x * x1.x,
                x2.x * x1.y,
                x2.x,
                x2.y * x1.x,
                x2.y * x1.y,
                x2.y,
                x1.x,
                x1.y,
                1.0,
            ])
            .row(0),
        );
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let e = vt.row(vt.nrows() - 1);
    let e_mat = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);

    // Project onto the essential manifold and decompose.
    let svd_e = e_mat.svd(true, true);
    let mut u = svd_e.u.expect("svd requested u");
    let mut vt_e = svd_e.v_t.expect("svd requested v_t");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt_e.determinant() < 0.0 {
        vt_e = -vt_e;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r_a = u * w * vt_e;
    let r_b = u * w.transpose() * vt_e;
    let t = u.column(2).into_owned();

    // Cheirality vote: both depths positive under p2 = R p1 + t.
    let depths = |r: &Matrix3<f64>, t: &Vec3, x1: &Vec3, x2: &Vec3| -> Option<(f64, f64)> {
        // Least-squares depths for z1 * R x1 - z2 * x2 = -t.
        let rx1 = r * x1;
        let a00 = rx1.dot(&rx1);
        let a01 = -rx1.dot(x2);
        let a11 = x2.dot(x2);
        let b0 = -rx1.dot(t);
        let b1 = x2.dot(t);
        let det = a00 * a11 - a01 * a01;
        if det.abs() < 1e-15 {
            return None;
        }
        Some(((b0 * a11 - b1 * a01) / det, (a00 * b1 - a01 * b0) / det))
    };
    let mut best: Option<(usize, Matrix3<f64>, Vec3)> = None;
    for (r, t) in [(r_a, t), (r_a, -t), (r_b, t), (r_b, -t)] {
        let votes = pairs
            .iter()
            .filter(|(x1, x2)| {
                depths(&r, &t, x1, x2).is_some_and(|(z1, z2)| z1 > 0.0 && z2 > 0.0)
            })
            .count();
        if best.as_ref().map_or(true, |(v, _, _)| votes > *v) {
            best = Some((votes, r, t));
        }
    }
    let (votes, r, t) = best.unwrap();
    if votes * 2 < pairs.len() {
        return Err(GeometryError::DegenerateBaseline { reason: "cheirality vote failed" });
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    Ok((rotation, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut StdRng) -> SE3Pose {
        let axis = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        SE3Pose::new(
            UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.0..2.5)),
            Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        )
    }

    fn random_sim3(rng: &mut StdRng) -> Sim3Transform {
        let p = random_pose(rng);
        Sim3Transform::new(p.rotation, p.translation, rng.gen_range(0.2..4.0))
    }

    #[test]
    fn se3_identity_compose() {
        let mut rng = StdRng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let q = SE3Pose::identity().compose(&p);
        let (da, dt) = p.distance_to(&q);
        assert!(da < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn se3_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let id = p.compose(&p.inverse());
            let (da, dt) = id.distance_to(&SE3Pose::identity());
            assert!(da < 1e-9, "rotation residual {da}");
            assert!(dt < 1e-9, "translation residual {dt}");
        }
    }

    #[test]
    fn se3_compose_matches_matrix_product() {
        // Oracle: explicit 4x4 homogeneous matrix multiplication.
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = a.compose(&b);
            let m = a.to_matrix() * b.to_matrix();
            assert_relative_eq!(c.to_matrix(), m, epsilon = 1e-12);
        }
    }

    #[test]
    fn sim3_apply_identity_and_hand_case() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(Sim3Transform::identity().apply(&p), p, epsilon = 1e-15);
        let t = Sim3Transform::new(UnitQuaternion::identity(), Vec3::new(1.0, 0.0, 0.0), 2.0);
        assert_relative_eq!(t.apply(&Vec3::new(1.0, 1.0, 1.0)), Vec3::new(3.0, 2.0, 2.0), epsilon = 1e-15);
    }

    #[test]
    fn sim3_apply_matches_homogeneous_matrix() {
        // Oracle: 4x4 similarity-matrix application.
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let t = random_sim3(&mut rng);
            let p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let got = t.apply(&p);
            let hp = t.to_matrix() * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            assert_relative_eq!(got, hp.fixed_rows::<3>(0).into_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sim3_group_axioms() {
        let mut rng = StdRng::seed_from_u64(5);
        let id = Sim3Transform::identity().inverse();
        assert_relative_eq!(id.scale, 1.0, epsilon = 1e-15);
        assert!(id.translation.norm() < 1e-15);
        for _ in 0..50 {
            let t = random_sim3(&mut rng);
            let e = t.compose(&t.inverse());
            assert!((e.scale - 1.0).abs() < 1e-12);
            assert!(e.translation.norm() < 1e-12);
            assert!(e.rotation.angle() < 1e-12);
        }
        let a = random_sim3(&mut rng);
        let b = random_sim3(&mut rng);
        assert_relative_eq!(a.compose(&b).scale, a.scale * b.scale, epsilon = 1e-12);
    }

    #[test]
    fn sim3_scale_two_times_three() {
        let a = Sim3Transform::new(UnitQuaternion::identity(), Vec3::zeros(), 2.0);
        let b = Sim3Transform::new(UnitQuaternion::identity(), Vec3::zeros(), 3.0);
        assert_relative_eq!(a.compose(&b).scale, 6.0, epsilon = 1e-15);
    }

    #[test]
    fn project_hand_cases() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100);
        assert_relative_eq!(project(&k, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), Vec2::new(50.0, 50.0));
        assert_relative_eq!(project(&k, &Vec3::new(1.0, 0.0, 2.0)).unwrap(), Vec2::new(100.0, 50.0));
        assert!(matches!(
            project(&k, &Vec3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::PointBehindCamera { .. })
        ));
    }

    #[test]
    fn project_unproject_roundtrip() {
        let k = CameraIntrinsics::new(320.0, 330.0, 319.0, 241.0, 640, 480);
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..100 {
            let px = Vec2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let depth = rng.gen_range(0.1..50.0);
            let back = project(&k, &unproject(&k, &px, depth)).unwrap();
            assert_relative_eq!(back, px, epsilon = 1e-9);
        }
    }

    #[test]
    fn triangulate_exact_roundtrip() {
        let k = CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480);
        let pose_a = SE3Pose::identity();
        let pose_b = SE3Pose::new(UnitQuaternion::identity(), Vec3::new(-1.0, 0.0, 0.0));
        let p = Vec3::new(0.5, -0.2, 8.0);
        let obs_a = project(&k, &pose_a.transform_point(&p)).unwrap();
        let obs_b = project(&k, &pose_b.transform_point(&p)).unwrap();
        let rec = triangulate(&pose_a, &pose_b, &obs_a, &obs_b, &k).unwrap();
        assert_relative_eq!(rec, p, epsilon = 1e-9);
    }

    #[test]
    fn triangulate_zero_baseline() {
        let k = CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480);
        let p = SE3Pose::identity();
        let r = triangulate(&p, &p, &Vec2::new(300.0, 200.0), &Vec2::new(310.0, 210.0), &k);
        assert!(matches!(r, Err(GeometryError::DegenerateBaseline { .. })));
    }

    #[test]
    fn triangulate_noisy_reprojects_within_bounds() {
        // Oracle: compare against linear DLT triangulation on the same data.
        let k = CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480);
        let pose_a = SE3Pose::identity();
        let pose_b = SE3Pose::new(
            UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.02, 0.0)),
            Vec3::new(-1.0, 0.0, 0.0),
        );
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(4.0..20.0));
            let na = Vec2::new(rng_normal(&mut rng), rng_normal(&mut rng));
            let nb = Vec2::new(rng_normal(&mut rng), rng_normal(&mut rng));
            let obs_a = project(&k, &pose_a.transform_point(&p)).unwrap() + na;
            let obs_b = project(&k, &pose_b.transform_point(&p)).unwrap() + nb;
            let rec = triangulate(&pose_a, &pose_b, &obs_a, &obs_b, &k).unwrap();
            let dlt = dlt_triangulate(&pose_a, &pose_b, &obs_a, &obs_b, &k);
            for (pose, obs) in [(&pose_a, &obs_a), (&pose_b, &obs_b)] {
                let reproj = project(&k, &pose.transform_point(&rec)).unwrap();
                assert!((reproj - obs).norm() <= 3.0, "midpoint reprojection too large");
                let reproj_dlt = project(&k, &pose.transform_point(&dlt)).unwrap();
                assert!((reproj_dlt - obs).norm() <= 3.0, "dlt reprojection too large");
            }
            // Depth error grows like z²σ/(f·b); at z = 20 m both estimates move
            // by up to ~1 m along the ray, so compare methods loosely.
            assert!((rec - dlt).norm() < 2.0, "midpoint and DLT disagree: {}", (rec - dlt).norm());
        }
    }

    fn rng_normal(rng: &mut StdRng) -> f64 {
        // Box-Muller, enough for test noise.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn dlt_triangulate(
        pose_a: &SE3Pose,
        pose_b: &SE3Pose,
        obs_a: &Vec2,
        obs_b: &Vec2,
        k: &CameraIntrinsics,
    ) -> Vec3 {
        // Linear DLT on normalized coordinates: 4 equations, SVD null vector.
        let mut a = nalgebra::Matrix4::<f64>::zeros();
        for (row, (pose, obs)) in [(pose_a, obs_a), (pose_b, obs_b)].iter().enumerate() {
            let m = pose.to_matrix();
            let x = (obs.x - k.cx) / k.fx;
            let y = (obs.y - k.cy) / k.fy;
            a.row_mut(2 * row).copy_from(&(m.row(0) - x * m.row(2)));
            a.row_mut(2 * row + 1).copy_from(&(m.row(1) - y * m.row(2)));
        }
        let svd = a.svd(true, true);
        let v_t = svd.v_t.unwrap();
        let h = v_t.row(3);
        Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3])
    }

    #[test]
    fn sim3_exp_log_roundtrip() {
        let mut rng = StdRng::seed_from_u64(8);
        assert!(Sim3Transform::identity().log().norm() < 1e-15);
        assert!(Sim3Transform::exp(&TangentVector7::zeros()).log().norm() < 1e-15);
        for _ in 0..200 {
            let mut v = TangentVector7::zeros();
            let axis = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
                .normalize();
            let angle = rng.gen_range(0.0..3.0);
            v.fixed_rows_mut::<3>(0).copy_from(&(axis * angle));
            v[3] = rng.gen_range(-3.0..3.0);
            v[4] = rng.gen_range(-3.0..3.0);
            v[5] = rng.gen_range(-3.0..3.0);
            v[6] = rng.gen_range(-1.0..1.0);
            let back = Sim3Transform::exp(&v).log();
            assert!((back - v).norm() < 1e-9, "roundtrip residual {}", (back - v).norm());
        }
    }

    #[test]
    fn sim3_exp_first_order() {
        // Oracle: truncated series I + hat(v) at |v| = 1e-4.
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let v = TangentVector7::from_fn(|_, _| rng.gen::<f64>() - 0.5).normalize() * 1e-4;
            let m = Sim3Transform::exp(&v).to_matrix();
            let omega = Vec3::new(v[0], v[1], v[2]);
            let upsilon = Vec3::new(v[3], v[4], v[5]);
            let mut hat = nalgebra::Matrix4::<f64>::zeros();
            hat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(v[6] * Matrix3::identity() + skew(&omega)));
            hat.fixed_view_mut::<3, 1>(0, 3).copy_from(&upsilon);
            let first_order = nalgebra::Matrix4::identity() + hat;
            assert!((m - first_order).norm() < 1e-7, "first-order mismatch");
        }
    }

    #[test]
    fn sim3_adjoint_matches_conjugation() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..50 {
            let t = random_sim3(&mut rng);
            let v = TangentVector7::from_fn(|_, _| rng.gen::<f64>() - 0.5) * 0.1;
            let lhs = t.compose(&Sim3Transform::exp(&v)).compose(&t.inverse());
            let rhs = Sim3Transform::exp(&(t.adjoint() * v));
            assert!((lhs.to_matrix() - rhs.to_matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn relative_pose_recovers_random_motion() {
        // Oracle: project random in-front points through a known relative
        // pose; noiseless eight-point recovery must match rotation and
        // translation direction to numerical precision.
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..30 {
            let axis = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let rot = UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.01..0.5));
            let t = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.3..0.3),
            );
            if t.norm() < 0.2 {
                continue;
            }
            let mut pairs = Vec::new();
            while pairs.len() < 40 {
                let p = Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(4.0..12.0),
                );
                let q = rot * p + t;
                if q.z <= 0.5 {
                    continue;
                }
                pairs.push((p / p.z, q / q.z));
            }
            let (r_est, t_est) = relative_pose_from_correspondences(&pairs).unwrap();
            assert!(r_est.angle_to(&rot) < 1e-8, "rotation error {}", r_est.angle_to(&rot));
            let dir_err = (t_est - t.normalize()).norm();
            assert!(dir_err < 1e-7, "translation direction error {dir_err}");
        }
    }

    #[test]
    fn relative_pose_needs_eight_pairs() {
        let pairs: Vec<(Vec3, Vec3)> =
            (0..7).map(|i| (Vec3::new(i as f64, 0.0, 1.0), Vec3::new(i as f64, 0.1, 1.0))).collect();
        assert!(relative_pose_from_correspondences(&pairs).is_err());
    }

    #[test]
    fn sim3_left_jacobian_matches_bch_first_order() {
        // J_l satisfies exp(v + J_l(v)^{-1} eps_shift) ≈ exp(eps) exp(v) to first order;
        // check via finite differences of log(exp(eps)·exp(v)).
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let v = TangentVector7::from_fn(|_, _| rng.gen::<f64>() - 0.5);
            let jl = sim3_left_jacobian(&v);
            let base = Sim3Transform::exp(&v);
            let h = 1e-6;
            for i in 0..7 {
                let mut eps = TangentVector7::zeros();
                eps[i] = h;
                let perturbed = Sim3Transform::exp(&eps).compose(&base).log();
                let numeric = (perturbed - v) / h;
                let analytic = jl.try_inverse().unwrap().column(i).into_owned();
                assert!((numeric - analytic).norm() < 1e-4, "column {i} mismatch");
            }
        }
    }
}
