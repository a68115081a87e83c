//! Joint parameterization, rigid transforms, screw motions, and the
//! geometric kernels shared by losses and metrics.
//!
//! A joint displacement produces a screw motion: a rotation about an axis
//! through a point for revolute joints, a pure translation along a direction
//! for prismatic ones. [`manipulation_matrix`] builds that motion as a 4x4
//! homogeneous transform from a joint and a target-state command.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Tolerance for the unit-orientation invariant on [`JointParams`].
pub const UNIT_TOL: f64 = 1e-9;
/// Tolerance for the unit-axis precondition on [`rodrigues`] and
/// [`point_to_axis_distance`].
pub const AXIS_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("axis is not unit length (norm = {norm})")]
    NonUnitAxis { norm: f64 },
    #[error("degenerate (zero-length) vector")]
    DegenerateVector,
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid rigid transform: {reason}")]
    InvalidTransform { reason: &'static str },
}

/// Joint kind: a hinge or a slider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    Revolute,
    Prismatic,
}

impl JointType {
    /// Encoding used by dataset records and the type decoder: prismatic = 1.
    pub fn as_index(self) -> i32 {
        match self {
            JointType::Revolute => 0,
            JointType::Prismatic => 1,
        }
    }

    pub fn from_index(idx: i32) -> Option<Self> {
        match idx {
            0 => Some(JointType::Revolute),
            1 => Some(JointType::Prismatic),
            _ => None,
        }
    }
}

/// Joint type, position, orientation, and current state.
///
/// State is the displacement from the fully closed configuration: radians
/// for revolute joints, meters for prismatic ones. For prismatic joints the
/// position is the centroid of the movable part in the closed state.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub joint_type: JointType,
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
    pub state: f64,
}

impl JointParams {
    /// Builds joint parameters, enforcing the unit-orientation invariant.
    pub fn new(
        joint_type: JointType,
        position: Vector3<f64>,
        orientation: Vector3<f64>,
        state: f64,
    ) -> Result<Self, GeomError> {
        let j = JointParams {
            joint_type,
            position,
            orientation,
            state,
        };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.position.iter().all(|v| v.is_finite())
            && self.orientation.iter().all(|v| v.is_finite())
            && self.state.is_finite())
        {
            return Err(GeomError::NonFinite {
                what: "joint parameters",
            });
        }
        let norm = self.orientation.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(GeomError::NonUnitAxis { norm });
        }
        Ok(())
    }

    /// The same joint expressed in another frame: position mapped as a point,
    /// orientation as a direction. State and type are frame-independent.
    pub fn transformed(&self, t: &RigidTransform) -> JointParams {
        JointParams {
            joint_type: self.joint_type,
            position: t.apply_point(&self.position),
            orientation: t.apply_direction(&self.orientation),
            state: self.state,
        }
    }
}

/// A 4x4 homogeneous rigid transform with exact (0, 0, 0, 1) bottom row.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            matrix: Matrix4::identity(),
        }
    }

    /// Assembles [[R, t], [0, 1]] from a rotation block and a translation.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        RigidTransform { matrix: m }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), translation)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Directions transform without the translation column.
    pub fn apply_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * d
    }

    /// self ∘ other: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Exact rigid inverse [Rᵀ, -Rᵀt].
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation()))
    }

    /// Checks the bottom row exactly and the rotation block within 1e-12.
    pub fn validate(&self) -> Result<(), GeomError> {
        let m = &self.matrix;
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(GeomError::InvalidTransform {
                reason: "bottom row is not (0, 0, 0, 1)",
            });
        }
        let r = self.rotation();
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.iter().any(|v| v.abs() > 1e-12) {
            return Err(GeomError::InvalidTransform {
                reason: "rotation block is not orthonormal",
            });
        }
        if (r.determinant() - 1.0).abs() > 1e-12 {
            return Err(GeomError::InvalidTransform {
                reason: "rotation block determinant is not 1",
            });
        }
        Ok(())
    }
}

/// Camera-frame point cloud; all coordinates must stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if points
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(GeomError::NonFinite {
                what: "point cloud",
            });
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Flat row-major N×3 buffer, the layout dataset records use.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(&[p.x, p.y, p.z]);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, GeomError> {
        assert!(flat.len() % 3 == 0, "flat cloud length must be divisible by 3");
        PointCloud::new(
            flat.chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

fn skew(u: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0)
}

/// Rotation matrix for `angle` radians about the unit vector `axis`:
/// R = I cosθ + sinθ [u]× + (1 − cosθ) uuᵀ.
pub fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Result<Matrix3<f64>, GeomError> {
    let norm = axis.norm();
    if (norm - 1.0).abs() > AXIS_TOL {
        return Err(GeomError::NonUnitAxis { norm });
    }
    let (s, c) = angle.sin_cos();
    Ok(Matrix3::identity() * c + skew(axis) * s + axis * axis.transpose() * (1.0 - c))
}

/// Screw motion that carries the joint from its current state to the
/// commanded state `command` (same units as `joint.state`).
///
/// Revolute: R = rodrigues(u, Δv), T = (I − R)·h, so the rotation axis
/// passes through h. Prismatic: pure translation Δv·u.
pub fn manipulation_matrix(
    joint: &JointParams,
    command: f64,
) -> Result<RigidTransform, GeomError> {
    joint.validate()?;
    if !command.is_finite() {
        return Err(GeomError::NonFinite { what: "command" });
    }
    let delta = command - joint.state;
    match joint.joint_type {
        JointType::Revolute => {
            let r = rodrigues(&joint.orientation, delta)?;
            let t = (Matrix3::identity() - r) * joint.position;
            Ok(RigidTransform::from_parts(r, t))
        }
        JointType::Prismatic => Ok(RigidTransform::from_translation(delta * joint.orientation)),
    }
}

/// Maps every point of the cloud through the transform; count is preserved.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

/// Angle in [0, π] between two non-zero vectors. The normalized dot product
/// is clamped to [−1, 1] so numerically boundary-stuck inputs never yield NaN.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64, GeomError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(GeomError::DegenerateVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Perpendicular distance from `p` to the line through `axis_point` with
/// unit direction `axis_dir`: ‖(p − axis_point) × axis_dir‖.
pub fn point_to_axis_distance(
    p: &Vector3<f64>,
    axis_point: &Vector3<f64>,
    axis_dir: &Vector3<f64>,
) -> Result<f64, GeomError> {
    let norm = axis_dir.norm();
    if (norm - 1.0).abs() > AXIS_TOL {
        return Err(GeomError::NonUnitAxis { norm });
    }
    Ok((p - axis_point).cross(axis_dir).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: rotation matrix from a unit quaternion
    /// q = (cos(θ/2), sin(θ/2)·u), composed element by element.
    fn quaternion_rotation(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        let (w, x, y, z) = (c, s * axis.x, s * axis.y, s * axis.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Oracle for the revolute screw: translate(−h) ∘ rotate ∘ translate(+h).
    fn screw_via_composition(joint: &JointParams, command: f64) -> RigidTransform {
        let r = rodrigues(&joint.orientation, command - joint.state).unwrap();
        let to_origin = RigidTransform::from_translation(-joint.position);
        let rot = RigidTransform::from_parts(r, Vector3::zeros());
        let back = RigidTransform::from_translation(joint.position);
        back.compose(&rot).compose(&to_origin)
    }

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v / v.norm()
    }

    #[test]
    fn rodrigues_zero_angle_is_identity() {
        for axis in [
            Vector3::x(),
            Vector3::y(),
            unit(Vector3::new(1.0, -2.0, 0.5)),
        ] {
            let r = rodrigues(&axis, 0.0).unwrap();
            assert!((r - Matrix3::identity()).iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues(&Vector3::z(), std::f64::consts::FRAC_PI_2).unwrap();
        let p = r * Vector3::x();
        assert!((p - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        let axis = unit(Vector3::new(1.0, 1.0, 1.0));
        let r = rodrigues(&axis, 0.7).unwrap();
        let q = quaternion_rotation(&axis, 0.7);
        assert!((r - q).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rodrigues_rejects_non_unit_axis() {
        let err = rodrigues(&Vector3::new(1.0, 1.0, 0.0), 0.3).unwrap_err();
        assert!(matches!(err, GeomError::NonUnitAxis { .. }));
    }

    #[test]
    fn manipulation_zero_compensation_is_identity() {
        let joint = JointParams::new(JointType::Revolute, Vector3::new(0.3, 0.0, 0.1), Vector3::z(), 0.8).unwrap();
        let m = manipulation_matrix(&joint, 0.8).unwrap();
        assert!((m.matrix() - Matrix4::identity()).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn manipulation_prismatic_is_pure_translation() {
        let joint = JointParams::new(JointType::Prismatic, Vector3::new(0.2, 0.2, 0.2), Vector3::z(), 0.1).unwrap();
        let m = manipulation_matrix(&joint, 0.4).unwrap();
        assert_eq!(m.rotation(), Matrix3::identity());
        assert!((m.translation() - Vector3::new(0.0, 0.0, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn manipulation_revolute_matches_composition_oracle() {
        let joint = JointParams::new(JointType::Revolute, Vector3::new(1.0, 0.0, 0.0), Vector3::z(), 0.0).unwrap();
        let m = manipulation_matrix(&joint, std::f64::consts::FRAC_PI_2).unwrap();
        let p = m.apply_point(&Vector3::new(2.0, 0.0, 0.0));
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);

        let oracle = screw_via_composition(&joint, std::f64::consts::FRAC_PI_2);
        assert!((m.matrix() - oracle.matrix()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn apply_transform_identity_and_translation() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::new(0.5, -0.5, 2.0)]).unwrap();
        let same = apply_transform(&RigidTransform::identity(), &cloud);
        assert_eq!(same, cloud);

        let t = RigidTransform::from_translation(Vector3::x());
        let moved = apply_transform(&t, &PointCloud::new(vec![Vector3::zeros()]).unwrap());
        assert_eq!(moved.points()[0], Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn angle_between_examples() {
        assert_eq!(angle_between(&Vector3::x(), &Vector3::x()).unwrap(), 0.0);
        assert!((angle_between(&Vector3::x(), &Vector3::y()).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(
            angle_between(&Vector3::zeros(), &Vector3::x()).unwrap_err(),
            GeomError::DegenerateVector
        );
    }

    #[test]
    fn point_to_axis_examples() {
        let h = Vector3::new(0.1, 0.2, 0.3);
        let u = Vector3::z();
        assert_eq!(point_to_axis_distance(&h, &h, &u).unwrap(), 0.0);
        assert!(point_to_axis_distance(&(h + u), &h, &u).unwrap() < 1e-15);
        assert!((point_to_axis_distance(&(h + Vector3::x()), &h, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            point_to_axis_distance(&h, &h, &Vector3::new(0.0, 0.0, 2.0)),
            Err(GeomError::NonUnitAxis { .. })
        ));
    }

    #[test]
    fn joint_params_reject_non_unit_orientation() {
        assert!(matches!(
            JointParams::new(JointType::Revolute, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0 + 1e-6), 0.0),
            Err(GeomError::NonUnitAxis { .. })
        ));
    }

    fn arb_unit() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter_map("near-zero vector", |(x, y, z)| {
                let v = Vector3::new(x, y, z);
                (v.norm() > 1e-3).then(|| unit(v))
            })
    }

    proptest! {
        #[test]
        fn rodrigues_is_orthonormal_with_unit_det(axis in arb_unit(), angle in -10.0f64..10.0) {
            let r = rodrigues(&axis, angle).unwrap();
            let gram = r.transpose() * r - Matrix3::identity();
            prop_assert!(gram.iter().all(|v| v.abs() < 1e-12));
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn manipulation_round_trip_returns_points(
            axis in arb_unit(),
            h in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            v0 in 0.0f64..1.5,
            cmd in 0.0f64..1.5,
            p in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
            prismatic in proptest::bool::ANY,
        ) {
            let jt = if prismatic { JointType::Prismatic } else { JointType::Revolute };
            let h = Vector3::new(h.0, h.1, h.2);
            let joint = JointParams::new(jt, h, axis, v0).unwrap();
            let forward = manipulation_matrix(&joint, cmd).unwrap();
            let after = JointParams::new(jt, h, axis, cmd).unwrap();
            let back = manipulation_matrix(&after, v0).unwrap();
            let p = Vector3::new(p.0, p.1, p.2);
            prop_assert!((back.apply_point(&forward.apply_point(&p)) - p).norm() < 1e-9);
        }

        #[test]
        fn revolute_axis_points_are_fixed(
            axis in arb_unit(),
            h in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            t in -3.0f64..3.0,
            cmd in -2.0f64..2.0,
        ) {
            let h = Vector3::new(h.0, h.1, h.2);
            let joint = JointParams::new(JointType::Revolute, h, axis, 0.0).unwrap();
            let m = manipulation_matrix(&joint, cmd).unwrap();
            let on_axis = h + t * axis;
            prop_assert!((m.apply_point(&on_axis) - on_axis).norm() < 1e-12);
        }

        #[test]
        fn axis_distance_slide_invariant(
            axis in arb_unit(),
            h in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            p in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
            t in -5.0f64..5.0,
        ) {
            let h = Vector3::new(h.0, h.1, h.2);
            let p = Vector3::new(p.0, p.1, p.2);
            let d0 = point_to_axis_distance(&p, &h, &axis).unwrap();
            let d1 = point_to_axis_distance(&p, &(h + t * axis), &axis).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }

        #[test]
        fn angle_symmetric_and_scale_invariant(
            a in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
            b in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        ) {
            let a = Vector3::new(a.0, a.1, a.2);
            let b = Vector3::new(b.0, b.1, b.2);
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let ab = angle_between(&a, &b).unwrap();
            let ba = angle_between(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let scaled = angle_between(&(2.0 * a), &b).unwrap();
            prop_assert!((ab - scaled).abs() < 1e-12);
            prop_assert!(!angle_between(&a, &a).unwrap().is_nan());
            prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
        }
    }
}
