//! Serial-chain kinematics, joint mapping and rotation representations.
//!
//! Units are meters and radians throughout. A dual-arm platform is two
//! independent [`KinematicChain`]s that share a base frame, see [`ArmModel`].

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::raster::PrimitiveShape;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform: `p' = rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Quaternion given as `[w, x, y, z]`.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let q = nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        if q.norm() < 1e-12 {
            return Err(Error::Degenerate("zero quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Self {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation,
        })
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !ortho.is_finite() || ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Degenerate(format!(
                "rotation not orthonormal (|RtR-I|={ortho:.3e}, det={det:.12})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite translation".into()));
        }
        Ok(())
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Degenerate(format!(
                "homogeneous row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4x4 rows, the on-disk layout.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        Pose::from_matrix(&Matrix4::from_fn(|i, j| rows[i][j]))
    }

    pub fn rot6d(&self) -> Rot6D {
        rotmat_to_rot6d(&self.rotation)
    }
}

/// First two columns of a rotation matrix, column-major:
/// `[r00, r10, r20, r01, r11, r21]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn identity() -> Self {
        Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn to_rotmat(&self) -> Result<Matrix3<f64>> {
        rot6d_to_rotmat(self)
    }
}

/// Gram-Schmidt decode of the 6D representation.
pub fn rot6d_to_rotmat(r: &Rot6D) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let a2 = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return Err(Error::Degenerate(
            "6D rotation: first column is zero".into(),
        ));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12 * a2.norm().max(1.0)) {
        return Err(Error::Degenerate(
            "6D rotation: columns are parallel or zero".into(),
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn rotmat_to_rot6d(rot: &Matrix3<f64>) -> Rot6D {
    Rot6D([
        rot[(0, 0)],
        rot[(1, 0)],
        rot[(2, 0)],
        rot[(0, 1)],
        rot[(1, 1)],
        rot[(2, 1)],
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Unit axis in the joint's own frame.
    pub axis: Vector3<f64>,
    /// Transform from the parent link frame to the joint frame at q = 0.
    pub origin: Pose,
    /// `[lo, hi]` in radians or meters.
    pub limits: [f64; 2],
    /// Encoder reading to joint-unit factor.
    pub encoder_scale: f64,
    /// +1 or -1.
    pub encoder_sign: f64,
}

impl JointSpec {
    pub fn revolute(name: &str, axis: Vector3<f64>, origin: Pose, limits: [f64; 2]) -> Self {
        Self {
            name: name.to_string(),
            kind: JointKind::Revolute,
            axis,
            origin,
            limits,
            encoder_scale: 1.0,
            encoder_sign: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.origin.validate()?;
        if self.kind == JointKind::Fixed {
            return Ok(());
        }
        let norm = self.axis.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "joint {}: axis norm {norm} is not 1",
                self.name
            )));
        }
        if !(self.limits[0] <= self.limits[1]) {
            return Err(Error::config(format!(
                "joint {}: lower limit {} above upper limit {}",
                self.name, self.limits[0], self.limits[1]
            )));
        }
        if self.encoder_sign != 1.0 && self.encoder_sign != -1.0 {
            return Err(Error::config(format!(
                "joint {}: encoder sign must be +1 or -1",
                self.name
            )));
        }
        Ok(())
    }

    /// Motion of the joint itself at value `q`, in the joint frame.
    pub fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Fixed => Pose::identity(),
            JointKind::Revolute => Pose::from_axis_angle(&self.axis, q, Vector3::zeros()),
            JointKind::Prismatic => Pose::from_translation(self.axis * q),
        }
    }

    pub fn clamp(&self, q: f64) -> f64 {
        match self.kind {
            JointKind::Fixed => q,
            _ => q.clamp(self.limits[0], self.limits[1]),
        }
    }
}

/// Strictly serial chain. Link `i` is the frame after joint `i`; its
/// geometry is `link_geometry[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub joints: Vec<JointSpec>,
    pub link_geometry: Vec<Vec<PrimitiveShape>>,
    /// End-effector (tool center) offset from the last link.
    pub tool: Pose,
}

impl KinematicChain {
    pub fn new(
        joints: Vec<JointSpec>,
        link_geometry: Vec<Vec<PrimitiveShape>>,
        tool: Pose,
    ) -> Result<Self> {
        let chain = Self {
            joints,
            link_geometry,
            tool,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::config("kinematic chain needs at least one joint"));
        }
        for j in &self.joints {
            j.validate()?;
        }
        if !self.link_geometry.is_empty() && self.link_geometry.len() != self.joints.len() {
            return Err(Error::config(format!(
                "chain has {} joints but {} link geometry entries",
                self.joints.len(),
                self.link_geometry.len()
            )));
        }
        for shapes in &self.link_geometry {
            for s in shapes {
                s.validate()?;
            }
        }
        self.tool.validate()
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn has_geometry(&self) -> bool {
        self.link_geometry.iter().any(|g| !g.is_empty())
    }
}

/// Joint values for one arm at one instant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub gripper_width: f64,
    pub timestamp: f64,
}

impl JointState {
    pub fn new(q: Vec<f64>) -> Self {
        Self {
            q,
            gripper_width: 0.0,
            timestamp: 0.0,
        }
    }
}

/// Link poses plus the end-effector pose, all in the chain's root frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub links: Vec<Pose>,
    pub end_effector: Pose,
}

/// Forward kinematics. Joint values are clamped to limits first.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointState) -> Result<FkResult> {
    forward_kinematics_values(chain, &q.q)
}

pub fn forward_kinematics_values(chain: &KinematicChain, q: &[f64]) -> Result<FkResult> {
    if q.len() != chain.joints.len() {
        return Err(Error::dim(format!(
            "joint vector has {} values, chain has {} joints",
            q.len(),
            chain.joints.len()
        )));
    }
    let mut links = Vec::with_capacity(q.len());
    let mut current = Pose::identity();
    for (joint, &value) in chain.joints.iter().zip(q) {
        current = current
            .compose(&joint.origin)
            .compose(&joint.motion(joint.clamp(value)));
        links.push(current);
    }
    let end_effector = current.compose(&chain.tool);
    Ok(FkResult { links, end_effector })
}

pub fn clamp_to_limits(chain: &KinematicChain, q: &JointState) -> JointState {
    let mut out = q.clone();
    for (v, joint) in out.q.iter_mut().zip(&chain.joints) {
        *v = joint.clamp(*v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointMapEntry {
    pub index: usize,
    pub scale: f64,
    pub offset: f64,
}

impl JointMapEntry {
    pub fn identity(index: usize) -> Self {
        Self {
            index,
            scale: 1.0,
            offset: 0.0,
        }
    }
}

/// `q_robot[j] = scale_j * q_exo[index_j] + offset_j`, clamped to the robot's limits.
pub fn map_exo_to_robot(
    q_exo: &JointState,
    mapping: &[JointMapEntry],
    robot: &KinematicChain,
) -> Result<JointState> {
    if mapping.len() != robot.dof() {
        return Err(Error::dim(format!(
            "joint mapping covers {} joints, robot chain has {}",
            mapping.len(),
            robot.dof()
        )));
    }
    let mut q = Vec::with_capacity(mapping.len());
    for (j, m) in mapping.iter().enumerate() {
        let src = q_exo.q.get(m.index).ok_or_else(|| {
            Error::dim(format!(
                "mapping for robot joint {j} reads exoskeleton joint {} of {}",
                m.index,
                q_exo.q.len()
            ))
        })?;
        q.push(m.scale * src + m.offset);
    }
    Ok(clamp_to_limits(
        robot,
        &JointState {
            q,
            gripper_width: q_exo.gripper_width,
            timestamp: q_exo.timestamp,
        },
    ))
}

/// `q = sign * scale * raw - (zero + delta)` per joint.
pub fn apply_joint_calibration(
    chain: &KinematicChain,
    q_raw: &[f64],
    q_calib: &[f64],
    delta_q: &[f64],
) -> Result<Vec<f64>> {
    let n = chain.dof();
    if q_raw.len() != n || q_calib.len() != n || delta_q.len() != n {
        return Err(Error::dim(format!(
            "calibration lengths raw={}, zero={}, delta={} for a {n}-joint chain",
            q_raw.len(),
            q_calib.len(),
            delta_q.len()
        )));
    }
    Ok(chain
        .joints
        .iter()
        .zip(q_raw)
        .zip(q_calib.iter().zip(delta_q))
        .map(|((j, raw), (zero, dq))| j.encoder_sign * j.encoder_scale * raw - (zero + dq))
        .collect())
}

/// One arm of a (possibly dual-arm) platform: a chain mounted at a fixed
/// pose in the shared base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub name: String,
    pub chain: KinematicChain,
    pub mount: Pose,
}

/// Arms sharing one base frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Platform {
    pub arms: Vec<ArmModel>,
}

impl Platform {
    pub fn validate(&self) -> Result<()> {
        for arm in &self.arms {
            arm.chain.validate()?;
            arm.mount.validate()?;
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Option<&ArmModel> {
        self.arms.iter().find(|a| a.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn planar_two_link() -> KinematicChain {
        let z = Vector3::z();
        KinematicChain::new(
            vec![
                JointSpec::revolute("j1", z, Pose::identity(), [-PI, PI]),
                JointSpec::revolute(
                    "j2",
                    z,
                    Pose::from_translation(Vector3::new(0.5, 0.0, 0.0)),
                    [-PI, PI],
                ),
            ],
            vec![],
            Pose::from_translation(Vector3::new(0.5, 0.0, 0.0)),
        )
        .unwrap()
    }

    #[test]
    fn planar_chain_quarter_turn() {
        let fk = forward_kinematics(&planar_two_link(), &JointState::new(vec![FRAC_PI_2, 0.0]))
            .unwrap();
        let t = fk.end_effector.translation;
        assert!((t - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12, "{t}");
    }

    #[test]
    fn zero_angles_give_origin_product() {
        let chain = planar_two_link();
        let fk = forward_kinematics(&chain, &JointState::new(vec![0.0, 0.0])).unwrap();
        let expected = chain.joints[0]
            .origin
            .compose(&chain.joints[1].origin)
            .compose(&chain.tool);
        assert_eq!(fk.end_effector, expected);
    }

    #[test]
    fn fk_rejects_wrong_length() {
        let err = forward_kinematics(&planar_two_link(), &JointState::new(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn clamp_examples() {
        let chain = planar_two_link();
        let q = JointState::new(vec![0.3, -0.2]);
        assert_eq!(clamp_to_limits(&chain, &q), q);
        let hi = clamp_to_limits(&chain, &JointState::new(vec![PI + 0.1, -PI - 0.1]));
        assert_eq!(hi.q, vec![PI, -PI]);
    }

    #[test]
    fn exo_mapping_examples() {
        let chain = planar_two_link();
        let q = JointState::new(vec![0.1, 0.2]);
        let ident = [JointMapEntry::identity(0), JointMapEntry::identity(1)];
        assert_eq!(map_exo_to_robot(&q, &ident, &chain).unwrap().q, q.q);

        let flip = [
            JointMapEntry {
                index: 0,
                scale: -1.0,
                offset: PI,
            },
            JointMapEntry::identity(1),
        ];
        let out = map_exo_to_robot(&JointState::new(vec![0.0, 0.0]), &flip, &chain).unwrap();
        assert_eq!(out.q[0], PI);

        let bad = [JointMapEntry::identity(0), JointMapEntry::identity(5)];
        assert!(matches!(
            map_exo_to_robot(&q, &bad, &chain),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn exo_mapping_matches_scalar_evaluation() {
        let chain = planar_two_link();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let exo = JointState::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mapping: Vec<_> = (0..2)
                .map(|_| JointMapEntry {
                    index: rng.random_range(0..4),
                    scale: rng.random_range(-2.0..2.0),
                    offset: rng.random_range(-1.0..1.0),
                })
                .collect();
            let out = map_exo_to_robot(&exo, &mapping, &chain).unwrap();
            for (j, m) in mapping.iter().enumerate() {
                let expect = (m.scale * exo.q[m.index] + m.offset).clamp(-PI, PI);
                assert_eq!(out.q[j], expect);
            }
        }
    }

    #[test]
    fn rot6d_examples() {
        let id = Matrix3::identity();
        assert_eq!(
            rot6d_to_rotmat(&Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap(),
            id
        );
        assert_eq!(
            rot6d_to_rotmat(&Rot6D([1.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap(),
            id
        );
        assert!(rot6d_to_rotmat(&Rot6D([0.0; 6])).is_err());
        assert!(rot6d_to_rotmat(&Rot6D([1.0, 2.0, 3.0, 2.0, 4.0, 6.0])).is_err());
    }

    #[test]
    fn noisy_rot6d_still_decodes_to_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let r = Rot6D(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let m = rot6d_to_rotmat(&r).unwrap();
            assert!(Pose::new(m, Vector3::zeros()).is_ok());
        }
    }

    #[test]
    fn joint_calibration_examples() {
        let chain = planar_two_link();
        let zero = [0.4, -0.3];
        let q = apply_joint_calibration(&chain, &zero, &zero, &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
        let shifted = apply_joint_calibration(&chain, &zero, &zero, &[0.1, 0.0]).unwrap();
        assert!((shifted[0] + 0.1).abs() < 1e-15);
        assert_eq!(shifted[1], 0.0);
        assert!(apply_joint_calibration(&chain, &zero, &zero, &[0.0]).is_err());
    }

    #[test]
    fn joint_calibration_matches_scalar_oracle() {
        let mut chain = planar_two_link();
        chain.joints[1].encoder_sign = -1.0;
        chain.joints[1].encoder_scale = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let zero: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dq: Vec<f64> = (0..2).map(|_| rng.random_range(-0.1..0.1)).collect();
            let q = apply_joint_calibration(&chain, &raw, &zero, &dq).unwrap();
            assert_eq!(q[0], 1.0 * 1.0 * raw[0] - (zero[0] + dq[0]));
            assert_eq!(q[1], -1.0 * 0.5 * raw[1] - (zero[1] + dq[1]));
        }
    }

    #[test]
    fn pose_inverse_and_matrix_round_trip() {
        let p = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.7, Vector3::new(0.1, -0.2, 0.3));
        let e = p.compose(&p.inverse());
        assert!((e.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(e.translation.norm() < 1e-12);
        let back = Pose::from_rows(&p.to_rows()).unwrap();
        assert_eq!(back, p);
        let q = Pose::from_quaternion(p.quaternion_wxyz(), p.translation).unwrap();
        assert!((q.rotation - p.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn invalid_axis_rejected() {
        let mut j = JointSpec::revolute("j", Vector3::new(1.0, 1.0, 0.0), Pose::identity(), [0.0, 1.0]);
        assert!(j.validate().is_err());
        j.axis = Vector3::x();
        j.limits = [1.0, 0.0];
        assert!(j.validate().is_err());
        j.kind = JointKind::Fixed;
        assert!(j.validate().is_ok());
    }
}
